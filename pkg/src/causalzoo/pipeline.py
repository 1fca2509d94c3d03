"""Stage orchestration: zoo-build -> explain -> effects -> analyze, each
writing a run manifest (config hash + tool version) so downstream stages can
refuse stale inputs. Outputs are write-once per run directory and every
artifact is a pure function of the configuration.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, effects, explain, nn_engine, plots, zoo
from .analysis import BucketScheme
from .config import (PipelineConfig, TOOL_VERSION, config_hash, config_to_dict)
from .effects import ControlSpec, Kernel, TreatmentQuery
from .errors import ConfigurationError, EstimationError, FormatError, InputError
from .zoo import HPARAM_KEYS

logger = logging.getLogger(__name__)

STAGE_DIRS = {
    "zoo-build": "zoo",
    "explain": "explanations",
    "effects": "effects",
    "analyze": "analysis",
}
STAGE_ORDER = ("zoo-build", "explain", "effects", "analyze")


@dataclass
class OutcomePanel:
    """Outcome matrices aligned with sorted model_ids: post-softmax
    predictions (M, I, K) and flattened preprocessed explanation maps
    (M, I, D) per method."""

    model_ids: np.ndarray
    instance_ids: np.ndarray
    predictions: np.ndarray
    explanations: dict


def _fresh_dir(path: Path) -> Path:
    if path.exists() and any(path.iterdir()):
        raise ConfigurationError(
            f"output directory {path} already has contents; runs are write-once "
            f"(use a new directory)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run_manifest(stage_dir: Path, stage: str, cfg: PipelineConfig) -> None:
    doc = {
        "stage": stage,
        "tool_version": TOOL_VERSION,
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
    }
    (stage_dir / "run_manifest.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _check_upstream(out_root: Path, stage: str, cfg: PipelineConfig) -> Path:
    stage_dir = out_root / STAGE_DIRS[stage]
    manifest = stage_dir / "run_manifest.json"
    if not manifest.exists():
        raise EstimationError(
            f"missing upstream artifact {manifest}; run `causalzoo {stage}` first")
    doc = json.loads(manifest.read_text())
    if doc.get("config_hash") != config_hash(cfg):
        raise EstimationError(
            f"stale upstream artifact: {STAGE_DIRS[stage]}/ was produced from a "
            f"different configuration (hash {doc.get('config_hash')!r}); rerun "
            f"`causalzoo {stage}` with the current config")
    return stage_dir


def probe_instance_ids(cfg: PipelineConfig, dataset: zoo.Dataset) -> np.ndarray:
    """Probe instances: the first probe_count members of the fixed test split."""
    if cfg.probe_count < 1:
        raise ConfigurationError(f"probe_count must be >= 1, got {cfg.probe_count}")
    if cfg.probe_count > len(dataset.test_idx):
        raise ConfigurationError(
            f"probe_count {cfg.probe_count} exceeds test split size {len(dataset.test_idx)}")
    return np.asarray(dataset.test_idx[:cfg.probe_count])


def cmd_zoo_build(cfg: PipelineConfig, out_root) -> Path:
    """Sample, train, and persist the model population."""
    out_root = Path(out_root)
    stage_dir = _fresh_dir(out_root / STAGE_DIRS["zoo-build"])
    manifest = zoo.build_zoo(
        cfg.zoo.n, cfg.arch, cfg.dataset, cfg.zoo.epochs, cfg.zoo.sampling_seed,
        train_seed_mode=cfg.zoo.train_seed_mode, train_seed=cfg.zoo.train_seed,
        space=cfg.space, batch_size=cfg.zoo.batch_size,
        progress=lambda i, n: logger.info("trained model %d/%d", i, n))
    zoo.save_zoo(manifest, stage_dir)
    _write_run_manifest(stage_dir, "zoo-build", cfg)
    return stage_dir


def _explanation_params(cfg: PipelineConfig) -> dict:
    return dict(n_samples=cfg.explain.smoothgrad_samples,
                sigma=cfg.explain.smoothgrad_sigma,
                noise_seed=cfg.explain.noise_seed,
                steps=cfg.explain.ig_steps,
                conv_layer_index=cfg.explain.grad_cam_layer)


def compute_outcomes(cfg: PipelineConfig, manifest: zoo.ZooManifest,
                     dataset: zoo.Dataset | None = None) -> OutcomePanel:
    """Predictions and preprocessed explanation maps for all probe instances.

    The explanation target of each (model, instance) is the model's own
    predicted class. SmoothGrad noise seeds derive from (configured seed,
    model_id, instance_id).
    """
    dataset = dataset or zoo.generate_dataset(cfg.dataset)
    probes = probe_instance_ids(cfg, dataset)
    xs = dataset.inputs[probes]
    records = sorted(manifest.records, key=lambda r: r.model_id)
    preds = np.stack([nn_engine.predict_batch(r.params, xs) for r in records])
    targets = {r.model_id: np.argmax(preds[i], axis=1) for i, r in enumerate(records)}
    params = _explanation_params(cfg)
    explanations: dict[str, np.ndarray] = {}
    for method in cfg.explain.methods:
        per_model = []
        for r in records:
            expls = explain.explanation_batch(
                r.params, xs, targets[r.model_id], probes, method,
                model_id=r.model_id, **params)
            per_model.append(np.stack([explain.preprocess(e).attributions for e in expls]))
        stacked = np.stack(per_model)  # (M, I, H, W)
        explanations[method] = stacked.reshape(stacked.shape[0], stacked.shape[1], -1)
    return OutcomePanel(np.array([r.model_id for r in records]), probes,
                        preds, explanations)


def cmd_explain(cfg: PipelineConfig, out_root) -> Path:
    """Compute and persist the outcome store (predictions + explanation maps)."""
    out_root = Path(out_root)
    zoo_dir = _check_upstream(out_root, "zoo-build", cfg)
    manifest = zoo.load_zoo(zoo_dir)
    stage_dir = _fresh_dir(out_root / STAGE_DIRS["explain"])
    dataset = zoo.generate_dataset(cfg.dataset)
    panel = compute_outcomes(cfg, manifest, dataset)
    maps_dir = stage_dir / "maps"
    maps_dir.mkdir()
    index = {"probe_instance_ids": panel.instance_ids.tolist(),
             "methods": list(cfg.explain.methods),
             "model_ids": panel.model_ids.tolist(),
             "map_files": {}}
    h, w = cfg.arch.input_shape[:2]
    for method, flat in panel.explanations.items():
        files = {}
        for mi, model_id in enumerate(panel.model_ids.tolist()):
            fname = f"{model_id}_{method}.bin"
            explain.write_maps(maps_dir / fname, flat[mi].reshape(-1, h, w))
            files[str(model_id)] = f"maps/{fname}"
        index["map_files"][method] = files
    np.save(stage_dir / "predictions.npy", panel.predictions)
    (stage_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    _write_run_manifest(stage_dir, "explain", cfg)
    return stage_dir


def load_panel(cfg: PipelineConfig, out_root) -> OutcomePanel:
    """Rehydrate the outcome panel from the explain stage's store."""
    stage_dir = Path(out_root) / STAGE_DIRS["explain"]
    index_path = stage_dir / "index.json"
    if not index_path.exists():
        raise EstimationError(f"missing explanation store {index_path}; run `causalzoo explain` first")
    index = json.loads(index_path.read_text())
    model_ids = np.asarray(index["model_ids"])
    instance_ids = np.asarray(index["probe_instance_ids"])
    predictions = np.load(stage_dir / "predictions.npy")
    explanations = {}
    for method in index["methods"]:
        rows = []
        for model_id in model_ids.tolist():
            rel = index["map_files"][method][str(model_id)]
            maps = explain.read_maps(stage_dir / rel)
            rows.append(maps.reshape(maps.shape[0], -1))
        explanations[method] = np.stack(rows)
    return OutcomePanel(model_ids, instance_ids, predictions, explanations)


def method_model_mask(panel: OutcomePanel, method: str) -> np.ndarray:
    """Models usable for KTE analysis of this method: a model is excluded if
    any probe instance yields an all-zero preprocessed map (the cosine kernel
    is undefined on zero vectors; exclusion applies across all kernels)."""
    flat = panel.explanations[method]
    ok = ~np.any(np.all(flat == 0.0, axis=2), axis=1)
    dropped = np.asarray(panel.model_ids)[~ok]
    if len(dropped):
        logger.warning("method %s: excluding %d model(s) with all-zero maps: %s",
                       method, len(dropped), dropped.tolist())
    return ok


def _query_levels(records, key: str) -> list:
    labels = effects.level_labels(records, key)
    return effects.observed_levels(labels)


def cmd_effects(cfg: PipelineConfig, out_root) -> Path:
    """Evaluate the configured treatment queries and export EffectTable CSVs."""
    out_root = Path(out_root)
    for key in cfg.effects.hparam_keys:
        if key not in HPARAM_KEYS:
            raise InputError(f"unknown hparam_key {key!r}; valid keys: {sorted(HPARAM_KEYS)}")
    zoo_dir = _check_upstream(out_root, "zoo-build", cfg)
    _check_upstream(out_root, "explain", cfg)
    manifest = zoo.load_zoo(zoo_dir)
    panel = load_panel(cfg, out_root)
    records = sorted(manifest.records, key=lambda r: r.model_id)
    stage_dir = _fresh_dir(out_root / STAGE_DIRS["effects"])
    kernels = [Kernel(k) for k in cfg.effects.kernels]
    masks = {m: method_model_mask(panel, m) for m in cfg.explain.methods}
    for key in cfg.effects.hparam_keys:
        rows = []
        levels = _query_levels(records, key)
        if len(levels) < 2:
            raise EstimationError(f"hparam_key {key!r} has a single observed level {levels!r}")
        outcome_specs = []
        if cfg.effects.include_prediction:
            outcome_specs.append(("prediction", None, np.ones(len(records), dtype=bool)))
        outcome_specs += [("explanation", m, masks[m]) for m in cfg.explain.methods]
        for level in levels:
            control = ControlSpec(mode=cfg.effects.control_mode,
                                  baseline=cfg.effects.control_baseline)
            if control.mode == "fixed_baseline" and control.baseline == level:
                continue
            for outcome, method, mask in outcome_specs:
                sub = _mask_panel(panel, mask)
                sub_records = [r for r, keep in zip(records, mask) if keep]
                query = TreatmentQuery(key, level, control, outcome, method,
                                       tuple(panel.instance_ids.tolist()))
                for kernel in kernels:
                    try:
                        table = effects.effect_table(
                            sub, sub_records, query, kernel,
                            min_group_size=cfg.effects.min_group_size,
                            weighting=cfg.effects.weighting)
                    except EstimationError as exc:
                        logger.warning("skipping %s=%s %s/%s [%s]: %s", key, level,
                                       outcome, method, kernel.kind, exc)
                        continue
                    rows.extend(effects.effect_csv_rows(table, bucket_label="global"))
        if not rows:
            raise EstimationError(f"no computable effect rows for hparam_key {key!r}")
        effects.write_effects_csv(stage_dir / f"effects_{key}.csv", rows)
    _write_run_manifest(stage_dir, "effects", cfg)
    return stage_dir


def _mask_panel(panel: OutcomePanel, mask: np.ndarray) -> OutcomePanel:
    if mask.all():
        return panel
    return OutcomePanel(panel.model_ids[mask], panel.instance_ids,
                        panel.predictions[mask],
                        {m: v[mask] for m, v in panel.explanations.items()})


def cmd_analyze(cfg: PipelineConfig, out_root) -> Path:
    """Bucketing, ITE_Y-vs-ITE_E correlations, mediation probe, kernel
    sensitivity; CSV + SVG outputs."""
    out_root = Path(out_root)
    zoo_dir = _check_upstream(out_root, "zoo-build", cfg)
    effects_dir = _check_upstream(out_root, "effects", cfg)
    # refuse to start from empty effect tables, before creating any output
    any_rows = False
    for csv_path in sorted(effects_dir.glob("effects_*.csv")):
        if len(effects.read_effects_csv(csv_path)) > 0:
            any_rows = True
            break
    if not any_rows:
        raise EstimationError(f"effect tables under {effects_dir} are empty; "
                              f"rerun `causalzoo effects`")
    manifest = zoo.load_zoo(zoo_dir)
    panel = load_panel(cfg, out_root)
    records = sorted(manifest.records, key=lambda r: r.model_id)
    scheme = BucketScheme(cfg.analysis.percentile_edges)
    buckets = analysis.bucket_models(np.array([r.test_accuracy for r in records]), scheme)
    kernel = Kernel(cfg.analysis.analysis_kernel)
    battery = [Kernel(k) for k in cfg.effects.kernels]
    stage_dir = _fresh_dir(out_root / STAGE_DIRS["analyze"])
    corr_results, med_results = [], []
    for key in cfg.effects.hparam_keys:
        labels = effects.level_labels(records, key)
        violin_values = {}
        for method in cfg.explain.methods:
            mask = method_model_mask(panel, method)
            lab, pred = labels[mask], panel.predictions[mask]
            expl, bks = panel.explanations[method][mask], buckets[mask]
            corr_results += analysis.correlate_from_outcomes(
                lab, pred, expl, bks, kernel, method=method, hparam_key=key,
                min_group_size=cfg.effects.min_group_size,
                n_resamples=cfg.analysis.bootstrap_resamples,
                bootstrap_seed=cfg.analysis.bootstrap_seed)
            med_results += analysis.mediation_from_outcomes(
                lab, pred, expl, bks, kernel,
                n_permutations=cfg.analysis.mediation_permutations,
                permutation_seed=cfg.analysis.permutation_seed,
                scope=cfg.analysis.permutation_scope,
                method=method, hparam_key=key,
                min_group_size=cfg.effects.min_group_size)
            try:
                matrix, values = analysis.kernel_sensitivity_from_outcomes(
                    lab, expl, battery, min_group_size=cfg.effects.min_group_size)
            except EstimationError as exc:
                logger.warning("kernel sensitivity skipped for %s/%s: %s",
                               method, key, exc)
            else:
                analysis.write_sensitivity_csv(
                    stage_dir / f"kernel_sensitivity_{method}_{key}.csv",
                    matrix, [k.kind for k in battery])
                violin_values[method] = values[kernel.kind] if kernel.kind in values \
                    else next(iter(values.values()))
            if cfg.analysis.emit_svg:
                pairs = {}
                for b in sorted(set(bks.tolist())):
                    ite_y, ite_e, _ = analysis.effect_pairs(
                        lab, pred, expl, kernel, bucket_id=b, buckets=bks,
                        min_group_size=cfg.effects.min_group_size)
                    if len(ite_y) >= 3:
                        pairs[b] = (ite_y, ite_e)
                if pairs:
                    plots.scatter_effects_svg(
                        stage_dir / f"scatter_{method}_{key}.svg", pairs, method, key)
        if cfg.analysis.emit_svg and violin_values:
            plots.violin_effects_svg(stage_dir / f"violin_{key}.svg", violin_values, key)
    analysis.write_correlations_csv(stage_dir / "correlations.csv", corr_results)
    analysis.write_mediation_csv(stage_dir / "mediation.csv", med_results)
    _write_run_manifest(stage_dir, "analyze", cfg)
    return stage_dir


def cmd_reproduce(cfg: PipelineConfig, out_root) -> dict:
    """Run the full chain into one output root."""
    out_root = Path(out_root)
    return {
        "zoo": cmd_zoo_build(cfg, out_root),
        "explanations": cmd_explain(cfg, out_root),
        "effects": cmd_effects(cfg, out_root),
        "analysis": cmd_analyze(cfg, out_root),
    }

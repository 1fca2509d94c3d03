"""Pipeline configuration: a single JSON document that pins every seed and
parameter, hashed so downstream stages can detect stale upstream artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import analysis, explain
from .errors import ConfigurationError
from .nn_engine import ArchitectureSpec, DEFAULT_BATCH_SIZE
from .zoo import DatasetSpec, HyperparamSpace, arch_from_dict

TOOL_VERSION = "0.1.0"
OUTPUT_ENV_VAR = "CAUSALZOO_OUT"

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class ZooConfig:
    n: int = 500
    epochs: int = 30
    sampling_seed: int = 11
    train_seed: int = 24_243
    train_seed_mode: str = "shared"
    batch_size: int = DEFAULT_BATCH_SIZE


@dataclass(frozen=True)
class ExplainConfig:
    methods: tuple = explain.METHODS
    smoothgrad_samples: int = explain.SMOOTHGRAD_N_SAMPLES
    smoothgrad_sigma: float = explain.SMOOTHGRAD_SIGMA
    noise_seed: int = 99
    ig_steps: int = explain.IG_STEPS
    grad_cam_layer: int = 0  # the default arch's last conv map is 1x1: no spatial signal

    def __post_init__(self):
        for m in self.methods:
            if m not in explain.METHODS:
                raise ConfigurationError(f"unknown explanation method {m!r}")


@dataclass(frozen=True)
class EffectsConfig:
    hparam_keys: tuple = ("optimizer",)
    kernels: tuple = ("linear", "polynomial", "rbf", "cosine")
    control_mode: str = "complement"
    control_baseline: object = None
    min_group_size: int = 5
    weighting: str = "empirical"
    include_prediction: bool = True


@dataclass(frozen=True)
class AnalysisConfig:
    percentile_edges: tuple = analysis.DEFAULT_BUCKET_EDGES
    analysis_kernel: str = "rbf"
    bootstrap_resamples: int = analysis.BOOTSTRAP_RESAMPLES
    bootstrap_seed: int = 5
    mediation_permutations: int = analysis.MEDIATION_PERMUTATIONS
    permutation_seed: int = 17
    permutation_scope: str = "bucket"
    emit_svg: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    zoo: ZooConfig = ZooConfig()
    arch: ArchitectureSpec = ArchitectureSpec()
    dataset: DatasetSpec = DatasetSpec(kind="synthetic_shapes_16x16")
    space: HyperparamSpace = HyperparamSpace()
    probe_count: int = 100
    explain: ExplainConfig = ExplainConfig()
    effects: EffectsConfig = EffectsConfig()
    analysis: AnalysisConfig = AnalysisConfig()


def default_config() -> PipelineConfig:
    return PipelineConfig()


_SECTIONS = {f.name for f in fields(PipelineConfig)}


def config_to_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    for k, v in list(d.items()):
        d[k] = _tuples_to_lists(v)
    return d


def _tuples_to_lists(v):
    if isinstance(v, dict):
        return {k: _tuples_to_lists(x) for k, x in v.items()}
    if isinstance(v, (tuple, list)):
        return [_tuples_to_lists(x) for x in v]
    return v


def _build_section(cls, d: dict, what: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigurationError(f"unknown field(s) in config section {what!r}: {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[f.name] = v
    return cls(**kwargs)


def config_from_dict(d: dict) -> PipelineConfig:
    unknown = set(d) - _SECTIONS
    if unknown:
        raise ConfigurationError(f"unknown top-level config field(s): {sorted(unknown)}")
    kwargs = {}
    if "zoo" in d:
        kwargs["zoo"] = _build_section(ZooConfig, d["zoo"], "zoo")
    if "arch" in d:
        kwargs["arch"] = arch_from_dict(d["arch"])
    if "dataset" in d:
        kwargs["dataset"] = DatasetSpec.from_dict(d["dataset"])
    if "space" in d:
        kwargs["space"] = HyperparamSpace.from_dict(d["space"])
    if "probe_count" in d:
        kwargs["probe_count"] = int(d["probe_count"])
    if "explain" in d:
        kwargs["explain"] = _build_section(ExplainConfig, d["explain"], "explain")
    if "effects" in d:
        kwargs["effects"] = _build_section(EffectsConfig, d["effects"], "effects")
    if "analysis" in d:
        kwargs["analysis"] = _build_section(AnalysisConfig, d["analysis"], "analysis")
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: PipelineConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def override_all_seeds(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    """Derive every pipeline seed from one master seed (the --seed flag)."""
    ss = np.random.SeedSequence(int(seed) & _U64)
    sub = [int(v) for v in ss.generate_state(6, np.uint64)]
    return replace(
        cfg,
        zoo=replace(cfg.zoo, sampling_seed=sub[0], train_seed=sub[1]),
        dataset=replace(cfg.dataset, generation_seed=sub[2]),
        explain=replace(cfg.explain, noise_seed=sub[3]),
        analysis=replace(cfg.analysis, bootstrap_seed=sub[4], permutation_seed=sub[5]),
    )


def set_dotted(cfg_dict: dict, dotted_key: str, value) -> None:
    """Apply one `section.key=value` CLI override onto a config dict."""
    parts = dotted_key.split(".")
    cur = cfg_dict
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            raise ConfigurationError(f"unknown config path {dotted_key!r}")
        cur = cur[p]
    cur[parts[-1]] = value

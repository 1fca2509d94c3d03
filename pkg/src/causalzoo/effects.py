"""Treatment-effect engine: discretization of continuous hyperparameters,
binary / non-binary / marginalized individual treatment effects, kernelized
effects (squared RKHS distance between outcome embeddings), and
treatment/control group selection.

Outcome vectors are post-softmax probabilities (predictions) or flattened
preprocessed attribution maps (explanations). All estimators accumulate in
model_id-sorted order, so permuting the population leaves results
bit-unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, EstimationError, InputError
from .zoo import HPARAM_KEYS, HyperparamVector

# Canonical rounding markers for the continuous hyperparameters; distance is
# measured in log10 for all but dropout (linear). Ties round down.
MARKERS = {
    "l2": ((1e-8, 1e-6, 1e-4, 1e-2), "log"),
    "w0_std": ((1e-3, 1e-2, 1e-1, 0.5), "log"),
    "learning_rate": ((5e-4, 5e-3, 5e-2), "log"),
    "dropout": ((0.0, 0.2, 0.45, 0.7), "linear"),
}

CATEGORICAL_KEYS = ("optimizer", "activation", "w0_type", "b0_type", "split_fraction")

KERNEL_KINDS = ("linear", "polynomial", "rbf", "cosine")
POLY_DEGREE = 3

DEFAULT_MIN_GROUP_SIZE = 5
WEIGHTINGS = ("empirical", "uniform_strata")

_RANGE_TOL = 1e-9


def discretize_hparam(key: str, raw_value):
    """Round a raw hyperparameter value to its nearest canonical marker.

    Categorical keys (and the discrete split_fraction) pass through. Values
    outside the sampled range are rejected. Idempotent: markers map to
    themselves.
    """
    if key in CATEGORICAL_KEYS:
        return raw_value
    if key not in MARKERS:
        raise InputError(f"unknown hparam key {key!r}; valid keys: {sorted(HPARAM_KEYS)}")
    markers, rule = MARKERS[key]
    lo, hi = markers[0], markers[-1]
    v = float(raw_value)
    if not (lo * (1 - _RANGE_TOL) - _RANGE_TOL <= v <= hi * (1 + _RANGE_TOL) + _RANGE_TOL):
        raise InputError(f"{key} value {v} outside sampled range [{lo}, {hi}]")
    m = np.asarray(markers, dtype=np.float64)
    if rule == "log":
        dist = np.abs(np.log10(v) - np.log10(m))
    else:
        dist = np.abs(v - m)
    return float(m[int(np.argmin(dist))])  # argmin takes the smaller marker on ties


def discretize_record(hp: HyperparamVector) -> dict:
    """All nine hyperparameters of one model, discretized."""
    return {k: discretize_hparam(k, getattr(hp, k)) for k in HPARAM_KEYS}


def level_labels(records, key: str) -> np.ndarray:
    """Discretized level of `key` for every record, in record order."""
    if key not in HPARAM_KEYS:
        raise InputError(f"unknown hparam key {key!r}; valid keys: {sorted(HPARAM_KEYS)}")
    return np.array([discretize_hparam(key, getattr(r.hparams, key)) for r in records],
                    dtype=object)


def observed_levels(labels: np.ndarray) -> list:
    """Sorted unique levels (numeric or lexicographic, deterministically)."""
    uniq = set(labels.tolist())
    return sorted(uniq, key=lambda v: (0, float(v)) if isinstance(v, (int, float)) else (1, str(v)))


# --- kernels ------------------------------------------------------------------

@dataclass(frozen=True)
class Kernel:
    """Positive definite kernel over flattened outcome vectors.

    gamma defaults to 1/dim at evaluation time for rbf and polynomial.
    """

    kind: str
    gamma: float | None = None
    degree: int = POLY_DEGREE

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigurationError(f"unknown kernel {self.kind!r}; expected one of {KERNEL_KINDS}")
        if self.gamma is not None and self.gamma <= 0:
            raise ConfigurationError(f"kernel gamma must be > 0, got {self.gamma}")

    def _gamma(self, dim: int) -> float:
        return self.gamma if self.gamma is not None else 1.0 / dim


KERNEL_BATTERY = (Kernel("linear"), Kernel("polynomial"), Kernel("rbf"), Kernel("cosine"))


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def _cosine_normalize(a: np.ndarray) -> np.ndarray:
    norms = np.sqrt((a * a).sum(axis=1))
    if np.any(norms == 0.0):
        bad = np.nonzero(norms == 0.0)[0]
        raise InputError(f"cosine kernel undefined on zero vector(s) at row(s) {bad.tolist()}")
    return a / norms[:, None]


def gram(kernel: Kernel, a, b) -> np.ndarray:
    """Kernel matrix between row sets a (n, d) and b (m, d)."""
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise InputError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if kernel.kind == "linear":
        return a @ b.T
    if kernel.kind == "polynomial":
        g = kernel._gamma(a.shape[1])
        return (g * (a @ b.T) + 1.0) ** kernel.degree
    if kernel.kind == "rbf":
        g = kernel._gamma(a.shape[1])
        sq = ((a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :]
              - 2.0 * (a @ b.T))
        return np.exp(-g * np.maximum(sq, 0.0))
    return _cosine_normalize(a) @ _cosine_normalize(b).T


def self_gram(kernel: Kernel, a) -> np.ndarray:
    """Diagonal k(x, x) for each row of a."""
    a = _as_matrix(a)
    if kernel.kind == "linear":
        return (a * a).sum(axis=1)
    if kernel.kind == "polynomial":
        g = kernel._gamma(a.shape[1])
        return (g * (a * a).sum(axis=1) + 1.0) ** kernel.degree
    if kernel.kind == "rbf":
        return np.ones(a.shape[0])
    _cosine_normalize(a)  # raise on zero vectors
    return np.ones(a.shape[0])


def kernel_eval(kernel: Kernel, a, b) -> float:
    """k(a, b) for two vectors."""
    return float(gram(kernel, a, b)[0, 0])


def kte_distance(kernel: Kernel, y1, y2) -> float:
    """Squared RKHS distance between the embeddings of two outcomes:
    k(y1,y1) - 2 k(y1,y2) + k(y2,y2), clamped at zero against rounding."""
    v = (kernel_eval(kernel, y1, y1) - 2.0 * kernel_eval(kernel, y1, y2)
         + kernel_eval(kernel, y2, y2))
    return max(v, 0.0)


def _kte_block(kernel: Kernel, a: np.ndarray, b: np.ndarray):
    """Pairwise KTE matrix (len(a), len(b)) plus the count of negative
    values clamped to zero (floating-point cancellation diagnostics)."""
    block = (self_gram(kernel, a)[:, None] + self_gram(kernel, b)[None, :]
             - 2.0 * gram(kernel, a, b))
    neg = int((block < 0.0).sum())
    return np.maximum(block, 0.0), neg


# --- queries and groups --------------------------------------------------------

@dataclass(frozen=True)
class ControlSpec:
    mode: str = "complement"        # "complement" (all m != n) or "fixed_baseline"
    baseline: object = None         # level m when mode == "fixed_baseline"
    scope: str = "global"           # "global" or "within_bucket"
    bucket_id: int | None = None

    def __post_init__(self):
        if self.mode not in ("complement", "fixed_baseline"):
            raise ConfigurationError(f"unknown control mode {self.mode!r}")
        if self.mode == "fixed_baseline" and self.baseline is None:
            raise ConfigurationError("fixed_baseline control requires a baseline level")
        if self.scope not in ("global", "within_bucket"):
            raise ConfigurationError(f"unknown control scope {self.scope!r}")
        if self.scope == "within_bucket" and self.bucket_id is None:
            raise ConfigurationError("within_bucket scope requires bucket_id")

    def label(self) -> str:
        return self.mode if self.mode == "complement" else f"fixed_baseline({self.baseline})"


@dataclass(frozen=True)
class TreatmentQuery:
    hparam_key: str
    treatment_value: object
    control: ControlSpec = ControlSpec()
    outcome: str = "prediction"      # "prediction" or "explanation"
    method: str | None = None        # explanation method when outcome == "explanation"
    instance_ids: tuple = ()

    def __post_init__(self):
        if self.outcome not in ("prediction", "explanation"):
            raise ConfigurationError(f"unknown outcome {self.outcome!r}")
        if self.outcome == "explanation" and not self.method:
            raise ConfigurationError("explanation outcome requires a method")
        if (self.control.mode == "fixed_baseline"
                and self.control.baseline == self.treatment_value):
            raise ConfigurationError("fixed_baseline control must differ from the treatment level")


def select_control(query: TreatmentQuery, labels: np.ndarray, model_ids: np.ndarray,
                   buckets: np.ndarray | None = None):
    """Resolve a query into disjoint (treatment_ids, control_ids), sorted.

    within_bucket scope restricts both groups to the query's bucket; global
    uses the whole population.
    """
    model_ids = np.asarray(model_ids)
    order = np.argsort(model_ids, kind="stable")
    labels = np.asarray(labels, dtype=object)[order]
    ids = model_ids[order]
    scope = np.ones(len(ids), dtype=bool)
    if query.control.scope == "within_bucket":
        if buckets is None:
            raise EstimationError("within_bucket control requires a bucket assignment")
        scope = np.asarray(buckets)[order] == query.control.bucket_id
    treat = ids[scope & (labels == query.treatment_value)]
    if query.control.mode == "complement":
        control = ids[scope & (labels != query.treatment_value)]
    else:
        control = ids[scope & (labels == query.control.baseline)]
    if len(treat) == 0:
        raise EstimationError(f"empty treatment group for {query.hparam_key}={query.treatment_value}")
    if len(control) == 0:
        raise EstimationError(f"empty control group ({query.control.label()}) "
                              f"for {query.hparam_key}={query.treatment_value}")
    return treat, control


def _control_level_groups(labels, positions, level_n, control: ControlSpec):
    """Control positions grouped per level m != n (sorted levels)."""
    if control.mode == "fixed_baseline":
        lv = [control.baseline]
    else:
        lv = [m for m in observed_levels(labels[positions]) if m != level_n]
    groups = []
    for m in lv:
        sel = positions[labels[positions] == m]
        if len(sel):
            groups.append((m, sel))
    return groups


# --- effect tables --------------------------------------------------------------

@dataclass
class EffectTable:
    """Per-instance treatment-effect values for one treatment query."""

    query: TreatmentQuery
    kernel: Kernel | None
    instance_ids: np.ndarray
    values: np.ndarray | None = None   # (I,) kernelized (or scalar-outcome) effects
    maps: np.ndarray | None = None     # (I, D) non-kernelized effect maps
    n_treatment: int = 0
    n_control: int = 0
    negative_clamped: int = 0
    aggregation: str = "none"

    def aggregate(self) -> "EffectTable":
        """Mean over instances (the ATE/CATE of the queried contrast)."""
        out = EffectTable(self.query, self.kernel, self.instance_ids,
                          n_treatment=self.n_treatment, n_control=self.n_control,
                          negative_clamped=self.negative_clamped,
                          aggregation="mean_over_instances")
        if self.values is not None:
            out.values = np.array([self.values.mean()])
        if self.maps is not None:
            out.maps = self.maps.mean(axis=0, keepdims=True)
        return out


def _sorted_positions(model_ids: np.ndarray):
    model_ids = np.asarray(model_ids)
    order = np.argsort(model_ids, kind="stable")
    return order, model_ids[order]


def _resolve_groups(labels, model_ids, level_n, control: ControlSpec,
                    buckets, min_group_size: int):
    """Positions (row indices) of the treatment group and per-level control
    groups, in model_id order; enforces the minimum stratum size."""
    order, ids = _sorted_positions(model_ids)
    labels = np.asarray(labels, dtype=object)
    lab_sorted = labels[order]
    scope = np.ones(len(ids), dtype=bool)
    if control.scope == "within_bucket":
        if buckets is None:
            raise EstimationError("within_bucket control requires a bucket assignment")
        scope = np.asarray(buckets)[order] == control.bucket_id
    positions = order[scope]
    lvls = observed_levels(lab_sorted[scope])
    if level_n not in lvls:
        raise EstimationError(f"treatment level {level_n!r} not present in scope")
    if len(lvls) < 2:
        raise EstimationError(f"single observed level {lvls!r}: no control group exists")
    treat_pos = positions[labels[positions] == level_n]
    groups = _control_level_groups(labels, positions, level_n, control)
    if not groups:
        raise EstimationError(f"empty control group ({control.label()}) for level {level_n!r}")
    sizes = {"treatment": len(treat_pos), **{f"control[{m}]": len(p) for m, p in groups}}
    small = {k: v for k, v in sizes.items() if v < min_group_size}
    if small:
        raise EstimationError(f"stratum below min_group_size={min_group_size}: {sizes}")
    return treat_pos, groups


def _strata_signatures(records, key: str) -> np.ndarray:
    """Canonical signature of all discretized hyperparameters except `key`."""
    sigs = []
    for r in records:
        d = discretize_record(r.hparams)
        sigs.append(tuple((k, str(d[k])) for k in HPARAM_KEYS if k != key))
    arr = np.empty(len(sigs), dtype=object)  # keep tuples as scalar entries
    arr[:] = sigs
    return arr


def _combine_over_treatment(per_t: np.ndarray, treat_pos, strata, weighting: str):
    """Outer expectation over the treatment group: empirical (equal weight per
    model) or uniform over observed strata of the remaining hyperparameters."""
    if weighting == "empirical" or strata is None:
        return per_t.mean(axis=0)
    sig = strata[treat_pos]
    uniq = sorted(set(sig.tolist()))
    # tuple-valued entries: compare per element (numpy would broadcast tuples)
    means = [per_t[np.fromiter((x == s for x in sig), bool, len(sig))].mean(axis=0)
             for s in uniq]
    return np.mean(means, axis=0)


def marginalized_effect_values(outcomes: np.ndarray, labels: np.ndarray, level_n,
                               *, model_ids: np.ndarray | None = None,
                               control: ControlSpec = ControlSpec(),
                               kernel: Kernel | None = None,
                               buckets: np.ndarray | None = None,
                               min_group_size: int = DEFAULT_MIN_GROUP_SIZE,
                               weighting: str = "empirical",
                               strata: np.ndarray | None = None):
    """Treatment effect of level_n for every instance, marginalizing the other
    hyperparameters empirically.

    outcomes: (M, I, D) rows per model; labels: (M,) discretized levels.
    The inner control expectation is uniform over levels m != n and empirical
    over models within each level; the outer expectation over the treatment
    group follows `weighting`. Returns ((I,) values, diag) when kernelized,
    ((I, D) maps, diag) otherwise.
    """
    if weighting not in WEIGHTINGS:
        raise ConfigurationError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")
    outcomes = np.asarray(outcomes, dtype=np.float64)
    if outcomes.ndim == 2:
        outcomes = outcomes[:, None, :]
    m_count = outcomes.shape[0]
    model_ids = np.arange(m_count) if model_ids is None else np.asarray(model_ids)
    treat_pos, groups = _resolve_groups(labels, model_ids, level_n, control,
                                        buckets, min_group_size)
    n_control = int(sum(len(p) for _, p in groups))
    neg = 0
    if kernel is None:
        mean_t = outcomes[treat_pos].mean(axis=0)                      # (I, D)
        mean_c = np.mean([outcomes[p].mean(axis=0) for _, p in groups], axis=0)
        result = mean_t - mean_c
    else:
        n_inst = outcomes.shape[1]
        result = np.empty(n_inst)
        for i in range(n_inst):
            rows = outcomes[:, i, :]
            per_level = np.empty((len(treat_pos), len(groups)))
            for gi, (_, pos) in enumerate(groups):
                block, nneg = _kte_block(kernel, rows[treat_pos], rows[pos])
                neg += nneg
                per_level[:, gi] = block.mean(axis=1)
            per_t = per_level.mean(axis=1)
            result[i] = float(_combine_over_treatment(per_t, treat_pos, strata, weighting))
    return result, {"n_treatment": len(treat_pos), "n_control": n_control,
                    "negative_clamped": neg}


def pooled_effect_values(outcomes: np.ndarray, labels: np.ndarray, level_n,
                         *, model_ids: np.ndarray | None = None,
                         control: ControlSpec = ControlSpec(),
                         kernel: Kernel | None = None,
                         buckets: np.ndarray | None = None,
                         min_group_size: int = DEFAULT_MIN_GROUP_SIZE):
    """Single non-binary treatment effect: the control group is pooled, so the
    non-kernelized value is mean(treatment) - mean(control) and the kernelized
    value is the mean pairwise KTE over the treatment x control cross pairs."""
    outcomes = np.asarray(outcomes, dtype=np.float64)
    if outcomes.ndim == 2:
        outcomes = outcomes[:, None, :]
    m_count = outcomes.shape[0]
    model_ids = np.arange(m_count) if model_ids is None else np.asarray(model_ids)
    treat_pos, groups = _resolve_groups(labels, model_ids, level_n, control,
                                        buckets, 1)
    control_pos = np.concatenate([p for _, p in groups])
    if len(treat_pos) < min_group_size or len(control_pos) < min_group_size:
        raise EstimationError(
            f"group below min_group_size={min_group_size}: "
            f"treatment={len(treat_pos)}, control={len(control_pos)}")
    neg = 0
    if kernel is None:
        result = outcomes[treat_pos].mean(axis=0) - outcomes[control_pos].mean(axis=0)
    else:
        n_inst = outcomes.shape[1]
        result = np.empty(n_inst)
        for i in range(n_inst):
            rows = outcomes[:, i, :]
            block, nneg = _kte_block(kernel, rows[treat_pos], rows[control_pos])
            neg += nneg
            result[i] = float(block.mean())
    return result, {"n_treatment": len(treat_pos), "n_control": len(control_pos),
                    "negative_clamped": neg}


def ite_binary(y_treatment, y_control, kernel: Kernel | None = None):
    """Contrast of two outcome vectors: elementwise difference, or their KTE."""
    a = np.asarray(y_treatment, dtype=np.float64)
    b = np.asarray(y_control, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"outcome shapes differ: {a.shape} vs {b.shape}")
    if kernel is None:
        return a - b
    return kte_distance(kernel, a.ravel(), b.ravel())


def ite_nonbinary(outcomes, labels, level_n, **kw):
    """Eq-style single-treatment effect against the pooled complement.

    Thin wrapper over pooled_effect_values returning only the per-instance
    values/maps.
    """
    return pooled_effect_values(outcomes, labels, level_n, **kw)[0]


def ite_marginalized(outcomes, labels, level_n, **kw):
    """Multi-treatment effect marginalizing the remaining hyperparameters."""
    return marginalized_effect_values(outcomes, labels, level_n, **kw)[0]


def effect_table(panel, records, query: TreatmentQuery, kernel: Kernel | None = None,
                 buckets: np.ndarray | None = None,
                 min_group_size: int = DEFAULT_MIN_GROUP_SIZE,
                 weighting: str = "empirical",
                 estimator: str = "marginalized") -> EffectTable:
    """Evaluate one treatment query over an outcome panel.

    panel: OutcomePanel-like object with model_ids, instance_ids, predictions,
    explanations. records: zoo records aligned with panel.model_ids.
    """
    labels = level_labels(records, query.hparam_key)
    if query.outcome == "prediction":
        outcomes = panel.predictions
    else:
        if query.method not in panel.explanations:
            raise InputError(f"panel has no explanations for method {query.method!r}")
        outcomes = panel.explanations[query.method]
    inst = np.asarray(query.instance_ids if query.instance_ids else panel.instance_ids)
    sel = np.searchsorted(panel.instance_ids, inst)
    if not np.array_equal(panel.instance_ids[sel], inst):
        raise InputError("query instance_ids not all present in panel")
    outcomes = outcomes[:, sel, :]
    strata = None
    if weighting == "uniform_strata":
        strata = _strata_signatures(records, query.hparam_key)
    fn = marginalized_effect_values if estimator == "marginalized" else pooled_effect_values
    kw = dict(model_ids=panel.model_ids, control=query.control, kernel=kernel,
              buckets=buckets, min_group_size=min_group_size)
    if estimator == "marginalized":
        kw.update(weighting=weighting, strata=strata)
    elif estimator != "pooled":
        raise ConfigurationError(f"unknown estimator {estimator!r}")
    result, diag = fn(outcomes, labels, query.treatment_value, **kw)
    table = EffectTable(query, kernel, inst, **{
        "values" if kernel is not None else "maps": result}, **diag)
    return table


# --- CSV export -----------------------------------------------------------------

EFFECT_CSV_COLUMNS = ("instance_id", "hparam_key", "level", "control_mode",
                      "bucket", "outcome_kind", "method", "kernel", "value")


def effect_csv_rows(table: EffectTable, bucket_label: str = "global") -> list[dict]:
    """Spec rows for one table. Only scalar-valued tables can be exported;
    map-valued tables are in-memory objects (save them as arrays instead)."""
    if table.values is None:
        raise InputError("cannot export map-valued effect tables to CSV; "
                         "kernelize the outcome or aggregate the map first")
    q = table.query
    rows = []
    for i, inst in enumerate(np.asarray(table.instance_ids).tolist()):
        rows.append({
            "instance_id": inst,
            "hparam_key": q.hparam_key,
            "level": q.treatment_value,
            "control_mode": q.control.label(),
            "bucket": bucket_label,
            "outcome_kind": q.outcome,
            "method": q.method or "",
            "kernel": table.kernel.kind if table.kernel else "",
            "value": repr(float(table.values[i])),
        })
    return rows


def write_effects_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EFFECT_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_effects_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

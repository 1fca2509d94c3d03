"""Population analysis: accuracy-percentile bucketing, correlation of
prediction-effects against explanation-effects, permutation-based
direct-vs-mediated influence probing, and kernel-sensitivity matrices.

All functions are pure in (outcome arrays, seeds); array-level entry points
(`*_from_outcomes`) also serve synthetic studies that never train a model.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .effects import (ControlSpec, DEFAULT_MIN_GROUP_SIZE, Kernel,
                      marginalized_effect_values, observed_levels)
from .errors import ConfigurationError, EstimationError

logger = logging.getLogger(__name__)

DEFAULT_BUCKET_EDGES = (0, 20, 40, 60, 80, 90, 95, 99, 100)
THREE_BUCKET_EDGES = (0, 80, 99, 100)

BOOTSTRAP_RESAMPLES = 1000
MEDIATION_PERMUTATIONS = 20

# Test-accuracy percentage bands (8 percentile buckets) reported for a public
# 30,000-model CNN zoo; shipped for reference only. Bucketing in this package
# always uses empirical percentiles of the local population.
REFERENCE_BUCKET_ACCURACY_BOUNDS = {
    "CIFAR10": ((5, 15), (15, 25), (25, 33), (33, 38), (38, 46), (46, 50), (50, 52), (50, 57)),
    "SVHN": ((7, 17), (17, 19.5), (19.5, 19.6), (19.6, 33), (33, 51), (51, 59), (59, 65), (65, 78)),
    "MNIST": ((4, 11), (11, 35), (35, 73), (73, 89), (89, 95), (95, 96), (96, 97), (97, 98)),
    "FASHION": ((1, 11), (11, 47), (47, 68), (68, 76), (76, 82), (82, 84), (84, 85), (85, 88)),
}

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class BucketScheme:
    """Percentile edges partitioning models by test accuracy."""

    percentile_edges: tuple = DEFAULT_BUCKET_EDGES

    def __post_init__(self):
        e = self.percentile_edges
        if len(e) < 2 or e[0] != 0 or e[-1] != 100 or any(b <= a for a, b in zip(e, e[1:])):
            raise ConfigurationError(
                f"percentile_edges must increase strictly from 0 to 100, got {e}")
        object.__setattr__(self, "percentile_edges", tuple(float(v) for v in e))

    @property
    def n_buckets(self) -> int:
        return len(self.percentile_edges) - 1


def bucket_models(accuracies, scheme: BucketScheme = BucketScheme()) -> np.ndarray:
    """Assign each model to its accuracy-percentile bucket.

    Boundaries are empirical percentiles (linear interpolation); a model ties
    an edge into the lower bucket, so all-equal accuracies land in bucket 0.
    Accepts a zoo manifest or a plain accuracy array; the returned array is
    indexed by position (== model_id for zoos built here).
    """
    accs = np.asarray(getattr(accuracies, "accuracies", lambda: accuracies)(), dtype=np.float64) \
        if hasattr(accuracies, "accuracies") else np.asarray(accuracies, dtype=np.float64)
    if accs.size == 0:
        raise ConfigurationError("cannot bucket an empty population")
    if accs.size < scheme.n_buckets:
        raise ConfigurationError(
            f"{accs.size} models cannot fill {scheme.n_buckets} buckets")
    bounds = np.percentile(accs, scheme.percentile_edges[1:-1])
    return (accs[:, None] > bounds[None, :]).sum(axis=1).astype(np.int64)


def _rank_average(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based), ties sharing the mean rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(xs, ys) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise EstimationError(f"need two equal-length 1-d arrays, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise EstimationError(f"need at least 3 points, got {len(x)}")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx == 0.0 or vy == 0.0:
        raise EstimationError("correlation undefined for constant input")
    return float(np.clip((xc @ yc) / np.sqrt(vx * vy), -1.0, 1.0))


def spearman(xs, ys) -> float:
    """Spearman rank correlation; ties get average ranks."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise EstimationError(f"need two equal-length 1-d arrays, got {x.shape} and {y.shape}")
    return pearson(_rank_average(x), _rank_average(y))


def bootstrap_ci(xs, ys, stat, n_resamples: int = BOOTSTRAP_RESAMPLES,
                 seed: int = 0, alpha: float = 0.05):
    """Percentile bootstrap CI for a paired statistic, widened (if ever
    needed) to bracket the point estimate."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    point = stat(x, y)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & _U64]))
    stats = []
    for _ in range(n_resamples):
        idx = rng.integers(0, len(x), len(x))
        try:
            stats.append(stat(x[idx], y[idx]))
        except EstimationError:
            continue  # degenerate resample (constant column)
    if len(stats) < 10:
        return point, point
    lo, hi = np.percentile(stats, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return min(float(lo), point), max(float(hi), point)


@dataclass
class CorrelationResult:
    bucket_id: int
    method: str
    hparam_key: str
    kernel: str
    pearson: float
    spearman: float
    n_points: int
    pearson_ci_low: float
    pearson_ci_high: float
    spearman_ci_low: float
    spearman_ci_high: float


@dataclass
class MediationResult:
    bucket_id: int
    method: str
    hparam_key: str
    kernel: str
    coefficient: str          # "pearson" or "spearman"
    corr_total: float
    corr_permuted: float      # mean over the permutation rounds
    delta: float              # corr_total - corr_permuted
    n_permutations: int
    permutation_seed: int
    n_points: int


def _scope_control(bucket_id: int | None) -> ControlSpec:
    if bucket_id is None:
        return ControlSpec()
    return ControlSpec(scope="within_bucket", bucket_id=int(bucket_id))


def _level_values(outcomes, labels, levels, kernel, control, buckets,
                  min_group_size, weighting) -> np.ndarray:
    """Concatenated per-instance kernelized effects for the given levels."""
    vals = [marginalized_effect_values(outcomes, labels, lv, control=control,
                                       kernel=kernel, buckets=buckets,
                                       min_group_size=min_group_size,
                                       weighting=weighting)[0]
            for lv in levels]
    return np.concatenate(vals) if vals else np.empty(0)


def _usable_levels(labels, kernel, control, buckets, bucket_id, min_group_size,
                   weighting, probe_outcomes) -> list:
    """Levels whose groups satisfy the size guard in scope (checked once on a
    cheap probe outcome); skipped levels are logged."""
    labels = np.asarray(labels, dtype=object)
    if bucket_id is None:
        in_scope = np.ones(len(labels), dtype=bool)
    else:
        in_scope = np.asarray(buckets) == bucket_id
    usable = []
    for level in observed_levels(labels[in_scope]):
        try:
            marginalized_effect_values(
                probe_outcomes[:, :1, :], labels, level, control=control,
                kernel=kernel, buckets=buckets, min_group_size=min_group_size,
                weighting=weighting)
        except EstimationError as exc:
            logger.warning("skipping level %r in bucket %s: %s", level, bucket_id, exc)
            continue
        usable.append(level)
    return usable


def effect_pairs(labels, predictions, explanations, kernel: Kernel,
                 bucket_id: int | None = None, buckets: np.ndarray | None = None,
                 min_group_size: int = DEFAULT_MIN_GROUP_SIZE,
                 weighting: str = "empirical"):
    """Per-(instance, level) kernelized effect pairs (ITE_Y, ITE_E).

    Returns (ite_y, ite_e, level_of_pair); levels whose groups are too small
    in scope are skipped with a warning.
    """
    labels = np.asarray(labels, dtype=object)
    control = _scope_control(bucket_id)
    levels = _usable_levels(labels, kernel, control, buckets, bucket_id,
                            min_group_size, weighting, np.asarray(predictions))
    n_inst = np.asarray(predictions).shape[1]
    ite_y = _level_values(predictions, labels, levels, kernel, control, buckets,
                          min_group_size, weighting)
    ite_e = _level_values(explanations, labels, levels, kernel, control, buckets,
                          min_group_size, weighting)
    lv = [level for level in levels for _ in range(n_inst)]
    return ite_y, ite_e, lv


def correlate_from_outcomes(labels, predictions, explanations, buckets,
                            kernel: Kernel, *, method: str = "", hparam_key: str = "",
                            min_group_size: int = DEFAULT_MIN_GROUP_SIZE,
                            n_resamples: int = BOOTSTRAP_RESAMPLES,
                            bootstrap_seed: int = 0) -> list[CorrelationResult]:
    """Per-bucket Pearson/Spearman correlation of ITE_Y vs ITE_E pairs, with
    95% bootstrap confidence intervals over pair resampling."""
    buckets = np.asarray(buckets)
    out: list[CorrelationResult] = []
    for b in sorted(set(buckets.tolist())):
        ite_y, ite_e, _ = effect_pairs(labels, predictions, explanations, kernel,
                                       bucket_id=b, buckets=buckets,
                                       min_group_size=min_group_size)
        if len(ite_y) < 3:
            logger.warning("bucket %s skipped: only %d effect pairs", b, len(ite_y))
            continue
        try:
            r_p = pearson(ite_y, ite_e)
            r_s = spearman(ite_y, ite_e)
        except EstimationError as exc:
            logger.warning("bucket %s skipped: %s", b, exc)
            continue
        plo, phi = bootstrap_ci(ite_y, ite_e, pearson, n_resamples, bootstrap_seed)
        slo, shi = bootstrap_ci(ite_y, ite_e, spearman, n_resamples, bootstrap_seed)
        out.append(CorrelationResult(int(b), method, hparam_key, kernel.kind,
                                     r_p, r_s, len(ite_y), plo, phi, slo, shi))
    return out


def _permute_predictions(predictions, rows, rng) -> np.ndarray:
    """Permute the prediction column across the given model rows,
    independently for each instance; other rows stay in place."""
    out = predictions.copy()
    for i in range(predictions.shape[1]):
        perm = rows[rng.permutation(len(rows))]
        out[rows, i, :] = predictions[perm, i, :]
    return out


def mediation_from_outcomes(labels, predictions, explanations, buckets,
                            kernel: Kernel, *, n_permutations: int = MEDIATION_PERMUTATIONS,
                            permutation_seed: int = 0, scope: str = "bucket",
                            method: str = "", hparam_key: str = "",
                            min_group_size: int = DEFAULT_MIN_GROUP_SIZE) -> list[MediationResult]:
    """Direct-vs-mediated probe: correlate ITE_Y with ITE_E as observed, then
    after permuting the prediction column across models (holding the
    hyperparameters and explanations fixed) and recomputing ITE_Y.

    scope="bucket" permutes within each analysis bucket; scope="global"
    permutes across the whole population.
    """
    if n_permutations < 1:
        raise ConfigurationError(f"n_permutations must be >= 1, got {n_permutations}")
    if scope not in ("bucket", "global"):
        raise ConfigurationError(f"unknown permutation scope {scope!r}")
    buckets = np.asarray(buckets)
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=object)
    out: list[MediationResult] = []
    for b in sorted(set(buckets.tolist())):
        control = _scope_control(b)
        levels = _usable_levels(labels, kernel, control, buckets, b,
                                min_group_size, "empirical", predictions)
        ite_y = _level_values(predictions, labels, levels, kernel, control,
                              buckets, min_group_size, "empirical")
        ite_e = _level_values(explanations, labels, levels, kernel, control,
                              buckets, min_group_size, "empirical")
        if len(ite_y) < 3:
            logger.warning("bucket %s skipped in mediation: %d pairs", b, len(ite_y))
            continue
        try:
            total = {"pearson": pearson(ite_y, ite_e), "spearman": spearman(ite_y, ite_e)}
        except EstimationError as exc:
            logger.warning("bucket %s skipped in mediation: %s", b, exc)
            continue
        rows = np.nonzero(buckets == b)[0] if scope == "bucket" else np.arange(len(labels))
        rng = np.random.default_rng(np.random.SeedSequence([int(permutation_seed) & _U64, int(b)]))
        permuted = {"pearson": [], "spearman": []}
        for _ in range(n_permutations):
            pred_perm = _permute_predictions(predictions, rows, rng)
            # groups are defined by the (unchanged) hyperparameters; only the
            # prediction outcomes move, so the explanation side stays fixed
            y_perm = _level_values(pred_perm, labels, levels, kernel, control,
                                   buckets, min_group_size, "empirical")
            try:
                permuted["pearson"].append(pearson(y_perm, ite_e))
                permuted["spearman"].append(spearman(y_perm, ite_e))
            except EstimationError:
                continue
        for coef in ("pearson", "spearman"):
            if not permuted[coef]:
                continue
            mean_perm = float(np.mean(permuted[coef]))
            out.append(MediationResult(int(b), method, hparam_key, kernel.kind, coef,
                                       total[coef], mean_perm, total[coef] - mean_perm,
                                       n_permutations, int(permutation_seed), len(ite_y)))
    return out


def kernel_sensitivity_from_outcomes(labels, explanations, kernels,
                                     *, min_group_size: int = DEFAULT_MIN_GROUP_SIZE,
                                     weighting: str = "empirical"):
    """Pairwise Spearman correlation matrix of per-(instance, level)
    kernelized explanation effects across a kernel battery (global scope).

    Returns (matrix, values) where values maps kernel kind -> effect vector.
    """
    kernels = list(kernels)
    if len(kernels) < 2:
        raise ConfigurationError("kernel sensitivity needs at least 2 kernels")
    labels = np.asarray(labels, dtype=object)
    explanations = np.asarray(explanations, dtype=np.float64)
    levels = _usable_levels(labels, kernels[0], ControlSpec(), None, None,
                            min_group_size, weighting, explanations)
    if not levels:
        raise EstimationError("no level has groups large enough for kernel sensitivity")
    values = {}
    for k in kernels:
        values[k.kind] = _level_values(explanations, labels, levels, k,
                                       ControlSpec(), None, min_group_size, weighting)
    n = len(kernels)
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            r = spearman(values[kernels[i].kind], values[kernels[j].kind])
            mat[i, j] = mat[j, i] = r
    return mat, values


# --- CSV export -----------------------------------------------------------------

CORRELATION_COLUMNS = ("bucket_id", "method", "hparam_key", "kernel", "n_points",
                       "pearson", "pearson_ci_low", "pearson_ci_high",
                       "spearman", "spearman_ci_low", "spearman_ci_high")

MEDIATION_COLUMNS = ("bucket_id", "method", "hparam_key", "kernel", "coefficient",
                     "corr_total", "corr_permuted", "delta", "n_permutations",
                     "permutation_seed", "n_points")


def write_correlations_csv(path, results: list[CorrelationResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CORRELATION_COLUMNS)
        for r in results:
            w.writerow([r.bucket_id, r.method, r.hparam_key, r.kernel, r.n_points,
                        repr(r.pearson), repr(r.pearson_ci_low), repr(r.pearson_ci_high),
                        repr(r.spearman), repr(r.spearman_ci_low), repr(r.spearman_ci_high)])


def write_mediation_csv(path, results: list[MediationResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MEDIATION_COLUMNS)
        for r in results:
            w.writerow([r.bucket_id, r.method, r.hparam_key, r.kernel, r.coefficient,
                        repr(r.corr_total), repr(r.corr_permuted), repr(r.delta),
                        r.n_permutations, r.permutation_seed, r.n_points])


def write_sensitivity_csv(path, matrix: np.ndarray, kernel_names: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kernel", *kernel_names])
        for name, row in zip(kernel_names, matrix):
            w.writerow([name, *[repr(float(v)) for v in row]])

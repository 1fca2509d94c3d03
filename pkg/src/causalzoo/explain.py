"""Saliency explanations (gradient, smoothed gradient, path-integrated
gradient, class activation mapping) plus the outlier-clipping preprocessing
that maps every attribution map into [0, 1].

Every method is deterministic given its explicit seeds. Attribution maps
carry the input's spatial shape; multi-channel inputs are reduced per pixel
to the channel value of largest magnitude (sign preserved), so for
single-channel inputs the gradient map equals the raw input gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn_engine
from .errors import ConfigurationError, FormatError, InputError, NumericalError
from .nn_engine import ParameterSet, _seed_entropy

METHODS = ("gradient", "smoothgrad", "integrated_gradients", "grad_cam")

SMOOTHGRAD_N_SAMPLES = 25
SMOOTHGRAD_SIGMA = 0.15  # fraction of the input's value range
IG_STEPS = 64

MAPS_MAGIC = b"ZOOE"
MAPS_VERSION = 1


@dataclass
class Explanation:
    """One attribution map for one (model, instance) pair."""

    attributions: np.ndarray  # input's spatial shape (H, W)
    method: str
    model_id: int = -1
    instance_id: int = -1
    preprocessed: bool = False


def _reduce_channels(g: np.ndarray) -> np.ndarray:
    """(..., H, W, C) -> (..., H, W): per pixel, keep the channel value of
    largest magnitude. Identity (squeeze) for single-channel inputs."""
    if g.shape[-1] == 1:
        return g[..., 0]
    idx = np.argmax(np.abs(g), axis=-1)
    return np.take_along_axis(g, idx[..., None], axis=-1)[..., 0]


def gradient_saliency(params: ParameterSet, x: np.ndarray, target_class: int,
                      model_id: int = -1, instance_id: int = -1) -> Explanation:
    """Raw input-gradient map of the post-softmax target score."""
    g = nn_engine.input_gradient(params, x, target_class)
    return Explanation(_reduce_channels(g), "gradient", model_id, instance_id)


def _smoothgrad_core(grad_fn, x: np.ndarray, n_samples: int, sigma: float,
                     noise_seed: int) -> np.ndarray:
    """Mean gradient over seeded Gaussian perturbations of x.

    grad_fn maps a batch (B, *x.shape) to per-sample gradients of the same
    shape. sigma scales the input's value range; sigma=0 (or a flat input)
    degenerates to a single unperturbed gradient, bit-exactly.
    """
    if sigma < 0:
        raise ConfigurationError(f"sigma must be >= 0, got {sigma}")
    if n_samples < 1:
        raise ConfigurationError(f"n_samples must be >= 1, got {n_samples}")
    scale = sigma * float(x.max() - x.min())
    if scale == 0.0:
        return grad_fn(x[None])[0]
    rng = np.random.default_rng(_seed_entropy(noise_seed))
    noise = rng.normal(0.0, scale, (n_samples,) + x.shape)
    grads = grad_fn(x[None] + noise)
    return grads.mean(axis=0)


def smoothgrad(params: ParameterSet, x: np.ndarray, target_class: int,
               n_samples: int = SMOOTHGRAD_N_SAMPLES, sigma: float = SMOOTHGRAD_SIGMA,
               noise_seed: int = 0, model_id: int = -1, instance_id: int = -1) -> Explanation:
    """Mean of gradient maps over n_samples noisy copies of the input."""
    grad_fn = lambda xs: _reduce_channels(
        nn_engine._input_gradients_batch(params, xs, target_class))
    attr = _smoothgrad_core(grad_fn, x, n_samples, sigma, noise_seed)
    return Explanation(attr, "smoothgrad", model_id, instance_id)


def _ig_core(grad_fn, x: np.ndarray, baseline: np.ndarray, steps: int) -> np.ndarray:
    """(x - baseline) * mean gradient along the straight path, midpoint rule."""
    if steps < 1:
        raise ConfigurationError(f"steps must be >= 1, got {steps}")
    if baseline.shape != x.shape:
        raise InputError(f"baseline shape {baseline.shape} != input shape {x.shape}")
    alphas = (np.arange(steps) + 0.5) / steps
    pts = baseline[None] + alphas.reshape(-1, *([1] * x.ndim)) * (x - baseline)[None]
    grads = grad_fn(pts)
    return (x - baseline) * grads.mean(axis=0)


def integrated_gradients(params: ParameterSet, x: np.ndarray, target_class: int,
                         steps: int = IG_STEPS, baseline: np.ndarray | None = None,
                         model_id: int = -1, instance_id: int = -1) -> Explanation:
    """Path-integrated input gradient against a baseline (default: all zeros)."""
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    grad_fn = lambda xs: nn_engine._input_gradients_batch(params, xs, target_class)
    attr = _ig_core(grad_fn, x, baseline, steps)
    return Explanation(_reduce_channels(attr), "integrated_gradients", model_id, instance_id)


def _bilinear_resize(m: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Edge-clamped bilinear resize of a 2D map (half-pixel-center grid)."""
    h, w = m.shape
    out_h, out_w = out_hw
    if (h, w) == (out_h, out_w):
        return m.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = m[np.ix_(y0, x0)] * (1 - wx) + m[np.ix_(y0, x1)] * wx
    bot = m[np.ix_(y1, x0)] * (1 - wx) + m[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def grad_cam(params: ParameterSet, x: np.ndarray, target_class: int,
             conv_layer_index: int | None = None,
             model_id: int = -1, instance_id: int = -1) -> Explanation:
    """Relu of the gradient-weighted activation maps of one conv layer,
    upsampled bilinearly to input resolution. Defaults to the last conv layer.

    Channel weights are the spatial mean of the post-softmax target score's
    gradient at that layer.
    """
    arch = params.arch
    if not arch.conv_layers:
        raise ConfigurationError("grad_cam requires at least one conv layer")
    li = len(arch.conv_layers) - 1 if conv_layer_index is None else int(conv_layer_index)
    if not (0 <= li < len(arch.conv_layers)):
        raise ConfigurationError(
            f"conv_layer_index {li} invalid for {len(arch.conv_layers)} conv layers")
    if not (0 <= target_class < arch.num_classes):
        raise InputError(f"target_class {target_class} outside [0, {arch.num_classes})")
    cache = nn_engine._forward_batch(params, x[None])
    dlogits = nn_engine._target_prob_dlogits(nn_engine.softmax(cache.logits), target_class)
    _, da = nn_engine._backward(params, cache, dlogits, stop_at_layer=li)
    act = cache.post[li][0]
    alpha = da[0].mean(axis=(0, 1))
    cam = np.maximum((act * alpha).sum(axis=-1), 0.0)
    cam = _bilinear_resize(cam, arch.input_shape[:2])
    return Explanation(cam, "grad_cam", model_id, instance_id)


def compute_explanation(params: ParameterSet, x: np.ndarray, target_class: int,
                        method: str, *, n_samples: int = SMOOTHGRAD_N_SAMPLES,
                        sigma: float = SMOOTHGRAD_SIGMA, noise_seed: int = 0,
                        steps: int = IG_STEPS, baseline: np.ndarray | None = None,
                        conv_layer_index: int | None = None,
                        model_id: int = -1, instance_id: int = -1) -> Explanation:
    """Dispatch to one of the four methods by name."""
    if method == "gradient":
        return gradient_saliency(params, x, target_class, model_id, instance_id)
    if method == "smoothgrad":
        return smoothgrad(params, x, target_class, n_samples, sigma, noise_seed,
                          model_id, instance_id)
    if method == "integrated_gradients":
        return integrated_gradients(params, x, target_class, steps, baseline,
                                    model_id, instance_id)
    if method == "grad_cam":
        return grad_cam(params, x, target_class, conv_layer_index, model_id, instance_id)
    raise ConfigurationError(f"unknown explanation method {method!r}; expected one of {METHODS}")


def preprocess(expl: Explanation) -> Explanation:
    """Clip outliers above the 99th percentile and rescale into [0, 1].

    Signed methods are first normalized to [-1, 1] by the max absolute value
    and negative attributions are clipped to zero; grad_cam maps are already
    non-negative. An all-zero map passes through as all zeros. Maps flagged
    preprocessed are returned unchanged (the flag is the range contract, and
    re-clipping a canonical map at its 99th percentile would not be a no-op).
    """
    if expl.preprocessed:
        return expl
    v = np.asarray(expl.attributions, dtype=np.float64)
    if not np.isfinite(v).all():
        raise NumericalError(f"non-finite attribution values in {expl.method} map "
                             f"(model {expl.model_id}, instance {expl.instance_id})")

    def done(values):
        return Explanation(values, expl.method, expl.model_id, expl.instance_id, True)

    if expl.method == "grad_cam":
        w = np.maximum(v, 0.0)
    else:
        m = np.abs(v).max()
        if m == 0.0:
            return done(np.zeros_like(v))
        w = np.clip(v / m, 0.0, None)
    p99 = np.percentile(w, 99.0)  # linear interpolation between order stats
    w = np.minimum(w, p99)
    mx = w.max()
    return done(w / mx if mx > 0.0 else np.zeros_like(w))


# --- batched pipeline helpers -------------------------------------------------

def instance_noise_seed(noise_seed: int, model_id: int, instance_id: int) -> int:
    """Per-(model, instance) smoothgrad seed derived from the configured seed."""
    seq = np.random.SeedSequence([int(noise_seed) & ((1 << 64) - 1),
                                  int(model_id), int(instance_id)])
    return int(seq.generate_state(1, np.uint64)[0])


def explanation_batch(params: ParameterSet, xs: np.ndarray, targets: np.ndarray,
                      instance_ids: np.ndarray, method: str, *,
                      n_samples: int = SMOOTHGRAD_N_SAMPLES, sigma: float = SMOOTHGRAD_SIGMA,
                      noise_seed: int = 0, steps: int = IG_STEPS,
                      conv_layer_index: int | None = None,
                      model_id: int = -1) -> list[Explanation]:
    """Per-instance explanations for one model, computed in batched passes.

    Deterministic bit-for-bit across identical calls. Values agree with the
    single-instance ops (using the derived per-instance smoothgrad seeds, see
    instance_noise_seed) up to BLAS accumulation order, ~1e-15.
    """
    n = xs.shape[0]
    out: list[Explanation] = []
    if method == "gradient":
        grads = nn_engine._input_gradients_batch(params, xs, targets)
        maps = _reduce_channels(grads)
        for i in range(n):
            out.append(Explanation(maps[i], method, model_id, int(instance_ids[i])))
    elif method == "smoothgrad":
        flat_x, flat_t = [], []
        spans = []
        for i in range(n):
            x = xs[i]
            seed = instance_noise_seed(noise_seed, model_id, int(instance_ids[i]))
            scale = sigma * float(x.max() - x.min())
            if scale == 0.0:
                pts = x[None]
            else:
                rng = np.random.default_rng(_seed_entropy(seed))
                pts = x[None] + rng.normal(0.0, scale, (n_samples,) + x.shape)
            spans.append((len(flat_x), len(flat_x) + len(pts)))
            flat_x.extend(pts)
            flat_t.extend([int(targets[i])] * len(pts))
        grads = nn_engine._input_gradients_batch(
            params, np.stack(flat_x), np.asarray(flat_t))
        maps = _reduce_channels(grads)
        for i, (lo, hi) in enumerate(spans):
            out.append(Explanation(maps[lo:hi].mean(axis=0), method,
                                   model_id, int(instance_ids[i])))
    elif method == "integrated_gradients":
        alphas = (np.arange(steps) + 0.5) / steps
        shaped = alphas.reshape(-1, *([1] * (xs.ndim - 1)))
        pts = np.concatenate([shaped * xs[i][None] for i in range(n)])
        flat_t = np.repeat(np.asarray(targets), steps)
        grads = nn_engine._input_gradients_batch(params, pts, flat_t)
        for i in range(n):
            avg = grads[i * steps:(i + 1) * steps].mean(axis=0)
            out.append(Explanation(_reduce_channels(xs[i] * avg), method,
                                   model_id, int(instance_ids[i])))
    elif method == "grad_cam":
        arch = params.arch
        li = len(arch.conv_layers) - 1 if conv_layer_index is None else int(conv_layer_index)
        if not (0 <= li < len(arch.conv_layers)):
            raise ConfigurationError(
                f"conv_layer_index {li} invalid for {len(arch.conv_layers)} conv layers")
        cache = nn_engine._forward_batch(params, xs)
        dlogits = nn_engine._target_prob_dlogits(nn_engine.softmax(cache.logits), targets)
        _, da = nn_engine._backward(params, cache, dlogits, stop_at_layer=li)
        act = cache.post[li]
        alpha = da.mean(axis=(1, 2))
        cams = np.maximum((act * alpha[:, None, None, :]).sum(axis=-1), 0.0)
        for i in range(n):
            out.append(Explanation(_bilinear_resize(cams[i], arch.input_shape[:2]),
                                   method, model_id, int(instance_ids[i])))
    else:
        raise ConfigurationError(f"unknown explanation method {method!r}")
    return out


# --- binary map store ---------------------------------------------------------

def write_maps(path, maps: np.ndarray) -> None:
    """One file per (model, method): header + f32 LE maps for all instances."""
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise InputError(f"expected (instances, H, W) maps, got shape {maps.shape}")
    with open(path, "wb") as fh:
        fh.write(MAPS_MAGIC)
        fh.write(struct.pack("<IIII", MAPS_VERSION, *maps.shape))
        fh.write(np.ascontiguousarray(maps, dtype="<f4").tobytes())


def read_maps(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read explanation maps at {path}: {exc}") from exc
    if blob[:4] != MAPS_MAGIC:
        raise FormatError(f"bad magic bytes in explanation maps {path}")
    try:
        version, n, h, w = struct.unpack_from("<IIII", blob, 4)
    except struct.error as exc:
        raise FormatError(f"truncated explanation maps header in {path}") from exc
    if version != MAPS_VERSION:
        raise FormatError(f"unsupported explanation maps version {version} in {path}")
    payload = blob[20:]
    if len(payload) != n * h * w * 4:
        raise FormatError(f"truncated explanation maps payload in {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, h, w).astype(np.float64)

"""Deterministic forward/backward engine for small conv classifiers.

Everything here is a pure function of its explicit arguments, including
seeds: there is no module-level RNG state, reductions run in a fixed
order, and repeated calls with identical arguments return bit-identical
arrays. Training a single model is single-threaded by design.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, InputError, NumericalError

ACTIVATIONS = ("relu", "tanh")
INIT_KINDS = ("normal", "uniform", "zeros")
OPTIMIZERS = ("sgd", "adam", "rmsprop")

W0_STD_RANGE = (1e-3, 0.5)

# Standard optimizer constants (not part of the sampled hyperparameters).
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
RMSPROP_DECAY = 0.9
RMSPROP_EPS = 1e-8

DEFAULT_BATCH_SIZE = 32

_U64 = (1 << 64) - 1


def _seed_entropy(seed: int, *tags: int) -> np.random.SeedSequence:
    """SeedSequence keyed by (seed, tags); accepts negative 64-bit seeds."""
    return np.random.SeedSequence([int(seed) & _U64, *[int(t) & _U64 for t in tags]])


@dataclass(frozen=True)
class ArchitectureSpec:
    """Fixed conv stack: conv layers, then global average pool, then a dense
    layer to num_classes. `activation` is applied after every conv layer.

    conv_layers entries are (kernel_size, out_channels, stride). With no conv
    layers the head is a dense layer on the flattened input (used for linear
    toy models); otherwise the dense layer reads the pooled channel vector.
    """

    input_shape: tuple[int, int, int] = (16, 16, 1)
    conv_layers: tuple[tuple[int, int, int], ...] = ((3, 8, 2), (3, 8, 2), (3, 8, 2))
    num_classes: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        h, w, c = self.input_shape
        if min(h, w, c) < 1:
            raise ConfigurationError(f"invalid input_shape {self.input_shape}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in l) for l in self.conv_layers))
        for hh, ww, _ in self.conv_shapes():  # raises if a layer collapses
            if hh < 1 or ww < 1:
                raise ConfigurationError("conv stack output shape is not positive")

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        """Output (h, w, channels) of each conv layer in order."""
        h, w, _ = self.input_shape
        c = self.input_shape[2]
        shapes = []
        for k, out_c, s in self.conv_layers:
            if k < 1 or out_c < 1 or s < 1:
                raise ConfigurationError(f"invalid conv layer ({k}, {out_c}, {s})")
            h = (h - k) // s + 1
            w = (w - k) // s + 1
            c = out_c
            shapes.append((h, w, c))
        return shapes

    def feature_dim(self) -> int:
        """Input width of the dense head."""
        if self.conv_layers:
            return self.conv_layers[-1][1]
        h, w, c = self.input_shape
        return h * w * c

    def tensor_shapes(self) -> list[tuple[int, ...]]:
        """Shapes of all parameter tensors, in canonical order
        [W1, b1, ..., Wn, bn, W_dense, b_dense]."""
        shapes: list[tuple[int, ...]] = []
        c_in = self.input_shape[2]
        for k, out_c, _ in self.conv_layers:
            shapes.append((k, k, c_in, out_c))
            shapes.append((out_c,))
            c_in = out_c
        shapes.append((self.feature_dim(), self.num_classes))
        shapes.append((self.num_classes,))
        return shapes

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.tensor_shapes()))


@dataclass
class ParameterSet:
    """All weight/bias tensors of a network, in the arch's canonical order."""

    arch: ArchitectureSpec
    tensors: list[np.ndarray] = field(default_factory=list)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.arch, [t.copy() for t in self.tensors])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    @classmethod
    def from_vector(cls, arch: ArchitectureSpec, vec: np.ndarray) -> "ParameterSet":
        shapes = arch.tensor_shapes()
        out, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(np.asarray(vec[pos:pos + n], dtype=np.float64).reshape(s))
            pos += n
        if pos != vec.size:
            raise InputError(f"vector length {vec.size} != parameter count {pos}")
        return cls(arch, out)

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors))

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors)


@dataclass
class OptimizerState:
    """Moment buffers for one of sgd/adam/rmsprop. Buffers start at zero."""

    kind: str
    learning_rate: float
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0

    @classmethod
    def create(cls, kind: str, learning_rate: float, params: ParameterSet) -> "OptimizerState":
        if kind not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZERS}")
        if learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {learning_rate}")
        zeros = lambda: [np.zeros_like(t) for t in params.tensors]
        m = zeros() if kind in ("adam",) else []
        v = zeros() if kind in ("adam", "rmsprop") else []
        return cls(kind, float(learning_rate), m, v, 0)

    def apply(self, params: ParameterSet, grads: list[np.ndarray]) -> None:
        """One in-place update step. The caller owns `params`."""
        self.step_count += 1
        lr = self.learning_rate
        if self.kind == "sgd":
            for t, g in zip(params.tensors, grads):
                t -= lr * g
        elif self.kind == "adam":
            b1, b2 = ADAM_BETA1, ADAM_BETA2
            c1 = 1.0 - b1 ** self.step_count
            c2 = 1.0 - b2 ** self.step_count
            for t, g, m, v in zip(params.tensors, grads, self.m, self.v):
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                t -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        else:  # rmsprop
            for t, g, v in zip(params.tensors, grads, self.v):
                v *= RMSPROP_DECAY
                v += (1 - RMSPROP_DECAY) * g * g
                t -= lr * g / (np.sqrt(v) + RMSPROP_EPS)


def init_parameters(arch: ArchitectureSpec, w0_type: str, w0_std: float,
                    b0_type: str, seed: int) -> ParameterSet:
    """Seeded initialization; bit-identical for identical arguments.

    Weight tensors are drawn per `w0_type` with standard deviation `w0_std`
    (uniform draws use the +-w0_std*sqrt(3) interval, which has that std).
    Bias tensors follow `b0_type`, reusing w0_std as the scale.
    """
    for kind in (w0_type, b0_type):
        if kind not in INIT_KINDS:
            raise ConfigurationError(f"unknown init kind {kind!r}; expected one of {INIT_KINDS}")
    if not (W0_STD_RANGE[0] <= w0_std <= W0_STD_RANGE[1]):
        raise ConfigurationError(f"w0_std {w0_std} outside {W0_STD_RANGE}")
    tensors = []
    for idx, shape in enumerate(arch.tensor_shapes()):
        kind = b0_type if len(shape) == 1 else w0_type
        rng = np.random.default_rng(_seed_entropy(seed, idx))
        if kind == "zeros":
            tensors.append(np.zeros(shape, dtype=np.float64))
        elif kind == "normal":
            tensors.append(rng.normal(0.0, w0_std, shape))
        else:  # uniform with matching std
            half = w0_std * np.sqrt(3.0)
            tensors.append(rng.uniform(-half, half, shape))
    return ParameterSet(arch, tensors)


@functools.lru_cache(maxsize=64)
def _patch_indices(h: int, w: int, k: int, s: int):
    """Row/col gather indices turning an (h, w) grid into conv patches."""
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    di = np.arange(k)
    ii = (np.arange(oh) * s)[:, None, None, None] + di[None, None, :, None]
    jj = (np.arange(ow) * s)[None, :, None, None] + di[None, None, None, :]
    ii = np.broadcast_to(ii, (oh, ow, k, k)).reshape(oh * ow, k * k)
    jj = np.broadcast_to(jj, (oh, ow, k, k)).reshape(oh * ow, k * k)
    return oh, ow, np.ascontiguousarray(ii), np.ascontiguousarray(jj)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    # relu derivative at exactly 0 is defined as 0.
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


class _Cache(NamedTuple):
    x: np.ndarray                 # (B, H, W, C) inputs
    cols: list[np.ndarray]        # per conv layer, (B, P, k*k*C_in)
    pre: list[np.ndarray]         # per conv layer, (B, oh, ow, C_out)
    post: list[np.ndarray]        # per conv layer, after activation (and dropout)
    act_grad: list[np.ndarray]    # activation derivative at pre
    masks: list[np.ndarray | None]
    feats: np.ndarray             # (B, F) dense input
    logits: np.ndarray            # (B, K)


def _forward_batch(params: ParameterSet, x: np.ndarray,
                   dropout_rate: float = 0.0,
                   dropout_rng: np.random.Generator | None = None) -> _Cache:
    arch = params.arch
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != arch.input_shape:
        raise InputError(f"input shape {x.shape[1:]} != expected {arch.input_shape}")
    x = np.asarray(x, dtype=np.float64)
    b = x.shape[0]
    keep = 1.0 - dropout_rate
    cols, pre, post, agrad, masks = [], [], [], [], []
    cur = x
    for li, (k, out_c, s) in enumerate(arch.conv_layers):
        h, w, c_in = cur.shape[1:]
        oh, ow, ii, jj = _patch_indices(h, w, k, s)
        col = cur[:, ii, jj, :].reshape(b, oh * ow, k * k * c_in)
        wmat = params.tensors[2 * li].reshape(k * k * c_in, out_c)
        z = col @ wmat + params.tensors[2 * li + 1]
        z = z.reshape(b, oh, ow, out_c)
        a = _activate(z, arch.activation)
        g = _activate_grad(z, a, arch.activation)
        if dropout_rate > 0.0:
            mask = (dropout_rng.random(a.shape) >= dropout_rate).astype(np.float64) / keep
            a = a * mask
        else:
            mask = None
        cols.append(col)
        pre.append(z)
        post.append(a)
        agrad.append(g)
        masks.append(mask)
        cur = a
    if arch.conv_layers:
        feats = cur.mean(axis=(1, 2))  # global average pool
    else:
        feats = cur.reshape(b, -1)
    logits = feats @ params.tensors[-2] + params.tensors[-1]
    return _Cache(x, cols, pre, post, agrad, masks, feats, logits)


def _backward(params: ParameterSet, cache: _Cache, dlogits: np.ndarray,
              need_input_grad: bool = False, stop_at_layer: int | None = None):
    """Reverse pass from dL/dlogits; returns (param grads, dL/dx or None).

    With stop_at_layer=li, returns (None, dA) where dA is the gradient with
    respect to conv layer li's post-activation maps (used by Grad-CAM).
    """
    arch = params.arch
    b = cache.x.shape[0]
    grads: list[np.ndarray] = [np.zeros_like(t) for t in params.tensors]
    grads[-2][...] = cache.feats.T @ dlogits
    grads[-1][...] = dlogits.sum(axis=0)
    dfeats = dlogits @ params.tensors[-2].T
    if not arch.conv_layers:
        dx = dfeats.reshape(cache.x.shape) if need_input_grad else None
        return grads, dx
    oh, ow, c = arch.conv_shapes()[-1]
    da = np.broadcast_to(dfeats[:, None, None, :] / (oh * ow), (b, oh, ow, c)).copy()
    for li in range(len(arch.conv_layers) - 1, -1, -1):
        if stop_at_layer == li:
            return None, da
        k, out_c, s = arch.conv_layers[li]
        if cache.masks[li] is not None:
            da = da * cache.masks[li]
        dz = da * cache.act_grad[li]
        dz2 = dz.reshape(b, -1, out_c)
        wmat = params.tensors[2 * li].reshape(-1, out_c)
        # accumulate over batch in fixed order
        gw = np.einsum("bpi,bpo->io", cache.cols[li], dz2, optimize=True)
        grads[2 * li][...] = gw.reshape(params.tensors[2 * li].shape)
        grads[2 * li + 1][...] = dz2.sum(axis=(0, 1))
        if li == 0 and not need_input_grad:
            break
        dcol = dz2 @ wmat.T  # (B, P, k*k*C_in)
        prev_shape = arch.input_shape if li == 0 else arch.conv_shapes()[li - 1]
        h, w, c_in = prev_shape
        _, _, ii, jj = _patch_indices(h, w, k, s)
        dprev = np.zeros((b, h, w, c_in), dtype=np.float64)
        vals = dcol.reshape(b, ii.shape[0], k * k, c_in)
        bidx = np.arange(b)[:, None, None]
        np.add.at(dprev, (bidx, ii[None, :, :], jj[None, :, :]), vals)
        da = dprev
    dx = da if need_input_grad else None
    return grads, dx


def forward(params: ParameterSet, x: np.ndarray):
    """Inference-mode forward pass for one input.

    Returns (logits, activations) where activations are the post-activation
    maps of each conv layer, cached for Grad-CAM.
    """
    cache = _forward_batch(params, x)
    logits = cache.logits[0]
    if not np.isfinite(logits).all():
        raise NumericalError("non-finite logits; parameters or input contain extreme values")
    return logits, [a[0] for a in cache.post]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(params: ParameterSet, x: np.ndarray) -> np.ndarray:
    """Post-softmax probability vector for one input."""
    logits, _ = forward(params, x)
    return softmax(logits)


def predict_batch(params: ParameterSet, x: np.ndarray) -> np.ndarray:
    """Post-softmax probabilities, (B, K)."""
    return softmax(_forward_batch(params, x).logits)


def _loss_and_grads(params: ParameterSet, x: np.ndarray, y: np.ndarray,
                    l2: float = 0.0, dropout_rate: float = 0.0,
                    dropout_rng: np.random.Generator | None = None):
    """Mean cross-entropy + (l2/2)*||params||^2 and its parameter gradient."""
    y = np.asarray(y)
    cache = _forward_batch(params, x, dropout_rate, dropout_rng)
    b = cache.logits.shape[0]
    zmax = cache.logits.max(axis=1, keepdims=True)
    zs = cache.logits - zmax
    lse = np.log(np.exp(zs).sum(axis=1)) + zmax[:, 0]
    ce = float(np.mean(lse - cache.logits[np.arange(b), y]))
    loss = ce
    probs = softmax(cache.logits)
    dlogits = probs.copy()
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b
    grads, _ = _backward(params, cache, dlogits)
    if l2 > 0.0:
        for g, t in zip(grads, params.tensors):
            g += l2 * t
        loss += 0.5 * l2 * float(sum(np.sum(t * t) for t in params.tensors))
    return loss, grads


def batch_loss(params: ParameterSet, x: np.ndarray, y: np.ndarray,
               l2: float = 0.0, dropout_rate: float = 0.0,
               dropout_seed: int = 0) -> float:
    """Loss value under the same deterministic dropout masks as param_gradient."""
    rng = np.random.default_rng(_seed_entropy(dropout_seed)) if dropout_rate > 0 else None
    loss, _ = _loss_and_grads(params, x, y, l2, dropout_rate, rng)
    return loss


def param_gradient(params: ParameterSet, x: np.ndarray, y: np.ndarray,
                   l2: float = 0.0, dropout_rate: float = 0.0,
                   dropout_seed: int = 0) -> ParameterSet:
    """Gradient of the regularized batch loss w.r.t. all parameters.

    Dropout masks (one per conv layer) are drawn deterministically from
    dropout_seed; with dropout_rate=0 the result is seed-independent.
    """
    y = np.asarray(y)
    if y.size == 0:
        raise InputError("empty batch")
    if y.min() < 0 or y.max() >= params.arch.num_classes:
        raise InputError(f"labels outside [0, {params.arch.num_classes})")
    if not (0.0 <= dropout_rate <= 0.7):
        raise ConfigurationError(f"dropout_rate {dropout_rate} outside [0, 0.7]")
    rng = np.random.default_rng(_seed_entropy(dropout_seed)) if dropout_rate > 0 else None
    loss, grads = _loss_and_grads(params, x, y, l2, dropout_rate, rng)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss ({loss}); check parameter scale and learning rate")
    return ParameterSet(params.arch, grads)


def _target_prob_dlogits(probs: np.ndarray, targets) -> np.ndarray:
    """d p_target / d logits rows for per-sample targets (int or array)."""
    b = probs.shape[0]
    t = np.full(b, targets, dtype=np.int64) if np.isscalar(targets) else np.asarray(targets)
    # d p_t / d z_j = p_t (delta_tj - p_j)
    pt = probs[np.arange(b), t][:, None]
    dlogits = -pt * probs
    dlogits[np.arange(b), t] += pt[:, 0]
    return dlogits


def _input_gradients_batch(params: ParameterSet, x: np.ndarray, targets) -> np.ndarray:
    """d p_target / d x for a batch of inputs, dropout disabled."""
    cache = _forward_batch(params, x)
    dlogits = _target_prob_dlogits(softmax(cache.logits), targets)
    _, dx = _backward(params, cache, dlogits, need_input_grad=True)
    return dx


def input_gradient(params: ParameterSet, x: np.ndarray, target_class: int) -> np.ndarray:
    """Gradient of the post-softmax score of target_class w.r.t. the input."""
    if not (0 <= target_class < params.arch.num_classes):
        raise InputError(f"target_class {target_class} outside [0, {params.arch.num_classes})")
    return _input_gradients_batch(params, x[None], target_class)[0]


class TrainResult(NamedTuple):
    params: ParameterSet
    test_accuracy: float
    diverged: bool


def train(arch: ArchitectureSpec, hparams, dataset, epochs: int, seed: int,
          batch_size: int = DEFAULT_BATCH_SIZE) -> TrainResult:
    """Train one classifier under a hyperparameter vector, deterministically.

    The seed controls weight initialization, mini-batch order, and dropout.
    A non-finite loss marks the run diverged; the last finite parameters are
    kept (low-accuracy models stay in the population). Test accuracy is
    evaluated on the dataset's fixed held-out split with dropout disabled.
    """
    if epochs < 1:
        raise ConfigurationError(f"epochs must be >= 1, got {epochs}")
    arch_eff = replace(arch, activation=hparams.activation)
    params = init_parameters(arch_eff, hparams.w0_type, hparams.w0_std,
                             hparams.b0_type, seed)
    opt = OptimizerState.create(hparams.optimizer, hparams.learning_rate, params)
    train_idx = dataset.train_indices(hparams.split_fraction)
    x_train = dataset.inputs[train_idx]
    y_train = dataset.labels[train_idx]
    order_rng = np.random.default_rng(_seed_entropy(seed, 1))
    drop_rng = np.random.default_rng(_seed_entropy(seed, 2))
    use_dropout = hparams.dropout > 0.0
    snapshot = params.copy()
    diverged = False
    for _ in range(epochs):
        perm = order_rng.permutation(len(y_train))
        for lo in range(0, len(y_train), batch_size):
            sel = perm[lo:lo + batch_size]
            loss, grads = _loss_and_grads(
                params, x_train[sel], y_train[sel], hparams.l2,
                hparams.dropout if use_dropout else 0.0,
                drop_rng if use_dropout else None)
            if not np.isfinite(loss):
                diverged = True
                params = snapshot
                break
            snapshot = params.copy()
            opt.apply(params, grads)
        if diverged:
            break
    x_test = dataset.inputs[dataset.test_idx]
    y_test = dataset.labels[dataset.test_idx]
    probs = predict_batch(params, x_test)
    acc = float(np.mean(np.argmax(probs, axis=1) == y_test))
    return TrainResult(params, acc, diverged)

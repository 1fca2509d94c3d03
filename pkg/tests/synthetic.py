"""Synthetic (H, Y, E) triples for validating the mediation machinery without
training anything. Both scenarios draw per-instance level signatures with a
normalized total between-level dispersion, so a random permutation of the
prediction column flattens the level structure instead of leaking
instance-specific scale."""

import numpy as np

LEVELS = np.array(["a", "b", "c"], dtype=object)


def _level_signatures(rng, n_instances, dim):
    sig = rng.normal(0, 1, (n_instances, 3, dim))
    sig -= sig.mean(axis=1, keepdims=True)
    sig /= np.sqrt((sig ** 2).sum(axis=(1, 2)))[:, None, None]
    return 3.0 * sig


def triples_explanation_mediated_by_prediction(seed, n_models=500, n_instances=40, dim=3):
    """E = g(Y) deterministically; H shapes Y, so permuting Y severs all of
    H's influence on E."""
    rng = np.random.default_rng(seed)
    levels = LEVELS[rng.integers(0, 3, n_models)]
    lv_idx = np.array([{"a": 0, "b": 1, "c": 2}[l] for l in levels])
    sig = _level_signatures(rng, n_instances, dim)
    y = sig[np.arange(n_instances)[None, :], lv_idx[:, None]] \
        + 0.15 * rng.normal(0, 1, (n_models, n_instances, dim))
    e = 1.0 / (1.0 + np.exp(-1.5 * y))
    return levels, y, e


def triples_explanation_direct_from_hparams(seed, n_models=500, n_instances=40, dim=3):
    """E depends only on H; Y is independent noise, so permuting Y changes
    nothing about the H->E relation."""
    rng = np.random.default_rng(seed)
    levels = LEVELS[rng.integers(0, 3, n_models)]
    lv_idx = np.array([{"a": 0, "b": 1, "c": 2}[l] for l in levels])
    sig = _level_signatures(rng, n_instances, dim)
    e = 0.8 * sig[np.arange(n_instances)[None, :], lv_idx[:, None]] \
        + 0.05 * rng.normal(0, 1, (n_models, n_instances, dim))
    y = rng.normal(0, 1, (n_models, n_instances, dim))
    return levels, y, e

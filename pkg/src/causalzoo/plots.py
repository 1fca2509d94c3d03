"""Static SVG figures: per-bucket scatter of prediction-effects against
explanation-effects, and violin summaries of effect distributions.

SVG output is made run-stable (fixed hash salt, no embedded date) so that
repeated pipeline runs emit identical artifacts.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "causalzoo"

import matplotlib.pyplot as plt
import numpy as np

_SVG_META = {"Date": None}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def scatter_effects_svg(path, pairs_by_bucket: dict, method: str, hparam_key: str) -> None:
    """One scatter panel per bucket: ITE_Y (x) vs ITE_E (y)."""
    buckets = sorted(pairs_by_bucket)
    n = max(len(buckets), 1)
    fig, axes = plt.subplots(1, n, figsize=(3.0 * n, 3.0), squeeze=False)
    for ax, b in zip(axes[0], buckets):
        ite_y, ite_e = pairs_by_bucket[b]
        ax.scatter(ite_y, ite_e, s=8, alpha=0.6, linewidths=0)
        ax.set_title(f"bucket {b} (n={len(ite_y)})", fontsize=9)
        ax.set_xlabel("effect on prediction")
        if b == buckets[0]:
            ax.set_ylabel("effect on explanation")
    fig.suptitle(f"{method} / {hparam_key}", fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def violin_effects_svg(path, values_by_method: dict, hparam_key: str) -> None:
    """Distribution of kernelized explanation effects per method."""
    methods = sorted(values_by_method)
    data = [np.asarray(values_by_method[m], dtype=float) for m in methods]
    fig, ax = plt.subplots(figsize=(2.0 + 1.4 * len(methods), 3.2))
    if any(len(d) for d in data):
        ax.violinplot([d for d in data if len(d)], showmedians=True)
    ax.set_xticks(range(1, len(methods) + 1))
    ax.set_xticklabels(methods, rotation=20, fontsize=8)
    ax.set_ylabel("kernelized effect")
    ax.set_title(f"explanation effects by method / {hparam_key}", fontsize=10)
    fig.tight_layout()
    _save(fig, path)

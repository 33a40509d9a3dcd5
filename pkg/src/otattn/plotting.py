"""SVG figures for the diagnostics."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# glyphs as paths so the SVG needs no fonts
plt.rcParams.update({"svg.fonttype": "path", "svg.hashsalt": "otattn", "figure.dpi": 100})


def _label(method: str, param: float) -> str:
    sym = "tau" if method == "sinkhorn" else "lr"
    return f"{method} {sym}={param:g}"


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def plot_sweep(rows: Sequence, path, raw: bool = False) -> Path:
    """Entropy and gradient-norm curves against the scaling factor, log-log."""
    curves: dict[tuple, list] = {}
    for r in rows:
        curves.setdefault((r.method, r.param), []).append(r)
    fig, (ax_h, ax_g) = plt.subplots(1, 2, figsize=(10, 4))
    for (method, param), pts in sorted(curves.items()):
        pts = sorted(pts, key=lambda r: r.factor)
        f = [r.factor for r in pts]
        style = "-" if method == "sinkhorn" else "--"
        # log axes cannot show exact zeros
        ax_h.plot(f, [max(r.entropy_norm, 1e-12) for r in pts], style, label=_label(method, param))
        g = [r.grad_norm_raw if raw else r.grad_norm_methodnorm for r in pts]
        ax_g.plot(f, [max(v, 1e-16) for v in g], style, label=_label(method, param))
    for ax in (ax_h, ax_g):
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("scaling factor")
        ax.grid(True, which="major", alpha=0.3)
    ax_h.set_ylabel("normalized entropy")
    ax_g.set_ylabel("entropy gradient norm" + ("" if raw else " (per-method max = 1)"))
    ax_g.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_gap(rows: Sequence, path) -> Path:
    it = [r.mesh_iterations for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(it, [max(r.gap_warm, 1e-18) for r in rows], "o-", label="warm start")
    ax.plot(it, [max(r.gap_cold, 1e-18) for r in rows], "s--", label="cold start")
    ax.set_yscale("log")
    ax.set_xlabel("MESH iterations")
    ax.set_ylabel("mean abs. gap to converged plan")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_training(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([r["epoch"] for r in rows], [r["eval_rmse_normalized"] for r in rows], "o-")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("normalized RMSE")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)

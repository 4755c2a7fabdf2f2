"""Figures written next to the CSV outputs of the command line tools."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curves(rows, path, title=None):
    """Log-scale loss terms against iteration from run-log rows (dicts)."""
    if not rows:
        return None
    skip = {"iter", "lr", "wall_time"}
    keys = [k for k in rows[0] if k not in skip]
    it = np.array([r["iter"] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in keys:
        y = np.array([float(r[k]) for r in rows])
        ax.plot(it, np.maximum(y, 1e-12), label=k, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bench(rows, path):
    """Median time per call against vertex count, one line per formulation and width."""
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    groups = sorted({(r["formulation"], r["C_in"], r["C_out"]) for r in rows})
    for form, ci, co in groups:
        sel = sorted((r for r in rows if (r["formulation"], r["C_in"], r["C_out"])
                      == (form, ci, co)), key=lambda r: r["N"])
        ax.plot([r["N"] for r in sel], [r["median_ns"] for r in sel], marker="o",
                label=f"{form} C={ci}->{co}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("vertices N")
    ax.set_ylabel("median ns per call")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_level_counts(stats, path):
    """Dual-graph vertices and edges per hierarchy level from build stats."""
    levels = sorted(stats["levels"], key=int)
    verts = [stats["levels"][k]["vertices"] for k in levels]
    edges = [sum(stats["levels"][k]["edges"].values()) for k in levels]
    x = np.arange(len(levels))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.2, verts, 0.4, label="vertices")
    ax.bar(x + 0.2, edges, 0.4, label="directed edges")
    ax.set_xticks(x, [f"level {k}" for k in levels])
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_field_slice(fn, path, n=128, axis=2, offset=0.0):
    """Signed field on an axis-aligned slice, zero contour overlaid."""
    t = np.linspace(-0.5, 0.5, n)
    A, B = np.meshgrid(t, t, indexing="ij")
    pts = np.zeros((n * n, 3))
    other = [k for k in range(3) if k != axis]
    pts[:, other[0]] = A.ravel()
    pts[:, other[1]] = B.ravel()
    pts[:, axis] = offset
    v = np.asarray(fn(pts)).reshape(n, n)
    lim = np.abs(v).max() or 1.0
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(v.T, origin="lower", extent=(-0.5, 0.5, -0.5, 0.5), cmap="RdBu_r",
                   vmin=-lim, vmax=lim)
    ax.contour(t, t, v.T, levels=[0.0], colors="k", linewidths=1)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

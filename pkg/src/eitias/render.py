"""Field renderings and report figures.

Conductivity fields are written as standalone SVG documents with one polygon
per triangle and a color-scale legend, so the output is self-contained and
diffable.  Trace, benchmark and comparison figures go through matplotlib to
PNG files next to the delimited output.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib import colormaps

from .errors import ValidationError
from .fileio import atomic_write_text
from .mesh import Mesh

_LEGEND_STEPS = 64


def _color_hex(cmap, x: float) -> str:
    r, g, b, _ = cmap(float(np.clip(x, 0.0, 1.0)))
    return f"#{int(round(r * 255)):02x}{int(round(g * 255)):02x}{int(round(b * 255)):02x}"


def field_svg(
    mesh: Mesh,
    values: np.ndarray,
    value_range: tuple[float, float] | None = None,
    colormap: str = "viridis",
    size: int = 640,
    title: str = "",
) -> str:
    """Render per-element values on the tessellation as an SVG string.

    Linear color map over [min, max] of the values unless a range is pinned;
    one filled polygon per triangle plus a vertical legend bar with the range
    labels.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.shape[0] != mesh.num_triangles:
        raise ValidationError("need one value per mesh element")
    lo, hi = value_range if value_range is not None else (values.min(), values.max())
    if hi <= lo:
        hi = lo + 1.0
    cmap = colormaps[colormap]
    span = hi - lo

    margin = 0.05 * size
    legend_w = 0.16 * size
    scale = (size - 2 * margin) / 2.0

    def xy(p):
        return (margin + (p[0] + 1.0) * scale, margin + (1.0 - p[1]) * scale)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + legend_w:.0f}" '
        f'height="{size:.0f}" viewBox="0 0 {size + legend_w:.0f} {size:.0f}">',
        f'<rect width="{size + legend_w:.0f}" height="{size:.0f}" fill="white"/>',
    ]
    if title:
        lines.append(
            f'<text x="{margin:.1f}" y="{0.6 * margin:.1f}" font-size="{0.035 * size:.0f}" '
            f'font-family="sans-serif">{title}</text>'
        )
    coords = mesh.vertices[mesh.triangles]  # (n_t, 3, 2)
    for tri, val in zip(coords, values):
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(p) for p in tri))
        lines.append(f'<polygon points="{pts}" fill="{_color_hex(cmap, (val - lo) / span)}"/>')

    # legend: vertical gradient bar with min/max labels
    bar_x = size + 0.25 * legend_w
    bar_w = 0.25 * legend_w
    bar_top, bar_bot = margin, size - margin
    step_h = (bar_bot - bar_top) / _LEGEND_STEPS
    for k in range(_LEGEND_STEPS):
        frac = 1.0 - (k + 0.5) / _LEGEND_STEPS
        y = bar_top + k * step_h
        lines.append(
            f'<rect x="{bar_x:.1f}" y="{y:.2f}" width="{bar_w:.1f}" height="{step_h + 0.5:.2f}" '
            f'fill="{_color_hex(cmap, frac)}"/>'
        )
    font = 0.03 * size
    lines.append(
        f'<text x="{bar_x + bar_w + 4:.1f}" y="{bar_top + font:.1f}" font-size="{font:.0f}" '
        f'font-family="sans-serif">{hi:.4g}</text>'
    )
    lines.append(
        f'<text x="{bar_x + bar_w + 4:.1f}" y="{bar_bot:.1f}" font-size="{font:.0f}" '
        f'font-family="sans-serif">{lo:.4g}</text>'
    )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def save_field_svg(path, mesh: Mesh, values, diverging: bool = False, **kwargs) -> None:
    """Write the field SVG; diverging mode centers a symmetric range at zero."""
    if diverging:
        values = np.asarray(values, dtype=float)
        top = float(np.abs(values).max()) or 1.0
        kwargs.setdefault("value_range", (-top, top))
        kwargs.setdefault("colormap", "RdBu_r")
    atomic_write_text(path, field_svg(mesh, values, **kwargs))


def save_field_figure(path, mesh: Mesh, values, title: str = "", colormap: str = "viridis"):
    """Matplotlib rendering of the same field (report-path PNG)."""
    fig, ax = plt.subplots(figsize=(5.2, 4.2))
    tpc = ax.tripcolor(
        mesh.vertices[:, 0],
        mesh.vertices[:, 1],
        mesh.triangles,
        facecolors=np.asarray(values, dtype=float),
        cmap=colormap,
    )
    fig.colorbar(tpc, ax=ax)
    ax.set_aspect("equal")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_trace_figure(path, trace) -> None:
    """Objective decay and variance-change curves for one reconstruction."""
    its = [rec.index for rec in trace]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    gz = [rec.gibbs_after_zeta.total for rec in trace if rec.gibbs_after_zeta]
    gt = [rec.gibbs_after_theta.total for rec in trace if rec.gibbs_after_theta]
    if gz and gt:
        ax1.plot(its, gz, "o-", label="after increment update", ms=3)
        ax1.plot(its, gt, "s-", label="after variance update", ms=3)
        ax1.set_yscale("log")
        ax1.legend(fontsize=8)
    ax1.set_xlabel("outer iteration")
    ax1.set_ylabel("objective")
    ax2.semilogy(its, [rec.delta_theta_rel for rec in trace], "o-", ms=3)
    ax2.set_xlabel("outer iteration")
    ax2.set_ylabel("relative variance change")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_bench_figures(path_times, path_dims, results: dict) -> None:
    """Cumulative inner-solve times and Krylov dimensions per backend.

    `results` maps backend name to the list of per-iteration inner reports.
    """
    fig, ax = plt.subplots(figsize=(5.6, 3.8))
    for backend, per_iter in results.items():
        times = [sum(r.wall_time_ms for r in reports) for reports in per_iter]
        ax.plot(range(1, len(times) + 1), np.cumsum(times), "o-", label=backend, ms=3)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("cumulative solve time [ms]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path_times, dpi=130)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5.6, 3.8))
    for backend, per_iter in results.items():
        if not any(r.iterations for reports in per_iter for r in reports):
            continue
        dims = [max(r.iterations for r in reports) for reports in per_iter]
        ax.plot(range(1, len(dims) + 1), dims, "o-", label=backend, ms=3)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("Krylov dimension")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path_dims, dpi=130)
    plt.close(fig)


def save_compare_figure(path, delta_g: np.ndarray) -> None:
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(range(1, len(delta_g) + 1), 100.0 * np.asarray(delta_g), "o-", ms=3)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("objective gap [%]")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)

"""Optional PNG figures for runs (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.collections import PolyCollection  # noqa: E402

from .scenarios import binary_projection, cell_means  # noqa: E402


def plot_cell_field(ax, mesh, values, vmin=-1.0, vmax=1.0, cmap="coolwarm", title=None):
    polys = [mesh.vertices[c] for c in mesh.cells]
    coll = PolyCollection(polys, array=values, cmap=cmap, edgecolors="none")
    coll.set_clim(vmin, vmax)
    ax.add_collection(coll)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    return coll


def plot_diagnostics(rows, path) -> Path:
    t = [r.time for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.4))
    a1.plot(t, [r.energy for r in rows])
    a1.set_xlabel("t")
    a1.set_ylabel("energy")
    m0 = rows[0].mass
    a2.plot(t, [r.mass - m0 for r in rows])
    a2.set_xlabel("t")
    a2.set_ylabel("mass - initial mass")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_state(scenario, c, path, title: str = "") -> Path:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 4))
    coll = plot_cell_field(a1, scenario.mesh, cell_means(scenario.assembler, c), title="cell mean of c")
    plot_cell_field(a2, scenario.mesh, binary_projection(scenario.assembler, c), title="binary projection")
    fig.colorbar(coll, ax=[a1, a2], shrink=0.8)
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_run_figures(scenario, c, rows, out) -> list[Path]:
    out = Path(out)
    return [
        plot_diagnostics(rows, out / "diagnostics.png"),
        plot_state(scenario, scenario.initial.c, out / "initial.png", "t = 0"),
        plot_state(scenario, c, out / "final.png", f"t = {rows[-1].time:.4g}"),
    ]

"""Command-line driver: run configuration files, VTK and CSV output, run summaries."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assembly import AssemblyError
from .c1space import ElementError, UnsupportedOrder
from .polymesh import MeshError, PolyMesh, write_polymesh
from .scenarios import (
    PRESETS,
    ConfigError,
    ProblemConfig,
    binary_projection,
    build_scenario,
    cell_means,
    preset,
    recovery_fraction,
    shape_metrics,
)
from .timesolver import DiagnosticsRow, SolverError, SolverOptions, run_time_loop

log = logging.getLogger(__name__)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats4(text: str) -> tuple:
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if len(vals) != 4:
        raise ValueError("expected four numbers x0, x1, y0, y1")
    return vals


def _positive(name):
    def check(v):
        if not v > 0:
            raise ConfigError(f"{name} must be positive")
        return v
    return check


# key -> (parser, default, help); defaults of None are taken from the scenario preset
SCHEMA = {
    "scenario": (str, None, f"preset name ({', '.join(PRESETS)})"),
    "variant": (str.upper, None, "ACH or CHI (overrides the preset)"),
    "gamma": (float, None, "interface parameter"),
    "Pe": (float, None, "Peclet number (ACH)"),
    "lambda0": (float, None, "fidelity strength outside the damaged region (CHI)"),
    "tau": (float, None, "time step"),
    "n_steps": (int, None, "number of time steps"),
    "mesh": (str.lower, "quad", "mesh family: quad, tri or cvt"),
    "n": (int, 32, "mesh resolution (cells per side; cvt uses n*n cells)"),
    "k": (int, 2, "polynomial order, 2 or 3"),
    "datum": (str.upper, None, "initial datum kind (overrides the preset)"),
    "amplitude": (float, None, "spinodal noise amplitude"),
    "convection": (_bool, None, "include the convective field (ACH)"),
    "seed": (int, 1, "random seed for meshes and noise"),
    "image": (str, None, "PGM image for datum = IMAGE"),
    "threshold": (float, None, "gray threshold for PGM images, in [0, 1]"),
    "damage": (_floats4, None, "damaged rectangle x0,x1,y0,y1 for image runs"),
    "out": (str, "run", "output directory"),
    "snapshot_every": (int, 0, "VTK snapshot cadence in steps (0: first and last only)"),
    "solver": (str.lower, "direct", "linear solver: direct or gmres"),
    "preconditioner": (str.lower, "bjacobi", "GMRES preconditioner: bjacobi, ilu or none"),
    "newton_tol": (float, 1e-6, "relative Newton tolerance"),
    "linear_tol": (float, 1e-8, "relative GMRES tolerance"),
    "max_newton": (int, 25, "Newton iteration cap"),
    "line_search": (_bool, False, "backtracking on the residual norm"),
    "max_bisections": (int, 4, "step bisection depth after a Newton failure"),
    "repro": (_bool, False, "reproducibility mode"),
    "figures": (_bool, False, "also render PNG figures"),
}

PROBLEM_KEYS = {f.name for f in dataclasses.fields(ProblemConfig)}


@dataclass(frozen=True)
class RunConfig:
    scenario: str | None
    problem: ProblemConfig
    out: Path
    snapshot_every: int
    solver: SolverOptions
    repro: bool
    figures: bool


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into typed values; errors carry line numbers."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def build_run_config(values: dict) -> RunConfig:
    """Apply defaults and validate a dictionary of typed config values."""
    unknown = set(values) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r}")
    merged = {k: (values[k] if k in values else d) for k, (_, d, _) in SCHEMA.items()}
    scenario = merged["scenario"]
    if scenario is None and merged["variant"] is None:
        raise ConfigError("missing required key 'scenario' (or an explicit 'variant')")
    overrides = {k: merged[k] for k in PROBLEM_KEYS if k in merged and merged[k] is not None}
    for key in ("tau", "gamma", "n"):
        if key in overrides and not overrides[key] > 0:
            raise ConfigError(f"{key} must be positive")
    if merged["solver"] not in ("direct", "gmres"):
        raise ConfigError(f"solver must be 'direct' or 'gmres', got {merged['solver']!r}")
    if merged["preconditioner"] not in ("bjacobi", "ilu", "none"):
        raise ConfigError(f"unknown preconditioner {merged['preconditioner']!r}")
    if merged["snapshot_every"] < 0:
        raise ConfigError("snapshot_every must be non-negative")
    problem = preset(scenario, **overrides) if scenario else ProblemConfig(**overrides)
    if merged["repro"] and merged["solver"] != "direct":
        log.info("reproducibility mode: using the direct solver")
        merged["solver"] = "direct"
    solver = SolverOptions(
        tol_rel=_positive("newton_tol")(merged["newton_tol"]),
        max_iters=merged["max_newton"],
        linear=merged["solver"],
        preconditioner=merged["preconditioner"],
        linear_tol=_positive("linear_tol")(merged["linear_tol"]),
        line_search=merged["line_search"],
        max_bisections=merged["max_bisections"],
    )
    return RunConfig(scenario, problem, Path(merged["out"]), merged["snapshot_every"], solver,
                     merged["repro"], merged["figures"])


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (optional) and apply command-line overrides on top."""
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        values = parse_config_text(text, str(p))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_run_config(values)


# --------------------------------------------------------------------------
# writers

def _g(x: float) -> str:
    return "%.17g" % x


def write_vtk_snapshot(mesh: PolyMesh, point_values, cell_fields: dict, path, title: str = "c1vem") -> Path:
    """Legacy ASCII VTK unstructured grid with polygon cells."""
    path = Path(path)
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines.extend(f"{_g(x)} {_g(y)} 0" for x, y in mesh.vertices)
    size = sum(len(c) + 1 for c in mesh.cells)
    lines.append(f"CELLS {mesh.n_cells} {size}")
    lines.extend(" ".join(map(str, [len(c), *c])) for c in mesh.cells)
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines.extend(["7"] * mesh.n_cells)
    lines.append(f"POINT_DATA {mesh.n_vertices}")
    lines.append("SCALARS c double 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(_g(v) for v in point_values)
    if cell_fields:
        lines.append(f"CELL_DATA {mesh.n_cells}")
        for name, vals in cell_fields.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(_g(v) for v in vals)
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None
    return path


def write_state_snapshot(scenario, c, path, step: int, t: float) -> Path:
    full = scenario.assembler.dofmap.expand(c)
    fields = {
        "c_mean": cell_means(scenario.assembler, c),
        "binary": binary_projection(scenario.assembler, c),
    }
    return write_vtk_snapshot(scenario.mesh, full[0:3 * scenario.mesh.n_vertices:3], fields, path,
                              f"c1vem step {step} time {_g(t)}")


CSV_HEADER = "step,time,mass,energy,newton_its,linear_its_total,residual_final"


def format_row(r: DiagnosticsRow) -> str:
    return f"{r.step},{_g(r.time)},{_g(r.mass)},{_g(r.energy)},{r.newton_its},{r.linear_its_total},{_g(r.residual_final)}"


def write_summary(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in items.items()))


# --------------------------------------------------------------------------
# driver

MODULE_OF = (
    (MeshError, "polymesh"),
    (UnsupportedOrder, "c1space"),
    (ElementError, "c1space"),
    (AssemblyError, "assembly"),
    (SolverError, "timesolver"),
    (ConfigError, "config"),
    (OSError, "io"),
)


def module_tag(exc: BaseException) -> str:
    for kind, tag in MODULE_OF:
        if isinstance(exc, kind):
            return tag
    return "internal"


def run(config: RunConfig) -> dict:
    """Execute a run and write its artifacts; returns the summary items."""
    out = config.out
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    sc = build_scenario(config.problem)
    mesh_path = out / "mesh.polymesh"
    write_polymesh(sc.mesh, mesh_path)
    csv_path = out / "diagnostics.csv"
    snapshots = []
    n_steps = config.problem.n_steps
    every = config.snapshot_every

    csv = open(csv_path, "w", newline="\n")
    csv.write(CSV_HEADER + "\n")

    def on_step(state, row):
        csv.write(format_row(row) + "\n")
        if (every and state.n % every == 0) or state.n in (0, n_steps):
            p = out / f"snapshot_{state.n:06d}.vtk"
            if p not in snapshots:
                write_state_snapshot(sc, state.c, p, state.n, state.t)
                snapshots.append(p)

    try:
        state, rows, report = run_time_loop(sc.problem, sc.initial, n_steps, config.solver, [on_step])
    finally:
        csv.close()
    summary = {
        "status": "ok",
        "scenario": config.scenario or "custom",
        "variant": config.problem.variant,
        "mesh": f"{config.problem.mesh} n={config.problem.n}",
        "k": config.problem.k,
        "cells": sc.mesh.n_cells,
        "vertices": sc.mesh.n_vertices,
        "dofs": sc.assembler.dofmap.n_full,
        "free_dofs": sc.assembler.n_free,
        "tau": _g(config.problem.tau),
        "n_steps": n_steps,
        "final_time": _g(state.t),
        "final_mass": _g(rows[-1].mass),
        "final_energy": _g(rows[-1].energy),
        "avg_newton_its": _g(report.average_newton),
        "bisected_steps": sum(1 for s in report.substeps if s > 1),
    }
    if config.problem.variant == "ACH":
        m = shape_metrics(sc.assembler, state.c)
        summary["isoperimetric_ratio"] = _g(m.ratio) if m else "absent"
    elif sc.truth is not None:
        summary["recovered_fraction"] = _g(recovery_fraction(sc, state.c))
    artifacts = [mesh_path, csv_path, *snapshots]
    if config.figures:
        from .plotting import render_run_figures
        artifacts += render_run_figures(sc, state.c, rows, out)
    summary["wall_time"] = "%.3f" % (time.perf_counter() - t0)
    summary["artifacts"] = " ".join(p.name for p in artifacts)
    write_summary(out / "summary.txt", summary)
    return summary


def _help_epilog() -> str:
    lines = ["config keys (key = value, one per line; '#' starts a comment):"]
    for key, (_, default, text) in SCHEMA.items():
        shown = "preset" if default is None else default
        lines.append(f"  {key:<15} {text} [default: {shown}]")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c1vem", description="C1 virtual elements for Cahn-Hilliard problems")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a scenario", epilog=_help_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--scenario", choices=sorted(PRESETS))
    p.add_argument("--mesh", choices=["quad", "tri", "cvt"])
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int, choices=[2, 3])
    p.add_argument("--tau", type=float)
    p.add_argument("--n-steps", type=int, dest="n_steps")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--solver", choices=["direct", "gmres"])
    p.add_argument("--repro", action="store_true", default=None)
    p.add_argument("--figures", action="store_true", default=None, help="render PNG figures next to the data")
    p.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("presets", help="list scenario presets")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        for name, values in PRESETS.items():
            print(name, " ".join(f"{k}={v}" for k, v in values.items() if v is not None))
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in ("scenario", "mesh", "n", "k", "tau", "n_steps", "out", "seed",
                                                "solver", "repro", "figures")}
    out = None
    try:
        config = parse_config(args.config, overrides)
        out = config.out
        summary = run(config)
    except Exception as exc:  # reported with a module tag and a nonzero status
        tag = module_tag(exc)
        print(f"error[{tag}] {exc}", file=sys.stderr)
        if out is not None:
            try:
                out.mkdir(parents=True, exist_ok=True)
                write_summary(out / "summary.txt", {"status": "failed", "module": tag,
                                                    "reason": str(exc).replace("\n", " ")})
            except OSError:
                pass
        return 2 if tag == "config" else 1
    for key in ("status", "final_mass", "final_energy", "avg_newton_its", "wall_time", "artifacts"):
        print(f"{key} = {summary[key]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Advective Cahn-Hilliard (ACH) and Cahn-Hilliard inpainting (CHI) scenarios.

Discontinuous data are turned into DoF vectors with a symmetric rule: vertex
values are the phase value at the vertex (the mean of the two phases, 0, on
a jump set) and every derivative DoF is 0.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import forms
from .assembly import Assembler
from .c1space import global_dof_count
from .polymesh import PolyMesh, Region, make_mesh, tag_inpainting_region
from .timesolver import SemilinearProblem, State

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


VARIANTS = ("ACH", "CHI")
DATUM_KINDS = ("CROSS", "SPINODAL_DISK", "STRIPES_DAMAGED", "CROSS_DAMAGED", "CIRCLE_DAMAGED", "IMAGE")


@dataclass(frozen=True)
class ProblemConfig:
    variant: str = "ACH"
    gamma: float = 0.01
    Pe: float | None = 100.0
    lambda0: float | None = None
    tau: float = 2e-5
    n_steps: int = 50
    mesh: str = "quad"
    n: int = 32
    k: int = 2
    datum: str = "CROSS"
    amplitude: float = 0.05
    convection: bool = True
    output_every: int = 0
    seed: int = 1
    image: str | None = None
    threshold: float = 0.5
    damage: tuple | None = None   # (x0, x1, y0, y1) for image runs

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 < self.gamma < 0.5:
            raise ConfigError("gamma must lie in (0, 0.5)")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.n_steps < 0:
            raise ConfigError("n_steps must be non-negative")
        if self.variant == "ACH" and (self.Pe is None or not self.Pe > 0):
            raise ConfigError("ACH runs need a positive Pe")
        if self.variant == "CHI" and (self.lambda0 is None or not self.lambda0 > 0):
            raise ConfigError("CHI runs need a positive lambda0")
        if self.datum not in DATUM_KINDS:
            raise ConfigError(f"datum must be one of {DATUM_KINDS}, got {self.datum!r}")
        if self.datum == "IMAGE" and not self.image:
            raise ConfigError("datum IMAGE needs an image path")
        if self.k not in (2, 3):
            raise ConfigError(f"k must be 2 or 3, got {self.k}")

    def replace(self, **kw) -> "ProblemConfig":
        return dataclasses.replace(self, **kw)


PRESETS = {
    "test2-cross": dict(variant="ACH", gamma=0.01, Pe=100.0, datum="CROSS"),
    "test3-spinodal": dict(variant="ACH", gamma=0.01, Pe=100.0, datum="SPINODAL_DISK"),
    "test4-stripes": dict(variant="CHI", gamma=0.01, Pe=None, lambda0=50000.0, datum="STRIPES_DAMAGED"),
    "test5-cross-inpaint": dict(variant="CHI", gamma=0.01, Pe=None, lambda0=50000.0, datum="CROSS_DAMAGED"),
    "test6-circle": dict(variant="CHI", gamma=0.01, Pe=None, lambda0=50000.0, datum="CIRCLE_DAMAGED"),
}


def preset(name: str, **overrides) -> ProblemConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; available: {', '.join(PRESETS)}") from None
    return ProblemConfig(**{**base, **overrides})


# --------------------------------------------------------------------------
# convective field

@dataclass(frozen=True)
class ConvectiveField:
    """Rotation about (1/2, 1/2) damped by f(r) = (1 + tanh(beta (1/2 - eps - r))) / 2."""

    beta: float = 200.0
    eps: float = 0.1

    def profile(self, r):
        return 0.5 * (1.0 + np.tanh(self.beta * (0.5 - self.eps - r)))

    def __call__(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        x, y = p[:, 0], p[:, 1]
        f = self.profile(np.hypot(x - 0.5, y - 0.5))
        return np.column_stack([f * (2.0 * y - 1.0), f * (1.0 - 2.0 * x)])


def zero_field(points) -> np.ndarray:
    return np.zeros((len(np.atleast_2d(points)), 2))


# --------------------------------------------------------------------------
# phase geometries: level(p) > 0 inside the +1 phase

def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.hypot(*(p - a - t[:, None] * ab).T)


@dataclass(frozen=True)
class Shape:
    kind: str
    params: tuple

    def level(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        x, y = p[:, 0] - 0.5, p[:, 1] - 0.5
        if self.kind == "cross":
            w, L = self.params
            horiz = np.minimum(w / 2 - np.abs(y), L / 2 - np.abs(x))
            vert = np.minimum(w / 2 - np.abs(x), L / 2 - np.abs(y))
            return np.maximum(horiz, vert)
        if self.kind == "disk":
            (r,) = self.params
            return r - np.hypot(x, y)
        if self.kind == "stripes":
            out = np.full(len(p), -np.inf)
            for a, b in self.params:
                out = np.maximum(out, np.minimum(p[:, 0] - a, b - p[:, 0]))
            return out
        raise ValueError(f"unknown shape {self.kind!r}")

    def phase(self, points, tol: float = 1e-12) -> np.ndarray:
        """+1 inside, -1 outside, 0 on the jump set."""
        s = self.level(points)
        return np.where(s > tol, 1.0, np.where(s < -tol, -1.0, 0.0))

    def interface_distance(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "disk":
            return np.abs(self.level(p))
        if self.kind == "stripes":
            lines = np.array([v for ab in self.params for v in ab])
            return np.abs(p[:, 0:1] - lines[None, :]).min(axis=1)
        w, L = self.params
        a, b = w / 2, L / 2
        outline = np.array([(a, a), (b, a), (b, -a), (a, -a), (a, -b), (-a, -b), (-a, -a), (-b, -a),
                            (-b, a), (-a, a), (-a, b), (a, b)]) + 0.5
        d = np.full(len(p), np.inf)
        for i in range(len(outline)):
            d = np.minimum(d, _segment_distance(p, outline[i], outline[(i + 1) % len(outline)]))
        return d


CROSS = Shape("cross", (0.2, 0.8))
STRIPES = Shape("stripes", ((0.2, 0.35), (0.65, 0.8)))
CIRCLE = Shape("disk", (0.3,))
BAND = (0.0, 1.0, 0.4375, 0.5625)
CENTER_SQUARE = (0.375, 0.625, 0.375, 0.625)

DAMAGED = {
    "STRIPES_DAMAGED": (STRIPES, BAND),
    "CROSS_DAMAGED": (CROSS, CENTER_SQUARE),
    "CIRCLE_DAMAGED": (CIRCLE, BAND),
}


def _in_rect(points, rect, closed: bool) -> np.ndarray:
    """Points in the rectangle. With ``closed=False`` points on sides interior
    to the unit square are left out; sides on its boundary still count."""
    x0, x1, y0, y1 = rect
    p = np.atleast_2d(points)
    e = 1e-12
    if closed:
        return (p[:, 0] >= x0 - e) & (p[:, 0] <= x1 + e) & (p[:, 1] >= y0 - e) & (p[:, 1] <= y1 + e)
    lo = np.array([-e if x0 <= 0.0 else x0 + e, -e if y0 <= 0.0 else y0 + e])
    hi = np.array([1.0 + e if x1 >= 1.0 else x1 - e, 1.0 + e if y1 >= 1.0 else y1 - e])
    return np.all((p >= lo) & (p <= hi), axis=1)


def damage_rects(config: ProblemConfig) -> list:
    if config.datum in DAMAGED:
        return [DAMAGED[config.datum][1]]
    if config.datum == "IMAGE" and config.damage:
        return [tuple(config.damage)]
    return []


# --------------------------------------------------------------------------
# images

def read_pgm(path) -> np.ndarray:
    """Grayscale PGM (P2 or P5) as floats in [0, 1]; row 0 is the top row."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic = tokens[0]
    w, h, maxval = (int(t) for t in tokens[1:])
    if magic == b"P5":
        pos += 1
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        arr = np.frombuffer(data[pos:], dtype=dtype, count=w * h)
    elif magic == b"P2":
        body = data[pos:].decode("ascii")
        body = "\n".join(line.split("#", 1)[0] for line in body.splitlines())
        arr = np.array(body.split(), dtype=float)[: w * h]
    else:
        raise ConfigError(f"{path}: not a PGM file (magic {magic!r})")
    if arr.size != w * h:
        raise ConfigError(f"{path}: expected {w * h} pixels, found {arr.size}")
    return arr.reshape(h, w).astype(float) / maxval


def image_phase(img: np.ndarray, points, threshold: float = 0.5) -> np.ndarray:
    """+1 where the pixel under each point is brighter than ``threshold``, else -1."""
    h, w = img.shape
    p = np.atleast_2d(points)
    col = np.clip((p[:, 0] * w).astype(int), 0, w - 1)
    row = np.clip(((1.0 - p[:, 1]) * h).astype(int), 0, h - 1)
    return np.where(img[row, col] > threshold, 1.0, -1.0)


# --------------------------------------------------------------------------
# data on a mesh

def _vertex_data(mesh: PolyMesh, k: int, values: np.ndarray) -> np.ndarray:
    """Full DoF vector with the given vertex values and zero derivative DoFs."""
    out = np.zeros(global_dof_count(mesh.n_vertices, mesh.n_edges, mesh.n_cells, k))
    out[0:3 * mesh.n_vertices:3] = values
    return out


def truth_cells(config: ProblemConfig, mesh: PolyMesh) -> np.ndarray:
    """Undamaged image per cell, +-1 at the centroid (ties go to +1)."""
    if config.datum == "IMAGE":
        return image_phase(read_pgm(config.image), mesh.centroid, config.threshold)
    shape = DAMAGED[config.datum][0] if config.datum in DAMAGED else CROSS
    return np.where(shape.phase(mesh.centroid) >= 0, 1.0, -1.0)


def make_initial_datum(config: ProblemConfig, mesh: PolyMesh) -> np.ndarray:
    """Full (unconstrained) DoF vector of the initial datum."""
    kind = config.datum
    if kind == "CROSS":
        values = CROSS.phase(mesh.vertices)
    elif kind == "SPINODAL_DISK":
        rng = np.random.default_rng(config.seed)
        noise = rng.uniform(-config.amplitude, config.amplitude, mesh.n_vertices)
        inside = np.hypot(*(mesh.vertices - 0.5).T) < 0.35
        values = np.where(inside, noise, 0.0)
    elif kind in DAMAGED:
        shape, rect = DAMAGED[kind]
        values = shape.phase(mesh.vertices)
        values[_in_rect(mesh.vertices, rect, closed=False)] = 0.0
    elif kind == "IMAGE":
        f = truth_cells(config, mesh)
        sums = np.zeros(mesh.n_vertices)
        counts = np.zeros(mesh.n_vertices)
        for c, loop in enumerate(mesh.cells):
            sums[loop] += f[c]
            counts[loop] += 1
        values = sums / counts
        for rect in damage_rects(config):
            values[_in_rect(mesh.vertices, rect, closed=False)] = 0.0
    else:
        raise ConfigError(f"unknown datum {kind!r}")
    return _vertex_data(mesh, config.k, values)


def build_mesh(config: ProblemConfig) -> PolyMesh:
    rects = damage_rects(config)
    mesh = make_mesh(config.mesh, config.n, seed=config.seed, conform_to=rects or None)
    if config.variant == "CHI":
        def mask(p):
            out = np.zeros(len(p), dtype=bool)
            for r in rects:
                out |= _in_rect(p, r, closed=True)
            return out
        mesh = tag_inpainting_region(mesh, mask)
    return mesh


# --------------------------------------------------------------------------
# problems

@dataclass
class Scenario:
    config: ProblemConfig
    mesh: PolyMesh
    assembler: Assembler
    problem: SemilinearProblem
    initial: State
    truth: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _static_forms(assembler: Assembler):
    return [forms.element_forms(s) for s in assembler.spaces]


def build_ach_problem(config: ProblemConfig, assembler: Assembler, u=None) -> SemilinearProblem:
    if config.Pe is None:
        raise ConfigError("ACH runs need Pe")
    ef = _static_forms(assembler)
    M = assembler.matrix_from_cells([e.M for e in ef])
    A = assembler.matrix_from_cells([e.A_d2 for e in ef])
    a = config.gamma ** 2 / config.Pe
    data = a * A.data
    if config.convection:
        field_ = ConvectiveField() if u is None else u
        B = assembler.matrix_from_cells([forms.convection(s, field_) for s in assembler.spaces])
        data = data + B.data
    L = assembler.csr(data)
    return SemilinearProblem(assembler, M, L, np.zeros(assembler.n_free), 1.0 / config.Pe, config.tau,
                             energy_weights=(1.0, config.gamma ** 2))


def fidelity_weights(config: ProblemConfig, mesh: PolyMesh) -> np.ndarray:
    if np.any(mesh.tags == Region.UNTAGGED):
        c = int(np.flatnonzero(mesh.tags == Region.UNTAGGED)[0])
        raise ConfigError(f"cell {c} has no inpainting tag")
    return np.where(mesh.tags == Region.OUTSIDE_D, config.lambda0, 0.0)


def build_chi_problem(config: ProblemConfig, assembler: Assembler, f_cells: np.ndarray) -> SemilinearProblem:
    """CHI step operator.

    The fidelity form enters with the sign that pulls ``c`` towards ``f``:
    ``R = M (c - c_old)/tau + gamma A c + r(c)/gamma - l(f; c)``.
    """
    if config.lambda0 is None:
        raise ConfigError("CHI runs need lambda0")
    mesh = assembler.mesh
    lam = fidelity_weights(config, mesh)
    ef = _static_forms(assembler)
    M = assembler.matrix_from_cells([e.M for e in ef])
    A = assembler.matrix_from_cells([e.A_d2 for e in ef])
    # -l(f; c) = lam M_c c - lam f int Pi0 phi
    Lam = assembler.matrix_from_cells([-forms.fidelity_jacobian(s, f_cells[s.cell], lam[s.cell])
                                       for s in assembler.spaces])
    F = assembler.vector_from_cells([forms.fidelity_residual(s, f_cells[s.cell], lam[s.cell], np.zeros(s.nd))
                                     for s in assembler.spaces])
    L = assembler.csr(config.gamma * A.data + Lam.data)
    return SemilinearProblem(assembler, M, L, F, 1.0 / config.gamma, config.tau,
                             energy_weights=(1.0 / config.gamma, config.gamma))


def build_scenario(config: ProblemConfig, mesh: PolyMesh | None = None) -> Scenario:
    mesh = build_mesh(config) if mesh is None else mesh
    assembler = Assembler(mesh, config.k)
    c0 = assembler.dofmap.restrict(make_initial_datum(config, mesh))
    truth = None
    if config.variant == "ACH":
        problem = build_ach_problem(config, assembler)
    else:
        truth = truth_cells(config, mesh)
        problem = build_chi_problem(config, assembler, truth)
    return Scenario(config, mesh, assembler, problem, State(c0), truth)


# --------------------------------------------------------------------------
# post-processing

def cell_means(assembler: Assembler, c: np.ndarray) -> np.ndarray:
    integral, _, _ = assembler.cell_integrals(c)
    return integral / assembler.mesh.area


def binary_projection(assembler: Assembler, c: np.ndarray) -> np.ndarray:
    """0.95 * sign of the cell mean of Pi0 c."""
    return 0.95 * np.sign(cell_means(assembler, c))


def interface_band_mask(config: ProblemConfig, mesh: PolyMesh, width: float | None = None) -> np.ndarray:
    """Cells whose centroid lies farther than ``width / 2`` (default gamma) from the true interface."""
    half = config.gamma if width is None else 0.5 * width
    if config.datum == "IMAGE":
        raise ConfigError("interface distance is not available for image data")
    shape = DAMAGED[config.datum][0] if config.datum in DAMAGED else CROSS
    return shape.interface_distance(mesh.centroid) > half


def recovery_fraction(scenario: Scenario, c: np.ndarray) -> float:
    """Share of cells away from the interface where the binary projection matches the truth."""
    proj = np.sign(binary_projection(scenario.assembler, c))
    keep = interface_band_mask(scenario.config, scenario.mesh)
    return float(np.mean(proj[keep] == scenario.truth[keep]))


@dataclass(frozen=True)
class ShapeMetrics:
    perimeter: float
    area: float

    @property
    def ratio(self) -> float:
        return self.perimeter ** 2 / (4.0 * np.pi * self.area)


def _fan_values(assembler: Assembler, c: np.ndarray):
    """Triangles (centroid, v_i, v_i+1) with values of c at their corners.

    Vertex values are the value DoFs, so the piecewise linear field on the
    fans is continuous; the centroid value is Pi0 c.
    """
    tris, vals = [], []
    local = assembler.dofmap
    for s in assembler.spaces:
        z = local.local_values(c, s.cell)
        centre = s.basis.evaluate(s.center[None, :], 0)[0] @ (s.P_0 @ z)
        v = z[0:3 * s.nv:3]
        n = s.nv
        i = np.arange(n)
        tris.append(np.stack([np.broadcast_to(s.center, (n, 2)), s.xy[i], s.xy[(i + 1) % n]], axis=1))
        vals.append(np.column_stack([np.full(n, centre), v[i], v[(i + 1) % n]]))
    return np.concatenate(tris), np.concatenate(vals)


def shape_metrics(assembler: Assembler, c: np.ndarray) -> ShapeMetrics | None:
    """Perimeter and area of {c > 0} from linear interpolation on the cell fans.

    Returns None when the zero level set is empty.
    """
    T, V = _fan_values(assembler, c)
    return _contour_metrics(T, V)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _contour_metrics(T: np.ndarray, V: np.ndarray) -> ShapeMetrics | None:
    area_tri = 0.5 * np.abs(_cross(T[:, 1] - T[:, 0], T[:, 2] - T[:, 0]))
    pos = V > 0
    npos = pos.sum(axis=1)
    area = float(area_tri[npos == 3].sum())
    perim = 0.0
    mixed = np.flatnonzero((npos == 1) | (npos == 2))
    for t in mixed:
        p, v, s = T[t], V[t], pos[t]
        # the odd vertex out: the one whose sign differs from the other two
        odd = int(np.flatnonzero(s == (s.sum() == 1))[0])
        a, b = (odd + 1) % 3, (odd + 2) % 3
        ta = v[odd] / (v[odd] - v[a])
        tb = v[odd] / (v[odd] - v[b])
        qa = p[odd] + ta * (p[a] - p[odd])
        qb = p[odd] + tb * (p[b] - p[odd])
        perim += float(np.hypot(*(qa - qb)))
        corner = 0.5 * abs(_cross(qa - p[odd], qb - p[odd]))
        area += corner if s[odd] else area_tri[t] - corner
    if perim == 0.0 or area == 0.0:
        return None
    return ShapeMetrics(perim, area)

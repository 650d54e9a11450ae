"""Polygonal meshes of the unit square.

A :class:`PolyMesh` stores vertex coordinates and counter-clockwise cell
loops; edges, geometric quantities and boundary flags are derived once at
construction. Generators produce Cartesian (QUAD), triangular (TRI) and
centroidal Voronoi (CVT) meshes, optionally conforming to an axis-aligned
rectangle so that an inpainting region is resolved exactly by cells.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import Delaunay, Voronoi, cKDTree
from scipy.stats import qmc

SNAP_TOL = 1e-12


class MeshError(ValueError):
    """Raised when a mesh cannot be generated or violates an invariant."""


class Region(IntEnum):
    UNTAGGED = -1
    OUTSIDE_D = 0
    INSIDE_D = 1


@dataclass(frozen=True)
class PolyMesh:
    vertices: np.ndarray
    cells: tuple
    edges: np.ndarray = field(repr=False)
    cell_edges: tuple = field(repr=False)
    cell_edge_signs: tuple = field(repr=False)
    edge_cells: np.ndarray = field(repr=False)
    area: np.ndarray = field(repr=False)
    centroid: np.ndarray = field(repr=False)
    diameter: np.ndarray = field(repr=False)
    vertex_h: np.ndarray = field(repr=False)
    boundary_vertex: np.ndarray = field(repr=False)
    boundary_edge: np.ndarray = field(repr=False)
    tags: np.ndarray = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def h(self) -> float:
        return float(self.diameter.max())

    def cell_xy(self, c: int) -> np.ndarray:
        return self.vertices[self.cells[c]]

    def edge_length(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def edge_normal(self) -> np.ndarray:
        """Unit normals of the reference edge orientation (tangent rotated clockwise)."""
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        d /= np.hypot(d[:, 0], d[:, 1])[:, None]
        return np.column_stack([d[:, 1], -d[:, 0]])

    def is_corner(self) -> np.ndarray:
        v = self.vertices
        on_x = (v[:, 0] == 0.0) | (v[:, 0] == 1.0)
        on_y = (v[:, 1] == 0.0) | (v[:, 1] == 1.0)
        return on_x & on_y

    def with_tags(self, tags) -> "PolyMesh":
        tags = np.asarray(tags, dtype=int).copy()
        tags.setflags(write=False)
        return dataclasses.replace(self, tags=tags)

    @classmethod
    def from_cells(cls, vertices, cells: Sequence[Sequence[int]], tags=None) -> "PolyMesh":
        """Build a mesh from coordinates and vertex loops, deriving all connectivity.

        Vertices within ``SNAP_TOL`` of the square boundary are snapped onto it
        and clockwise loops are reoriented.
        """
        v = np.array(vertices, dtype=float)
        for j in range(2):
            v[np.abs(v[:, j]) < SNAP_TOL, j] = 0.0
            v[np.abs(v[:, j] - 1.0) < SNAP_TOL, j] = 1.0
        loops = []
        for c, loop in enumerate(cells):
            loop = np.asarray(loop, dtype=np.int64)
            if len(loop) < 3:
                raise MeshError(f"cell {c} has fewer than 3 vertices")
            xy = v[loop]
            signed = 0.5 * np.sum(xy[:, 0] * np.roll(xy[:, 1], -1) - np.roll(xy[:, 0], -1) * xy[:, 1])
            if signed < 0:
                loop = loop[::-1]
            elif signed == 0:
                raise MeshError(f"cell {c} has zero area")
            loops.append(loop)

        nc = len(loops)
        sizes = np.array([len(l) for l in loops])
        flat = np.concatenate(loops)
        nxt = flat[_next_in_loop(sizes)]
        owner = np.repeat(np.arange(nc), sizes)
        lo = np.minimum(flat, nxt)
        hi = np.maximum(flat, nxt)
        keys = lo * (len(v) + 1) + hi
        ukeys, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        edges = np.column_stack([lo[first], hi[first]])
        counts = np.bincount(inverse, minlength=len(ukeys))
        if np.any(counts > 2):
            bad = int(np.flatnonzero(counts > 2)[0])
            raise MeshError(f"edge {tuple(edges[bad])} is shared by more than two cells")
        signs = np.where(flat == lo, 1, -1)
        edge_cells = -np.ones((len(edges), 2), dtype=np.int64)
        # first incidence in slot 0, second in slot 1
        order = np.argsort(inverse, kind="stable")
        inv_sorted = inverse[order]
        start = np.searchsorted(inv_sorted, np.arange(len(edges)))
        slot = np.arange(len(order)) - start[inv_sorted]
        edge_cells[inv_sorted, slot] = owner[order]

        offsets = np.concatenate([[0], np.cumsum(sizes)])
        cell_edges = tuple(inverse[offsets[c]:offsets[c + 1]].copy() for c in range(nc))
        cell_signs = tuple(signs[offsets[c]:offsets[c + 1]].copy() for c in range(nc))

        # geometry
        x, y = v[flat, 0], v[flat, 1]
        xn, yn = v[nxt, 0], v[nxt, 1]
        cross = x * yn - xn * y
        area = 0.5 * np.bincount(owner, cross, minlength=nc)
        cx = np.bincount(owner, (x + xn) * cross, minlength=nc) / (6.0 * area)
        cy = np.bincount(owner, (y + yn) * cross, minlength=nc) / (6.0 * area)
        diameter = np.empty(nc)
        for c, loop in enumerate(loops):
            xy = v[loop]
            d = xy[:, None, :] - xy[None, :, :]
            diameter[c] = np.sqrt((d ** 2).sum(-1).max())

        boundary_edge = counts == 1
        boundary_vertex = np.zeros(len(v), dtype=bool)
        boundary_vertex[edges[boundary_edge].ravel()] = True

        used = np.zeros(len(v), dtype=bool)
        used[flat] = True
        if not used.all():
            raise MeshError(f"{int((~used).sum())} vertices are not used by any cell")
        hsum = np.bincount(flat, diameter[owner], minlength=len(v))
        hcnt = np.bincount(flat, minlength=len(v))
        vertex_h = hsum / hcnt

        if tags is None:
            tags = np.full(nc, Region.UNTAGGED, dtype=int)
        arrays = dict(
            vertices=v, edges=edges, edge_cells=edge_cells, area=area,
            centroid=np.column_stack([cx, cy]), diameter=diameter, vertex_h=vertex_h,
            boundary_vertex=boundary_vertex, boundary_edge=boundary_edge,
            tags=np.asarray(tags, dtype=int).copy(),
        )
        for a in arrays.values():
            a.setflags(write=False)
        for t in (cell_edges, cell_signs, loops):
            for a in t:
                a.setflags(write=False)
        mesh = cls(cells=tuple(loops), cell_edges=cell_edges, cell_edge_signs=cell_signs, **arrays)
        mesh.check()
        return mesh

    def check(self, area_tol: float = 1e-12):
        """Verify the structural invariants; raise MeshError on violation."""
        if np.any(self.area <= 0):
            raise MeshError(f"cell {int(np.argmin(self.area))} has non-positive area")
        total = self.area.sum()
        if abs(total - 1.0) > area_tol:
            raise MeshError(f"cell areas sum to {total!r}, expected 1")
        bv = self.vertices[self.edges[self.boundary_edge].ravel()]
        on = (bv[:, 0] == 0) | (bv[:, 0] == 1) | (bv[:, 1] == 0) | (bv[:, 1] == 1)
        if not on.all():
            raise MeshError("a boundary edge does not lie on the boundary of the unit square")
        # boundary edges must lie along one side, not cut across a corner
        e = self.edges[self.boundary_edge]
        a, b = self.vertices[e[:, 0]], self.vertices[e[:, 1]]
        same_side = ((a[:, 0] == b[:, 0]) & np.isin(a[:, 0], (0.0, 1.0))) | (
            (a[:, 1] == b[:, 1]) & np.isin(a[:, 1], (0.0, 1.0))
        )
        if not same_side.all():
            raise MeshError("a boundary edge is not aligned with a side of the unit square")


@dataclass(frozen=True)
class MeshQualityReport:
    min_ball_ratio: float
    min_edge_ratio: float
    ball_ratio: np.ndarray = field(repr=False)
    edge_ratio: np.ndarray = field(repr=False)
    star_shaped: np.ndarray = field(repr=False)
    violating_cells: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        return {
            "min_ball_ratio": self.min_ball_ratio,
            "min_edge_ratio": self.min_edge_ratio,
            "mean_ball_ratio": float(self.ball_ratio.mean()),
            "mean_edge_ratio": float(self.edge_ratio.mean()),
            "n_violating": int(len(self.violating_cells)),
        }


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(p - proj).T)


def validate_A1(mesh: PolyMesh, rho_min: float = 0.0) -> MeshQualityReport:
    """Shape-regularity report: inradius-from-centroid and edge-length ratios.

    The ball ratio is a lower bound for the radius of a centroid-centred ball
    inside the cell, divided by the cell diameter.
    """
    nc = mesh.n_cells
    ball = np.empty(nc)
    edge = np.empty(nc)
    star = np.empty(nc, dtype=bool)
    for c in range(nc):
        xy = mesh.cell_xy(c)
        a, b = xy, np.roll(xy, -1, axis=0)
        ctr = mesh.centroid[c]
        da, db = a - ctr, b - ctr
        star[c] = bool(np.all(da[:, 0] * db[:, 1] - da[:, 1] * db[:, 0] > 0))
        dist = _point_segment_distance(np.broadcast_to(ctr, a.shape), a, b)
        ball[c] = dist.min() / mesh.diameter[c] if star[c] else 0.0
        edge[c] = np.hypot(*(b - a).T).min() / mesh.diameter[c]
    bad = np.flatnonzero((~star) | (edge < rho_min) | (ball < rho_min))
    return MeshQualityReport(
        min_ball_ratio=float(ball.min()), min_edge_ratio=float(edge.min()),
        ball_ratio=ball, edge_ratio=edge, star_shaped=star, violating_cells=bad,
    )


# --------------------------------------------------------------------------
# rectangles and region partitions

Rect = tuple  # (x0, x1, y0, y1)


def _partition(conform_to: Sequence[Rect] | None) -> list[Rect]:
    """Tensor-grid partition of the unit square whose lines contain every rectangle side."""
    xs, ys = {0.0, 1.0}, {0.0, 1.0}
    for x0, x1, y0, y1 in conform_to or ():
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise MeshError(f"conforming rectangle {(x0, x1, y0, y1)} is not inside the unit square")
        xs.update((float(x0), float(x1)))
        ys.update((float(y0), float(y1)))
    xs, ys = sorted(xs), sorted(ys)
    return [(xs[i], xs[i + 1], ys[j], ys[j + 1]) for j in range(len(ys) - 1) for i in range(len(xs) - 1)]


def _split_counts(total: int, weights) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` items, at least one per part."""
    w = np.asarray(weights, dtype=float)
    raw = total * w / w.sum()
    n = np.maximum(np.floor(raw).astype(int), 1)
    rem = raw - np.floor(raw)
    while n.sum() < total:
        i = int(np.argmax(rem))
        n[i] += 1
        rem[i] = -1.0
    while n.sum() > total:
        cand = np.where(n > 1, raw - n, np.inf)
        n[int(np.argmin(cand))] -= 1
    return n


# --------------------------------------------------------------------------
# QUAD

def make_quad_mesh(n: int) -> PolyMesh:
    """Uniform ``n x n`` Cartesian mesh of the unit square."""
    if int(n) != n or n < 2:
        raise MeshError(f"QUAD resolution must be an integer >= 2, got {n}")
    n = int(n)
    t = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(t, t, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    cells = np.stack([idx[:-1, :-1], idx[:-1, 1:], idx[1:, 1:], idx[1:, :-1]], axis=-1).reshape(-1, 4)
    return PolyMesh.from_cells(verts, cells)


# --------------------------------------------------------------------------
# clipped Voronoi and Lloyd relaxation

def _next_in_loop(sizes: np.ndarray) -> np.ndarray:
    """Index of the successor of every entry of concatenated loops."""
    total = int(sizes.sum())
    nxt = np.arange(1, total + 1)
    ends = np.cumsum(sizes)
    nxt[ends - 1] = ends - sizes
    return nxt


def _clipped_voronoi(points: np.ndarray, rect: Rect, band: float | None = None):
    """Voronoi cells of ``points`` clipped to ``rect`` via mirror images.

    Reflecting a generator across a side makes that side a bisector, and a
    reflected point is never the nearest generator inside the rectangle, so
    cells are clipped exactly. Only generators within ``band`` of a side are
    mirrored; if a cell then leaks out of the rectangle every generator is
    mirrored. Returns (vertices, list of CCW vertex-index loops).
    """
    x0, x1, y0, y1 = rect
    p = np.asarray(points, dtype=float)
    if band is None:
        band = 3.0 * np.sqrt((x1 - x0) * (y1 - y0) / max(len(p), 1))
    scale = max(x1 - x0, y1 - y0)
    tol = 1e-10 * scale
    for full in (False, True):
        near = [np.ones(len(p), bool) if full else m for m in (
            p[:, 0] - x0 < band, x1 - p[:, 0] < band, p[:, 1] - y0 < band, y1 - p[:, 1] < band)]
        mirrors = [
            p,
            np.column_stack([2 * x0 - p[near[0], 0], p[near[0], 1]]),
            np.column_stack([2 * x1 - p[near[1], 0], p[near[1], 1]]),
            np.column_stack([p[near[2], 0], 2 * y0 - p[near[2], 1]]),
            np.column_stack([p[near[3], 0], 2 * y1 - p[near[3], 1]]),
        ]
        vor = Voronoi(np.vstack(mirrors))
        regions = [vor.regions[r] for r in vor.point_region[: len(p)]]
        sizes = np.array([len(r) for r in regions])
        flat = np.fromiter((i for r in regions for i in r), dtype=np.int64, count=int(sizes.sum()))
        if np.any(flat < 0) or np.any(sizes < 3):
            if full:
                raise MeshError("unbounded Voronoi region for an interior generator")
            continue
        verts = vor.vertices.copy()
        used = verts[flat]
        inside = ((used[:, 0] > x0 - tol) & (used[:, 0] < x1 + tol)
                  & (used[:, 1] > y0 - tol) & (used[:, 1] < y1 + tol))
        if inside.all():
            break
        if full:
            raise MeshError("clipped Voronoi cell leaves its rectangle")
    verts[np.abs(verts[:, 0] - x0) < tol, 0] = x0
    verts[np.abs(verts[:, 0] - x1) < tol, 0] = x1
    verts[np.abs(verts[:, 1] - y0) < tol, 1] = y0
    verts[np.abs(verts[:, 1] - y1) < tol, 1] = y1
    owner = np.repeat(np.arange(len(p)), sizes)
    d = verts[flat] - p[owner]
    order = np.lexsort((np.arctan2(d[:, 1], d[:, 0]), owner))
    flat = flat[order]
    loops = np.split(flat, np.cumsum(sizes)[:-1])
    return verts, loops


def _loop_centroids(verts, loops):
    sizes = np.array([len(l) for l in loops])
    flat = np.concatenate(loops)
    nxt = flat[_next_in_loop(sizes)]
    owner = np.repeat(np.arange(len(loops)), sizes)
    x, y = verts[flat, 0], verts[flat, 1]
    xn, yn = verts[nxt, 0], verts[nxt, 1]
    cross = x * yn - xn * y
    area = 0.5 * np.bincount(owner, cross, minlength=len(loops))
    cx = np.bincount(owner, (x + xn) * cross, minlength=len(loops)) / (6 * area)
    cy = np.bincount(owner, (y + yn) * cross, minlength=len(loops)) / (6 * area)
    return np.column_stack([cx, cy])


def lloyd(points: np.ndarray, rect: Rect, iters: int, tol: float = 0.0) -> np.ndarray:
    """Lloyd relaxation of generators inside ``rect``.

    Stops after ``iters`` sweeps or when the largest generator displacement
    drops below ``tol`` times the mean generator spacing.
    """
    p = np.asarray(points, dtype=float).copy()
    x0, x1, y0, y1 = rect
    spacing = np.sqrt((x1 - x0) * (y1 - y0) / max(len(p), 1))
    for _ in range(iters):
        verts, loops = _clipped_voronoi(p, rect)
        new = _loop_centroids(verts, loops)
        move = np.hypot(*(new - p).T).max()
        p = new
        if move < tol * spacing:
            break
    return p


def _apply_roots(verts: np.ndarray, loops, root: np.ndarray):
    new_loops = []
    for loop in loops:
        l = root[np.asarray(loop)]
        l = l[l != np.roll(l, 1)]
        new_loops.append(l)
    used = np.unique(np.concatenate(new_loops))
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return verts[used], [remap[l] for l in new_loops]


def _merge_vertices(verts: np.ndarray, loops, tol: float):
    """Merge coincident vertices and drop repeated indices from loops."""
    pairs = cKDTree(verts).query_pairs(tol, output_type="ndarray")
    parent = np.arange(len(verts))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    root = np.array([find(i) for i in range(len(verts))])
    return _apply_roots(verts, loops, root)


def _collapse_short_edges(verts: np.ndarray, loops, min_length: float, lines=()):
    """Collapse mesh edges shorter than ``min_length``.

    Vertices on the square boundary or on partition lines are pinned: a
    cluster containing one moves to it, and two differently pinned vertices
    are never merged.
    """
    xs = [0.0, 1.0] + [v for a, v in lines if a == "x"]
    ys = [0.0, 1.0] + [v for a, v in lines if a == "y"]
    on_x = np.zeros(len(verts), dtype=bool)
    on_y = np.zeros(len(verts), dtype=bool)
    for v in xs:
        on_x |= np.abs(verts[:, 0] - v) < 1e-12
    for v in ys:
        on_y |= np.abs(verts[:, 1] - v) < 1e-12
    score = on_x.astype(int) + on_y.astype(int)

    edges = set()
    for loop in loops:
        for a, b in zip(loop, np.roll(loop, -1)):
            edges.add((min(a, b), max(a, b)))
    edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    length = np.hypot(*(verts[edges[:, 1]] - verts[edges[:, 0]]).T)
    short = np.flatnonzero(length < min_length)
    if len(short) == 0:
        return verts, loops
    short = short[np.argsort(length[short], kind="stable")]

    parent = np.arange(len(verts))
    pin = {i: i for i in np.flatnonzero(score > 0)}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for e in short:
        ra, rb = find(edges[e, 0]), find(edges[e, 1])
        if ra == rb:
            continue
        pa, pb = pin.get(ra), pin.get(rb)
        if pa is not None and pb is not None:
            continue
        lo, hi = min(ra, rb), max(ra, rb)
        parent[hi] = lo
        pin_new = pa if pa is not None else pb
        pin.pop(hi, None)
        if pin_new is not None:
            pin[lo] = pin_new
    root = np.array([find(i) for i in range(len(verts))])
    v = verts.copy()
    for r in np.unique(root):
        members = np.flatnonzero(root == r)
        if len(members) > 1:
            v[r] = verts[pin[r]] if r in pin else verts[members].mean(axis=0)
    return _apply_roots(v, loops, root)


def _insert_hanging_vertices(verts: np.ndarray, loops, lines, tol: float):
    """Split cell edges lying on partition lines at every vertex found on them.

    ``lines`` holds ('x', value) or ('y', value) entries. Cells on both sides
    of a line then share the same vertices, which makes the glued mesh conforming.
    """
    out = []
    for loop in loops:
        loop = list(loop)
        new = []
        for i, a in enumerate(loop):
            b = loop[(i + 1) % len(loop)]
            new.append(a)
            pa, pb = verts[a], verts[b]
            for axis, value in lines:
                j = 0 if axis == "x" else 1
                if abs(pa[j] - value) < tol and abs(pb[j] - value) < tol:
                    o = 1 - j
                    lo, hi = sorted((pa[o], pb[o]))
                    cand = np.flatnonzero(
                        (np.abs(verts[:, j] - value) < tol)
                        & (verts[:, o] > lo + tol) & (verts[:, o] < hi - tol)
                    )
                    if len(cand):
                        key = verts[cand, o]
                        cand = cand[np.argsort(key if pb[o] > pa[o] else -key)]
                        new.extend(int(c) for c in cand)
                    break
        out.append(np.array(new, dtype=np.int64))
    return out


def _snap_along_lines(verts: np.ndarray, lines, delta: float) -> np.ndarray:
    """Cluster vertices lying on a partition line closer than ``delta`` apart.

    Avoids tiny edges where the tessellations on both sides of a line meet.
    Vertices at line intersections or on the outer boundary stay fixed.
    """
    v = verts.copy()
    for axis, value in lines:
        j = 0 if axis == "x" else 1
        o = 1 - j
        on = np.flatnonzero(np.abs(v[:, j] - value) < 1e-12)
        if len(on) < 2:
            continue
        fixed_vals = {0.0, 1.0} | {val for ax, val in lines if ax != axis}
        on = on[np.argsort(v[on, o], kind="stable")]
        groups, cur = [], [on[0]]
        for i in on[1:]:
            if v[i, o] - v[cur[-1], o] < delta:
                cur.append(i)
            else:
                groups.append(cur)
                cur = [i]
        groups.append(cur)
        for g in groups:
            if len(g) < 2:
                continue
            coords = v[g, o]
            pinned = [c for c in coords if any(abs(c - f) < 1e-12 for f in fixed_vals)]
            target = pinned[0] if pinned else coords.mean()
            v[g, o] = target
    return v


def _internal_lines(parts: list[Rect]):
    lines = set()
    for x0, x1, y0, y1 in parts:
        for v in (x0, x1):
            if 0 < v < 1:
                lines.add(("x", v))
        for v in (y0, y1):
            if 0 < v < 1:
                lines.add(("y", v))
    return sorted(lines)


def make_cvt_mesh(
    n_cells: int,
    seed: int = 1,
    lloyd_iters: int = 50,
    tol: float = 1e-4,
    conform_to: Sequence[Rect] | None = None,
    generators: np.ndarray | None = None,
    min_edge: float = 0.1,
) -> PolyMesh:
    """Centroidal Voronoi mesh of the unit square with ``n_cells`` cells.

    Generators are seeded uniform random points (or given explicitly),
    relaxed by Lloyd's algorithm. With ``conform_to`` the square is split
    into sub-rectangles that are tessellated separately and glued, so every
    rectangle side is a union of mesh edges. Edges shorter than
    ``min_edge`` times the mean generator spacing are collapsed.
    """
    if int(n_cells) != n_cells or n_cells < 4:
        raise MeshError(f"CVT mesh needs at least 4 cells, got {n_cells}")
    parts = _partition(conform_to)
    rng = np.random.default_rng(seed)
    if generators is not None:
        generators = np.asarray(generators, dtype=float)
        if len(parts) > 1:
            raise MeshError("explicit generators cannot be combined with conform_to")
        if len(generators) != n_cells:
            raise MeshError("number of generators differs from n_cells")
    counts = _split_counts(int(n_cells), [(r[1] - r[0]) * (r[3] - r[2]) for r in parts])
    all_verts, all_loops, offset = [], [], 0
    for rect, m in zip(parts, counts):
        x0, x1, y0, y1 = rect
        if generators is not None:
            p = generators
        else:
            u = rng.random((m, 2))
            p = np.column_stack([x0 + (x1 - x0) * u[:, 0], y0 + (y1 - y0) * u[:, 1]])
        p = lloyd(p, rect, lloyd_iters, tol)
        verts, loops = _clipped_voronoi(p, rect)
        all_verts.append(verts)
        all_loops.extend(l + offset for l in loops)
        offset += len(verts)
    verts = np.vstack(all_verts)
    spacing = 1.0 / np.sqrt(n_cells)
    verts, loops = _merge_vertices(verts, all_loops, 1e-9 * spacing)
    lines = _internal_lines(parts)
    if lines:
        verts = _snap_along_lines(verts, lines, 0.2 * spacing)
        verts, loops = _merge_vertices(verts, loops, 1e-9 * spacing)
        loops = _insert_hanging_vertices(verts, loops, lines, 1e-12)
    if min_edge > 0:
        verts, loops = _collapse_short_edges(verts, loops, min_edge * spacing, lines)
    return PolyMesh.from_cells(verts, loops)


# --------------------------------------------------------------------------
# TRI

# Interior point density calibrated so that n = 128 gives the 28723-vertex,
# 56932-triangle mesh family: 28723 - 4*128 = 28211 interior points.
TRI_INTERIOR_DENSITY = 28211.0 / 128**2


def _segment_points(a, b, m):
    t = np.linspace(0.0, 1.0, m + 1)
    return np.outer(1 - t, a) + np.outer(t, b)


def make_tri_mesh(
    n: int,
    style: str = "structured",
    seed: int = 1,
    lloyd_iters: int = 5,
    conform_to: Sequence[Rect] | None = None,
) -> PolyMesh:
    """Triangular mesh of the unit square.

    ``structured``: each cell of the ``n x n`` grid split along its diagonal.
    ``delaunay``: ``n`` boundary segments per side and seeded, Lloyd-smoothed
    interior points triangulated by Delaunay; each sub-rectangle of the
    ``conform_to`` partition is triangulated separately so its sides are
    mesh edges.
    """
    if int(n) != n or n < 2:
        raise MeshError(f"TRI resolution must be an integer >= 2, got {n}")
    n = int(n)
    if style == "structured":
        t = np.linspace(0.0, 1.0, n + 1)
        X, Y = np.meshgrid(t, t, indexing="xy")
        verts = np.column_stack([X.ravel(), Y.ravel()])
        idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
        a, b, c, d = idx[:-1, :-1], idx[:-1, 1:], idx[1:, 1:], idx[1:, :-1]
        tris = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
        if conform_to:
            _check_grid_aligned(conform_to, n)
        return PolyMesh.from_cells(verts, tris)
    if style != "delaunay":
        raise MeshError(f"unknown TRI style {style!r}")

    parts = _partition(conform_to)
    n_interior = int(round(TRI_INTERIOR_DENSITY * n * n))
    rng_seed = int(seed)
    sampler = qmc.Halton(d=2, scramble=True, seed=rng_seed)
    counts = _split_counts(n_interior, [(r[1] - r[0]) * (r[3] - r[2]) for r in parts])
    pts_all, tris_all, offset = [], [], 0
    for rect, m in zip(parts, counts):
        x0, x1, y0, y1 = rect
        mx = max(1, int(round((x1 - x0) * n)))
        my = max(1, int(round((y1 - y0) * n)))
        bnd = np.vstack([
            _segment_points((x0, y0), (x1, y0), mx)[:-1],
            _segment_points((x1, y0), (x1, y1), my)[:-1],
            _segment_points((x1, y1), (x0, y1), mx)[:-1],
            _segment_points((x0, y1), (x0, y0), my)[:-1],
        ])
        u = sampler.random(m)
        p = np.column_stack([x0 + (x1 - x0) * u[:, 0], y0 + (y1 - y0) * u[:, 1]])
        p = lloyd(p, rect, lloyd_iters)
        # keep interior points off the rectangle sides
        margin = 0.25 / n
        p[:, 0] = np.clip(p[:, 0], x0 + margin, x1 - margin)
        p[:, 1] = np.clip(p[:, 1], y0 + margin, y1 - margin)
        pts = np.vstack([bnd, p])
        tri = Delaunay(pts).simplices
        xy = pts[tri]
        ar = 0.5 * ((xy[:, 1, 0] - xy[:, 0, 0]) * (xy[:, 2, 1] - xy[:, 0, 1])
                    - (xy[:, 1, 1] - xy[:, 0, 1]) * (xy[:, 2, 0] - xy[:, 0, 0]))
        tri = tri[np.abs(ar) > 1e-14 / n**2]
        pts_all.append(pts)
        tris_all.extend(t + offset for t in tri)
        offset += len(pts)
    verts = np.vstack(pts_all)
    verts, loops = _merge_vertices(verts, tris_all, 1e-9 / n)
    return PolyMesh.from_cells(verts, loops)


def _check_grid_aligned(conform_to, n):
    for r in conform_to:
        for v in r:
            if abs(v * n - round(v * n)) > 1e-9:
                raise MeshError(f"region side {v} is not on a grid line of the {n}x{n} mesh")


def make_mesh(family: str, n: int, seed: int = 1, conform_to=None, **kw) -> PolyMesh:
    """Dispatch by family name: ``quad`` (n x n), ``tri`` (delaunay) or ``cvt`` (n*n cells)."""
    family = family.lower()
    if family == "quad":
        if conform_to:
            _check_grid_aligned(conform_to, n)
        return make_quad_mesh(n)
    if family == "tri":
        return make_tri_mesh(n, style=kw.pop("style", "delaunay"), seed=seed, conform_to=conform_to, **kw)
    if family == "cvt":
        if int(n) != n or n < 2:
            raise MeshError(f"CVT resolution must be an integer >= 2, got {n}")
        return make_cvt_mesh(int(n) * int(n), seed=seed, conform_to=conform_to, **kw)
    raise MeshError(f"unknown mesh family {family!r}")


# --------------------------------------------------------------------------
# region tagging

def tag_inpainting_region(mesh: PolyMesh, mask: Callable[[np.ndarray], np.ndarray]) -> PolyMesh:
    """Tag every cell INSIDE_D or OUTSIDE_D.

    ``mask`` maps an (N, 2) array of points to booleans (True inside D, the
    closure included). A cell is inside if its centroid is; a cell whose
    vertices are strictly on both sides is rejected.
    """
    inside_c = np.asarray(mask(mesh.centroid), dtype=bool)
    tags = np.where(inside_c, Region.INSIDE_D, Region.OUTSIDE_D).astype(int)
    vin = np.asarray(mask(mesh.vertices), dtype=bool)
    for c, loop in enumerate(mesh.cells):
        if inside_c[c]:
            # every vertex of an inside cell must be in the closed region
            if not vin[loop].all():
                raise MeshError(f"cell {c} straddles the boundary of the inpainting region")
        else:
            # an outside cell may touch the region only on its boundary
            mid = 0.5 * (mesh.vertices[loop] + mesh.vertices[np.roll(loop, -1)])
            probe = np.vstack([mid, 0.5 * (mid + mesh.centroid[c])])
            if np.asarray(mask(probe), dtype=bool)[len(mid):].any():
                raise MeshError(f"cell {c} straddles the boundary of the inpainting region")
    return mesh.with_tags(tags)


def rect_mask(rect: Rect):
    x0, x1, y0, y1 = rect

    def mask(p):
        p = np.atleast_2d(p)
        return (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)

    return mask


# --------------------------------------------------------------------------
# text format

def write_polymesh(mesh: PolyMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write("polymesh 1\n")
        fh.write(f"vertices {mesh.n_vertices}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        fh.write(f"cells {mesh.n_cells}\n")
        for loop in mesh.cells:
            fh.write(" ".join(str(int(i)) for i in loop) + "\n")
        if np.any(mesh.tags != Region.UNTAGGED):
            fh.write("tags\n")
            for t in mesh.tags:
                fh.write(Region(int(t)).name + "\n")


def read_polymesh(path) -> PolyMesh:
    with open(path) as fh:
        lines = [l.strip() for l in fh if l.strip()]
    if not lines or lines[0].split() != ["polymesh", "1"]:
        raise MeshError(f"{path}: missing 'polymesh 1' header")
    pos = 1
    head = lines[pos].split()
    if head[0] != "vertices":
        raise MeshError(f"{path}: expected 'vertices' section")
    nv = int(head[1])
    verts = np.array([[float(t) for t in lines[pos + 1 + i].split()] for i in range(nv)])
    pos += 1 + nv
    head = lines[pos].split()
    if head[0] != "cells":
        raise MeshError(f"{path}: expected 'cells' section")
    nc = int(head[1])
    cells = [[int(t) for t in lines[pos + 1 + i].split()] for i in range(nc)]
    pos += 1 + nc
    tags = None
    if pos < len(lines) and lines[pos] == "tags":
        tags = [Region[lines[pos + 1 + i]] for i in range(nc)]
    return PolyMesh.from_cells(verts, cells, tags=tags)

"""Adaptive quadrilateral meshes on a square or disc.

Cells form a forest of quadtrees; the active leaves tile the domain. Local
refinement keeps the mesh 1-irregular (face neighbors differ by at most one
level) by force-refining coarse neighbors. On the disc geometry, new boundary
vertices are snapped onto the circle, so the boundary is a polygon that
converges to the circle under refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Vertex:
    id: int
    x: float
    y: float
    on_boundary: bool = False
    boundary_id: int = 0


@dataclass(frozen=True)
class Cell:
    id: int
    vertex_ids: tuple  # 4 vertex ids, counterclockwise
    level: int = 0
    parent: int | None = None
    children: tuple | None = None
    active: bool = True


@dataclass(frozen=True)
class SquareGeometry:
    origin: tuple
    side: float


@dataclass(frozen=True)
class DiscGeometry:
    center: tuple
    radius: float


def _ekey(a, b):
    return (a, b) if a < b else (b, a)


class Mesh:
    """Quadrilateral mesh with refinement history.

    Treat instances as immutable; ``refine`` returns a new mesh sharing the
    cell/vertex id space with its parent, which keeps warm starts and
    parent-child audits cheap.
    """

    def __init__(self, vertices, cells, geometry, boundary_edges, edge_midpoint):
        self.vertices = vertices
        self.cells = cells
        self.geometry = geometry
        self.boundary_edges = boundary_edges
        self.edge_midpoint = edge_midpoint
        self._active_ids = np.array(
            [c.id for c in cells if c.active], dtype=np.int64
        )
        self._edge_to_active = {}
        for cid in self._active_ids:
            for a, b in self.cell_edges(int(cid)):
                self._edge_to_active.setdefault(_ekey(a, b), []).append(int(cid))
        self._coords = None

    # -- basic queries ----------------------------------------------------

    @property
    def n_active(self):
        return len(self._active_ids)

    def active_cell_ids(self):
        return self._active_ids

    def active_cells(self):
        return [self.cells[int(i)] for i in self._active_ids]

    def cell_edges(self, cid):
        """Edges of a cell as (tail, head) vertex ids in CCW order."""
        v = self.cells[cid].vertex_ids
        return [(v[e], v[(e + 1) % 4]) for e in range(4)]

    def cell_coords(self, cid):
        return np.array(
            [(self.vertices[v].x, self.vertices[v].y) for v in self.cells[cid].vertex_ids]
        )

    def active_coords(self):
        """Corner coordinates of all active cells, shape (n_active, 4, 2)."""
        if self._coords is None:
            pts = np.array([(v.x, v.y) for v in self.vertices])
            conn = np.array(
                [self.cells[int(i)].vertex_ids for i in self._active_ids], dtype=np.int64
            )
            self._coords = pts[conn]
        return self._coords

    def cell_area(self, cid):
        c = self.cell_coords(cid)
        x, y = c[:, 0], c[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def total_active_area(self):
        c = self.active_coords()
        x, y = c[:, :, 0], c[:, :, 1]
        xr = np.roll(x, -1, axis=1)
        yr = np.roll(y, -1, axis=1)
        return float(np.sum(0.5 * np.abs(np.sum(x * yr - y * xr, axis=1))))

    def is_boundary_edge(self, a, b):
        return _ekey(a, b) in self.boundary_edges

    def boundary_faces(self):
        """(cell id, local edge index) for every active boundary face."""
        out = []
        for cid in self._active_ids:
            for e, (a, b) in enumerate(self.cell_edges(int(cid))):
                if _ekey(a, b) in self.boundary_edges:
                    out.append((int(cid), e))
        return out

    def hanging_faces(self):
        """Coarse-side view of every hanging face.

        Returns (cell id, local edge index, (tail, head), midpoint vertex id)
        where (tail, head) follows the coarse cell's CCW orientation.
        """
        out = []
        for cid in self._active_ids:
            for e, (a, b) in enumerate(self.cell_edges(int(cid))):
                m = self.edge_midpoint.get(_ekey(a, b))
                if m is None:
                    continue
                if self._edge_to_active.get(_ekey(a, m)) or self._edge_to_active.get(
                    _ekey(m, b)
                ):
                    out.append((int(cid), e, (a, b), m))
        return out

    def vertex_active_cell_count(self):
        """Number of active cells sharing each vertex (corner incidences)."""
        counts = np.zeros(len(self.vertices), dtype=np.int64)
        for cid in self._active_ids:
            for v in self.cells[int(cid)].vertex_ids:
                counts[v] += 1
        return counts

    # -- point location ---------------------------------------------------

    def locate(self, point, tol=1e-10):
        """Active cell containing ``point`` plus reference coordinates.

        Points on shared faces are owned by the lowest-id containing cell.
        Raises ValueError if the point lies outside the mesh.
        """
        p = np.asarray(point, dtype=float)
        coords = self.active_coords()
        lo = coords.min(axis=1)
        hi = coords.max(axis=1)
        pad = 1e-9 * max(1.0, float(np.max(hi - lo)))
        cand = np.nonzero(
            (p[0] >= lo[:, 0] - pad)
            & (p[0] <= hi[:, 0] + pad)
            & (p[1] >= lo[:, 1] - pad)
            & (p[1] <= hi[:, 1] + pad)
        )[0]
        for k in cand:
            ref = invert_bilinear(coords[k], p)
            if ref is not None and np.all(ref >= -tol) and np.all(ref <= 1 + tol):
                return int(self._active_ids[k]), np.clip(ref, 0.0, 1.0)
        raise ValueError(f"point {tuple(p)} is outside the mesh")


def invert_bilinear(corners, p, tol=1e-13, max_iter=60):
    """Reference coordinates of physical point ``p`` in a bilinear quad."""
    scale = max(1.0, float(np.max(np.abs(corners))))
    ref = np.array([0.5, 0.5])
    for _ in range(max_iter):
        s, t = ref
        shape = np.array([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
        x = shape @ corners
        r = x - p
        if np.dot(r, r) <= (tol * scale) ** 2:
            return ref
        ds = np.array([-(1 - t), (1 - t), t, -t]) @ corners
        dt = np.array([-(1 - s), -s, s, (1 - s)]) @ corners
        jac = np.column_stack([ds, dt])
        det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
        if det == 0.0:
            return None
        step = np.array(
            [jac[1, 1] * r[0] - jac[0, 1] * r[1], -jac[1, 0] * r[0] + jac[0, 0] * r[1]]
        ) / det
        ref = ref - step
        if np.max(np.abs(ref)) > 10.0:
            return None
    return ref if np.dot(r, r) <= (1e-10 * scale) ** 2 else None


# -- construction ----------------------------------------------------------


def create_square(origin, side, n):
    """Uniform n-by-n quad mesh of the axis-aligned square."""
    if side <= 0:
        raise ValueError(f"side must be positive, got {side}")
    if n < 1:
        raise ValueError(f"subdivision count must be >= 1, got {n}")
    ox, oy = origin
    h = side / n
    vertices = []
    for j in range(n + 1):
        for i in range(n + 1):
            on_b = i == 0 or j == 0 or i == n or j == n
            vertices.append(Vertex(len(vertices), ox + i * h, oy + j * h, on_b, 0))
    cells = []
    for j in range(n):
        for i in range(n):
            v0 = j * (n + 1) + i
            cells.append(
                Cell(len(cells), (v0, v0 + 1, v0 + n + 2, v0 + n + 1), level=0)
            )
    boundary_edges = set()
    for i in range(n):
        boundary_edges.add(_ekey(i, i + 1))
        top = n * (n + 1)
        boundary_edges.add(_ekey(top + i, top + i + 1))
        boundary_edges.add(_ekey(i * (n + 1), (i + 1) * (n + 1)))
        boundary_edges.add(_ekey(i * (n + 1) + n, (i + 1) * (n + 1) + n))
    return Mesh(vertices, cells, SquareGeometry((ox, oy), side), boundary_edges, {})


def create_disc(center, radius):
    """Five-cell coarse mesh of a disc: center square plus four boundary blocks."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    cx, cy = center
    d = radius / math.sqrt(2.0)
    signs = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    vertices = []
    for sx, sy in signs:  # outer corners, on the circle
        vertices.append(Vertex(len(vertices), cx + sx * d, cy + sy * d, True, 0))
    for sx, sy in signs:  # inner square corners
        vertices.append(Vertex(len(vertices), cx + 0.5 * sx * d, cy + 0.5 * sy * d, False, 0))
    cells = [
        Cell(0, (4, 5, 6, 7), level=0),  # center square
        Cell(1, (0, 1, 5, 4), level=0),  # south
        Cell(2, (1, 2, 6, 5), level=0),  # east
        Cell(3, (2, 3, 7, 6), level=0),  # north
        Cell(4, (3, 0, 4, 7), level=0),  # west
    ]
    boundary_edges = {_ekey(0, 1), _ekey(1, 2), _ekey(2, 3), _ekey(3, 0)}
    return Mesh(vertices, cells, DiscGeometry((cx, cy), radius), boundary_edges, {})


# -- refinement ------------------------------------------------------------


def refine(mesh, marked):
    """Refine the marked active cells plus whatever closure needs.

    Returns a new mesh; ids of surviving vertices/cells are unchanged.
    """
    marked = set(int(m) for m in marked)
    active = set(int(i) for i in mesh.active_cell_ids())
    bad = marked - active
    if bad:
        raise ValueError(f"cannot refine inactive or unknown cells: {sorted(bad)}")

    vertices = list(mesh.vertices)
    cells = list(mesh.cells)
    boundary_edges = set(mesh.boundary_edges)
    edge_midpoint = dict(mesh.edge_midpoint)
    snap = isinstance(mesh.geometry, DiscGeometry)

    def midpoint_vertex(a, b):
        key = _ekey(a, b)
        m = edge_midpoint.get(key)
        if m is not None:
            return m
        va, vb = vertices[a], vertices[b]
        x, y = 0.5 * (va.x + vb.x), 0.5 * (va.y + vb.y)
        on_b = key in boundary_edges
        if on_b and snap:
            cx, cy = mesh.geometry.center
            r = mesh.geometry.radius
            dx, dy = x - cx, y - cy
            norm = math.hypot(dx, dy)
            x, y = cx + r * dx / norm, cy + r * dy / norm
        m = len(vertices)
        vertices.append(Vertex(m, x, y, on_b, 0))
        edge_midpoint[key] = m
        if on_b:
            boundary_edges.add(_ekey(a, m))
            boundary_edges.add(_ekey(m, b))
        return m

    def split(cid):
        cell = cells[cid]
        v0, v1, v2, v3 = cell.vertex_ids
        m01 = midpoint_vertex(v0, v1)
        m12 = midpoint_vertex(v1, v2)
        m23 = midpoint_vertex(v2, v3)
        m30 = midpoint_vertex(v3, v0)
        cvid = len(vertices)
        xs = [vertices[v].x for v in cell.vertex_ids]
        ys = [vertices[v].y for v in cell.vertex_ids]
        vertices.append(Vertex(cvid, 0.25 * sum(xs), 0.25 * sum(ys), False, 0))
        base = len(cells)
        lvl = cell.level + 1
        kids = (
            Cell(base, (v0, m01, cvid, m30), lvl, cid),
            Cell(base + 1, (m01, v1, m12, cvid), lvl, cid),
            Cell(base + 2, (cvid, m12, v2, m23), lvl, cid),
            Cell(base + 3, (m30, cvid, m23, v3), lvl, cid),
        )
        cells.extend(kids)
        cells[cid] = replace(cell, active=False, children=(base, base + 1, base + 2, base + 3))

    for cid in sorted(marked):
        split(cid)

    # closure: a cell whose edge midpoint has itself been split faces
    # grandchildren across that edge, violating 1-irregularity
    changed = True
    while changed:
        changed = False
        for cid in range(len(cells)):
            cell = cells[cid]
            if not cell.active:
                continue
            v = cell.vertex_ids
            for e in range(4):
                a, b = v[e], v[(e + 1) % 4]
                m = edge_midpoint.get(_ekey(a, b))
                if m is None:
                    continue
                if _ekey(a, m) in edge_midpoint or _ekey(m, b) in edge_midpoint:
                    split(cid)
                    changed = True
                    break

    return Mesh(vertices, cells, mesh.geometry, boundary_edges, edge_midpoint)


def _point_quad_distance(p, corners):
    """Distance from a point to a convex CCW quad (0 if inside)."""
    inside = True
    dmin = math.inf
    for i in range(4):
        ax, ay = corners[i]
        bx, by = corners[(i + 1) % 4]
        ex, ey = bx - ax, by - ay
        px, py = p[0] - ax, p[1] - ay
        if ex * py - ey * px < 0:
            inside = False
        ee = ex * ex + ey * ey
        t = 0.0 if ee == 0 else max(0.0, min(1.0, (px * ex + py * ey) / ee))
        dx, dy = px - t * ex, py - t * ey
        dmin = min(dmin, math.hypot(dx, dy))
    return 0.0 if inside else dmin


def prerefine_near_points(mesh, points, levels, radius):
    """Refine ``levels`` times around the given points, halving the radius each pass.

    Each pass refines every active cell whose closure intersects the ball of
    the current radius about any point.
    """
    if levels < 0:
        raise ValueError(f"levels must be >= 0, got {levels}")
    pts = [np.asarray(p, dtype=float) for p in points]
    r = float(radius)
    for _ in range(levels):
        if not pts:
            break
        marked = []
        coords = mesh.active_coords()
        ids = mesh.active_cell_ids()
        for k in range(len(ids)):
            corners = coords[k]
            if any(_point_quad_distance(p, corners) <= r for p in pts):
                marked.append(int(ids[k]))
        if marked:
            mesh = refine(mesh, marked)
        r *= 0.5
    return mesh

"""Mesh front end: triangulated lumen surface + centerline polyline ->
station samples {s_i, r_i, t_i, a_i, p_i+-}.

Centerline extraction itself is out of scope; the polyline is an input
(CSV or JSON). All quantities are millimeters throughout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateContour,
    DegeneratePolyline,
    EmptyMesh,
    NoIntersection,
    ParseError,
)

WELD_TOL = 1e-6
CHAIN_TOL = 1e-6


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (n,3) mm
    triangles: np.ndarray  # (m,3) int indices
    n_dropped: int = 0  # degenerate triangles removed at load time


@dataclass(frozen=True)
class CenterlinePolyline:
    points: np.ndarray  # (k,3) mm, ordered
    s0: np.ndarray  # (k,) cumulative arc length, s0[0]=0

    @property
    def length(self) -> float:
        return float(self.s0[-1])

    def position_at(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        return np.stack(
            [np.interp(s, self.s0, self.points[:, i]) for i in range(3)],
            axis=-1,
        )

    def tangent_at(self, s):
        """Unit tangent by central differences, one-sided at the ends."""
        s = float(np.clip(s, 0.0, self.length))
        k = np.searchsorted(self.s0, s)
        k = int(np.clip(k, 1, len(self.s0) - 1))
        h = 0.25 * min(self.s0[k] - self.s0[k - 1],
                       self.s0[min(k + 1, len(self.s0) - 1)]
                       - self.s0[k] or self.s0[k] - self.s0[k - 1])
        h = max(h, 1e-9)
        lo, hi = s - h, s + h
        if lo < 0.0:
            lo, hi = 0.0, min(2 * h, self.length)
        if hi > self.length:
            lo, hi = max(self.length - 2 * h, 0.0), self.length
        d = self.position_at(hi) - self.position_at(lo)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise DegeneratePolyline("zero tangent")
        return d / n


@dataclass(frozen=True)
class StationSample:
    """Cross-section descriptor at one arc-length station."""

    s: float
    r: np.ndarray
    t: np.ndarray
    a: float
    p_minus: np.ndarray
    p_plus: np.ndarray
    anisotropy: float
    reliable: bool = True

    def to_json_dict(self):
        return {
            "s": self.s,
            "r": [float(v) for v in self.r],
            "t": [float(v) for v in self.t],
            "a": self.a,
            "p_minus": [float(v) for v in self.p_minus],
            "p_plus": [float(v) for v in self.p_plus],
            "anisotropy": self.anisotropy,
        }


# ---------------------------------------------------------------------------
# STL ingestion
# ---------------------------------------------------------------------------


def _weld(raw_vertices, raw_triangles):
    quant = np.round(raw_vertices / WELD_TOL).astype(np.int64)
    _, first, inverse = np.unique(quant, axis=0, return_index=True,
                                  return_inverse=True)
    vertices = raw_vertices[first]
    triangles = inverse[raw_triangles]
    # drop collapsed or zero-area triangles
    v0 = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - v0
    e2 = vertices[triangles[:, 2]] - v0
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    collapsed = (
        (triangles[:, 0] == triangles[:, 1])
        | (triangles[:, 1] == triangles[:, 2])
        | (triangles[:, 0] == triangles[:, 2])
        | (area2 < 1e-12)
    )
    dropped = int(collapsed.sum())
    triangles = triangles[~collapsed]
    if len(triangles) == 0:
        raise EmptyMesh("no non-degenerate triangles")
    return TriMesh(vertices=vertices, triangles=triangles, n_dropped=dropped)


def _load_stl_binary(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(data) < 84:
        raise ParseError("binary STL shorter than header")
    (count,) = struct.unpack_from("<I", data, 80)
    expected = 84 + 50 * count
    if len(data) < expected:
        raise ParseError(
            f"binary STL truncated: {count} triangles declared, "
            f"{len(data)} bytes present"
        )
    rec = np.frombuffer(data[84:expected], dtype=np.uint8).reshape(count, 50)
    floats = rec[:, :48].copy().view("<f4").reshape(count, 12).astype(float)
    verts = floats[:, 3:12].reshape(count * 3, 3)
    tris = np.arange(count * 3).reshape(count, 3)
    return verts, tris


def _load_stl_ascii(text: str) -> tuple[np.ndarray, np.ndarray]:
    verts = []
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 4 and parts[0] == "vertex":
            try:
                verts.append([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise ParseError(f"bad vertex line: {line!r}") from exc
    if not verts or len(verts) % 3 != 0:
        raise ParseError("ASCII STL has no complete facets")
    verts = np.array(verts)
    tris = np.arange(len(verts)).reshape(-1, 3)
    return verts, tris


def load_trimesh(path, fmt="auto") -> TriMesh:
    """Load an STL surface, weld duplicate vertices, drop degenerate faces."""
    with open(path, "rb") as fh:
        data = fh.read()
    if fmt == "auto":
        # ASCII files start with 'solid' and decode cleanly; binary files
        # may also start with 'solid', so verify the ASCII parse.
        fmt = "stl-binary"
        if data[:5] == b"solid":
            try:
                data.decode("ascii")
                fmt = "stl-ascii"
            except UnicodeDecodeError:
                pass
    if fmt == "stl-ascii":
        verts, tris = _load_stl_ascii(data.decode("ascii", errors="strict"))
    elif fmt == "stl-binary":
        verts, tris = _load_stl_binary(data)
    else:
        raise ValueError(f"unknown STL format {fmt!r}")
    if len(verts) == 0:
        raise EmptyMesh(str(path))
    return _weld(verts, tris)


def load_centerline(path) -> CenterlinePolyline:
    """Centerline polyline from CSV (x,y,z per row) or a JSON array."""
    text = open(path).read()
    stripped = text.lstrip()
    if stripped.startswith("[") or stripped.startswith("{"):
        pts = np.array(json.loads(text), dtype=float)
    else:
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p for p in line.replace(",", " ").split() if p]
            try:
                rows.append([float(x) for x in parts[:3]])
            except ValueError:
                continue  # header row
        pts = np.array(rows, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise ParseError(f"centerline file {path} has no usable xyz rows")
    return arclength_parametrize(pts)


# ---------------------------------------------------------------------------
# Centerline parametrization and sample selection
# ---------------------------------------------------------------------------


def arclength_parametrize(points) -> CenterlinePolyline:
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        raise DegeneratePolyline("need at least 2 points")
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    if np.any(seg == 0.0):
        raise DegeneratePolyline("repeated consecutive points")
    s0 = np.concatenate([[0.0], np.cumsum(seg)])
    return CenterlinePolyline(points=points, s0=s0)


def _discrete_curvature(cl: CenterlinePolyline) -> np.ndarray:
    """Turn angle per unit length at interior vertices; zero at ends."""
    p = cl.points
    kap = np.zeros(len(p))
    d = np.diff(p, axis=0)
    ln = np.linalg.norm(d, axis=1)
    u = d / ln[:, None]
    cosang = np.clip(np.einsum("ij,ij->i", u[:-1], u[1:]), -1.0, 1.0)
    ang = np.arccos(cosang)
    kap[1:-1] = ang / (0.5 * (ln[:-1] + ln[1:]))
    return kap


def select_samples(cl: CenterlinePolyline, n: int, gamma: float = 0.0):
    """Arc-length sample locations 0 = s_0 < ... < s_n = L.

    gamma = 0 gives uniform spacing; gamma > 0 allocates interior samples
    with density proportional to (1 + gamma * curvature), rescaled so the
    endpoints are hit exactly.
    """
    if n < 2:
        raise ValueError("need at least 2 segments")
    L = cl.length
    if gamma == 0.0:
        return np.linspace(0.0, L, n + 1)
    kap = _discrete_curvature(cl)
    dens = 1.0 + gamma * kap
    # cumulative integral of the density along the polyline, then invert
    W = np.concatenate([[0.0], np.cumsum(
        0.5 * (dens[1:] + dens[:-1]) * np.diff(cl.s0))])
    targets = np.linspace(0.0, W[-1], n + 1)
    s = np.interp(targets, W, cl.s0)
    s[0], s[-1] = 0.0, L
    return s


# ---------------------------------------------------------------------------
# Plane slicing and section analysis
# ---------------------------------------------------------------------------


def slice_normal_plane(mesh: TriMesh, r_i, t_i):
    """Intersect the mesh with the plane through r_i orthogonal to t_i.

    Returns a list of chained contours, each an (k,3) array of points.
    """
    r_i = np.asarray(r_i, dtype=float)
    t_i = np.asarray(t_i, dtype=float)
    d = (mesh.vertices - r_i) @ t_i
    # nudge exact-zero vertices off the plane so every crossing is an edge
    d = np.where(d == 0.0, 1e-300, d)
    dv = d[mesh.triangles]  # (m,3)
    sign = dv > 0.0
    crossing = (sign.any(axis=1)) & (~sign.all(axis=1))
    if not crossing.any():
        raise NoIntersection("plane misses the mesh")
    segments = []
    tri = mesh.triangles[crossing]
    dvc = dv[crossing]
    edges = [(0, 1), (1, 2), (2, 0)]
    pts_on = np.zeros((len(tri), 2, 3))
    for row in range(len(tri)):
        hits = []
        for (i, j) in edges:
            di, dj = dvc[row, i], dvc[row, j]
            if (di > 0) != (dj > 0):
                w = di / (di - dj)
                p = (1 - w) * mesh.vertices[tri[row, i]] \
                    + w * mesh.vertices[tri[row, j]]
                hits.append(p)
        if len(hits) == 2:
            pts_on[row, 0] = hits[0]
            pts_on[row, 1] = hits[1]
            segments.append(row)
    pts_on = pts_on[segments]
    return _chain_segments(pts_on)


def _chain_segments(segs: np.ndarray):
    """Chain (m,2,3) segments into polylines by endpoint matching."""
    key = lambda p: tuple(np.round(p / CHAIN_TOL).astype(np.int64))
    adj: dict[tuple, list[tuple[int, int]]] = {}
    for i, seg in enumerate(segs):
        for end in (0, 1):
            adj.setdefault(key(seg[end]), []).append((i, end))
    used = np.zeros(len(segs), dtype=bool)
    contours = []
    for start in range(len(segs)):
        if used[start]:
            continue
        # walk forward from both ends of the starting segment
        chain = [segs[start, 0], segs[start, 1]]
        used[start] = True
        for direction in (1, 0):
            while True:
                k = key(chain[-1] if direction == 1 else chain[0])
                nxt = [(i, e) for (i, e) in adj.get(k, []) if not used[i]]
                if not nxt:
                    break
                i, e = nxt[0]
                used[i] = True
                other = segs[i, 1 - e]
                if direction == 1:
                    chain.append(other)
                else:
                    chain.insert(0, other)
        contours.append(np.array(chain))
    return contours


def select_component(contours, r_i):
    """Contour whose centroid is nearest r_i; ties go to more points."""
    if not contours:
        raise NoIntersection("no contour components")
    r_i = np.asarray(r_i, dtype=float)
    best = None
    for c in contours:
        dist = np.linalg.norm(c.mean(axis=0) - r_i)
        rank = (dist, -len(c))
        if best is None or rank[0] < best[0][0] - 1e-9 or (
            abs(rank[0] - best[0][0]) <= 1e-9 and rank[1] < best[0][1]
        ):
            best = (rank, c)
    return best[1]


def _inplane_basis(t_i):
    """Deterministic orthonormal basis (e2, e3) of the plane normal to t_i."""
    t_i = np.asarray(t_i, dtype=float)
    axis = int(np.argmin(np.abs(t_i)))
    e_hat = np.zeros(3)
    e_hat[axis] = 1.0
    e2 = np.cross(t_i, e_hat)
    e2 = e2 / np.linalg.norm(e2)
    e3 = np.cross(t_i, e2)
    return e2, e3


def pca_section(contour, r_i, t_i):
    """In-plane PCA of a contour: endpoints, effective radius, anisotropy.

    Returns (p_minus, p_plus, a, anisotropy) with endpoints taken by
    extremal projection of the contour points onto the leading in-plane
    principal direction.
    """
    contour = np.asarray(contour, dtype=float)
    if len(contour) < 2:
        raise DegenerateContour("contour needs at least 2 points")
    r_i = np.asarray(r_i, dtype=float)
    e2, e3 = _inplane_basis(t_i)
    rel = contour - r_i
    q = np.column_stack([rel @ e2, rel @ e3])
    qc = q - q.mean(axis=0)
    cov = qc.T @ qc / len(q)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    lam1, lam2 = evals[1], evals[0]
    if lam1 < 1e-12:
        raise DegenerateContour("rank-0 in-plane covariance")
    u1 = evecs[:, 1]
    if u1[0] < 0 or (u1[0] == 0 and u1[1] < 0):
        u1 = -u1
    proj = q @ u1
    j_minus, j_plus = int(np.argmin(proj)), int(np.argmax(proj))
    p_minus, p_plus = contour[j_minus], contour[j_plus]
    a = 0.5 * np.linalg.norm(p_plus - p_minus)
    anisotropy = float(max(lam2, 0.0) / lam1)
    return p_minus, p_plus, float(a), anisotropy


def _extremal_along(contour, r_i, direction):
    proj = (contour - r_i) @ direction
    j_minus, j_plus = int(np.argmin(proj)), int(np.argmax(proj))
    p_minus, p_plus = contour[j_minus], contour[j_plus]
    return p_minus, p_plus, 0.5 * float(np.linalg.norm(p_plus - p_minus))


def smooth_contour(contour):
    """Optional 3-point moving average (closed-loop wrap)."""
    prev = np.roll(contour, 1, axis=0)
    nxt = np.roll(contour, -1, axis=0)
    return (prev + contour + nxt) / 3.0


def extract_stations(
    mesh: TriMesh,
    cl: CenterlinePolyline,
    s_samples,
    smoothing: bool = False,
    anisotropy_threshold: float = 0.9,
):
    """Full station-extraction pipeline over the given arc-length samples.

    Near-circular sections (anisotropy above the threshold) have an
    ill-conditioned major axis; for those the previous station's in-plane
    direction is parallel-transported instead and the sample is flagged.
    """
    stations = []
    prev_dir = None
    for s in np.asarray(s_samples, dtype=float):
        r = cl.position_at(s)
        t = cl.tangent_at(s)
        contours = slice_normal_plane(mesh, r, t)
        contour = select_component(contours, r)
        if smoothing:
            contour = smooth_contour(contour)
        p_minus, p_plus, a, anisotropy = pca_section(contour, r, t)
        reliable = anisotropy <= anisotropy_threshold
        if not reliable and prev_dir is not None:
            d = prev_dir - (prev_dir @ t) * t
            norm = np.linalg.norm(d)
            if norm > 1e-9:
                d = d / norm
                p_minus, p_plus, a = _extremal_along(contour, r, d)
        u = p_plus - p_minus
        prev_dir = u / np.linalg.norm(u)
        stations.append(StationSample(
            s=float(s), r=r, t=t, a=a, p_minus=p_minus, p_plus=p_plus,
            anisotropy=anisotropy, reliable=reliable,
        ))
    return stations


def estimate_b_profiles(mesh, cl, stations):
    """Half extents on each side of the PCA major-axis line.

    The split direction is the in-plane normal of the major axis; 'upper' is
    the half along +direction. This is the stated measurement rule for the
    vertical semi-axes, which the underlying formulation leaves open.
    """
    b_u, b_l = [], []
    for st in stations:
        contours = slice_normal_plane(mesh, st.r, st.t)
        contour = select_component(contours, st.r)
        u = st.p_plus - st.p_minus
        u = u / np.linalg.norm(u)
        v = np.cross(st.t, u)
        v = v / np.linalg.norm(v)
        mid = 0.5 * (st.p_plus + st.p_minus)
        h = (contour - mid) @ v
        hi = h.max()
        lo = -h.min()
        b_u.append(max(hi, 1e-9))
        b_l.append(max(lo, 1e-9))
    return np.array(b_u), np.array(b_l)


def save_stations_json(stations, path):
    with open(path, "w") as fh:
        json.dump([st.to_json_dict() for st in stations], fh)


def load_stations_json(path):
    with open(path) as fh:
        data = json.load(fh)
    return [
        StationSample(
            s=d["s"], r=np.array(d["r"]), t=np.array(d["t"]), a=d["a"],
            p_minus=np.array(d["p_minus"]), p_plus=np.array(d["p_plus"]),
            anisotropy=d["anisotropy"],
        )
        for d in data
    ]


def mesh_from_lumen(model, chord=0.1):
    """Triangulate a lumen surface at roughly the given chord length.

    Used to exercise the mesh pipeline against known ground truth.
    """
    n_s = max(int(np.ceil(model.L / chord)), 4)
    widest = float(max(model.a_nodes.max(), model.bu_nodes.max(),
                       model.bl_nodes.max()))
    n_b = max(int(np.ceil(2 * np.pi * widest / chord)), 8)
    s_grid = np.linspace(0.0, model.L, n_s + 1)
    beta_grid = np.linspace(0.0, 2 * np.pi, n_b, endpoint=False)
    S, B = np.meshgrid(s_grid, beta_grid, indexing="ij")
    pts = model.surface_point_many(S.ravel(), B.ravel())
    verts = pts.reshape(n_s + 1, n_b, 3)
    tris = []
    for i in range(n_s):
        for j in range(n_b):
            jn = (j + 1) % n_b
            v00 = i * n_b + j
            v01 = i * n_b + jn
            v10 = (i + 1) * n_b + j
            v11 = (i + 1) * n_b + jn
            tris.append([v00, v10, v11])
            tris.append([v00, v11, v01])
    return TriMesh(vertices=verts.reshape(-1, 3),
                   triangles=np.array(tris, dtype=np.int64))

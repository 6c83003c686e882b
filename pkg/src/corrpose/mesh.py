"""Triangle meshes: container, ASCII PLY/OBJ loading, procedural primitives and
geometric perturbations used to emulate approximate CAD models."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import FormatError


def _max_pairwise_distance(vertices: np.ndarray) -> float:
    pts = vertices
    if len(pts) > 64:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    # squared distances through the Gram matrix find the near-maximal pairs
    # fast; the exact norm is then taken only for those pairs
    sq = np.einsum("ij,ij->i", pts, pts)
    top, best = 0.0, 0.0
    for start in range(0, len(pts), 1024):
        blk = pts[start : start + 1024] @ pts.T
        blk *= -2.0
        blk += sq[None, :]
        blk += sq[start : start + 1024, None]
        top = max(top, float(blk.max()))
        i, j = np.nonzero(blk >= top * (1 - 1e-6) - 1e-12)
        best = max(best, float(np.linalg.norm(pts[start + i] - pts[j], axis=1).max()))
    return best


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Vertices in meters and triangles as index triples."""

    vertices: np.ndarray
    triangles: np.ndarray
    bbox: np.ndarray = field(init=False)
    diameter: float = field(init=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(v) == 0 or len(f) == 0:
            raise ValueError("mesh needs at least one vertex and one triangle")
        if f.min() < 0 or f.max() >= len(v):
            raise ValueError("triangle index out of range")
        diameter = _max_pairwise_distance(v)
        if diameter <= 0:
            raise ValueError("mesh diameter must be positive")
        bbox = np.stack([v.min(axis=0), v.max(axis=0)])
        for a in (v, f, bbox):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        object.__setattr__(self, "bbox", bbox)
        object.__setattr__(self, "diameter", diameter)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bbox[0] + self.bbox[1])

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.triangles)


def merge(*meshes: TriMesh) -> TriMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriMesh(np.concatenate(verts), np.concatenate(tris))


# ---------------------------------------------------------------- loading


def load_mesh(path) -> TriMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return _load_ply(path)
    if suffix == ".obj":
        return _load_obj(path)
    raise FormatError(f"{path}: unsupported mesh format {suffix!r}")


def _load_ply(path: Path) -> TriMesh:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: missing 'ply' magic")
    elements = []  # (name, count, [property names])
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property" and elements:
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            break
    vertices, faces = None, []
    for name, count, props in elements:
        body = lines[i : i + count]
        i += count
        if name == "vertex":
            try:
                idx = [props.index(a) for a in ("x", "y", "z")]
            except ValueError as exc:
                raise FormatError(f"{path}: vertex element lacks x/y/z") from exc
            rows = np.array([[float(t) for t in ln.split()] for ln in body]).reshape(count, -1)
            vertices = rows[:, idx]
        elif name == "face":
            for ln in body:
                vals = [int(t) for t in ln.split()]
                n = vals[0]
                poly = vals[1 : 1 + n]
                # fan-triangulate polygons
                faces.extend([poly[0], poly[k], poly[k + 1]] for k in range(1, n - 1))
    if vertices is None:
        raise FormatError(f"{path}: no vertex element")
    return TriMesh(vertices, np.array(faces, dtype=np.int64))


def _load_obj(path: Path) -> TriMesh:
    verts, faces = [], []
    for ln in path.read_text().splitlines():
        tok = ln.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            idx = []
            for t in tok[1:]:
                k = int(t.split("/")[0])
                idx.append(k - 1 if k > 0 else len(verts) + k)
            faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64))


def save_ply(mesh: TriMesh, path) -> None:
    out = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    out += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------- primitives


_BOX_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [1, 2, 6], [1, 6, 5],  # +x
        [0, 4, 7], [0, 7, 3],  # -x
    ]
)


def box(size, center=(0.0, 0.0, 0.0), subdivisions: int = 0) -> TriMesh:
    """Axis-aligned box with outward-facing triangles.

    Each subdivision level splits every triangle into four, which gives
    farthest-point sampling and mesh perturbations more vertices to work
    with.
    """
    sx, sy, sz = (0.5 * s for s in size)
    c = np.asarray(center, dtype=float)
    corners = np.array(
        [[-sx, -sy, -sz], [sx, -sy, -sz], [sx, sy, -sz], [-sx, sy, -sz],
         [-sx, -sy, sz], [sx, -sy, sz], [sx, sy, sz], [-sx, sy, sz]]
    ) + c
    mesh = TriMesh(corners, _BOX_FACES)
    for _ in range(subdivisions):
        mesh = subdivide(mesh)
    return mesh


def subdivide(mesh: TriMesh) -> TriMesh:
    """Midpoint subdivision (each triangle into four), sharing edge midpoints."""
    verts = [tuple(v) for v in mesh.vertices]
    mids = {}

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in mids:
            mids[key] = len(verts)
            verts.append(tuple(0.5 * (mesh.vertices[a] + mesh.vertices[b])))
        return mids[key]

    faces = []
    for a, b, c in mesh.triangles:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
    return TriMesh(np.array(verts), np.array(faces))


def uv_sphere(radius: float = 1.0, n_lon: int = 32, n_lat: int = 16, center=(0.0, 0.0, 0.0)) -> TriMesh:
    verts = [[0.0, 0.0, radius]]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_lon):
            lam = 2 * np.pi * j / n_lon
            verts.append([radius * np.sin(phi) * np.cos(lam), radius * np.sin(phi) * np.sin(lam), radius * np.cos(phi)])
    verts.append([0.0, 0.0, -radius])
    south = len(verts) - 1
    faces = []
    for j in range(n_lon):
        faces.append([0, 1 + j, 1 + (j + 1) % n_lon])
    for i in range(n_lat - 2):
        r0, r1 = 1 + i * n_lon, 1 + (i + 1) * n_lon
        for j in range(n_lon):
            j1 = (j + 1) % n_lon
            faces.append([r0 + j, r1 + j, r1 + j1])
            faces.append([r0 + j, r1 + j1, r0 + j1])
    last = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        faces.append([last + j, south, last + (j + 1) % n_lon])
    return TriMesh(np.array(verts) + np.asarray(center, dtype=float), np.array(faces))


def icosphere_directions(n_views: int) -> np.ndarray:
    """Unit vertices of a subdivided icosahedron: 12, 42, 162, 642, 2562, ..."""
    counts = {}
    n, level = 12, 0
    while n <= n_views:
        counts[n] = level
        level += 1
        n = 10 * 4**level + 2
    if n_views not in counts:
        raise ValueError(f"n_views must be 10*4^k + 2 (12, 42, 162, ...), got {n_views}")
    p = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
         [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
         [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]],
        dtype=float,
    )
    faces = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )
    mesh = TriMesh(verts, faces)
    for _ in range(counts[n_views]):
        mesh = subdivide(mesh)
    v = mesh.vertices
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def satellite(scale: float = 1.0, subdivisions: int = 1) -> TriMesh:
    """Low-poly asymmetric test object: a bus, one solar panel, an antenna
    mast with a dish plate and a thruster block. Roughly 0.4 m across at
    ``scale=1``; the asymmetry makes every pose distinguishable."""
    parts = [
        box((0.20, 0.16, 0.12), (0.0, 0.0, 0.0), subdivisions),
        box((0.16, 0.10, 0.01), (0.18, 0.01, 0.0), subdivisions),
        box((0.02, 0.02, 0.10), (-0.04, 0.03, 0.11), 0),
        box((0.08, 0.06, 0.015), (-0.04, 0.03, 0.165), 0),
        box((0.05, 0.05, 0.04), (0.03, -0.10, -0.03), 0),
    ]
    m = merge(*parts)
    return m.with_vertices(m.vertices * scale)


# ---------------------------------------------------------------- perturbations


def taper(mesh: TriMesh, amount: float, axis: int = 2) -> TriMesh:
    """Linear taper: coordinates orthogonal to ``axis`` scale by
    ``1 + amount * s`` where ``s`` runs from -1 to 1 along ``axis`` over the
    bounding box. Vertex order and topology are preserved, so vertex ``i``
    of the result corresponds to vertex ``i`` of the input."""
    v = mesh.vertices.copy()
    lo, hi = mesh.bbox[0, axis], mesh.bbox[1, axis]
    s = (2.0 * (v[:, axis] - lo) / (hi - lo)) - 1.0
    center = mesh.center
    others = [a for a in range(3) if a != axis]
    for a in others:
        v[:, a] = center[a] + (v[:, a] - center[a]) * (1.0 + amount * s)
    return mesh.with_vertices(v)


def mean_nn_distance(reference: TriMesh, other: TriMesh) -> float:
    """Mean distance from each vertex of ``reference`` to its nearest vertex in ``other``."""
    d, _ = cKDTree(other.vertices).query(reference.vertices, k=1)
    return float(np.mean(d))


def taper_to_error(mesh: TriMesh, target: float, axis: int = 2) -> tuple[TriMesh, float]:
    """Bisect the taper amount so the mean nearest-neighbor vertex error hits ``target``."""
    lo, hi = 0.0, 1.0
    while mean_nn_distance(mesh, taper(mesh, hi, axis)) < target:
        hi *= 2.0
        if hi > 64:
            raise ValueError("target error not reachable by tapering")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mean_nn_distance(mesh, taper(mesh, mid, axis)) < target:
            lo = mid
        else:
            hi = mid
    amount = 0.5 * (lo + hi)
    return taper(mesh, amount, axis), amount

"""Triangle meshes, sampled point sets and their local differential data.

Meshes are plain indexed triangle lists.  Point sets optionally carry
per-point neighborhoods (mesh one-rings or k-NN) together with the fitted
local plane of each neighborhood: a unit normal and the point-to-plane
distance.  The plane quantities are the rigid-invariant features consumed
by the shape-preservation losses.

Everything here is immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import runtime

DEGENERATE_FACE_AREA = 1e-12
_COLLINEAR_RTOL = 1e-10


class MeshError(Exception):
    """Invalid mesh topology or geometry."""


@dataclass
class TriMesh:
    """Indexed triangle mesh; also used for cages.

    vertices: (V, 3) float positions.
    faces: (F, 3) integer vertex indices, consistently oriented for cages.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError(
                    f"face index out of range [0, {len(self.vertices)})"
                )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self.vertices):
            raise MeshError("empty mesh has no bounding box")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diameter(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def directed_edges(self) -> Counter:
        c = Counter()
        for a, b, cc in self.faces:
            c[(int(a), int(b))] += 1
            c[(int(b), int(cc))] += 1
            c[(int(cc), int(a))] += 1
        return c

    def is_closed_oriented(self) -> bool:
        """True when every undirected edge appears exactly once per direction."""
        edges = self.directed_edges()
        if any(n != 1 for n in edges.values()):
            return False
        return all((b, a) in edges for (a, b) in edges)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(np.asarray(vertices, dtype=np.float64), self.faces.copy())


def validate_cage(mesh: TriMesh) -> None:
    """Raise unless the mesh is a usable cage (closed, consistently oriented)."""
    if mesh.n_faces == 0:
        raise MeshError("cage has no faces")
    if not mesh.is_closed_oriented():
        raise MeshError("cage must be closed and consistently oriented")


@dataclass
class PointSet:
    """Sampled or vertex positions with optional per-point plane fits."""

    points: np.ndarray
    neighborhoods: list | None = None
    pca_normals: np.ndarray | None = None
    pca_offsets: np.ndarray | None = None
    pca_degenerate: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if self.neighborhoods is not None and len(self.neighborhoods) != n:
            raise ValueError("neighborhood count must match point count")
        if self.pca_normals is not None:
            self.pca_normals = np.asarray(self.pca_normals, dtype=np.float64)
            if self.pca_normals.shape != (n, 3):
                raise ValueError("pca_normals shape mismatch")
            lens = np.linalg.norm(self.pca_normals, axis=1)
            if np.any(np.abs(lens - 1.0) > 1e-6):
                raise ValueError("pca_normals must be unit length")
        if self.pca_offsets is not None:
            self.pca_offsets = np.asarray(self.pca_offsets, dtype=np.float64)
            if self.pca_offsets.shape != (n,):
                raise ValueError("pca_offsets shape mismatch")

    def __len__(self) -> int:
        return len(self.points)

    def has_frames(self) -> bool:
        return (
            self.neighborhoods is not None
            and self.pca_normals is not None
            and self.pca_offsets is not None
        )


@dataclass
class Transform:
    """Uniform scale followed by translation: x -> scale * x + translation."""

    scale: float
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) + self.translation

    def inverse(self) -> "Transform":
        return Transform(1.0 / self.scale, -self.translation / self.scale)


def normalize_to_unit_box(mesh: TriMesh) -> tuple[TriMesh, Transform]:
    """Center at the origin and scale the longest bbox side to length 1."""
    if not len(mesh.vertices):
        raise MeshError("cannot normalize an empty mesh")
    lo, hi = mesh.bbox()
    side = float((hi - lo).max())
    if side == 0.0:
        raise MeshError("mesh has zero extent")
    scale = 1.0 / side
    center = 0.5 * (lo + hi)
    t = Transform(scale, -center * scale)
    return mesh.with_vertices(t.apply(mesh.vertices)), t


def sample_surface(mesh: TriMesh, n: int, seed: int) -> PointSet:
    """Draw ``n`` area-uniform surface samples, deterministic per seed."""
    areas = mesh.face_areas()
    total = areas.sum()
    if mesh.n_faces == 0 or total <= 0.0:
        raise MeshError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    fidx = rng.choice(mesh.n_faces, size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a = 1.0 - r1
    b = r1 * (1.0 - r2)
    c = r1 * r2
    tri = mesh.vertices[mesh.faces[fidx]]
    pts = a[:, None] * tri[:, 0] + b[:, None] * tri[:, 1] + c[:, None] * tri[:, 2]
    return PointSet(points=pts)


def reflect_x(points: PointSet | np.ndarray):
    """Mirror across the x=0 plane.  Derived per-point data is dropped."""
    if isinstance(points, PointSet):
        return PointSet(points=points.points * np.array([-1.0, 1.0, 1.0]))
    return np.asarray(points, dtype=np.float64) * np.array([-1.0, 1.0, 1.0])


class SpatialIndex:
    """Exact nearest-neighbor queries over a fixed point set."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not len(pts):
            raise ValueError("cannot index an empty point set")
        self._tree = cKDTree(pts)
        self.points = pts

    def query(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d, i = self._tree.query(
            np.asarray(q, dtype=np.float64), workers=runtime.kdtree_workers()
        )
        return d, i

    def query_index(self, q: np.ndarray) -> np.ndarray:
        return self.query(q)[1]


# -- neighborhoods ---------------------------------------------------------


def one_ring_neighborhoods(mesh: TriMesh) -> list:
    """Per-vertex sorted one-ring neighbor indices (center excluded)."""
    ring = defaultdict(set)
    for a, b, c in mesh.faces:
        ring[int(a)].update((int(b), int(c)))
        ring[int(b)].update((int(a), int(c)))
        ring[int(c)].update((int(a), int(b)))
    return [
        np.array(sorted(ring.get(i, ())), dtype=np.int64)
        for i in range(mesh.n_vertices)
    ]


def knn_neighborhoods(points: np.ndarray, k: int = 8) -> list:
    """k nearest neighbors of each point, excluding the point itself."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) <= k:
        raise ValueError(f"need more than {k} points for k={k} neighborhoods")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k + 1, workers=runtime.kdtree_workers())
    out = []
    for i in range(len(pts)):
        nb = idx[i][idx[i] != i][:k]
        out.append(np.sort(nb).astype(np.int64))
    return out


def pad_neighborhoods(neigh: list) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pack ragged neighbor lists into (index, mask, count) arrays."""
    n = len(neigh)
    kmax = max(len(nb) for nb in neigh)
    idx = np.zeros((n, kmax), dtype=np.int64)
    mask = np.zeros((n, kmax), dtype=np.float64)
    counts = np.zeros(n, dtype=np.float64)
    for i, nb in enumerate(neigh):
        idx[i, : len(nb)] = nb
        mask[i, : len(nb)] = 1.0
        counts[i] = len(nb)
    return idx, mask, counts


# -- local plane fits -------------------------------------------------------


def _canonical_normal_signs(normals: np.ndarray) -> np.ndarray:
    """+1/-1 making each normal point toward +z (ties: +y, then +x)."""
    s = np.sign(normals[:, 2])
    tie = s == 0.0
    s[tie] = np.sign(normals[tie, 1])
    tie = s == 0.0
    s[tie] = np.sign(normals[tie, 0])
    s[s == 0.0] = 1.0
    return s


def _line_orthogonal(direction: np.ndarray) -> np.ndarray:
    """Deterministic unit vector orthogonal to ``direction``."""
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(direction)))] = 1.0
    n = np.cross(direction, axis)
    return n / np.linalg.norm(n)


def pca_frames(positions, neighborhoods: list):
    """Plane fits of every point's neighborhood.

    positions may be an ndarray or an autodiff Var; the returned normals and
    offsets are of the same kind.  Returns (normals, centroids, offsets,
    degenerate) where ``degenerate`` marks collinear neighborhoods whose
    normal was chosen as a fixed vector orthogonal to the line (constant,
    no gradient).
    """
    for i, nb in enumerate(neighborhoods):
        if len(nb) < 3:
            raise ValueError(f"point {i} has fewer than 3 neighbors")
    idx, mask, counts = pad_neighborhoods(neighborhoods)
    q = positions[idx]  # (N, K, 3)
    m3 = mask[:, :, None]
    centroid = ad.sum_(q * m3, axis=1) / counts[:, None]
    centered = (q - ad.reshape(centroid, (len(counts), 1, 3))) * m3
    cov = ad.matmul(ad.swapaxes(centered, -1, -2), centered) / counts[:, None, None]

    cov_p = ad.val(cov)
    lam, vec = np.linalg.eigh(cov_p)
    degenerate = lam[:, 1] <= _COLLINEAR_RTOL * np.maximum(lam[:, 2], 1e-30)

    normals = ad.smallest_eigvec(cov)
    signs = _canonical_normal_signs(ad.val(normals))
    normals = normals * signs[:, None]

    if degenerate.any():
        fixed = ad.val(normals).copy()
        for i in np.nonzero(degenerate)[0]:
            line = vec[i, :, 2]
            n = _line_orthogonal(line)
            s = _canonical_normal_signs(n[None, :])[0]
            fixed[i] = n * s
        normals = ad.where(degenerate[:, None], fixed, normals)

    offsets = ad.absolute(ad.dot_last(normals, positions - centroid))
    return normals, centroid, offsets, degenerate


def compute_pca_frame(points: PointSet, i: int):
    """Plane fit for one point: (unit normal, neighborhood centroid, offset)."""
    if points.neighborhoods is None:
        raise ValueError("point set carries no neighborhoods")
    nb = points.neighborhoods[i]
    if len(nb) < 3:
        raise ValueError(f"point {i} has fewer than 3 neighbors")
    normal, centroid, offset, _ = _single_frame(points.points, nb, i)
    return normal, centroid, offset


def _single_frame(positions: np.ndarray, nb: np.ndarray, i: int):
    q = positions[np.asarray(nb, dtype=np.int64)]
    centroid = q.mean(axis=0)
    centered = q - centroid
    cov = centered.T @ centered / len(q)
    lam, vec = np.linalg.eigh(cov)
    degenerate = lam[1] <= _COLLINEAR_RTOL * max(lam[2], 1e-30)
    if degenerate:
        n = _line_orthogonal(vec[:, 2])
    else:
        n = vec[:, 0]
    n = n * _canonical_normal_signs(n[None, :])[0]
    offset = float(abs(n @ (positions[i] - centroid)))
    return n, centroid, offset, degenerate


def attach_pca_frames(points: PointSet) -> PointSet:
    """Return a copy of ``points`` with normals/offsets computed."""
    if points.neighborhoods is None:
        raise ValueError("point set carries no neighborhoods")
    normals, _, offsets, degenerate = pca_frames(
        points.points, points.neighborhoods
    )
    return PointSet(
        points=points.points,
        neighborhoods=points.neighborhoods,
        pca_normals=np.asarray(normals),
        pca_offsets=np.asarray(offsets),
        pca_degenerate=degenerate,
    )


def pointset_from_mesh_vertices(mesh: TriMesh) -> PointSet:
    """Mesh vertices as a PointSet with one-ring neighborhoods and frames."""
    ps = PointSet(points=mesh.vertices.copy(),
                  neighborhoods=one_ring_neighborhoods(mesh))
    return attach_pca_frames(ps)


# -- cotangent Laplacian ----------------------------------------------------


def cot_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """Cotangent-weighted Laplacian (off-diag (cot a + cot b)/2, zero row sums).

    Raises on non-manifold edges (more than two incident faces).
    """
    undirected = Counter()
    for a, b, c in mesh.faces:
        for e in ((a, b), (b, c), (c, a)):
            undirected[tuple(sorted((int(e[0]), int(e[1]))))] += 1
    bad = [e for e, n in undirected.items() if n > 2]
    if bad:
        raise MeshError(f"non-manifold edges: {bad[:5]}")

    v = mesh.vertices
    f = mesh.faces
    n = mesh.n_vertices
    rows, cols, vals = [], [], []
    for k in range(3):
        i = f[:, (k + 1) % 3]
        j = f[:, (k + 2) % 3]
        o = f[:, k]
        e1 = v[i] - v[o]
        e2 = v[j] - v[o]
        cot = (e1 * e2).sum(axis=1) / np.linalg.norm(np.cross(e1, e2), axis=1)
        w = 0.5 * cot
        rows.extend((i, j))
        cols.extend((j, i))
        vals.extend((w, w))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    lap = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    diag = -np.asarray(lap.sum(axis=1)).ravel()
    lap = lap + sparse.diags(diag)
    return lap.tocsr()


# -- template cages ----------------------------------------------------------

_PHI = (1.0 + np.sqrt(5.0)) / 2.0

_ICO_VERTS = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=np.float64,
)

_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def _subdivide_project(verts: np.ndarray, faces: np.ndarray):
    """One 4:1 subdivision with all vertices projected to the unit sphere."""
    verts = list(verts)
    midpoint: dict[tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            m = 0.5 * (verts[a] + verts[b])
            verts.append(m / np.linalg.norm(m))
            midpoint[key] = len(verts) - 1
        return midpoint[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return np.array(verts), np.array(new_faces, dtype=np.int64)


def make_template_cage(kind: str, center=(0.0, 0.0, 0.0), scale=(1.0, 1.0, 1.0)) -> TriMesh:
    """Subdivided icosahedral sphere cage: 'sphere42' or 'sphere162'."""
    levels = {"sphere42": 1, "sphere162": 2}
    if kind not in levels:
        raise ValueError(f"unknown cage template {kind!r}")
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ValueError("scale components must be positive")
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES
    for _ in range(levels[kind]):
        verts, faces = _subdivide_project(verts, faces)
    verts = verts * scale + np.asarray(center, dtype=np.float64)
    return TriMesh(verts, faces)


def make_box_mesh(subdiv: int = 4, center=(0.0, 0.0, 0.0), scale=(1.0, 1.0, 1.0)) -> TriMesh:
    """Axis-aligned box with each side an (subdiv x subdiv) triangle grid.

    Vertex count is 6*subdiv^2 + 2; the surface is closed and consistently
    oriented (outward normals).
    """
    if subdiv < 1:
        raise ValueError("subdiv must be >= 1")
    n = subdiv
    coords = np.linspace(-1.0, 1.0, n + 1)
    vert_id: dict[tuple, int] = {}
    verts: list[tuple] = []

    def vid(p: tuple) -> int:
        if p not in vert_id:
            vert_id[p] = len(verts)
            verts.append(p)
        return vert_id[p]

    faces = []
    # (axis, sign): the face plane; (u, v) the in-plane axes ordered so that
    # u x v points outward.
    sides = [
        (0, 1.0, 1, 2), (0, -1.0, 2, 1),
        (1, 1.0, 2, 0), (1, -1.0, 0, 2),
        (2, 1.0, 0, 1), (2, -1.0, 1, 0),
    ]
    for axis, sign, ua, va in sides:
        for i in range(n):
            for j in range(n):
                quad = []
                for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                    p = [0.0, 0.0, 0.0]
                    p[axis] = sign
                    p[ua] = coords[i + di]
                    p[va] = coords[j + dj]
                    quad.append(vid(tuple(p)))
                a, b, c, d = quad
                faces.append((a, b, c))
                faces.append((a, c, d))
    v = np.array(verts, dtype=np.float64) * np.asarray(scale, dtype=np.float64)
    v = v + np.asarray(center, dtype=np.float64)
    return TriMesh(v, np.array(faces, dtype=np.int64))

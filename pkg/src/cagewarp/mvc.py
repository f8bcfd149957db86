"""Mean value coordinates of points with respect to a closed triangle cage.

The weights are accumulated per cage triangle from the spherical triangle
the face cuts out of the unit sphere around the query point:

    u_j = (v_j - p) / d_j,  d_j = |v_j - p|
    theta_i = 2 asin(|u_{i+1} - u_{i-1}| / 2)      (arc lengths)
    h = (theta_1 + theta_2 + theta_3) / 2
    pi - h < eps_plane   ->  p lies on the triangle: its 2D barycentric
                             weights sin(theta_i) d_{i-1} d_{i+1} make up
                             the whole row
    c_i = 2 sin(h) sin(h - theta_i) / (sin theta_{i+1} sin theta_{i-1}) - 1
    s_i = sign(det[u_1, u_2, u_3]) sqrt(1 - c_i^2)
    min_i |s_i| <= eps_plane  ->  p lies in the triangle's plane outside
                                  it: the face contributes nothing
    w_i = (theta_i - c_{i+1} theta_{i-1} - c_{i-1} theta_{i+1})
          / (d_i sin theta_{i+1} s_{i-1})

followed by normalization to unit sum.  Queries within eps_vertex of a cage
vertex get that vertex's exact indicator row.  Exterior queries are allowed
and produce (partially negative) valid weights.

The kernel is generic: passing the cage vertices as an autodiff Var yields
weights on the tape, differentiable with respect to the cage.  All branch
masks are decided on primal values and denominators of masked-out lanes are
sanitized so no NaN/Inf can leak into values or gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import PointSet, TriMesh, validate_cage

FLAG_INTERIOR = 0
FLAG_ON_VERTEX = 1
FLAG_ON_FACE = 2
FLAG_EXTERIOR_OK = 3

_FLAG_NAMES = {
    FLAG_INTERIOR: "interior",
    FLAG_ON_VERTEX: "on_vertex",
    FLAG_ON_FACE: "on_face",
    FLAG_EXTERIOR_OK: "exterior_ok",
}

_MAGIC = b"MVCMAT01"
_DENOM_TINY = 1e-300


class MvcError(Exception):
    """Numerically pathological coordinate computation."""


@dataclass
class MvcConfig:
    """Robustness thresholds.

    eps_vertex: queries closer than this to a cage vertex snap to its
    indicator row; default 1e-8 times the cage bounding-box diagonal.
    eps_plane: degeneracy threshold for the spherical-triangle branches.
    """

    eps_vertex: float | None = None
    eps_plane: float = 1e-7

    def __post_init__(self):
        if self.eps_vertex is not None and self.eps_vertex <= 0:
            raise ValueError("eps_vertex must be positive")
        if self.eps_plane <= 0:
            raise ValueError("eps_plane must be positive")

    def resolved_eps_vertex(self, cage: TriMesh) -> float:
        if self.eps_vertex is not None:
            return self.eps_vertex
        return 1e-8 * cage.diameter()


@dataclass
class MvcMatrix:
    """Dense weights, rows = query points, columns = cage vertices."""

    weights: np.ndarray
    flags: np.ndarray | None = None

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]

    @property
    def n_cage_vertices(self) -> int:
        return self.weights.shape[1]

    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def flag_name(self, i: int) -> str:
        if self.flags is None:
            return "unknown"
        return _FLAG_NAMES[int(self.flags[i])]

    def save_binary(self, path) -> None:
        """magic, int64 LE rows, int64 LE cols, then row-major float64 LE."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<qq", *self.weights.shape))
            fh.write(self.weights.astype("<f8").tobytes(order="C"))

    @classmethod
    def load_binary(cls, path) -> "MvcMatrix":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _MAGIC:
                raise ValueError(f"not an MVC matrix file (magic {magic!r})")
            rows, cols = struct.unpack("<qq", fh.read(16))
            data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
            if data.size != rows * cols:
                raise ValueError("truncated MVC matrix file")
        return cls(weights=data.reshape(rows, cols).astype(np.float64))

    def save_csv(self, path) -> None:
        np.savetxt(path, self.weights, delimiter=",", fmt="%.17g")


def _positions(points) -> np.ndarray:
    if isinstance(points, PointSet):
        return points.points
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def mvc_weights(cage_vertices, faces: np.ndarray, points: np.ndarray,
                eps_vertex: float, eps_plane: float,
                with_aux: bool = False, with_flags: bool = True):
    """Raw weight rows for ``points``; generic over ndarray/Var cage vertices.

    Returns (phi, flags) or (phi, flags, aux) where aux carries the primal
    per-row distances to branch boundaries used for gradient exclusion.
    ``with_flags=False`` skips the interior/exterior classification (flags
    None), which optimization loops that recompute weights every iteration
    do not need.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    cage_val = ad.val(cage_vertices)
    c = cage_val.shape[0]
    if n == 0:
        raise MvcError("no query points")

    diff = ad.reshape(cage_vertices, (1, c, 3)) - pts[:, None, :]   # (N,C,3)
    d = ad.norm(diff, axis=-1)                                      # (N,C)
    d_p = ad.val(d)

    near_vertex = d_p < eps_vertex
    row_near = near_vertex.any(axis=1)
    any_near = bool(row_near.any())

    d_div = ad.where(near_vertex, 1.0, d) if any_near else d
    u = diff / ad.reshape(d_div, (n, c, 1))                         # (N,C,3)

    # per-corner triples: everything below is a 3-tuple of (N,F) or (N,F,3)
    u_k = [ad.gather_axis1(u, faces[:, k]) for k in range(3)]
    d_k = [ad.gather_axis1(d, faces[:, k]) for k in range(3)]

    theta = [
        2.0 * ad.arcsin(ad.norm(u_k[(k + 1) % 3] - u_k[(k + 2) % 3], axis=-1)
                        / 2.0)
        for k in range(3)
    ]
    h = (theta[0] + theta[1] + theta[2]) / 2.0                      # (N,F)
    h_p = ad.val(h)

    # A nearly full half-turn of arc marks p as on (or extremely close to)
    # the face; asin conditioning limits how sharply that can be resolved,
    # so candidates are confirmed against the actual plane distance before
    # the exact-2D replacement fires.  Points that are merely near the
    # plane keep the (accurate) general accumulation.
    on_face = (np.pi - h_p) < eps_plane                             # (N,F)
    if on_face.any():
        e1 = cage_val[faces[:, 1]] - cage_val[faces[:, 0]]
        e2 = cage_val[faces[:, 2]] - cage_val[faces[:, 0]]
        fn = np.cross(e1, e2)
        fn_len = np.linalg.norm(fn, axis=1, keepdims=True)
        fn = fn / np.where(fn_len < _DENOM_TINY, 1.0, fn_len)
        dplane = np.abs(np.einsum(
            "nfi,fi->nf", pts[:, None, :] - cage_val[faces[:, 0]][None], fn
        ))
        on_face &= dplane <= eps_vertex
    row_on_face = on_face.any(axis=1) & ~row_near

    sin_t = [ad.sin(t) for t in theta]
    sin_h = ad.sin(h)

    det = ad.dot_last(u_k[0], ad.cross(u_k[1], u_k[2]))
    det_sign = np.sign(ad.val(det))                                 # primal

    cval, sval = [], []
    for k in range(3):
        denom_c = sin_t[(k + 1) % 3] * sin_t[(k + 2) % 3]
        denom_c = ad.where(np.abs(ad.val(denom_c)) < _DENOM_TINY, 1.0, denom_c)
        ck = ad.clip(2.0 * sin_h * ad.sin(h - theta[k]) / denom_c - 1.0,
                     -1.0, 1.0)
        q = 1.0 - ck * ck
        q_bad = ad.val(q) < eps_plane * eps_plane
        sk = det_sign * ad.sqrt(ad.where(q_bad, 1.0, q))
        sk_p = det_sign * np.sqrt(np.maximum(ad.val(q), 0.0))
        cval.append(ck)
        sval.append(ad.where(q_bad, sk_p, sk))

    s_p = np.stack([ad.val(s) for s in sval], axis=-1)
    skip = np.abs(s_p).min(axis=-1) <= eps_plane                    # (N,F)
    dead = skip | on_face

    w_sum = None
    for k in range(3):
        num = (theta[k]
               - cval[(k + 1) % 3] * theta[(k + 2) % 3]
               - cval[(k + 2) % 3] * theta[(k + 1) % 3])
        denom = d_k[k] * sin_t[(k + 1) % 3] * sval[(k + 2) % 3]
        denom_bad = dead | (np.abs(ad.val(denom)) < _DENOM_TINY)
        w = ad.where(dead, 0.0, num / ad.where(denom_bad, 1.0, denom))
        contrib = ad.scatter_axis1(w, faces[:, k], c)               # (N,C)
        w_sum = contrib if w_sum is None else w_sum + contrib

    if row_on_face.any():
        fsel = np.argmax(on_face, axis=1)                           # (N,)
        arange_n = np.arange(n)
        w_on = None
        for k in range(3):
            w2d = sin_t[k] * d_k[(k + 1) % 3] * d_k[(k + 2) % 3]    # (N,F)
            w2d_sel = w2d[arange_n, fsel]                           # (N,)
            w2d_sel = ad.where(row_on_face, w2d_sel, 0.0)
            cols_k = faces[fsel, k]                                 # (N,)
            part = ad.scatter_add(
                ad.reshape(w2d_sel, (n, 1)),
                (arange_n[:, None], cols_k[:, None]),
                (n, c),
            )
            w_on = part if w_on is None else w_on + part
        w_sum = ad.where(row_on_face[:, None], w_on, w_sum)

    totals = ad.sum_(w_sum, axis=1, keepdims=True)
    totals_p = ad.val(totals).ravel()
    regular = ~row_near
    if np.any(np.abs(totals_p[regular]) < 1e-14):
        bad_rows = np.nonzero(regular & (np.abs(totals_p) < 1e-14))[0]
        raise MvcError(
            f"zero total weight for query rows {bad_rows[:5].tolist()}"
        )
    if any_near:
        phi = w_sum / ad.where(row_near[:, None], 1.0, totals)
        indicator = np.zeros((n, c))
        cols = np.argmin(d_p, axis=1)
        r = np.nonzero(row_near)[0]
        indicator[r, cols[r]] = 1.0
        phi = ad.where(row_near[:, None], indicator, phi)
    else:
        phi = w_sum / totals

    if with_flags:
        flags = _classify_rows(cage_val, faces, pts, row_near, row_on_face)
    else:
        flags = None

    if not with_aux:
        return phi, flags

    plane_margin = np.minimum(
        np.abs(np.pi - h_p).min(axis=1),
        np.abs(s_p).min(axis=(1, 2)),
    )
    aux = {
        "min_vertex_dist": d_p.min(axis=1),
        "plane_margin": plane_margin,
    }
    return phi, flags, aux


def _classify_rows(cage_vertices, faces, pts, row_near, row_on_face):
    """Per-row flags; interior/exterior decided by the winding number."""
    flags = np.full(len(pts), FLAG_EXTERIOR_OK, dtype=np.uint8)
    v = cage_vertices[faces]                                  # (F,3,3)
    r = v[None, :, :, :] - pts[:, None, None, :]              # (N,F,3,3)
    dn = np.linalg.norm(r, axis=-1)                           # (N,F,3)
    r0, r1, r2 = r[:, :, 0], r[:, :, 1], r[:, :, 2]
    det = np.einsum("nfi,nfi->nf", r0, np.cross(r1, r2))
    den = (
        dn[:, :, 0] * dn[:, :, 1] * dn[:, :, 2]
        + np.einsum("nfi,nfi->nf", r0, r1) * dn[:, :, 2]
        + np.einsum("nfi,nfi->nf", r1, r2) * dn[:, :, 0]
        + np.einsum("nfi,nfi->nf", r2, r0) * dn[:, :, 1]
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        omega = 2.0 * np.arctan2(det, den)
    solid = np.nansum(omega, axis=1)
    flags[np.abs(solid) > 2.0 * np.pi] = FLAG_INTERIOR
    flags[row_on_face] = FLAG_ON_FACE
    flags[row_near] = FLAG_ON_VERTEX
    return flags


def compute_mvc(cage: TriMesh, points, cfg: MvcConfig | None = None) -> MvcMatrix:
    """Mean value coordinates of ``points`` with respect to ``cage``."""
    cfg = cfg or MvcConfig()
    validate_cage(cage)
    pts = _positions(points)
    phi, flags = mvc_weights(
        cage.vertices,
        cage.faces,
        pts,
        eps_vertex=cfg.resolved_eps_vertex(cage),
        eps_plane=cfg.eps_plane,
    )
    return MvcMatrix(weights=np.asarray(phi), flags=flags)


def deform(points, mvc: MvcMatrix, deformed_cage_vertices) -> PointSet:
    """Interpolate new cage vertex positions: p_i' = sum_j phi_ji v_j'."""
    verts = np.asarray(deformed_cage_vertices, dtype=np.float64).reshape(-1, 3)
    if verts.shape[0] != mvc.n_cage_vertices:
        raise ValueError(
            f"cage vertex count {verts.shape[0]} does not match "
            f"{mvc.n_cage_vertices} weight columns"
        )
    pts = _positions(points)
    if len(pts) != mvc.n_points:
        raise ValueError("point count does not match weight rows")
    return PointSet(points=mvc.weights @ verts)

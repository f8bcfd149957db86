"""Derivatives of the deformation with respect to cage geometry.

Two argument groups exist:

* the deformed cage vertices, which enter linearly through
  p' = sum_j phi_j v_j', and
* the source cage vertices, which enter nonlinearly through the weights
  phi themselves.

Both are obtained by reverse accumulation over the recorded kernel tape; a
finite-difference harness cross-checks any gradient implementation against
central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import TriMesh, validate_cage
from .mvc import MvcConfig, MvcMatrix, mvc_weights

EXCLUSION_FACTOR = 10.0


@dataclass
class Gradient:
    """Per-cage-vertex loss gradients, one row per vertex."""

    d_loss_d_deformed_cage: np.ndarray | None = None
    d_loss_d_source_cage: np.ndarray | None = None
    value: float = 0.0
    excluded_rows: int = 0

    def check_finite(self) -> None:
        for g in (self.d_loss_d_deformed_cage, self.d_loss_d_source_cage):
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient entries")


def grad_deformed(mvc: MvcMatrix, deformed_cage_vertices, loss) -> Gradient:
    """Gradient of ``loss`` with respect to the deformed cage vertices.

    ``loss`` maps the (N, 3) deformed point positions (an autodiff Var) to a
    scalar; the chain rule through the linear interpolation gives
    d loss / d v'_j = sum_i phi_ji * d loss / d p'_i.
    """
    verts = ad.Var(np.asarray(deformed_cage_vertices, dtype=np.float64))
    deformed = ad.matmul(mvc.weights, verts)
    out = loss(deformed)
    out.backward()
    g = verts.grad if verts.grad is not None else np.zeros_like(verts.value)
    grad = Gradient(
        d_loss_d_deformed_cage=g,
        value=float(ad.val(out)),
    )
    grad.check_finite()
    return grad


def grad_source_cage(cage: TriMesh, points, cfg: MvcConfig | None,
                     downstream) -> Gradient:
    """Gradient of ``downstream(phi)`` with respect to the source cage.

    Rows whose query lies within 10x of the vertex-snap or plane-degeneracy
    tolerances sit on a branch boundary of the weight computation; their
    gradient is undefined, so they are replaced by constants (zero gradient)
    and counted in ``excluded_rows``.
    """
    cfg = cfg or MvcConfig()
    validate_cage(cage)
    pts = points.points if hasattr(points, "points") else np.asarray(points)
    eps_v = cfg.resolved_eps_vertex(cage)

    cage_var = ad.Var(cage.vertices)
    phi, _, aux = mvc_weights(
        cage_var, cage.faces, pts,
        eps_vertex=eps_v, eps_plane=cfg.eps_plane,
        with_aux=True, with_flags=False,
    )
    excluded = (
        (aux["min_vertex_dist"] < EXCLUSION_FACTOR * eps_v)
        | (aux["plane_margin"] < EXCLUSION_FACTOR * cfg.eps_plane)
    )
    if excluded.any():
        phi = ad.where(excluded[:, None], ad.val(phi), phi)
    out = downstream(phi)
    out.backward()
    g = cage_var.grad
    if g is None:
        g = np.zeros_like(cage.vertices)
    grad = Gradient(
        d_loss_d_source_cage=g,
        value=float(ad.val(out)),
        excluded_rows=int(excluded.sum()),
    )
    grad.check_finite()
    return grad


@dataclass
class GradCheckReport:
    """Outcome of analytic-vs-central-difference comparisons."""

    op: str
    n_configs: int
    max_rel_err: float
    passed: bool
    rtol: float
    fd_step: float
    per_config: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "n_configs": self.n_configs,
            "max_rel_err": self.max_rel_err,
            "pass": self.passed,
            "rtol": self.rtol,
            "fd_step": self.fd_step,
        }


def central_fd(value_fn, x0: np.ndarray, step: float) -> np.ndarray:
    """Central finite differences of a scalar function, per coordinate."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = g.ravel()
    base = x0.ravel()
    for k in range(base.size):
        xp = base.copy()
        xm = base.copy()
        xp[k] += step
        xm[k] -= step
        fp = value_fn(xp.reshape(x0.shape))
        fm = value_fn(xm.reshape(x0.shape))
        flat[k] = (fp - fm) / (2.0 * step)
    return g


def relative_errors(analytic: np.ndarray, fd: np.ndarray) -> np.ndarray:
    denom = np.maximum.reduce(
        [np.abs(analytic), np.abs(fd), np.full_like(fd, 1e-8)]
    )
    return np.abs(analytic - fd) / denom


def check_gradients(op_name: str, configs, fd_step: float,
                    rtol: float) -> GradCheckReport:
    """Run analytic-vs-FD comparisons over configurations.

    Each configuration is a pair (value_fn, grad_and_x0) where grad_and_x0
    supplies (analytic gradient ndarray, evaluation point ndarray); value_fn
    maps a point of the same shape to a float.
    """
    max_err = 0.0
    per_config = []
    for value_fn, (analytic, x0) in configs:
        fd = central_fd(value_fn, x0, fd_step)
        err = float(relative_errors(np.asarray(analytic), fd).max())
        per_config.append(err)
        max_err = max(max_err, err)
    return GradCheckReport(
        op=op_name,
        n_configs=len(per_config),
        max_rel_err=max_err,
        passed=max_err <= rtol,
        rtol=rtol,
        fd_step=fd_step,
        per_config=per_config,
    )


# -- builtin randomized configurations ---------------------------------------

_ICO = None


def random_cage(rng: np.random.Generator, jitter: float = 0.15) -> TriMesh:
    """Jittered icosahedron: 12 vertices, always closed and oriented."""
    global _ICO
    if _ICO is None:
        from .geometry import _ICO_FACES, _ICO_VERTS

        _ICO = (_ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True),
                _ICO_FACES)
    verts, faces = _ICO
    radii = 1.0 + rng.uniform(-jitter, jitter, size=(len(verts), 1))
    return TriMesh(verts * radii, faces.copy())


def random_queries(rng: np.random.Generator, n: int,
                   r_lo: float = 0.2, r_hi: float = 0.6) -> np.ndarray:
    """Random points well inside a unit-radius cage."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * rng.uniform(r_lo, r_hi, size=(n, 1))


def _source_group_config(rng, downstream, n_points=8,
                         r_lo: float = 0.2, r_hi: float = 0.6):
    """(value_fn, (analytic, x0)) for d downstream(phi) / d source cage."""
    from .mvc import MvcConfig

    cfg = MvcConfig()
    while True:
        cage = random_cage(rng)
        pts = random_queries(rng, n_points, r_lo=r_lo, r_hi=r_hi)
        g = grad_source_cage(cage, pts, cfg, downstream)
        if g.excluded_rows == 0:
            break
    faces = cage.faces
    eps_v = cfg.resolved_eps_vertex(cage)

    def value_fn(x, faces=faces, pts=pts, eps_v=eps_v, eps_p=cfg.eps_plane):
        phi, _ = mvc_weights(x, faces, pts, eps_v, eps_p, with_flags=False)
        return float(ad.val(downstream(phi)))

    return value_fn, (g.d_loss_d_source_cage, cage.vertices.copy())


def _deformed_group_config(rng, loss_builder, n_points=10):
    """(value_fn, (analytic, x0)) for a loss of the deformed points."""
    from .mvc import compute_mvc

    cage = random_cage(rng)
    pts = random_queries(rng, n_points)
    m = compute_mvc(cage, pts)
    loss = loss_builder(rng, pts, m)
    v0 = cage.vertices + rng.normal(scale=0.05, size=cage.vertices.shape)
    g = grad_deformed(m, v0, loss)

    def value_fn(x, w=m.weights):
        return float(ad.val(loss(w @ np.asarray(x))))

    return value_fn, (g.d_loss_d_deformed_cage, v0)


def builtin_check(op: str, n_configs: int = 10, seed: int = 0,
                  fd_step: float | None = None,
                  rtol: float | None = None) -> GradCheckReport:
    """Randomized FD check of one named operation or loss."""
    from . import losses
    from .geometry import PointSet, attach_pca_frames, knn_neighborhoods

    rng = np.random.default_rng(seed)
    source_group = op in ("source", "mvc_penalty", "consistency")
    fd_step = fd_step if fd_step is not None else (1e-6 if source_group else 1e-5)
    rtol = rtol if rtol is not None else (1e-3 if source_group else 1e-4)

    configs = []
    for _ in range(n_configs):
        if op == "source":
            r = rng.normal(size=(8, 12))

            def downstream(phi, r=r):
                return ad.sum_(phi * r) + ad.sum_(
                    ad.minimum(phi, 0.0) * ad.minimum(phi, 0.0)
                )

            configs.append(_source_group_config(rng, downstream))
        elif op == "mvc_penalty":
            # exterior queries so negative entries (and a live gradient) exist
            configs.append(_source_group_config(
                rng, losses.mvc_penalty, r_lo=1.2, r_hi=1.5
            ))
        elif op == "consistency":
            rows = rng.uniform(0, 0.2, size=(8, 12))

            def downstream(phi, rows=rows):
                return losses.mvc_consistency(rows, phi)

            configs.append(_source_group_config(rng, downstream))
        elif op == "deformed":
            def builder(rng, pts, m):
                t = rng.normal(size=pts.shape)
                a = rng.uniform(0.5, 2.0, size=(len(pts), 1))

                def loss(p, t=t, a=a):
                    d = p - t
                    return ad.sum_(ad.sum_(d * d, axis=-1) * a.ravel())

                return loss

            configs.append(_deformed_group_config(rng, builder))
        elif op == "chamfer":
            def builder(rng, pts, m):
                t = random_queries(rng, len(pts) + 3)

                def loss(p, t=t):
                    return losses.chamfer(p, t)

                return loss

            configs.append(_deformed_group_config(rng, builder))
        elif op == "l2":
            def builder(rng, pts, m):
                t = pts + rng.normal(scale=0.1, size=pts.shape)

                def loss(p, t=t):
                    return losses.l2_corresponded(p, t)

                return loss

            configs.append(_deformed_group_config(rng, builder))
        elif op in ("p2f", "normal"):
            def builder(rng, pts, m, which=op):
                before = attach_pca_frames(PointSet(
                    points=pts.copy(),
                    neighborhoods=knn_neighborhoods(pts, k=5),
                ))
                term = losses.p2f_term if which == "p2f" else losses.normal_term

                def loss(p, before=before, term=term):
                    return term(before, p)

                return loss

            configs.append(_deformed_group_config(rng, builder, n_points=12))
        elif op == "symmetry":
            def builder(rng, pts, m):
                def loss(p):
                    return losses.symmetry_term(p)

                return loss

            configs.append(_deformed_group_config(rng, builder))
        elif op == "cage_laplacian":
            cage = random_cage(rng)
            v0 = cage.vertices + rng.normal(scale=0.05,
                                            size=cage.vertices.shape)
            value, g = ad.value_and_grad(
                lambda x, cage=cage: losses.cage_laplacian_loss(cage, x), v0
            )

            def value_fn(x, cage=cage):
                return float(ad.val(losses.cage_laplacian_loss(cage, x)))

            configs.append((value_fn, (g, v0)))
        else:
            raise ValueError(f"unknown gradcheck op {op!r}")
    return check_gradients(op, configs, fd_step=fd_step, rtol=rtol)


GRADCHECK_OPS = (
    "deformed", "source", "chamfer", "l2", "mvc_penalty",
    "p2f", "normal", "symmetry", "consistency", "cage_laplacian",
)

"""Monte-Carlo ray-casting oracle for mean value coordinates.

Independent of the analytic per-triangle computation: the weight of cage
vertex j at an interior point p is the spherical integral of the piecewise
linear hat function of j evaluated where each ray exits the cage, divided
by the exit distance.  Estimated by casting uniform random rays from p and
averaging hat(hit)/distance, then normalizing the weights to unit sum.

Only valid for convex cages with p strictly inside (exactly one exit per
ray).
"""

import numpy as np


def mvc_ray_oracle(cage, p, n_rays=1_000_000, seed=0, chunk=65536):
    p = np.asarray(p, dtype=np.float64).reshape(3)
    v = cage.vertices
    f = cage.faces
    v0 = v[f[:, 0]]
    e1 = v[f[:, 1]] - v0
    e2 = v[f[:, 2]] - v0
    tvec = p - v0                              # (F,3), constant per face
    qvec = np.cross(tvec, e1)                  # (F,3), constant per face
    e2q = np.einsum("fi,fi->f", e2, qvec)      # (F,)

    rng = np.random.default_rng(seed)
    weights = np.zeros(cage.n_vertices)
    done = 0
    while done < n_rays:
        m = min(chunk, n_rays - done)
        done += m
        dirs = rng.normal(size=(m, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

        pvec = np.cross(dirs[:, None, :], e2[None, :, :])        # (R,F,3)
        det = np.einsum("fi,rfi->rf", e1, pvec)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            u = np.einsum("fi,rfi->rf", tvec, pvec) * inv
            vv = np.einsum("rfi,fi->rf", dirs[:, None, :] * np.ones_like(pvec),
                           qvec) * inv
            t = e2q[None, :] * inv
        valid = (
            (np.abs(det) > 1e-12)
            & (u >= 0.0) & (vv >= 0.0) & (u + vv <= 1.0)
            & (t > 1e-9)
        )
        t_masked = np.where(valid, t, np.inf)
        hit = np.argmin(t_masked, axis=1)                        # (R,)
        rows = np.arange(m)
        t_hit = t_masked[rows, hit]
        ok = np.isfinite(t_hit)
        rows, hit, t_hit = rows[ok], hit[ok], t_hit[ok]
        bu = u[rows, hit]
        bv = vv[rows, hit]
        bary = np.stack([1.0 - bu - bv, bu, bv], axis=1)         # (R,3)
        np.add.at(weights, f[hit].ravel(), (bary / t_hit[:, None]).ravel())
    return weights / weights.sum()

"""Scalar objectives and evaluation metrics.

Every loss is written against the generic autodiff dispatch, so the same
function returns a float on ndarray input and a differentiable Var when any
differentiable argument is a Var.  Nearest-neighbor assignments, sign
flips and other combinatorial choices are made on primal values.

Conventions pinned here:

* chamfer reduces with the mean of squared distances, summed over both
  directions (resolution-independent weighting);
* post-deformation plane fits reuse the source neighborhoods with the
  deformed positions;
* the normal loss flips the deformed normal when it opposes the source
  normal, so it measures unsigned plane rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import (
    PointSet,
    SpatialIndex,
    TriMesh,
    cot_laplacian,
    normalize_to_unit_box,
    pca_frames,
    sample_surface,
)
from .mvc import MvcMatrix

_REFLECT_X = np.array([-1.0, 1.0, 1.0])


@dataclass
class LossWeights:
    """Weights of the combined objective."""

    alpha_mvc: float = 1.0
    alpha_shape: float = 0.1
    shape_mode: str = "man_made"
    clap_weight: float = 0.05

    def __post_init__(self):
        if self.alpha_mvc < 0 or self.alpha_shape < 0 or self.clap_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.shape_mode not in ("man_made", "character"):
            raise ValueError(f"unknown shape_mode {self.shape_mode!r}")


@dataclass
class LossBreakdown:
    """Named raw term values, their weights, and the weighted total."""

    terms: dict
    weights: dict
    total: float

    @classmethod
    def from_terms(cls, terms: dict, weights: dict) -> "LossBreakdown":
        t = {k: float(ad.val(v)) for k, v in terms.items()}
        total = sum(weights[k] * t[k] for k in t)
        return cls(terms=t, weights=dict(weights), total=float(total))

    def recomputed_total(self) -> float:
        return float(sum(self.weights[k] * self.terms[k] for k in self.terms))


def _positions(x):
    """Positions array (or Var) of a PointSet/TriMesh/array argument."""
    if isinstance(x, PointSet):
        return x.points
    if isinstance(x, TriMesh):
        return x.vertices
    if isinstance(x, ad.Var):
        return x
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


# -- alignment ---------------------------------------------------------------


def chamfer(a, b):
    """Symmetric mean squared nearest-neighbor distance."""
    pa, pb = _positions(a), _positions(b)
    av, bv = ad.val(pa), ad.val(pb)
    if len(av) == 0 or len(bv) == 0:
        raise ValueError("chamfer distance of an empty point set")
    idx_ab = SpatialIndex(bv).query_index(av)
    idx_ba = SpatialIndex(av).query_index(bv)
    d_ab = pa - pb[idx_ab]
    d_ba = pb - pa[idx_ba]
    return (ad.mean_(ad.sum_(d_ab * d_ab, axis=-1))
            + ad.mean_(ad.sum_(d_ba * d_ba, axis=-1)))


def l2_corresponded(a, b):
    """Mean squared distance between index-corresponding points."""
    pa, pb = _positions(a), _positions(b)
    if ad.val(pa).shape != ad.val(pb).shape:
        raise ValueError("corresponded point sets must have equal size")
    d = pa - pb
    return ad.mean_(ad.sum_(d * d, axis=-1))


# -- cage weight regularization ----------------------------------------------


def mvc_penalty(weights):
    """Mean squared magnitude of negative coordinate entries."""
    w = weights.weights if isinstance(weights, MvcMatrix) else weights
    wv = ad.val(w)
    neg = ad.minimum(w, 0.0)
    return ad.sum_(neg * neg) / float(wv.shape[0] * wv.shape[1])


# -- shape preservation --------------------------------------------------------


def _require_frames(ps: PointSet, who: str) -> None:
    if not isinstance(ps, PointSet) or not ps.has_frames():
        raise ValueError(f"{who} must be a PointSet with plane fits attached")


def p2f_term(before: PointSet, after_positions):
    """Mean squared change of the point-to-plane distances (generic)."""
    _require_frames(before, "before")
    _, _, off_after, _ = pca_frames(after_positions, before.neighborhoods)
    d = before.pca_offsets - off_after
    return ad.mean_(d * d)


def p2f_loss(before: PointSet, after: PointSet):
    """Point-to-surface preservation between source and deformed sets."""
    return float(ad.val(p2f_term(before, _positions(after))))


def normal_term(before: PointSet, after_positions):
    """Mean (1 - n . n') over paired plane normals (generic)."""
    _require_frames(before, "before")
    n_after, _, _, _ = pca_frames(after_positions, before.neighborhoods)
    flip = np.sign(
        np.einsum("ij,ij->i", before.pca_normals, ad.val(n_after))
    )
    flip[flip == 0.0] = 1.0
    return ad.mean_(1.0 - ad.dot_last(before.pca_normals, n_after * flip[:, None]))


def normal_loss(before: PointSet, after: PointSet):
    """Angular change of the fitted plane normals."""
    return float(ad.val(normal_term(before, _positions(after))))


def symmetry_term(points):
    """Chamfer distance to the reflection across x = 0 (generic)."""
    p = _positions(points)
    return chamfer(p, p * _REFLECT_X)


def symmetry_loss(points):
    return float(ad.val(symmetry_term(points)))


def shape_terms(before: PointSet, after_positions, cage_after_positions,
                mode: str) -> dict:
    """Raw shape-preservation terms for the given mode (generic values)."""
    terms = {"p2f": p2f_term(before, after_positions)}
    if mode == "man_made":
        terms["normal"] = normal_term(before, after_positions)
        terms["symmetry_shape"] = symmetry_term(after_positions)
        terms["symmetry_cage"] = symmetry_term(cage_after_positions)
    elif mode != "character":
        raise ValueError(f"unknown shape mode {mode!r}")
    return terms


def shape_loss(before: PointSet, after, cage_after, mode: str) -> LossBreakdown:
    """Shape preservation: p2f (+ normal + symmetries for man-made shapes)."""
    terms = shape_terms(before, _positions(after), _positions(cage_after), mode)
    return LossBreakdown.from_terms(terms, {k: 1.0 for k in terms})


# -- combined objective ---------------------------------------------------------


def term_weights(weights: LossWeights) -> dict:
    w = {
        "mvc": weights.alpha_mvc,
        "align": 1.0,
        "p2f": weights.alpha_shape,
    }
    if weights.shape_mode == "man_made":
        w["normal"] = weights.alpha_shape
        w["symmetry_shape"] = weights.alpha_shape
        w["symmetry_cage"] = weights.alpha_shape
    return w


def total_terms(source: PointSet, deformed_positions, target, phi,
                cage_deformed_positions, weights: LossWeights,
                align_mode: str) -> dict:
    """All raw loss terms of the combined objective (generic values)."""
    if align_mode == "chamfer":
        align = chamfer(deformed_positions, target)
    elif align_mode == "l2":
        align = l2_corresponded(deformed_positions, target)
    else:
        raise ValueError(f"unknown align_mode {align_mode!r}")
    terms = {"mvc": mvc_penalty(phi), "align": align}
    terms.update(
        shape_terms(source, deformed_positions, cage_deformed_positions,
                    weights.shape_mode)
    )
    return terms


def weighted_total(terms: dict, weights: dict):
    """Weighted sum of raw terms (generic; Var if any term is a Var)."""
    total = None
    for name, value in terms.items():
        contrib = value * weights[name]
        total = contrib if total is None else total + contrib
    return total


def total_loss(source: PointSet, deformed, target, mvc, cage_deformed,
               weights: LossWeights, align_mode: str = "chamfer") -> LossBreakdown:
    """Combined objective: weighted coordinates + alignment + shape terms."""
    terms = total_terms(
        source, _positions(deformed), _positions(target), mvc,
        _positions(cage_deformed), weights, align_mode,
    )
    return LossBreakdown.from_terms(terms, term_weights(weights))


# -- cage fitting -----------------------------------------------------------------


def mvc_consistency(rows_a, rows_b):
    """Sum of squared differences between corresponding weight rows."""
    a, b = rows_a, rows_b
    if isinstance(a, MvcMatrix):
        a = a.weights
    if isinstance(b, MvcMatrix):
        b = b.weights
    if ad.val(a).shape != ad.val(b).shape:
        raise ValueError("weight row blocks must have equal shape")
    d = a - b
    return ad.sum_(d * d)


def cage_laplacian_loss(cage_before: TriMesh, cage_after_vertices):
    """Sum of squared changes of per-vertex Laplacian magnitudes.

    The cotangent weights are built once from the undeformed cage and reused
    for both evaluations.
    """
    after = cage_after_vertices
    if ad.val(after).shape != cage_before.vertices.shape:
        raise ValueError("cage connectivity mismatch")
    lap = cot_laplacian(cage_before).toarray()
    mag_before = np.linalg.norm(lap @ cage_before.vertices, axis=1)
    mag_after = ad.norm(ad.matmul(lap, after), axis=-1)
    d = mag_after - mag_before
    return ad.sum_(d * d)


# -- evaluation metrics --------------------------------------------------------------


def eval_metrics(deformed: TriMesh, target: TriMesh, source: TriMesh,
                 n_samples: int = 5000, seed: int = 0) -> dict:
    """Alignment (chamfer x100) and detail distortion (Laplacian delta x1000).

    Both metrics are evaluated on unit-box-normalized geometry: the chamfer
    distance between fresh area-uniform samples of the (independently
    normalized) deformed and target meshes, and the mean per-vertex change
    of the source-connectivity cotangent Laplacian applied to the source vs.
    the deformed vertices, with the deformed mesh expressed in the source's
    normalized frame.
    """
    if deformed.faces.shape != source.faces.shape or not np.array_equal(
        deformed.faces, source.faces
    ):
        raise ValueError("deformed and source must share connectivity")
    deformed_n, _ = normalize_to_unit_box(deformed)
    target_n, _ = normalize_to_unit_box(target)
    cd = float(
        chamfer(
            sample_surface(deformed_n, n_samples, seed).points,
            sample_surface(target_n, n_samples, seed).points,
        )
    )
    source_n, t_src = normalize_to_unit_box(source)
    deformed_in_src = t_src.apply(deformed.vertices)
    lap = cot_laplacian(source_n)
    delta = np.linalg.norm(
        lap @ source_n.vertices - lap @ deformed_in_src, axis=1
    ).mean()
    return {
        "cd_x100": cd * 100.0,
        "dcotlap_x1000": float(delta) * 1000.0,
        "n_samples": int(n_samples),
        "seed": int(seed),
    }

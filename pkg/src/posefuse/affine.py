"""Least-squares affine alignment and aligned-cosine pose retrieval.

A candidate pose u is compared against a target v by first fitting the
6-parameter affine map g minimizing sum_i ||A u_i + t - v_i||^2 in closed
form (normal equations), then taking the cosine between the pairwise
difference features of g(u) and v.  Exhaustive retrieval scores every bank
entry this way and returns the top k, ties broken by ascending bank index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, DegeneratePose, EmptyBank, KTooLarge
from .pose import HandPose, extract_feature, extract_features_batch

log = logging.getLogger(__name__)

# condition-number cutoff for the 3x3 normal-equation matrix
COND_LIMIT = 1e10


@dataclass(frozen=True)
class Affine2D:
    """2D affine map: [x', y'] = A [x, y] + [tx, ty] with A = [[a11, a12], [a21, a22]]."""

    a11: float
    a12: float
    a21: float
    a22: float
    tx: float
    ty: float

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)

    @property
    def det(self) -> float:
        """Determinant of the linear part (conditioning diagnostic)."""
        return self.a11 * self.a22 - self.a12 * self.a21

    def matrix(self) -> np.ndarray:
        """2x3 matrix [[a11, a12, tx], [a21, a22, ty]]."""
        return np.array([[self.a11, self.a12, self.tx], [self.a21, self.a22, self.ty]])

    def params(self) -> list[float]:
        """Row-major 6-tuple [a11, a12, tx, a21, a22, ty] (the wire order)."""
        return [self.a11, self.a12, self.tx, self.a21, self.a22, self.ty]

    @classmethod
    def from_params(cls, values) -> "Affine2D":
        a11, a12, tx, a21, a22, ty = (float(v) for v in values)
        return cls(a11, a12, a21, a22, tx, ty)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to an (n, 2) point array (or a single (2,) point)."""
        pts = np.asarray(points, dtype=np.float64)
        lin = np.array([[self.a11, self.a12], [self.a21, self.a22]])
        return pts @ lin.T + np.array([self.tx, self.ty])

    def inverse(self) -> "Affine2D":
        d = self.det
        if not np.isfinite(d) or abs(d) < 1e-12:
            raise DegenerateConfiguration(f"affine transform is singular (det={d:g})")
        i11, i12 = self.a22 / d, -self.a12 / d
        i21, i22 = -self.a21 / d, self.a11 / d
        return Affine2D(
            i11, i12, i21, i22,
            -(i11 * self.tx + i12 * self.ty),
            -(i21 * self.tx + i22 * self.ty),
        )


@dataclass(frozen=True)
class Match:
    """One retrieval hit: the aligned-cosine score and the fitted transform."""

    candidate_id: str
    score: float
    transform: Affine2D


def _design(kps: np.ndarray) -> np.ndarray:
    """Stack [x, y, 1] rows: (n, 21, 2) -> (n, 21, 3)."""
    ones = np.ones(kps.shape[:2] + (1,))
    return np.concatenate([kps, ones], axis=2)


def _normal_condition(normal: np.ndarray) -> np.ndarray:
    """Condition numbers of a batch of symmetric PSD 3x3 matrices."""
    eig = np.linalg.eigvalsh(normal)
    low, high = eig[:, 0], eig[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(low > 0.0, high / low, np.inf)
    return np.where(np.isfinite(high), cond, np.inf)


def fit_affine_batch(source_kps: np.ndarray, target_kps: np.ndarray):
    """Fit one affine map per source pose against a common target.

    Returns (theta, valid): theta is (n, 3, 2) with rows (a1*, a2*), columns
    x/y, i.e. predicted = design @ theta; valid flags fits whose normal
    matrix condition number stays below the cutoff.  Invalid rows are NaN.
    """
    kps = np.asarray(source_kps, dtype=np.float64)
    design = _design(kps)
    normal = np.einsum("nki,nkj->nij", design, design)
    valid = _normal_condition(normal) <= COND_LIMIT
    rhs = np.einsum("nki,kj->nij", design, np.asarray(target_kps, dtype=np.float64))
    theta = np.full((len(kps), 3, 2), np.nan)
    if valid.any():
        theta[valid] = np.linalg.solve(normal[valid], rhs[valid])
    return theta, valid


def _theta_to_affine(theta: np.ndarray) -> Affine2D:
    return Affine2D(
        a11=float(theta[0, 0]), a12=float(theta[1, 0]),
        a21=float(theta[0, 1]), a22=float(theta[1, 1]),
        tx=float(theta[2, 0]), ty=float(theta[2, 1]),
    )


def fit_affine(source: HandPose, target: HandPose) -> Affine2D:
    """Closed-form least-squares affine map taking source keypoints onto target's."""
    theta, valid = fit_affine_batch(source.keypoints2d[None], target.keypoints2d)
    if not valid[0]:
        raise DegenerateConfiguration(
            f"source pose {source.id!r} is collinear or coincident; affine fit singular"
        )
    return _theta_to_affine(theta[0])


def score_candidates(candidate_kps: np.ndarray, target: HandPose):
    """Aligned-cosine scores of a (n, 21, 2) candidate stack against a target.

    Returns (scores, theta, valid).  Scores of invalid candidates (singular
    fit or zero-norm aligned feature) are -inf.  Per-candidate arithmetic is
    row-independent, so scoring a subset yields bitwise-identical values.
    """
    target_feature = extract_feature(target)
    target_norm = np.linalg.norm(target_feature)
    if target_norm == 0.0:
        raise DegeneratePose(f"target pose {target.id!r} has all keypoints coincident")
    target_unit = target_feature / target_norm

    kps = np.asarray(candidate_kps, dtype=np.float64)
    theta, valid = fit_affine_batch(kps, target.keypoints2d)
    transformed = np.einsum("nki,nij->nkj", _design(kps), theta)
    transformed = np.where(valid[:, None, None], transformed, 0.0)
    feats = extract_features_batch(transformed)
    norms = np.linalg.norm(feats, axis=1)
    valid = valid & (norms > 0.0)
    scores = np.einsum("nd,d->n", feats, target_unit)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.clip(scores / norms, -1.0, 1.0)
    scores = np.where(valid, scores, -np.inf)
    return scores, theta, valid


def similarity(candidate: HandPose, target: HandPose) -> tuple[float, Affine2D]:
    """Aligned-cosine similarity of one candidate against a target, in [-1, 1]."""
    if np.linalg.norm(extract_feature(candidate)) == 0.0:
        raise DegeneratePose(f"candidate pose {candidate.id!r} has all keypoints coincident")
    scores, theta, valid = score_candidates(candidate.keypoints2d[None], target)
    if not valid[0]:
        raise DegenerateConfiguration(
            f"candidate pose {candidate.id!r} is collinear; affine fit singular"
        )
    return float(scores[0]), _theta_to_affine(theta[0])


def retrieve_exact(bank, target: HandPose, k: int) -> list[Match]:
    """Exhaustively score a pose bank and return the top-k matches.

    Ties break by ascending bank index.  Degenerate bank entries (singular
    fit or zero-norm feature) are skipped; their count is logged as a
    warning.  May return fewer than k matches if too many entries degenerate.
    """
    bank = list(bank)
    if not bank:
        raise EmptyBank("pose bank is empty")
    if k > len(bank):
        raise KTooLarge(f"k={k} exceeds bank size {len(bank)}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")

    kps = np.stack([p.keypoints2d for p in bank])
    scores, theta, valid = score_candidates(kps, target)
    skipped = int((~valid).sum())
    if skipped:
        log.warning("retrieve_exact: skipped %d degenerate bank entries", skipped)

    order = np.lexsort((np.arange(len(bank)), -scores))
    matches = []
    for idx in order:
        if not valid[idx]:
            continue
        matches.append(Match(bank[idx].id, float(scores[idx]), _theta_to_affine(theta[idx])))
        if len(matches) == k:
            break
    return matches

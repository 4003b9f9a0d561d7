"""Keypoint evaluation metrics: end-point error, PCK, AUC-of-PCK, and the
palm-to-wrist root conversion used by stereo-benchmark annotations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadRange, EmptySet, Missing3D
from .pose import JOINT_COUNT, MIDDLE_MCP, WRIST, HandPose

SPACE_2D = "2d"
SPACE_3D = "3d"


@dataclass(frozen=True)
class PredictionSet:
    """Aligned (predicted, ground-truth) pose pairs in one coordinate space."""

    pairs: tuple
    space: str

    def __post_init__(self):
        pairs = tuple(self.pairs)
        if not pairs:
            raise EmptySet("prediction set is empty")
        if self.space not in (SPACE_2D, SPACE_3D):
            raise ValueError(f"space must be {SPACE_2D!r} or {SPACE_3D!r}, got {self.space!r}")
        if self.space == SPACE_3D:
            for pred, truth in pairs:
                if pred.keypoints3d is None or truth.keypoints3d is None:
                    raise Missing3D(
                        f"pair ({pred.id!r}, {truth.id!r}) lacks 3D keypoints")
        object.__setattr__(self, "pairs", pairs)

    def pooled_distances(self) -> np.ndarray:
        """Per-keypoint Euclidean distances pooled over every pair, in file order."""
        chunks = []
        for pred, truth in self.pairs:
            if self.space == SPACE_3D:
                delta = pred.keypoints3d - truth.keypoints3d
            else:
                delta = pred.keypoints2d - truth.keypoints2d
            chunks.append(np.linalg.norm(delta, axis=1))
        return np.concatenate(chunks)


@dataclass(frozen=True)
class PckCurve:
    """PCK sampled over ascending thresholds plus its normalized area."""

    thresholds: np.ndarray
    values: np.ndarray
    auc: float


def epe(pred_set: PredictionSet) -> tuple[float, float]:
    """Mean and median of the pooled per-keypoint distances."""
    dists = pred_set.pooled_distances()
    return float(dists.mean()), float(np.median(dists))


def pck(pred_set: PredictionSet, threshold: float) -> float:
    """Fraction of pooled keypoints with distance <= threshold (inclusive)."""
    if threshold < 0.0:
        raise BadRange(f"threshold must be >= 0, got {threshold}")
    dists = pred_set.pooled_distances()
    return float((dists <= threshold).mean())


def pck_curve(pred_set: PredictionSet, t_min: float, t_max: float, steps: int) -> PckCurve:
    """PCK sampled at `steps` evenly spaced thresholds (both ends inclusive)
    with AUC as the trapezoidal integral normalized by the range width."""
    if not 0.0 <= t_min < t_max:
        raise BadRange(f"need 0 <= t_min < t_max, got [{t_min}, {t_max}]")
    if steps < 2:
        raise BadRange(f"steps must be >= 2, got {steps}")
    thresholds = np.linspace(t_min, t_max, steps)
    dists = pred_set.pooled_distances()
    values = (dists[None, :] <= thresholds[:, None]).mean(axis=1)
    auc = float(np.trapezoid(values, thresholds) / (t_max - t_min))
    return PckCurve(thresholds=thresholds, values=values, auc=auc)


def stb_root_convert(pose: HandPose, flip_direction: bool = False) -> HandPose:
    """Move a palm root to the wrist by doubling the MCP-to-palm vector:
    root' = 2*palm - mcp (or the mirrored 2*mcp - palm when flipped).
    Only the root joint changes."""
    if pose.keypoints3d is None:
        raise Missing3D(f"pose {pose.id!r} has no 3D keypoints")
    kp3 = pose.keypoints3d.copy()
    palm = kp3[WRIST]
    mcp = kp3[MIDDLE_MCP]
    kp3[WRIST] = 2.0 * mcp - palm if flip_direction else 2.0 * palm - mcp
    return HandPose(id=pose.id, keypoints2d=pose.keypoints2d, keypoints3d=kp3)


def align_by_id(predictions, ground_truth):
    """Pair predictions with ground truth by id, in ground-truth order.

    Raises IdMismatch listing ids missing from either side.
    """
    from .errors import IdMismatch

    pred_by_id = {p.id: p for p in predictions}
    truth_ids = [t.id for t in ground_truth]
    missing = [t for t in truth_ids if t not in pred_by_id]
    extra = [p for p in pred_by_id if p not in set(truth_ids)]
    if missing or extra:
        raise IdMismatch(
            f"prediction/ground-truth ids disagree: missing={missing[:5]} extra={extra[:5]}")
    return [(pred_by_id[t.id], t) for t in ground_truth]

"""Hand pose representation and the pairwise-difference feature embedding.

A pose is 21 ordered 2D keypoints in pixels (index 0 = wrist/root, then four
joints per finger, thumb first), optionally paired with 21 3D keypoints in
millimeters.  Its retrieval embedding is the ordered collection of pairwise
keypoint differences: for every pair (i, j) with i < j in lexicographic
order, the x difference followed by the y difference, giving a 420-dim
vector that is exactly translation invariant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegeneratePose,
    NonFiniteCoordinate,
    ParseError,
    WrongKeypointCount,
)

JOINT_COUNT = 21
PAIR_COUNT = JOINT_COUNT * (JOINT_COUNT - 1) // 2  # 210
FEATURE_DIM = 2 * PAIR_COUNT  # 420

WRIST = 0
MIDDLE_MCP = 9  # wrist, thumb 1-4, index 5-8, middle 9-12, ring 13-16, little 17-20

# pair enumeration order shared by single and batched feature extraction
_PAIR_I, _PAIR_J = np.triu_indices(JOINT_COUNT, k=1)


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class HandPose:
    """An identified hand pose: 21 ordered 2D keypoints, optional 3D joints."""

    id: str
    keypoints2d: np.ndarray
    keypoints3d: np.ndarray | None = None

    def __post_init__(self):
        kp = np.asarray(self.keypoints2d, dtype=np.float64)
        if kp.shape != (JOINT_COUNT, 2):
            raise WrongKeypointCount(
                f"pose {self.id!r}: expected {JOINT_COUNT} (x, y) keypoints, "
                f"got array of shape {kp.shape}"
            )
        if not np.isfinite(kp).all():
            raise NonFiniteCoordinate(f"pose {self.id!r}: 2D keypoints contain NaN/Inf")
        object.__setattr__(self, "keypoints2d", _readonly(kp))
        if self.keypoints3d is not None:
            kp3 = np.asarray(self.keypoints3d, dtype=np.float64)
            if kp3.shape != (JOINT_COUNT, 3):
                raise WrongKeypointCount(
                    f"pose {self.id!r}: expected {JOINT_COUNT} (x, y, z) keypoints, "
                    f"got array of shape {kp3.shape}"
                )
            if not np.isfinite(kp3).all():
                raise NonFiniteCoordinate(f"pose {self.id!r}: 3D keypoints contain NaN/Inf")
            object.__setattr__(self, "keypoints3d", _readonly(kp3))


def parse_pose(raw, id: str, keypoints3d=None) -> HandPose:
    """Validate raw coordinate pairs into a HandPose, preserving values exactly."""
    return HandPose(id=id, keypoints2d=raw, keypoints3d=keypoints3d)


def extract_feature(pose: HandPose) -> np.ndarray:
    """Pairwise-difference feature of a pose: 420 values, (x_i - x_j, y_i - y_j)
    for all i < j in lexicographic pair order."""
    kp = pose.keypoints2d
    return (kp[_PAIR_I] - kp[_PAIR_J]).reshape(FEATURE_DIM)


def extract_features_batch(keypoints: np.ndarray) -> np.ndarray:
    """Vectorized feature extraction for a (n, 21, 2) keypoint stack -> (n, 420)."""
    kps = np.asarray(keypoints, dtype=np.float64)
    if kps.ndim != 3 or kps.shape[1:] != (JOINT_COUNT, 2):
        raise WrongKeypointCount(f"expected shape (n, {JOINT_COUNT}, 2), got {kps.shape}")
    return (kps[:, _PAIR_I, :] - kps[:, _PAIR_J, :]).reshape(len(kps), FEATURE_DIM)


def normalize_feature(feature: np.ndarray) -> np.ndarray:
    """Scale a feature vector to unit L2 norm."""
    vec = np.asarray(feature, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DegeneratePose("feature has zero norm (all keypoints coincide)")
    return vec / norm


def load_poses_jsonl(path) -> list[HandPose]:
    """Read poses from a JSONL file, one {"id", "keypoints"[, "keypoints3d"]} per line.

    Unknown keys are ignored.  Raises ParseError naming the offending line.
    """
    poses = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pose = parse_pose(
                    obj["keypoints"],
                    id=str(obj["id"]),
                    keypoints3d=obj.get("keypoints3d"),
                )
            except Exception as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            poses.append(pose)
    return poses


def save_poses_jsonl(path, poses) -> None:
    """Write poses to JSONL, one object per line."""
    with open(path, "w", encoding="utf-8") as handle:
        for pose in poses:
            obj = {"id": pose.id, "keypoints": pose.keypoints2d.tolist()}
            if pose.keypoints3d is not None:
                obj["keypoints3d"] = pose.keypoints3d.tolist()
            handle.write(json.dumps(obj) + "\n")

"""Loss algebra: L1 shape distance, histogram-KL color distance, their
weighted combination, and the adversarial objective value."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, LayoutMismatch, OutOfRange
from .imageops import ColorHistogram, Image, color_histogram

KL_SMOOTHING = 1e-8
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined loss: lambda1 on color, lambda2 on shape."""

    lambda1: float = 10.0
    lambda2: float = 100.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class LossReport:
    """Loss components of one comparison; ta = lambda1*color + lambda2*shape."""

    shape: float
    color: float
    ta: float
    gan: float = 0.0

    def to_dict(self, weights: LossWeights | None = None) -> dict:
        out = {"shape": self.shape, "color": self.color, "ta": self.ta, "gan": self.gan}
        if weights is not None:
            out["lambda1"] = weights.lambda1
            out["lambda2"] = weights.lambda2
        return out


def shape_loss(real: Image, generated: Image) -> float:
    """Mean absolute difference over all samples (resolution independent)."""
    if real.data.shape != generated.data.shape:
        raise DimMismatch(
            f"shape_loss operands differ: {real.data.shape} vs {generated.data.shape}")
    return float(np.abs(real.data - generated.data).mean())


def _smooth(hist: ColorHistogram) -> np.ndarray:
    """Additive smoothing then renormalization, per channel block."""
    if hist.joint:
        vals = hist.values + KL_SMOOTHING
        return vals / vals.sum()
    blocks = hist.values.reshape(hist.channels, hist.bins_per_channel) + KL_SMOOTHING
    blocks = blocks / blocks.sum(axis=1, keepdims=True)
    return blocks.reshape(-1)


def color_loss(generated_hist: ColorHistogram, reference_hist: ColorHistogram) -> float:
    """KL divergence KL(generated || reference) in nats, after smoothing.

    Both operands get additive smoothing 1e-8 and renormalization, so the
    result is finite even on histograms with empty bins, and >= 0.
    """
    if generated_hist.layout() != reference_hist.layout():
        raise LayoutMismatch(
            f"histogram layouts differ: {generated_hist.layout()} vs {reference_hist.layout()}")
    p = _smooth(generated_hist)
    q = _smooth(reference_hist)
    return max(float(np.sum(p * np.log(p / q))), 0.0)


def ta_loss(weights: LossWeights, real: Image, generated: Image, color_map: Image,
            bins: int, reference_real: bool = False) -> LossReport:
    """Weighted sum of the color distance (generated-vs-color-map histograms,
    or generated-vs-real when reference_real is set) and the L1 shape
    distance between real and generated."""
    shape = shape_loss(real, generated)
    reference = real if reference_real else color_map
    color = color_loss(color_histogram(generated, bins),
                       color_histogram(reference, bins))
    return LossReport(shape=shape, color=color,
                      ta=weights.lambda1 * color + weights.lambda2 * shape)


def gan_objective(d_real: float, d_fake: float) -> float:
    """log D(real) + log(1 - D(fake)), with both logs floored at 1e-12."""
    for name, value in (("d_real", d_real), ("d_fake", d_fake)):
        if not 0.0 <= value <= 1.0:
            raise OutOfRange(f"{name} must lie in [0, 1], got {value}")
    return math.log(max(d_real, LOG_FLOOR)) + math.log(max(1.0 - d_fake, LOG_FLOOR))

"""Images, conditioning maps, color histograms, and compositing.

Images are float arrays in [0, 1], shaped (height, width, channels) with 1
or 3 channels.  The two conditioning maps are a box-blurred copy (the color
reference) and a Sobel gradient-magnitude edge map (the shape reference),
both with clamp-to-edge borders.  Compositing warps a masked foreground
over a background by inverse-mapped bilinear sampling and carries keypoints
through the forward transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .affine import Affine2D
from .errors import DimMismatch, EmptySupport, OutOfFrame
from .pose import HandPose

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Image:
    """Raster of float samples in [0, 1], (height, width, channels) row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) samples, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image contains NaN/Inf samples")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("image samples must lie in [0, 1]")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ColorHistogram:
    """Per-channel (or joint) normalized bin masses, channel-major flat layout."""

    bins_per_channel: int
    channels: int
    values: np.ndarray
    joint: bool = False

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        expected = (self.bins_per_channel ** self.channels if self.joint
                    else self.bins_per_channel * self.channels)
        if vals.shape != (expected,):
            raise ValueError(f"expected {expected} masses, got shape {vals.shape}")
        if (vals < 0.0).any():
            raise ValueError("histogram masses must be non-negative")
        sums = vals.sum() if self.joint else vals.reshape(self.channels, -1).sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ValueError("histogram masses must sum to 1 per channel")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def layout(self) -> tuple:
        return (self.bins_per_channel, self.channels, self.joint)


@dataclass(frozen=True)
class CompositeJob:
    """Foreground + mask placed onto a background by an affine transform."""

    foreground: Image
    mask: Image
    transform: Affine2D
    background: Image
    keypoints: HandPose

    def __post_init__(self):
        if self.mask.channels != 1:
            raise DimMismatch("mask must be single-channel")
        if (self.mask.height, self.mask.width) != (self.foreground.height, self.foreground.width):
            raise DimMismatch("mask dimensions must equal foreground dimensions")


def blur_average(img: Image, radius: int) -> Image:
    """Box blur: each sample becomes the mean of its (2r+1)^2 window,
    borders replicated (clamp-to-edge).  Radius 0 is the identity."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return img
    size = 2 * radius + 1
    out = ndimage.uniform_filter(img.data, size=(size, size, 1), mode="nearest")
    return Image(np.clip(out, 0.0, 1.0))


def _luminance(img: Image) -> np.ndarray:
    if img.channels == 1:
        return img.data[:, :, 0]
    return img.data @ LUMA


def edge_map(img: Image) -> Image:
    """Sobel gradient magnitude of the luminance channel, normalized so the
    maximum maps to 1 (an all-zero gradient image stays all-zero)."""
    lum = _luminance(img)
    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0.0:
        mag = mag / peak
    return Image(np.clip(mag, 0.0, 1.0))


def color_histogram(img: Image, bins_per_channel: int, mask: Image | None = None,
                    joint: bool = False) -> ColorHistogram:
    """Histogram of sample values over bins of width 1/bins (value 1.0 falls
    in the last bin), optionally weighted by a mask, normalized to unit mass
    per channel (or overall, in joint mode)."""
    if bins_per_channel < 1:
        raise ValueError(f"bins_per_channel must be >= 1, got {bins_per_channel}")
    if mask is not None:
        if mask.channels != 1:
            raise DimMismatch("histogram mask must be single-channel")
        if (mask.height, mask.width) != (img.height, img.width):
            raise DimMismatch("histogram mask must match image dimensions")
        weights = mask.data[:, :, 0].reshape(-1)
    else:
        weights = np.ones(img.height * img.width)
    total = weights.sum()
    if total <= 0.0:
        raise EmptySupport("histogram mask has zero total weight")

    bins = bins_per_channel
    flat = img.data.reshape(-1, img.channels)
    idx = np.minimum((flat * bins).astype(np.int64), bins - 1)
    if joint:
        combined = np.zeros(len(flat), dtype=np.int64)
        for c in range(img.channels):
            combined = combined * bins + idx[:, c]
        values = np.bincount(combined, weights=weights, minlength=bins ** img.channels)
        values = values / values.sum()
    else:
        values = np.empty(bins * img.channels)
        for c in range(img.channels):
            counts = np.bincount(idx[:, c], weights=weights, minlength=bins)
            values[c * bins:(c + 1) * bins] = counts / total
    return ColorHistogram(bins_per_channel=bins, channels=img.channels,
                          values=values, joint=joint)


def _bilinear(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (h, w, c) data at float coords, zero outside the raster."""
    h, w = data.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape + (data.shape[2],))
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c = np.clip(xi, 0, w - 1)
            yi_c = np.clip(yi, 0, h - 1)
            out += (weight * inside)[..., None] * data[yi_c, xi_c]
    return out


def composite(job: CompositeJob) -> tuple[Image, HandPose]:
    """Warp the masked foreground onto the background and transform keypoints.

    The output equals the background where the warped mask is zero and the
    alpha blend m*fg + (1-m)*bg elsewhere; sampling is inverse-mapped
    bilinear.  Raises OutOfFrame when no mask-positive pixel lands inside
    the background.
    """
    fg, bg = job.foreground, job.background
    if fg.channels != bg.channels:
        raise DimMismatch(
            f"foreground has {fg.channels} channels, background {bg.channels}")
    inv = job.transform.inverse()
    ys, xs = np.mgrid[0:bg.height, 0:bg.width]
    src = inv.apply(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1))
    sx = src[:, 0].reshape(bg.height, bg.width)
    sy = src[:, 1].reshape(bg.height, bg.width)

    warped_mask = _bilinear(job.mask.data, sx, sy)[:, :, 0]
    # an all-zero mask is a valid no-op blend; OutOfFrame means the masked
    # foreground exists but the transform pushed it entirely outside
    if job.mask.data.max() > 0.0 and warped_mask.max() <= 0.0:
        raise OutOfFrame("no mask-positive foreground pixel lands inside the background")
    warped_fg = _bilinear(fg.data, sx, sy)

    alpha = warped_mask[:, :, None]
    blended = alpha * warped_fg + (1.0 - alpha) * bg.data
    out_image = Image(np.clip(blended, 0.0, 1.0))
    out_pose = HandPose(id=job.keypoints.id,
                        keypoints2d=job.transform.apply(job.keypoints.keypoints2d))
    return out_image, out_pose


def load_png(path, force_gray: bool = False) -> Image:
    """Read an 8-bit PNG into [0, 1] samples (RGB, or grayscale for L/force_gray)."""
    with PILImage.open(path) as pil:
        if force_gray or pil.mode in ("L", "1", "I", "I;16"):
            pil = pil.convert("L")
            arr = np.asarray(pil, dtype=np.float64)[:, :, None]
        else:
            pil = pil.convert("RGB")
            arr = np.asarray(pil, dtype=np.float64)
    return Image(arr / 255.0)


def save_png(path, img: Image) -> None:
    """Write an image as 8-bit PNG via round(sample * 255)."""
    arr = np.round(img.data * 255.0).astype(np.uint8)
    if img.channels == 1:
        pil = PILImage.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG")

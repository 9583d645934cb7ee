"""Per-pixel feature maps from a deterministic filter bank.

The extractor blurs the image at a set of scales and derives color and
gradient channels, then standardizes each channel over the image. It is a
small, dependency-light stand-in for a learned backbone; externally computed
features can be loaded from the FEAT binary format instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import ImageGrid, luma601
from .errors import ConfigError, FormatError, ValidationError

__all__ = [
    "FeatureMap",
    "FilterBankSpec",
    "extract_features",
    "sobel_gradients",
    "load_features",
    "save_features",
]

FEAT_MAGIC = b"FEAT1"


@dataclass(frozen=True)
class FeatureMap:
    """Real-valued per-pixel features, shape (H, W, D)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] < 1:
            raise ValidationError(f"feature map must be (H, W, D), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("feature map contains non-finite values")
        arr.flags.writeable = False
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
class FilterBankSpec:
    """Configuration of the filter bank.

    Per blur scale the bank emits 3 color channels (when `include_color`) and
    2 gradient channels, magnitude and orientation (when `include_gradients`),
    so D = 3*len(sigmas) + 2*len(sigmas) with both flags on.
    """

    gaussian_sigmas: tuple[float, ...] = (0.0, 2.0)
    include_gradients: bool = True
    include_color: bool = True
    stride: int = 1

    def __post_init__(self):
        if len(self.gaussian_sigmas) == 0:
            raise ConfigError("at least one blur scale is required")
        if any(s < 0 for s in self.gaussian_sigmas):
            raise ConfigError("blur scales must be >= 0")
        if not (self.include_gradients or self.include_color):
            raise ConfigError("at least one of color/gradient channels must be enabled")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        object.__setattr__(self, "gaussian_sigmas", tuple(float(s) for s in self.gaussian_sigmas))

    @property
    def channels(self) -> int:
        n = len(self.gaussian_sigmas)
        return (3 * n if self.include_color else 0) + (2 * n if self.include_gradients else 0)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _correlate3(gray: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # 3x3 correlation with edge-reflecting padding
    padded = np.pad(gray, 1, mode="symmetric")
    out = np.zeros_like(gray, dtype=np.float64)
    h, w = gray.shape
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy, dx] * padded[dy : dy + h, dx : dx + w]
    return out


def sobel_gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel responses (gx, gy) of a 2-d array, reflect-padded."""
    gray = np.asarray(gray, dtype=np.float64)
    return _correlate3(gray, _SOBEL_X), _correlate3(gray, _SOBEL_Y)


def _block_mean(arr: np.ndarray, stride: int) -> np.ndarray:
    """Average-pool each channel over stride x stride blocks.

    Trailing partial blocks are averaged over the pixels they actually cover.
    """
    if stride == 1:
        return arr
    h, w = arr.shape[:2]
    row_starts = np.arange(0, h, stride)
    col_starts = np.arange(0, w, stride)
    summed = np.add.reduceat(np.add.reduceat(arr, row_starts, axis=0), col_starts, axis=1)
    row_sizes = np.minimum(row_starts + stride, h) - row_starts
    col_sizes = np.minimum(col_starts + stride, w) - col_starts
    counts = row_sizes[:, None] * col_sizes[None, :]
    return summed / counts[..., None]


def extract_features(image: ImageGrid, spec: FilterBankSpec,
                     standardize: bool = True) -> FeatureMap:
    """Run the filter bank over an image.

    The output is deterministic. After optional stride pooling each channel
    is standardized to zero mean / unit variance over the image; channels
    with zero variance are left at zero. `standardize=False` skips that last
    step (raw responses are shift-equivariant, standardized ones only up to
    the image-wide statistics).
    """
    if spec.stride > min(image.height, image.width):
        raise ConfigError(
            f"stride {spec.stride} exceeds image side {image.height}x{image.width}"
        )
    rgb = image.data.astype(np.float64)
    channels = []
    for sigma in spec.gaussian_sigmas:
        if sigma > 0:
            blurred = gaussian_filter(rgb, sigma=(sigma, sigma, 0), mode="reflect")
        else:
            blurred = rgb
        if spec.include_color:
            channels.extend(blurred[..., k] for k in range(3))
        if spec.include_gradients:
            gx, gy = sobel_gradients(luma601(blurred))
            channels.append(np.sqrt(gx * gx + gy * gy))
            channels.append(np.arctan2(gy, gx))
    stacked = np.stack(channels, axis=-1)
    pooled = _block_mean(stacked, spec.stride)
    if not standardize:
        return FeatureMap(pooled)
    mean = pooled.mean(axis=(0, 1))
    var = pooled.var(axis=(0, 1))
    std = np.sqrt(var)
    centered = pooled - mean
    out = np.where(std > 1e-12, centered / np.where(std > 1e-12, std, 1.0), 0.0)
    return FeatureMap(out)


# ---------------------------------------------------------------------------
# FEAT binary format: magic "FEAT1", u32 LE height/width/channels, then the
# f32 row-major H*W*D payload.
# ---------------------------------------------------------------------------


def save_features(path, features: FeatureMap) -> None:
    header = FEAT_MAGIC + np.array(
        [features.height, features.width, features.channels], dtype="<u4"
    ).tobytes()
    Path(path).write_bytes(header + features.data.astype("<f4").tobytes())


def load_features(path) -> FeatureMap:
    """Read a FEAT file, restoring the exact stored (f32) values."""
    buf = Path(path).read_bytes()
    if not buf.startswith(FEAT_MAGIC):
        raise FormatError(f"{path}: bad magic, not a FEAT file")
    if len(buf) < len(FEAT_MAGIC) + 12:
        raise FormatError(f"{path}: truncated FEAT header")
    h, w, d = np.frombuffer(buf, dtype="<u4", count=3, offset=len(FEAT_MAGIC))
    need = int(h) * int(w) * int(d)
    payload = buf[len(FEAT_MAGIC) + 12 :]
    if len(payload) != 4 * need:
        raise FormatError(
            f"{path}: header declares {h}x{w}x{d} ({4 * need} payload bytes), "
            f"got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(int(h), int(w), int(d))
    return FeatureMap(data.astype(np.float64))

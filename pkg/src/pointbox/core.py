"""Domain types, raster/annotation I/O, and color conversion.

Coordinate convention used everywhere in this package: ``x`` is the column
index, ``y`` is the row index, the origin is the top-left pixel, and boxes
are inclusive on both corners (a 1x1 box has ``x_min == x_max``).

All types are immutable after construction (backing arrays are marked
read-only) and safe to share across threads.
"""

from __future__ import annotations

import json
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

__all__ = [
    "ImageGrid",
    "PointAnnotation",
    "Box",
    "AssignmentMap",
    "LabColor",
    "ImageAnnotations",
    "load_image",
    "save_image",
    "write_pgm",
    "srgb_to_lab",
    "srgb_image_to_lab",
    "luma601",
    "rle_encode",
    "rle_decode",
    "load_annotations",
    "load_pseudo_labels",
    "write_annotations",
    "stream_rng",
]


def _frozen_array(data, dtype, ndim: int) -> np.ndarray:
    arr = np.array(data, dtype=dtype)
    if arr.ndim != ndim:
        raise ValidationError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ImageGrid:
    """An sRGB raster with channel values in [0, 255], shape (H, W, 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.data, np.uint8, 3)
        if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] != 3:
            raise ValidationError(f"invalid image shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PointAnnotation:
    """A single labeled point: location, category and instance identity."""

    x: int
    y: int
    category: int
    instance_id: int

    def __post_init__(self):
        if self.category < 1:
            raise ValidationError(f"category must be >= 1, got {self.category}")
        if self.instance_id < 1:
            raise ValidationError(f"instance_id must be >= 1, got {self.instance_id}")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, inclusive on both corners."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    category: int
    instance_id: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValidationError(
                f"degenerate box corners ({self.x_min},{self.y_min})..({self.x_max},{self.y_max})"
            )

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains(self, x: int, y: int) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


@dataclass(frozen=True)
class AssignmentMap:
    """Per-pixel instance labels, 0 meaning background."""

    labels: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.labels, np.int32, 2)
        if arr.min(initial=0) < 0:
            raise ValidationError("assignment labels must be >= 0")
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class LabColor:
    """A CIELAB color under the D65 reference white."""

    L: float
    a: float
    b: float

    def __post_init__(self):
        if not (0.0 <= self.L <= 100.0 + 1e-9):
            raise ValidationError(f"L must lie in [0, 100], got {self.L}")


# ---------------------------------------------------------------------------
# PPM / PGM rasters
# ---------------------------------------------------------------------------

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def load_image(path) -> ImageGrid:
    """Load a binary PPM (P6) or, when pillow is installed, a PNG.

    Pixel values are returned exactly as stored; no resampling or color
    management is applied.
    """
    buf = Path(path).read_bytes()
    if buf.startswith(_PNG_MAGIC):
        return _load_png(path)
    if not buf.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (P6) or PNG file (bad magic at byte 0)")
    return _parse_ppm(buf, str(path))


def _load_png(path) -> ImageGrid:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on install extras
        raise FormatError(
            f"{path}: PNG support requires the optional 'png' extra (pip install pointbox[png])"
        ) from exc
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageGrid(arr)


def _parse_ppm(buf: bytes, name: str) -> ImageGrid:
    pos = 2  # after b"P6"
    fields = []
    while len(fields) < 3:
        # skip whitespace and '#' comments between header tokens
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        token = buf[start:pos]
        if not token.isdigit():
            raise FormatError(f"{name}: malformed header token {token!r} at byte {start}")
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{name}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{name}: unsupported maxval {maxval} (only 255 is handled)")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{name}: missing whitespace after maxval at byte {pos}")
    pos += 1  # exactly one whitespace byte separates header from payload
    need = width * height * 3
    payload = buf[pos : pos + need]
    if len(payload) != need:
        raise FormatError(
            f"{name}: truncated pixel payload: expected {need} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return ImageGrid(data)


def save_image(path, image: ImageGrid) -> None:
    """Write a binary PPM (P6) file. Round trips bit-exactly with load_image."""
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.data.tobytes())


def write_pgm(path, values: np.ndarray) -> None:
    """Write an 8-bit binary PGM (P5). `values` must be a 2-d uint8 array."""
    arr = np.ascontiguousarray(values, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValidationError(f"PGM payload must be 2-d, got shape {arr.shape}")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


# ---------------------------------------------------------------------------
# sRGB -> CIELAB
# ---------------------------------------------------------------------------

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# Reference white as the matrix image of (1,1,1): grays then map to a = b = 0
# exactly and (255,255,255) to L = 100 exactly.
_WHITE = _SRGB_TO_XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0


def _srgb_linearize(channels: np.ndarray) -> np.ndarray:
    c = channels / 255.0
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3.0 * _DELTA**2) + 4.0 / 29.0)


def srgb_image_to_lab(data: np.ndarray) -> np.ndarray:
    """Vectorized sRGB -> CIELAB (D65) conversion for an (..., 3) array."""
    rgb = np.asarray(data, dtype=np.float64)
    lin = _srgb_linearize(rgb)
    xyz = lin @ _SRGB_TO_XYZ.T
    f = _lab_f(xyz / _WHITE)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def srgb_to_lab(r: float, g: float, b: float) -> LabColor:
    """Convert one sRGB triple in [0, 255] to CIELAB under D65."""
    for name, v in (("r", r), ("g", g), ("b", b)):
        if not (0 <= v <= 255):
            raise ValidationError(f"channel {name}={v} outside [0, 255]")
    lab = srgb_image_to_lab(np.array([[r, g, b]], dtype=np.float64))[0]
    return LabColor(float(lab[0]), float(lab[1]), float(lab[2]))


def luma601(data: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an (..., 3) sRGB array, in the input's value range."""
    rgb = np.asarray(data, dtype=np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


# ---------------------------------------------------------------------------
# Run-length encoded masks
# ---------------------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> str:
    """Encode a boolean mask as space-separated run lengths.

    The scan is row-major and runs alternate starting with the number of
    leading zeros (which may be 0).
    """
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        raise ValidationError("cannot RLE-encode an empty mask")
    changes = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return " ".join(str(r) for r in runs)


def rle_decode(text: str, height: int, width: int) -> np.ndarray:
    """Decode a run-length string produced by rle_encode into a bool mask."""
    try:
        counts = [int(t) for t in text.split()]
    except ValueError as exc:
        raise FormatError(f"malformed RLE string: {exc}") from exc
    if sum(counts) != height * width:
        raise FormatError(
            f"RLE covers {sum(counts)} pixels, expected {height * width}"
        )
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    return np.repeat(values, counts).reshape(height, width)


# ---------------------------------------------------------------------------
# Annotation files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageAnnotations:
    """Annotations for one image: labeled points plus optional ground truth.

    `gt_masks` entries are RLE strings aligned index-wise with `gt_boxes`.
    """

    file: str
    width: int
    height: int
    points: tuple[PointAnnotation, ...]
    gt_boxes: tuple[Box, ...] | None = None
    gt_masks: tuple[str, ...] | None = None

    @property
    def n_instances(self) -> int:
        return len(self.points)


def _parse_box(rec: dict, width: int, height: int, where: str) -> Box:
    try:
        box = Box(
            int(rec["x_min"]),
            int(rec["y_min"]),
            int(rec["x_max"]),
            int(rec["y_max"]),
            int(rec["category"]),
            int(rec["instance"]),
        )
    except KeyError as exc:
        raise ValidationError(f"{where}: box record missing key {exc}") from exc
    if box.x_min < 0 or box.y_min < 0 or box.x_max >= width or box.y_max >= height:
        raise ValidationError(f"{where}: box {rec} outside {width}x{height} image")
    return box


def load_annotations(path) -> list[ImageAnnotations]:
    """Load and validate an annotation JSON file.

    Points are checked against the declared image bounds; duplicate instance
    ids are rejected; non-contiguous instance ids are renumbered (preserving
    order of appearance) with a warning, and ground-truth records follow the
    same renumbering.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "images" not in doc:
        raise ValidationError(f"{path}: expected a top-level object with an 'images' list")
    out = []
    for idx, rec in enumerate(doc["images"]):
        where = f"{path}: images[{idx}]"
        try:
            file, width, height = rec["file"], int(rec["width"]), int(rec["height"])
            raw_points = rec["points"]
        except KeyError as exc:
            raise ValidationError(f"{where}: missing key {exc}") from exc
        points = []
        for p in raw_points:
            x, y = int(p["x"]), int(p["y"])
            if not (0 <= x < width and 0 <= y < height):
                raise ValidationError(
                    f"{where}: point {p} outside image bounds {width}x{height}"
                )
            points.append(PointAnnotation(x, y, int(p["category"]), int(p["instance"])))
        ids = [p.instance_id for p in points]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"{where}: duplicate instance ids {sorted(ids)}")
        remap = None
        if ids and sorted(ids) != list(range(1, len(ids) + 1)):
            remap = {old: new for new, old in enumerate(ids, start=1)}
            warnings.warn(
                f"{where}: instance ids {ids} renumbered to 1..{len(ids)}", stacklevel=2
            )
            points = [
                PointAnnotation(p.x, p.y, p.category, remap[p.instance_id]) for p in points
            ]
        gt_boxes = None
        if rec.get("gt_boxes") is not None:
            gt_boxes = []
            for b in rec["gt_boxes"]:
                box = _parse_box(b, width, height, where)
                if remap is not None:
                    if box.instance_id not in remap:
                        raise ValidationError(
                            f"{where}: gt box instance {box.instance_id} has no point"
                        )
                    box = Box(
                        box.x_min, box.y_min, box.x_max, box.y_max,
                        box.category, remap[box.instance_id],
                    )
                gt_boxes.append(box)
            gt_boxes = tuple(gt_boxes)
        gt_masks = None
        if rec.get("gt_masks") is not None:
            gt_masks = tuple(str(m) for m in rec["gt_masks"])
        out.append(
            ImageAnnotations(str(file), width, height, tuple(points), gt_boxes, gt_masks)
        )
    return out


def load_pseudo_labels(path) -> tuple[list[ImageAnnotations], list[list[Box]]]:
    """Load a pseudo-label JSON file.

    Returns the usual per-image annotations plus the pseudo boxes (degenerate
    ones included) for each image, in file order.
    """
    annotations = load_annotations(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    pseudo = []
    for idx, rec in enumerate(doc["images"]):
        where = f"{path}: images[{idx}]"
        if "pseudo_boxes" not in rec:
            raise ValidationError(f"{where}: no pseudo_boxes entry")
        img = annotations[idx]
        pseudo.append([_parse_box(b, img.width, img.height, where) for b in rec["pseudo_boxes"]])
    return annotations, pseudo


def _box_to_json(box: Box) -> dict:
    return {
        "x_min": box.x_min,
        "y_min": box.y_min,
        "x_max": box.x_max,
        "y_max": box.y_max,
        "category": box.category,
        "instance": box.instance_id,
    }


def write_annotations(images: list[ImageAnnotations], path, *, pseudo=None) -> None:
    """Write an annotation JSON file.

    When `pseudo` is given it must align with `images`; each entry is a list
    of (Box, rle_or_None, degenerate_flag) triples and is emitted under the
    "pseudo_boxes" / "pseudo_masks" keys.
    """
    docs = []
    for idx, img in enumerate(images):
        rec = {
            "file": img.file,
            "width": img.width,
            "height": img.height,
            "points": [
                {"x": p.x, "y": p.y, "category": p.category, "instance": p.instance_id}
                for p in img.points
            ],
        }
        if img.gt_boxes is not None:
            rec["gt_boxes"] = [_box_to_json(b) for b in img.gt_boxes]
        if img.gt_masks is not None:
            rec["gt_masks"] = list(img.gt_masks)
        if pseudo is not None:
            entries = pseudo[idx]
            rec["pseudo_boxes"] = [
                dict(_box_to_json(box), degenerate=bool(degen))
                for box, _, degen in entries
            ]
            masks = [rle for _, rle, _ in entries]
            if any(m is not None for m in masks):
                rec["pseudo_masks"] = masks
        docs.append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"images": docs}, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Seeded random streams
# ---------------------------------------------------------------------------


def stream_rng(seed: int, *parts) -> np.random.Generator:
    """Derive a named random stream from one master seed.

    Components may be strings (hashed with crc32, stable across platforms and
    runs) or integers. Every source of randomness in the package draws from a
    named stream so runs are reproducible piecewise.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for part in parts:
        if isinstance(part, str):
            entropy.append(zlib.crc32(part.encode("utf-8")))
        else:
            entropy.append(int(part) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))

"""Synthetic scenes with exact ground truth.

Scenes hold flat-colored shapes (rectangles, ellipses, L-shapes) on a flat,
gradient or noisy background, together with disjoint instance masks, boxes
and one sampled point per object. Generation is deterministic per seed,
which makes the scenes usable as oracles in tests and studies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Box, ImageGrid, ImageAnnotations, PointAnnotation, rle_encode, stream_rng
from .semantic import SemanticMap
from .errors import ValidationError

__all__ = [
    "SceneSpec",
    "Scene",
    "generate_scene",
    "place_objects_scene",
    "copy_paste_synthesize",
    "adjacent_pair_scene",
    "indicator_semantics",
    "sample_dataset_specs",
    "scene_to_annotations",
]

# Base colors per category, cycled when more categories are requested.
# Each sits at a comparable RGB distance from the background (so no category
# is systematically fainter after feature standardization) with moderate luma
# contrast: object borders register in the Sobel map without claiming its
# global maximum.
_PALETTE = (
    (150, 145, 35),
    (35, 55, 190),
    (190, 150, 180),
    (210, 110, 25),
    (10, 85, 60),
    (230, 205, 160),
)

_BACKGROUND_FLAT = (96, 100, 106)

# Unannotated high-contrast speckles; they belong to the background and, like
# man-made clutter in real imagery, they own the edge map's global maximum.
_CLUTTER_COLORS = ((242, 242, 242), (18, 18, 18))


@dataclass(frozen=True)
class SceneSpec:
    """Generation parameters for one synthetic scene."""

    height: int = 96
    width: int = 96
    object_count: int = 5
    categories: tuple[int, ...] = (1, 2)
    shape_families: dict = field(default_factory=lambda: {1: "rect", 2: "ellipse"})
    scale_range: tuple[int, int] = (10, 22)
    min_gap: int = 2
    background: str = "noise"  # "flat" | "gradient" | "noise"
    noise_sigma: float = 5.0
    color_jitter: int = 12
    clutter: int = 0  # unannotated high-contrast speckles in the background
    companion_fraction: float = 0.0  # chance of a lookalike blob hugging an object
    companion_style: str = "one-sided"  # color offset to one or both sides
    align: int = 0  # snap positions/sizes to this grid (0 = free placement)
    point_center_bias: float = 0.0  # 0 = uniform over mask; >0 trims the mask rim
    seed: int = 0

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ValidationError("scene must be at least 4x4")
        if self.object_count < 0:
            raise ValidationError("object_count must be >= 0")
        if not (1 <= self.scale_range[0] <= self.scale_range[1]):
            raise ValidationError(f"bad scale range {self.scale_range}")
        if self.background not in ("flat", "gradient", "noise"):
            raise ValidationError(f"unknown background {self.background!r}")
        for cat in self.categories:
            fam = self.shape_families.get(cat)
            if fam not in ("rect", "ellipse", "L"):
                raise ValidationError(f"category {cat} needs a shape family (rect/ellipse/L)")


@dataclass(frozen=True)
class Scene:
    """A rendered scene plus its exact ground truth."""

    image: ImageGrid
    background: np.ndarray  # pristine background, (H, W, 3) uint8
    masks: tuple[np.ndarray, ...]  # one bool (H, W) mask per instance, disjoint
    boxes: tuple[Box, ...]
    points: tuple[PointAnnotation, ...]

    @property
    def n_objects(self) -> int:
        return len(self.masks)


def _render_background(spec: SceneSpec, rng) -> np.ndarray:
    h, w = spec.height, spec.width
    base = np.empty((h, w, 3), dtype=np.float64)
    if spec.background == "gradient":
        gy = np.linspace(0.0, 1.0, h)[:, None]
        gx = np.linspace(0.0, 1.0, w)[None, :]
        ramp = 0.5 * (gy + gx)
        lo, hi = np.array([74.0, 78.0, 84.0]), np.array([142.0, 146.0, 152.0])
        base[:] = lo + ramp[..., None] * (hi - lo)
    else:
        base[:] = np.array(_BACKGROUND_FLAT, dtype=np.float64)
    if spec.background == "noise":
        base += rng.normal(0.0, spec.noise_sigma, size=(h, w, 3))
    return np.clip(np.rint(base), 0, 255).astype(np.uint8)


def _paint_clutter(background: np.ndarray, count: int, rng) -> None:
    h, w = background.shape[:2]
    for k in range(count):
        size = int(rng.integers(2, 5))
        y0 = int(rng.integers(0, h - size + 1))
        x0 = int(rng.integers(0, w - size + 1))
        color = _CLUTTER_COLORS[k % len(_CLUTTER_COLORS)]
        background[y0 : y0 + size, x0 : x0 + size] = color


def _shape_mask(family: str, h: int, w: int) -> np.ndarray:
    if family == "rect":
        return np.ones((h, w), dtype=bool)
    if family == "ellipse":
        yy = (np.arange(h) - (h - 1) / 2.0) / (h / 2.0)
        xx = (np.arange(w) - (w - 1) / 2.0) / (w / 2.0)
        return (yy[:, None] ** 2 + xx[None, :] ** 2) <= 1.0
    if family == "L":
        mask = np.ones((h, w), dtype=bool)
        mask[: h // 2, w // 2 :] = False
        return mask
    raise ValidationError(f"unknown shape family {family!r}")


def _category_color(category: int, jitter: int, rng) -> np.ndarray:
    base = np.array(_PALETTE[(category - 1) % len(_PALETTE)], dtype=np.int64)
    if jitter > 0:
        base = base + rng.integers(-jitter, jitter + 1, size=3)
    return np.clip(base, 25, 245).astype(np.uint8)


def _sample_point(mask: np.ndarray, rng, center_bias: float = 0.0) -> tuple[int, int]:
    ys, xs = np.nonzero(mask)
    if center_bias > 0.0:
        # keep only mask pixels inside the centrally trimmed bounding box
        y_lo, y_hi = ys.min(), ys.max()
        x_lo, x_hi = xs.min(), xs.max()
        ty = center_bias * (y_hi - y_lo) / 2.0
        tx = center_bias * (x_hi - x_lo) / 2.0
        keep = (
            (ys >= y_lo + ty) & (ys <= y_hi - ty) & (xs >= x_lo + tx) & (xs <= x_hi - tx)
        )
        if keep.any():
            ys, xs = ys[keep], xs[keep]
    k = int(rng.integers(ys.size))
    return int(xs[k]), int(ys[k])


def _assemble(spec_like, background, placements, rng_color, rng_points) -> Scene:
    """Paint placed shapes onto the background and collect ground truth.

    `placements` holds (x0, y0, shape_mask, category) tuples with
    instance ids implied by order (1-based).
    """
    image = background.copy()
    masks, boxes, points = [], [], []
    occupied = np.zeros(background.shape[:2], dtype=bool)
    for idx, (x0, y0, shape, category) in enumerate(placements, start=1):
        h, w = shape.shape
        full = np.zeros(background.shape[:2], dtype=bool)
        full[y0 : y0 + h, x0 : x0 + w] = shape
        if (full & occupied).any():
            raise ValidationError(f"placement {idx} overlaps an earlier object")
        occupied |= full
        color = _category_color(category, spec_like.color_jitter, rng_color)
        image[full] = color
        ys, xs = np.nonzero(full)
        boxes.append(Box(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()),
                         category, idx))
        masks.append(full)
        px, py = _sample_point(full, rng_points, getattr(spec_like, "point_center_bias", 0.0))
        points.append(PointAnnotation(px, py, category, idx))
    return Scene(ImageGrid(image), background, tuple(masks), tuple(boxes), tuple(points))


def _snap(value: int, align: int) -> int:
    if align <= 1:
        return value
    return max(align, align * int(round(value / align)))


def _companion_color(category: int, style: str, rng) -> np.ndarray:
    """A lookalike color for unannotated clutter next to an object.

    Offset from the category color along the blue axis (nearly invisible to
    the luma-based edge map). "one-sided" always offsets the same way, so a
    linear predictor can learn to reject companions; "two-sided" picks either
    direction, which no single linear boundary can reject while keeping the
    object itself.
    """
    base = np.array(_PALETTE[(category - 1) % len(_PALETTE)], dtype=np.int64)
    if style == "two-sided":
        sign = 1 if rng.random() < 0.5 else -1
    else:
        sign = 1 if base[2] < 128 else -1  # stay inside the gamut
    base[2] += sign * 80
    return np.clip(base, 10, 250).astype(np.uint8)


def generate_scene(spec: SceneSpec) -> Scene:
    """Random scene per the spec; identical seeds give identical bytes."""
    rng_layout = stream_rng(spec.seed, "layout")
    rng_color = stream_rng(spec.seed, "color")
    rng_points = stream_rng(spec.seed, "points")
    rng_bg = stream_rng(spec.seed, "background")
    rng_comp = stream_rng(spec.seed, "companions")
    background = _render_background(spec, rng_bg)
    if spec.clutter:
        _paint_clutter(background, spec.clutter, stream_rng(spec.seed, "clutter"))

    placements = []
    taken_boxes = []
    occupied = np.zeros((spec.height, spec.width), dtype=bool)
    budget = max(200, 120 * spec.object_count)
    attempts = 0
    for _ in range(spec.object_count):
        placed = False
        while attempts < budget:
            attempts += 1
            category = int(rng_layout.choice(np.asarray(spec.categories)))
            lo, hi = spec.scale_range
            oh = _snap(int(rng_layout.integers(lo, hi + 1)), spec.align)
            ow = _snap(int(rng_layout.integers(lo, hi + 1)), spec.align)
            if oh > spec.height or ow > spec.width:
                continue
            if spec.align > 1:
                y0 = spec.align * int(rng_layout.integers(0, (spec.height - oh) // spec.align + 1))
                x0 = spec.align * int(rng_layout.integers(0, (spec.width - ow) // spec.align + 1))
            else:
                y0 = int(rng_layout.integers(0, spec.height - oh + 1))
                x0 = int(rng_layout.integers(0, spec.width - ow + 1))
            shape = _shape_mask(spec.shape_families[category], oh, ow)
            region = occupied[y0 : y0 + oh, x0 : x0 + ow]
            if (region & shape).any():
                continue
            if spec.min_gap > 0 and any(
                _box_gap(x0, y0, x0 + ow - 1, y0 + oh - 1, tb) < spec.min_gap
                for tb in taken_boxes
            ):
                continue
            placements.append((x0, y0, shape, category))
            taken_boxes.append((x0, y0, x0 + ow - 1, y0 + oh - 1))
            occupied[y0 : y0 + oh, x0 : x0 + ow] |= shape
            if spec.companion_fraction > 0 and rng_comp.random() < spec.companion_fraction:
                _try_companion(background, occupied, spec, x0, y0, oh, ow, category, rng_comp)
            placed = True
            break
        if not placed:
            raise ValidationError(
                f"could not place {spec.object_count} objects in "
                f"{spec.width}x{spec.height} (try fewer or smaller objects)"
            )
    return _assemble(spec, background, placements, rng_color, rng_points)


def _try_companion(background, occupied, spec, x0, y0, oh, ow, category, rng) -> None:
    """Paint a lookalike blob hugging one side of a placed object.

    Companions belong to the background (no point, no mask); they model the
    object-colored context clutter that makes recognition ambiguous.
    """
    ch = _snap(max(3, int(round(oh * 0.9))), spec.align)
    cw = _snap(max(3, int(round(ow * 0.9))), spec.align)
    sides = [(x0 + ow, y0), (x0 - cw, y0), (x0, y0 + oh), (x0, y0 - ch)]
    color = _companion_color(category, spec.companion_style, rng)
    for side in rng.permutation(len(sides)):
        cx, cy = sides[side]
        if cx < 0 or cy < 0 or cx + cw > spec.width or cy + ch > spec.height:
            continue
        if occupied[cy : cy + ch, cx : cx + cw].any():
            continue
        background[cy : cy + ch, cx : cx + cw] = color
        occupied[cy : cy + ch, cx : cx + cw] = True
        return


def _box_gap(x0, y0, x1, y1, other) -> int:
    """Chebyshev gap between two inclusive boxes; 0 when they touch/overlap."""
    ox0, oy0, ox1, oy1 = other
    dx = max(ox0 - x1 - 1, x0 - ox1 - 1, 0)
    dy = max(oy0 - y1 - 1, y0 - oy1 - 1, 0)
    if dx == 0 and dy == 0:
        return 0
    return max(dx, dy)


def place_objects_scene(spec: SceneSpec, placements) -> Scene:
    """Scene with fully controlled layout.

    `placements` holds (x0, y0, obj_h, obj_w, category) tuples; colors,
    points and background still follow the spec's seed streams.
    """
    rng_color = stream_rng(spec.seed, "color")
    rng_points = stream_rng(spec.seed, "points")
    rng_bg = stream_rng(spec.seed, "background")
    background = _render_background(spec, rng_bg)
    if spec.clutter:
        _paint_clutter(background, spec.clutter, stream_rng(spec.seed, "clutter"))
    shaped = []
    for x0, y0, oh, ow, category in placements:
        if y0 < 0 or x0 < 0 or y0 + oh > spec.height or x0 + ow > spec.width:
            raise ValidationError(f"placement at ({x0},{y0}) size {ow}x{oh} leaves the frame")
        shaped.append((x0, y0, _shape_mask(spec.shape_families[category], oh, ow), category))
    return _assemble(spec, background, shaped, rng_color, rng_points)


def copy_paste_synthesize(base: Scene, n: int, gap: int) -> Scene:
    """Replicate the single object of `base` n times at a controlled spacing.

    Copies are laid out row-major starting at the original box, with `gap`
    background pixels between consecutive boxes; pixel values inside each
    copy equal the original object's pixels. n = 1 reproduces the base scene
    exactly.
    """
    if base.n_objects != 1:
        raise ValidationError(f"copy-paste needs a single-object base, got {base.n_objects}")
    if n < 1:
        raise ValidationError("need at least one copy")
    if gap < 0:
        raise ValidationError("gap must be >= 0 (masks stay disjoint)")
    box = base.boxes[0]
    mask = base.masks[0]
    h_img, w_img = mask.shape
    bh, bw = box.height, box.width
    patch_mask = mask[box.y_min : box.y_max + 1, box.x_min : box.x_max + 1]
    patch_rgb = base.image.data[box.y_min : box.y_max + 1, box.x_min : box.x_max + 1]
    point_dx = base.points[0].x - box.x_min
    point_dy = base.points[0].y - box.y_min

    image = base.background.copy()
    masks, boxes, points = [], [], []
    x0, y0 = box.x_min, box.y_min
    for idx in range(1, n + 1):
        if x0 + bw > w_img:
            x0 = box.x_min
            y0 = y0 + bh + gap
        if x0 + bw > w_img or y0 + bh > h_img:
            raise ValidationError(f"{n} copies at gap {gap} do not fit in the frame")
        region = image[y0 : y0 + bh, x0 : x0 + bw]
        region[patch_mask] = patch_rgb[patch_mask]
        full = np.zeros((h_img, w_img), dtype=bool)
        full[y0 : y0 + bh, x0 : x0 + bw] = patch_mask
        masks.append(full)
        boxes.append(Box(x0, y0, x0 + bw - 1, y0 + bh - 1, box.category, idx))
        points.append(PointAnnotation(x0 + point_dx, y0 + point_dy, box.category, idx))
        x0 = x0 + bw + gap
    return Scene(ImageGrid(image), base.background, tuple(masks), tuple(boxes), tuple(points))


def adjacent_pair_scene(
    height: int = 64,
    width: int = 96,
    obj_h: int = 20,
    obj_w: int = 24,
    gap: int = 1,
    category: int = 1,
    seed: int = 0,
) -> tuple[Scene, SemanticMap]:
    """Two identical side-by-side rectangles plus a merged semantic oracle.

    The returned semantic map is 1 over the hull of both objects (including
    the seam), mimicking a predictor that cannot tell the instances apart;
    only the image edge between them separates their labels.
    """
    spec = SceneSpec(
        height=height, width=width, object_count=2, categories=(category,),
        shape_families={category: "rect"},
        scale_range=(min(obj_h, obj_w), max(obj_h, obj_w)),
        min_gap=0, background="flat", color_jitter=0, seed=seed,
    )
    y0 = (height - obj_h) // 2
    x0 = (width - 2 * obj_w - gap) // 2
    if x0 < 1 or y0 < 1:
        raise ValidationError("objects do not fit with a margin")
    scene = place_objects_scene(
        spec,
        [(x0, y0, obj_h, obj_w, category), (x0 + obj_w + gap, y0, obj_h, obj_w, category)],
    )
    merged = np.zeros((height, width, category), dtype=np.float64)
    hull_x0 = scene.boxes[0].x_min
    hull_x1 = scene.boxes[1].x_max
    merged[y0 : y0 + obj_h, hull_x0 : hull_x1 + 1, category - 1] = 1.0
    return scene, SemanticMap(merged)


def indicator_semantics(scene: Scene, categories: int) -> SemanticMap:
    """Ground-truth oracle scores: 1 on each object's mask in its category
    channel, 0 elsewhere."""
    h, w = scene.background.shape[:2]
    scores = np.zeros((h, w, categories), dtype=np.float64)
    for mask, box in zip(scene.masks, scene.boxes):
        scores[..., box.category - 1][mask] = 1.0
    return SemanticMap(scores)


def sample_dataset_specs(
    n: int,
    base: SceneSpec,
    count_range: tuple[int, int] = (3, 7),
    single_object_fraction: float = 0.3,
    seed: int = 0,
) -> list[SceneSpec]:
    """Specs for a mixed dataset: mostly multi-object scenes plus a share of
    single-object ones (prototype encoding needs the latter)."""
    from dataclasses import replace

    rng = stream_rng(seed, "dataset-plan")
    specs = []
    for i in range(n):
        if rng.random() < single_object_fraction:
            count = 1
        else:
            count = int(rng.integers(count_range[0], count_range[1] + 1))
        specs.append(replace(base, object_count=count,
                             seed=int(stream_rng(seed, "scene-seed", i).integers(2**31))))
    return specs


def scene_to_annotations(scene: Scene, file: str, with_masks: bool = True) -> ImageAnnotations:
    h, w = scene.background.shape[:2]
    return ImageAnnotations(
        file=file,
        width=w,
        height=h,
        points=scene.points,
        gt_boxes=scene.boxes,
        gt_masks=tuple(rle_encode(m) for m in scene.masks) if with_masks else None,
    )

"""Pseudo-box quality metrics.

Pseudo boxes are matched to ground truth by instance id (the point label
fixes which object a pseudo box targets), and IoU is averaged overall, per
category, per size bucket and per object-density bucket.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Box
from .errors import ValidationError

__all__ = ["MiouReport", "iou", "evaluate", "SIZE_SMALL_MAX", "SIZE_MEDIUM_MAX"]

# Detection-style size buckets on ground-truth box area.
SIZE_SMALL_MAX = 32 * 32
SIZE_MEDIUM_MAX = 96 * 96

# Per-image object-count buckets.
DENSITY_BUCKETS = (("1", 1, 1), ("2-5", 2, 5), ("6-15", 6, 15), ("16+", 16, None))


def iou(a: Box, b: Box) -> float:
    """Intersection over union with inclusive pixel areas."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class MiouReport:
    """Mean-IoU breakdown for one evaluation run."""

    miou: float
    per_category: dict[int, float]
    miou_small: float | None
    miou_medium: float | None
    miou_large: float | None
    per_density: dict[str, float]
    counts_size: dict[str, int]
    counts_density: dict[str, int]
    n_instances: int

    def to_json(self) -> dict:
        return {
            "miou": self.miou,
            "per_category": {str(k): v for k, v in sorted(self.per_category.items())},
            "miou_small": self.miou_small,
            "miou_medium": self.miou_medium,
            "miou_large": self.miou_large,
            "per_density": dict(self.per_density),
            "counts_size": dict(self.counts_size),
            "counts_density": dict(self.counts_density),
            "n_instances": self.n_instances,
        }


def _density_bucket(count: int) -> str:
    for name, lo, hi in DENSITY_BUCKETS:
        if count >= lo and (hi is None or count <= hi):
            return name
    raise AssertionError(f"unbucketable count {count}")


def evaluate(pseudo_per_image, gt_per_image) -> MiouReport:
    """Score pseudo boxes against ground truth, matched by instance id.

    Both arguments are sequences (one entry per image) of Box sequences.
    Every pseudo box must have a ground-truth partner with the same instance
    id in the same image; a missing partner is an error.
    """
    if len(pseudo_per_image) != len(gt_per_image):
        raise ValidationError(
            f"{len(pseudo_per_image)} pseudo images vs {len(gt_per_image)} gt images"
        )
    ious, cats, areas, densities = [], [], [], []
    for img_idx, (pseudo, gt) in enumerate(zip(pseudo_per_image, gt_per_image)):
        by_id = {b.instance_id: b for b in gt}
        count = len(pseudo)
        for pb in pseudo:
            partner = by_id.get(pb.instance_id)
            if partner is None:
                raise ValidationError(
                    f"image {img_idx}: pseudo instance {pb.instance_id} has no ground truth"
                )
            ious.append(iou(pb, partner))
            cats.append(partner.category)
            areas.append(partner.area)
            densities.append(_density_bucket(count))
    if not ious:
        raise ValidationError("nothing to evaluate: no pseudo boxes given")
    ious_arr = np.array(ious)
    cats_arr = np.array(cats)
    areas_arr = np.array(areas)

    per_category = {
        int(c): float(ious_arr[cats_arr == c].mean()) for c in np.unique(cats_arr)
    }
    small = areas_arr < SIZE_SMALL_MAX
    medium = (areas_arr >= SIZE_SMALL_MAX) & (areas_arr < SIZE_MEDIUM_MAX)
    large = areas_arr >= SIZE_MEDIUM_MAX

    def bucket_mean(mask):
        return float(ious_arr[mask].mean()) if mask.any() else None

    per_density: dict[str, float] = {}
    counts_density: dict[str, int] = {}
    for name, _, _ in DENSITY_BUCKETS:
        mask = np.array([d == name for d in densities])
        if mask.any():
            per_density[name] = float(ious_arr[mask].mean())
            counts_density[name] = int(mask.sum())

    return MiouReport(
        miou=float(ious_arr.mean()),
        per_category=per_category,
        miou_small=bucket_mean(small),
        miou_medium=bucket_mean(medium),
        miou_large=bucket_mean(large),
        per_density=per_density,
        counts_size={
            "small": int(small.sum()),
            "medium": int(medium.sum()),
            "large": int(large.sum()),
        },
        counts_density=counts_density,
        n_instances=len(ious),
    )

"""Controlled studies of pseudo-box quality.

The density study replicates one object at increasing counts and measures
how label quality degrades; its control arm synthesizes a dense response map
by shifting and fusing the single-object response, isolating the feature
side of the degradation. The lambda sweep regenerates labels over a grid of
edge-cost weights.
"""

from __future__ import annotations

import csv
from dataclasses import replace

import numpy as np

from .features import FilterBankSpec, extract_features
from .instances import LabelGenConfig, bilinear_upsample, generate_instance_labels
from .metrics import MiouReport, evaluate
from .scenes import Scene, SceneSpec, copy_paste_synthesize, place_objects_scene
from .training import TrainedModel, predict_scores
from .errors import ValidationError

__all__ = [
    "density_study",
    "lambda_sweep",
    "write_study_csv",
    "shift_and_fuse",
    "LAMBDA_GRID",
]

# Edge-weight grid used by the sweep.
LAMBDA_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)

STUDY_FIELDS = ("count", "gap", "seed", "sfg", "lambda", "miou", "miou_s", "miou_m", "miou_l")


def shift_and_fuse(base_scores: np.ndarray, offsets) -> np.ndarray:
    """Max-fuse copies of a response map shifted by (dy, dx) offsets.

    Shifted maps replicate their border rows/columns into the vacated area so
    background statistics survive the shift.
    """
    fused = None
    for dy, dx in offsets:
        shifted = _shift_replicate(base_scores, dy, dx)
        fused = shifted if fused is None else np.maximum(fused, shifted)
    if fused is None:
        raise ValidationError("need at least one offset")
    return fused


def _shift_replicate(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return arr[ys][:, xs]


def _single_object_base(base_spec: SceneSpec, obj_h: int, obj_w: int, margin: int,
                        seed: int) -> Scene:
    spec = replace(base_spec, object_count=1, seed=seed)
    category = spec.categories[0]
    return place_objects_scene(spec, [(margin, margin, obj_h, obj_w, category)])


def _scene_miou(model: TrainedModel, scene: Scene, feature_spec: FilterBankSpec,
                labeling: LabelGenConfig, sem_override=None) -> MiouReport:
    if sem_override is None:
        features = extract_features(scene.image, feature_spec)
        sem = predict_scores(model, features)
    else:
        sem = sem_override
    result = generate_instance_labels(scene.image, sem, scene.points, labeling)
    return evaluate([[inst.box for inst in result.instances]], [list(scene.boxes)])


def density_study(
    model: TrainedModel,
    base_spec: SceneSpec,
    counts,
    gaps,
    seeds,
    feature_spec: FilterBankSpec,
    labeling: LabelGenConfig = LabelGenConfig(),
    mode: str = "dense",
    obj_size: tuple[int, int] = (12, 12),
    margin: int = 4,
):
    """Pseudo-box quality over a (count, gap) grid of copy-paste scenes.

    mode="dense" runs the model on each dense scene; mode="control" shifts
    and fuses the single-object response into a pseudo dense response and
    runs label generation on that, keeping the dense image's edges. Returns
    one row dict per (count, gap, seed) cell.
    """
    if mode not in ("dense", "control"):
        raise ValidationError(f"unknown study mode {mode!r}")
    obj_h, obj_w = obj_size
    rows = []
    for seed in seeds:
        base = _single_object_base(base_spec, obj_h, obj_w, margin, seed)
        for gap in gaps:
            for count in counts:
                scene = copy_paste_synthesize(base, count, gap)
                if mode == "control":
                    features = extract_features(base.image, feature_spec)
                    base_scores = predict_scores(model, features).scores
                    # shift at image resolution so offsets need not align to
                    # the feature stride
                    full = bilinear_upsample(base_scores, base.image.height, base.image.width)
                    offsets = [
                        (b.y_min - base.boxes[0].y_min, b.x_min - base.boxes[0].x_min)
                        for b in scene.boxes
                    ]
                    sem = shift_and_fuse(full, offsets)
                    report = _scene_miou(model, scene, feature_spec, labeling, sem_override=sem)
                else:
                    report = _scene_miou(model, scene, feature_spec, labeling)
                rows.append({
                    "count": count,
                    "gap": gap,
                    "seed": seed,
                    "sfg": int(model.sfg),
                    "lambda": labeling.lam,
                    "miou": report.miou,
                    "miou_s": report.miou_small,
                    "miou_m": report.miou_medium,
                    "miou_l": report.miou_large,
                })
    return rows


def lambda_sweep(
    model: TrainedModel,
    scenes,
    feature_spec: FilterBankSpec,
    labeling: LabelGenConfig = LabelGenConfig(),
    lambdas=LAMBDA_GRID,
):
    """Label quality across edge-cost weights; one row per lambda."""
    scenes = list(scenes)
    sems = []
    for scene in scenes:
        features = extract_features(scene.image, feature_spec)
        sems.append(predict_scores(model, features))
    rows = []
    for lam in lambdas:
        cfg = replace(labeling, lam=lam)
        pseudo, gt = [], []
        for scene, sem in zip(scenes, sems):
            result = generate_instance_labels(scene.image, sem, scene.points, cfg)
            pseudo.append([inst.box for inst in result.instances])
            gt.append(list(scene.boxes))
        report = evaluate(pseudo, gt)
        rows.append({
            "lambda": lam,
            "miou": report.miou,
            "miou_s": report.miou_small,
            "miou_m": report.miou_medium,
            "miou_l": report.miou_large,
        })
    return rows


def write_study_csv(rows, path, fields=STUDY_FIELDS) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in fields})

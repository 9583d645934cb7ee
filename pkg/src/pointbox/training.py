"""Deterministic SGD training of the semantic predictor.

The label-generation stage has no parameters, so training only touches the
aggregator and the shared linear predictor. Gradients are backpropagated by
hand from the loss gradients w.r.t. the score maps; each optimizer step
consumes one image. Every epoch first refreshes the prototype bank from the
single-object images, then runs over a shuffled image order.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import Box, ImageGrid, PointAnnotation, stream_rng
from .features import FeatureMap, _block_mean
from .semantic import (
    AggregatorParams,
    PrototypeBank,
    PredictorParams,
    SemanticMap,
    _predict_semantic_cached,
    _sigmoid,
    encode_prototypes,
    predict_semantic,
    predict_semantic_plain,
)
from .losses import (
    AffinityGraph,
    LossReport,
    build_affinity,
    color_prior_loss,
    negative_loss,
    positive_loss,
)
from .instances import LabelGenConfig, generate_instance_labels
from .metrics import iou
from .errors import TrainingDivergedError, ValidationError

__all__ = [
    "TrainSample",
    "TrainConfig",
    "TrainedModel",
    "TrainResult",
    "init_params",
    "predict_scores",
    "train",
    "write_training_log",
]


@dataclass(frozen=True)
class TrainSample:
    """One training image with its features and point labels."""

    image_id: str
    image: ImageGrid
    features: FeatureMap
    points: tuple[PointAnnotation, ...]
    gt_boxes: tuple[Box, ...] | None = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    lr: float = 1e-3
    decay_epochs: tuple[int, ...] = (8, 11)  # 1-based epochs at which lr shrinks
    decay_factor: float = 0.1
    gamma: float = 2.0
    alpha2: float = 1.0
    use_negative: bool = True
    use_color: bool = True
    sfg: bool = True
    bank_mode: str = "mean"
    momentum: float = 0.9
    seed: int = 0
    labeling: LabelGenConfig = field(default_factory=LabelGenConfig)
    affinity_threshold: float = 0.3
    affinity_sigma: float = 10.0
    miou_subset: int = 8  # images per epoch scored with the full pipeline; 0 disables


@dataclass(frozen=True)
class TrainedModel:
    agg: AggregatorParams
    pred: PredictorParams
    bank: PrototypeBank
    sfg: bool


@dataclass(frozen=True)
class TrainResult:
    model: TrainedModel
    log: tuple[dict, ...]


def init_params(channels: int, categories: int, seed: int = 0):
    """Small random weights, zero biases; deterministic per seed."""
    rng = stream_rng(seed, "init")
    scale = 1.0 / np.sqrt(channels)
    agg = AggregatorParams(
        rng.normal(0.0, scale, (channels, channels)),
        np.zeros(channels),
        rng.normal(0.0, scale, (channels, channels)),
        np.zeros(channels),
        rng.normal(0.0, scale / np.sqrt(3.0), (3 * channels, channels)),
        np.zeros(channels),
    )
    pred = PredictorParams(rng.normal(0.0, scale, (channels, categories)), np.zeros(categories))
    return agg, pred


def predict_scores(model: TrainedModel, features: FeatureMap) -> SemanticMap:
    if model.sfg:
        return predict_semantic(features, model.bank, model.agg, model.pred)
    return predict_semantic_plain(features, model.pred)


# ---------------------------------------------------------------------------
# Backward passes
# ---------------------------------------------------------------------------


def _zero_grads(agg: AggregatorParams, pred: PredictorParams) -> dict[str, np.ndarray]:
    return {
        "w_sub": np.zeros_like(agg.w_sub), "b_sub": np.zeros_like(agg.b_sub),
        "w_mul": np.zeros_like(agg.w_mul), "b_mul": np.zeros_like(agg.b_mul),
        "w_cat": np.zeros_like(agg.w_cat), "b_cat": np.zeros_like(agg.b_cat),
        "w": np.zeros_like(pred.w), "b": np.zeros_like(pred.b),
    }


def _backward_guided(cache, dscores, agg: AggregatorParams, pred: PredictorParams):
    """Gradients of the guided forward pass (branch c feeds only channel c)."""
    x, caches, scores = cache
    d = x.shape[1]
    grads = _zero_grads(agg, pred)
    for c, (a, (u, v, s, m, cat)) in enumerate(caches):
        g = dscores[:, c]
        y = scores[:, c]
        dlogit = g * y * (1.0 - y)
        grads["w"][:, c] += a.T @ dlogit
        grads["b"][c] += dlogit.sum()
        da = np.outer(dlogit, pred.w[:, c])
        da_pre = da * (a > 0)
        grads["w_cat"] += cat.T @ da_pre
        grads["b_cat"] += da_pre.sum(axis=0)
        dcat = da_pre @ agg.w_cat.T
        ds_pre = dcat[:, :d] * (s > 0)
        dm_pre = dcat[:, d : 2 * d] * (m > 0)
        grads["w_sub"] += u.T @ ds_pre
        grads["b_sub"] += ds_pre.sum(axis=0)
        grads["w_mul"] += v.T @ dm_pre
        grads["b_mul"] += dm_pre.sum(axis=0)
    return grads


def _backward_plain(x, scores, dscores, agg, pred):
    grads = _zero_grads(agg, pred)
    dlogits = dscores * scores * (1.0 - scores)
    grads["w"] += x.T @ dlogits
    grads["b"] += dlogits.sum(axis=0)
    return grads


def _apply_sgd(agg: AggregatorParams, pred: PredictorParams, grads, lr: float):
    agg = AggregatorParams(
        agg.w_sub - lr * grads["w_sub"], agg.b_sub - lr * grads["b_sub"],
        agg.w_mul - lr * grads["w_mul"], agg.b_mul - lr * grads["b_mul"],
        agg.w_cat - lr * grads["w_cat"], agg.b_cat - lr * grads["b_cat"],
    )
    pred = PredictorParams(pred.w - lr * grads["w"], pred.b - lr * grads["b"])
    return agg, pred


# ---------------------------------------------------------------------------
# Per-image loss with configurable terms (ablations switch terms off)
# ---------------------------------------------------------------------------


def _loss_and_grad(scores: np.ndarray, points, affinity: AffinityGraph | None,
                   config: TrainConfig):
    h, w, _ = scores.shape
    pos_value, grad = positive_loss(scores, points, config.gamma)
    labeled = {(p.y, p.x) for p in points}
    n_pos = len(points)
    n_neg = h * w - len(labeled)
    alpha1 = n_neg / n_pos
    neg_value = 0.0
    if config.use_negative and n_neg > 0:
        neg_value, neg_grad = negative_loss(scores, points, config.gamma)
        grad = grad + alpha1 * neg_grad
    col_value = 0.0
    alpha2 = config.alpha2 if config.use_color else 0.0
    if alpha2 != 0.0:
        col_value, col_grad = color_prior_loss(scores, affinity)
        grad = grad + alpha2 * col_grad
    total = pos_value + (alpha1 * neg_value if config.use_negative else 0.0) + alpha2 * col_value
    report = LossReport(pos_value, neg_value, col_value, total,
                        n_pos, n_neg, alpha1, alpha2)
    return report, grad


# ---------------------------------------------------------------------------
# Meta feature refresh
# ---------------------------------------------------------------------------


def _downsample_mask(mask: np.ndarray, fh: int, fw: int) -> np.ndarray:
    """Map an image-resolution mask onto the feature grid.

    A cell is kept when any of its source pixels is masked; small objects on
    coarse grids would otherwise vanish.
    """
    h, w = mask.shape
    if (h, w) == (fh, fw):
        return mask
    ys = np.minimum((np.arange(h) * fh) // h, fh - 1)
    xs = np.minimum((np.arange(w) * fw) // w, fw - 1)
    votes = np.zeros((fh, fw), dtype=np.int64)
    np.add.at(votes, (ys[:, None], xs[None, :]), mask.astype(np.int64))
    return votes > 0


def _refresh_bank(dataset, agg, pred, prev_bank, config: TrainConfig) -> PrototypeBank:
    """Rebuild the prototype bank from single-object images.

    Pseudo masks come from the label generator run on the current model's
    scores: the plain predictor on the first pass (no bank exists yet), the
    guided one afterwards.
    """
    bank = PrototypeBank.zeros(pred.categories, pred.channels,
                                 momentum=config.momentum, mode=config.bank_mode)
    samples = []
    for sample in dataset:
        if len(sample.points) != 1:
            continue
        if prev_bank is None or not prev_bank.available.any():
            sem = predict_semantic_plain(sample.features, pred)
        else:
            sem = predict_semantic(sample.features, prev_bank, agg, pred)
        result = generate_instance_labels(sample.image, sem, sample.points, config.labeling)
        point = sample.points[0]
        mask = result.assignment.labels == point.instance_id
        mask = _downsample_mask(mask, sample.features.height, sample.features.width)
        if not mask.any():
            warnings.warn(
                f"{sample.image_id}: empty pseudo mask, skipped in prototype encoding",
                stacklevel=2,
            )
            continue
        samples.append((sample.features, mask, point.category))
    return encode_prototypes(samples, bank)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _points_on_grid(sample: TrainSample) -> list[PointAnnotation]:
    """Map annotation points from image to feature-grid coordinates."""
    fh, fw = sample.features.height, sample.features.width
    ih, iw = sample.image.height, sample.image.width
    if (fh, fw) == (ih, iw):
        return list(sample.points)
    return [
        PointAnnotation(
            min(p.x * fw // iw, fw - 1), min(p.y * fh // ih, fh - 1),
            p.category, p.instance_id,
        )
        for p in sample.points
    ]


def _affinity_for(sample: TrainSample, config: TrainConfig) -> AffinityGraph:
    fh, fw = sample.features.height, sample.features.width
    img = sample.image
    if (fh, fw) != (img.height, img.width):
        # pool the image to the feature grid so dims line up with the scores
        stride = max(img.height // fh, 1)
        pooled = _block_mean(img.data.astype(np.float64), stride)
        img = ImageGrid(np.clip(np.rint(pooled), 0, 255).astype(np.uint8))
    return build_affinity(img, config.affinity_threshold, config.affinity_sigma)


def _epoch_miou(dataset, indices, model: TrainedModel, config: TrainConfig):
    scored = []
    for i in indices:
        sample = dataset[i]
        if sample.gt_boxes is None:
            continue
        sem = predict_scores(model, sample.features)
        result = generate_instance_labels(sample.image, sem, sample.points, config.labeling)
        gt = {b.instance_id: b for b in sample.gt_boxes}
        for inst in result.instances:
            if inst.instance_id in gt:
                scored.append(iou(inst.box, gt[inst.instance_id]))
    return float(np.mean(scored)) if scored else None


def _lr_at(epoch: int, config: TrainConfig) -> float:
    lr = config.lr
    for d in config.decay_epochs:
        if epoch + 1 >= d:
            lr *= config.decay_factor
    return lr


def _bank_or_empty(bank, categories, channels, config) -> PrototypeBank:
    if bank is not None:
        return bank
    return PrototypeBank.zeros(categories, channels,
                                 momentum=config.momentum, mode=config.bank_mode)


def train(dataset, config: TrainConfig) -> TrainResult:
    """Run the SGD loop; deterministic given config.seed.

    Raises TrainingDivergedError naming the offending image if any loss goes
    non-finite.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValidationError("training needs a non-empty dataset")
    for sample in dataset:
        if not sample.points:
            raise ValidationError(f"{sample.image_id}: image has no points")
    channels = dataset[0].features.channels
    categories = max(p.category for s in dataset for p in s.points)

    agg, pred = init_params(channels, categories, config.seed)
    bank = None
    affinities: list[AffinityGraph | None] = [None] * len(dataset)
    grid_points = [_points_on_grid(s) for s in dataset]

    subset = []
    if config.miou_subset > 0:
        rng = stream_rng(config.seed, "miou-subset")
        k = min(config.miou_subset, len(dataset))
        subset = sorted(rng.choice(len(dataset), size=k, replace=False).tolist())

    log = []
    for epoch in range(config.epochs):
        lr = _lr_at(epoch, config)
        if config.sfg:
            bank = _refresh_bank(dataset, agg, pred, bank, config)

        order = stream_rng(config.seed, "shuffle", epoch).permutation(len(dataset))
        sums = np.zeros(4)
        for i in order:
            sample = dataset[i]
            if config.use_color and affinities[i] is None:
                affinities[i] = _affinity_for(sample, config)
            if config.sfg:
                scores_flat, cache = _predict_semantic_cached(
                    sample.features, bank, agg, pred
                )
            else:
                x = sample.features.data.reshape(-1, channels)
                scores_flat = _sigmoid(x @ pred.w + pred.b)
            fh, fw = sample.features.height, sample.features.width
            scores = scores_flat.reshape(fh, fw, categories)
            report, grad_scores = _loss_and_grad(
                scores, grid_points[i], affinities[i], config
            )
            if not np.isfinite(report.total):
                raise TrainingDivergedError(sample.image_id)
            dflat = grad_scores.reshape(-1, categories)
            if config.sfg:
                grads = _backward_guided(cache, dflat, agg, pred)
            else:
                grads = _backward_plain(x, scores_flat, dflat, agg, pred)
            agg, pred = _apply_sgd(agg, pred, grads, lr)
            sums += (report.positive, report.negative, report.color_prior, report.total)

        means = sums / len(dataset)
        model = TrainedModel(agg, pred, _bank_or_empty(bank, categories, channels, config),
                             config.sfg)
        log.append({
            "epoch": epoch + 1,
            "lr": lr,
            "mean_pos": means[0],
            "mean_neg": means[1],
            "mean_col": means[2],
            "mean_total": means[3],
            "miou_on_train_subset": _epoch_miou(dataset, subset, model, config)
            if subset
            else None,
        })

    final_bank = _bank_or_empty(bank, categories, channels, config)
    return TrainResult(TrainedModel(agg, pred, final_bank, config.sfg), tuple(log))


def write_training_log(log, path) -> None:
    """One JSON record per epoch, one per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record) + "\n")

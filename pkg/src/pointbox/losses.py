"""Training losses with analytic gradients.

Three terms drive the predictor: a focal loss on the labeled pixels, a focal
penalty treating every unlabeled pixel as background, and a color-prior term
that pulls similarly colored neighbors toward the same category. All three
return both the scalar value and the gradient with respect to the score
array, so they can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ImageGrid, srgb_image_to_lab
from .semantic import SemanticMap
from .errors import ValidationError

__all__ = [
    "EPS",
    "LossReport",
    "AffinityGraph",
    "positive_loss",
    "negative_loss",
    "build_affinity",
    "color_prior_loss",
    "total_loss",
    "grad_check",
]

# Scores are clamped into [EPS, 1-EPS] before any logarithm; the losses are
# undefined at exact 0/1.
EPS = 1e-7

DEFAULT_GAMMA = 2.0
DEFAULT_AFFINITY_THRESHOLD = 0.3
DEFAULT_AFFINITY_SIGMA = 10.0


@dataclass(frozen=True)
class LossReport:
    """Per-image loss breakdown. total = positive + alpha1*negative + alpha2*color_prior."""

    positive: float
    negative: float
    color_prior: float
    total: float
    n_pos: int
    n_neg: int
    alpha1: float
    alpha2: float


@dataclass(frozen=True)
class AffinityGraph:
    """Directed neighbor edges with color-similarity weights.

    Both directions of every kept pair are present, so weights are symmetric
    and `z` equals the double sum over pixels and their neighbors.
    """

    height: int
    width: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    z: float

    def __post_init__(self):
        if not (self.src.shape == self.dst.shape == self.weight.shape):
            raise ValidationError("edge arrays must share one shape")


def _scores_array(scores) -> np.ndarray:
    arr = scores.scores if isinstance(scores, SemanticMap) else np.asarray(scores, dtype=np.float64)
    if arr.ndim != 3:
        raise ValidationError(f"scores must be (H, W, C), got {arr.shape}")
    return arr


def _point_indices(points, height: int, width: int):
    rows = np.array([p.y for p in points], dtype=np.intp)
    cols = np.array([p.x for p in points], dtype=np.intp)
    cats = np.array([p.category for p in points], dtype=np.intp)
    if rows.size and (
        rows.min() < 0 or rows.max() >= height or cols.min() < 0 or cols.max() >= width
    ):
        raise ValidationError("point outside the score grid")
    return rows, cols, cats


def _clamp(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    clamped = np.clip(arr, EPS, 1.0 - EPS)
    interior = (arr > EPS) & (arr < 1.0 - EPS)
    return clamped, interior


def positive_loss(scores, points, gamma: float = DEFAULT_GAMMA):
    """Focal loss over the labeled pixels.

    For each point the target is the one-hot vector of its category; the loss
    is averaged over points and summed over category channels. Returns
    (value, gradient w.r.t. scores); the gradient is supported only on the
    labeled pixels.
    """
    arr = _scores_array(scores)
    h, w, c = arr.shape
    points = list(points)
    if not points:
        raise ValidationError("positive loss needs at least one labeled point")
    if any(p.category > c for p in points):
        raise ValidationError(f"point category exceeds the {c} score channels")
    rows, cols, cats = _point_indices(points, h, w)
    n_pos = len(points)

    p_raw = arr[rows, cols, :]  # (n_pos, C)
    p, interior = _clamp(p_raw)
    onehot = np.zeros((n_pos, c))
    onehot[np.arange(n_pos), cats - 1] = 1.0

    log_p = np.log(p)
    log_1p = np.log1p(-p)
    pos_term = -((1.0 - p) ** gamma) * log_p
    neg_term = -(p**gamma) * log_1p
    value = float(np.sum(onehot * pos_term + (1.0 - onehot) * neg_term) / n_pos)

    d_pos = gamma * (1.0 - p) ** (gamma - 1.0) * log_p - ((1.0 - p) ** gamma) / p
    d_neg = -gamma * p ** (gamma - 1.0) * log_1p + (p**gamma) / (1.0 - p)
    d = (onehot * d_pos + (1.0 - onehot) * d_neg) * interior / n_pos

    grad = np.zeros_like(arr)
    np.add.at(grad, (rows, cols), d)
    return value, grad


def negative_loss(scores, points, gamma: float = DEFAULT_GAMMA):
    """Focal background penalty over every unlabeled pixel.

    All categories are treated as absent at unlabeled pixels. Returns
    (value, gradient w.r.t. scores).
    """
    arr = _scores_array(scores)
    h, w, c = arr.shape
    rows, cols, _ = _point_indices(list(points), h, w)
    labeled = np.zeros((h, w), dtype=bool)
    labeled[rows, cols] = True
    unlabeled = ~labeled
    n_neg = int(unlabeled.sum())
    if n_neg == 0:
        raise ValidationError("no unlabeled pixels: negative loss undefined")

    p_raw = arr[unlabeled]
    p, interior = _clamp(p_raw)
    log_1p = np.log1p(-p)
    value = float(np.sum(-(p**gamma) * log_1p) / n_neg)

    d = (-gamma * p ** (gamma - 1.0) * log_1p + (p**gamma) / (1.0 - p)) * interior / n_neg
    grad = np.zeros_like(arr)
    grad[unlabeled] = d
    return value, grad


_OFFSETS_8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
_OFFSETS_4 = ((-1, 0), (0, -1), (0, 1), (1, 0))


def build_affinity(
    image: ImageGrid,
    threshold: float = DEFAULT_AFFINITY_THRESHOLD,
    sigma: float = DEFAULT_AFFINITY_SIGMA,
    connectivity: int = 8,
) -> AffinityGraph:
    """Color-similarity graph over neighboring pixels.

    The similarity of a neighbor pair is exp(-||Lab_i - Lab_j|| / sigma);
    pairs at or above `threshold` are kept (boundary inclusive), the rest get
    weight 0 and are dropped from the edge list.
    """
    lab = srgb_image_to_lab(image.data)
    return _affinity_from_lab(lab, threshold, sigma, connectivity)


def _affinity_from_lab(lab: np.ndarray, threshold: float, sigma: float,
                       connectivity: int = 8) -> AffinityGraph:
    if connectivity not in (4, 8):
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")
    h, w = lab.shape[:2]
    offsets = _OFFSETS_8 if connectivity == 8 else _OFFSETS_4
    flat = np.arange(h * w).reshape(h, w)
    srcs, dsts, weights = [], [], []
    for dr, dc in offsets:
        src_r = slice(max(0, -dr), h - max(0, dr))
        src_c = slice(max(0, -dc), w - max(0, dc))
        dst_r = slice(max(0, dr), h + min(0, dr))
        dst_c = slice(max(0, dc), w + min(0, dc))
        diff = lab[src_r, src_c] - lab[dst_r, dst_c]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        k = np.exp(-dist / sigma)
        keep = k >= threshold
        srcs.append(flat[src_r, src_c][keep])
        dsts.append(flat[dst_r, dst_c][keep])
        weights.append(k[keep])
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    weight = np.concatenate(weights)
    return AffinityGraph(h, w, src, dst, weight, float(weight.sum()))


def _leave_one_out(products: np.ndarray) -> np.ndarray:
    """Row-wise products of all entries except each one, via prefix/suffix."""
    n, c = products.shape
    pre = np.ones((n, c))
    suf = np.ones((n, c))
    np.cumprod(products[:, :-1], axis=1, out=pre[:, 1:])
    np.cumprod(products[:, :0:-1], axis=1, out=suf[:, -2::-1])
    return pre * suf


def color_prior_loss(scores, affinity: AffinityGraph):
    """Pull similarly colored neighbors toward agreeing category distributions.

    Each pixel's score vector is augmented with a background score
    prod_c(1 - y'_c) and L1-normalized to a distribution p; the loss is
    -(1/Z) * sum over edges of A_ij * log(p_i . p_j), the inner product
    clamped to [EPS, 1]. Returns (value, gradient w.r.t. scores). An empty
    graph (Z == 0) yields 0.
    """
    arr = _scores_array(scores)
    h, w, c = arr.shape
    if (h, w) != (affinity.height, affinity.width):
        raise ValidationError(
            f"scores {h}x{w} do not match affinity over {affinity.height}x{affinity.width}"
        )
    if affinity.z <= 0.0 or affinity.src.size == 0:
        return 0.0, np.zeros_like(arr)

    s, interior = _clamp(arr.reshape(-1, c))
    one_minus = 1.0 - s
    background = np.prod(one_minus, axis=1)
    aug = np.concatenate([s, background[:, None]], axis=1)  # (N, C+1)
    sums = aug.sum(axis=1)
    p = aug / sums[:, None]

    q_raw = np.sum(p[affinity.src] * p[affinity.dst], axis=1)
    q = np.clip(q_raw, EPS, 1.0)
    value = float(-(affinity.weight @ np.log(q)) / affinity.z)

    q_interior = (q_raw > EPS) & (q_raw < 1.0)
    dq = np.where(q_interior, -affinity.weight / (affinity.z * q), 0.0)
    dp = np.zeros_like(p)
    np.add.at(dp, affinity.src, dq[:, None] * p[affinity.dst])
    np.add.at(dp, affinity.dst, dq[:, None] * p[affinity.src])

    # through the L1 normalization: p_k = aug_k / sum(aug)
    inner = np.sum(dp * p, axis=1)
    daug = (dp - inner[:, None]) / sums[:, None]
    # through the background product: d(prod(1-s))/ds_c = -prod_{c'!=c}(1-s_c')
    dbackground = daug[:, c]
    ds = daug[:, :c] - dbackground[:, None] * _leave_one_out(one_minus)
    grad = (ds * interior).reshape(h, w, c)
    return value, grad


def total_loss(
    scores,
    points,
    image: ImageGrid | None = None,
    gamma: float = DEFAULT_GAMMA,
    alpha2: float = 1.0,
    *,
    affinity: AffinityGraph | None = None,
):
    """Weighted sum of the three losses with alpha1 = N_neg / N_pos.

    The affinity graph may be passed directly (e.g. cached per image);
    otherwise it is built from `image`. An image whose pixels are all labeled
    has alpha1 = 0 and the negative term is skipped.
    """
    arr = _scores_array(scores)
    h, w, _ = arr.shape
    points = list(points)
    pos_value, pos_grad = positive_loss(arr, points, gamma)

    rows, cols, _ = _point_indices(points, h, w)
    labeled = np.zeros((h, w), dtype=bool)
    labeled[rows, cols] = True
    n_pos = len(points)
    n_neg = int(h * w - labeled.sum())
    alpha1 = n_neg / n_pos

    if n_neg > 0:
        neg_value, neg_grad = negative_loss(arr, points, gamma)
    else:
        neg_value, neg_grad = 0.0, np.zeros_like(arr)

    if alpha2 != 0.0:
        if affinity is None:
            if image is None:
                raise ValidationError("total_loss needs an image or a prebuilt affinity")
            affinity = build_affinity(image)
        col_value, col_grad = color_prior_loss(arr, affinity)
    else:
        col_value, col_grad = 0.0, np.zeros_like(arr)

    total = pos_value + alpha1 * neg_value + alpha2 * col_value
    grad = pos_grad + alpha1 * neg_grad + alpha2 * col_grad
    report = LossReport(
        positive=pos_value,
        negative=neg_value,
        color_prior=col_value,
        total=total,
        n_pos=n_pos,
        n_neg=n_neg,
        alpha1=alpha1,
        alpha2=alpha2,
    )
    return report, grad


def grad_check(loss_fn, params: np.ndarray, h: float = 1e-4,
               max_coords: int | None = None, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` maps a flat parameter vector to (value, gradient). The relative
    error of a coordinate is |a - n| / max(1, |a|, |n|); coordinates are
    subsampled when `max_coords` is given.
    """
    x0 = np.asarray(params, dtype=np.float64).ravel()
    _, grad = loss_fn(x0)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != x0.shape:
        raise ValidationError("loss_fn gradient shape does not match parameters")
    coords = np.arange(x0.size)
    if max_coords is not None and x0.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(x0.size, size=max_coords, replace=False)
    worst = 0.0
    for k in coords:
        xp = x0.copy()
        xp[k] += h
        xm = x0.copy()
        xm[k] -= h
        numeric = (loss_fn(xp)[0] - loss_fn(xm)[0]) / (2.0 * h)
        analytic = grad[k]
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
    return worst

"""Sparse-object guided semantic prediction.

Category prototypes are pooled from images that contain a single object, and
each category branch enhances the per-pixel features with its prototype
before a shared linear+sigmoid predictor scores that category. The plain
predictor (no guidance) is kept for ablations.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .features import FeatureMap
from .errors import FormatError, ValidationError

__all__ = [
    "PrototypeBank",
    "AggregatorParams",
    "PredictorParams",
    "SemanticMap",
    "masked_average_pool",
    "encode_prototypes",
    "aggregate",
    "predict_semantic",
    "predict_semantic_plain",
    "prototype_similarity_matrix",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"PLUG1"

# Sigmoid outputs are clipped into the open interval so downstream logs are
# always defined, even for absurdly large logits.
SCORE_FLOOR = 1e-12


@dataclass(frozen=True)
class SemanticMap:
    """Per-pixel, per-category scores in [0, 1], shape (H, W, C)."""

    scores: np.ndarray

    def __post_init__(self):
        arr = np.array(self.scores, dtype=np.float64)
        if arr.ndim != 3:
            raise ValidationError(f"semantic map must be (H, W, C), got {arr.shape}")
        if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
            raise ValidationError("semantic scores must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "scores", arr)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def categories(self) -> int:
        return self.scores.shape[2]


@dataclass(frozen=True)
class PrototypeBank:
    """One prototype vector per category plus the contributing sample counts.

    `mode` selects the update rule: "mean" keeps an exact running mean over
    all samples seen; "ema" applies v <- momentum*v + (1-momentum)*rep after
    the first sample. A category with count 0 holds the zero vector and is
    reported unavailable.
    """

    vectors: np.ndarray
    counts: np.ndarray
    momentum: float = 0.9
    mode: str = "mean"

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=np.float64)
        cnt = np.array(self.counts, dtype=np.int64)
        if vec.ndim != 2 or cnt.shape != (vec.shape[0],):
            raise ValidationError("bank needs (C, D) vectors and (C,) counts")
        if not np.all(np.isfinite(vec)):
            raise ValidationError("bank vectors must be finite")
        if cnt.min(initial=0) < 0:
            raise ValidationError("bank counts must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.mode not in ("mean", "ema"):
            raise ValidationError(f"unknown bank mode {self.mode!r}")
        vec.flags.writeable = False
        cnt.flags.writeable = False
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "counts", cnt)

    @classmethod
    def zeros(cls, categories: int, channels: int, *, momentum: float = 0.9,
              mode: str = "mean") -> "PrototypeBank":
        return cls(
            np.zeros((categories, channels)), np.zeros(categories, dtype=np.int64),
            momentum, mode,
        )

    @property
    def categories(self) -> int:
        return self.vectors.shape[0]

    @property
    def channels(self) -> int:
        return self.vectors.shape[1]

    @property
    def available(self) -> np.ndarray:
        return self.counts > 0

    def updated(self, category: int, representation: np.ndarray) -> "PrototypeBank":
        """Return a bank with one more sample folded into `category`."""
        if not (1 <= category <= self.categories):
            raise ValidationError(
                f"category {category} outside [1, {self.categories}]"
            )
        rep = np.asarray(representation, dtype=np.float64)
        if rep.shape != (self.channels,):
            raise ValidationError(f"representation shape {rep.shape} != ({self.channels},)")
        idx = category - 1
        vectors = self.vectors.copy()
        counts = self.counts.copy()
        if counts[idx] == 0:
            vectors[idx] = rep
        elif self.mode == "mean":
            vectors[idx] = vectors[idx] + (rep - vectors[idx]) / (counts[idx] + 1)
        else:
            vectors[idx] = self.momentum * vectors[idx] + (1.0 - self.momentum) * rep
        counts[idx] += 1
        return replace(self, vectors=vectors, counts=counts)


@dataclass(frozen=True)
class AggregatorParams:
    """Weights of the three fully-connected + ReLU stages of the aggregator."""

    w_sub: np.ndarray  # (D, D)
    b_sub: np.ndarray  # (D,)
    w_mul: np.ndarray  # (D, D)
    b_mul: np.ndarray  # (D,)
    w_cat: np.ndarray  # (3D, D)
    b_cat: np.ndarray  # (D,)

    def __post_init__(self):
        d = self.w_sub.shape[0] if self.w_sub.ndim == 2 else -1
        shapes = {
            "w_sub": (d, d), "b_sub": (d,), "w_mul": (d, d), "b_mul": (d,),
            "w_cat": (3 * d, d), "b_cat": (d,),
        }
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != want:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)

    @property
    def channels(self) -> int:
        return self.w_sub.shape[0]


@dataclass(frozen=True)
class PredictorParams:
    """Shared linear predictor: scores = sigmoid(x @ w + b)."""

    w: np.ndarray  # (D, C)
    b: np.ndarray  # (C,)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ValidationError(f"predictor shapes {w.shape}/{b.shape} inconsistent")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("predictor parameters must be finite")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)

    @property
    def channels(self) -> int:
        return self.w.shape[0]

    @property
    def categories(self) -> int:
        return self.w.shape[1]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, SCORE_FLOOR, 1.0 - SCORE_FLOOR)


def masked_average_pool(features: FeatureMap, mask: np.ndarray) -> np.ndarray:
    """Mean feature vector over the masked pixels."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != (features.height, features.width):
        raise ValidationError(
            f"mask shape {m.shape} != feature grid {(features.height, features.width)}"
        )
    if not m.any():
        raise ValidationError("mask selects no pixels")
    return features.data[m].mean(axis=0)


def encode_prototypes(sparse_samples, bank: PrototypeBank) -> PrototypeBank:
    """Fold single-object samples into the bank.

    `sparse_samples` yields (FeatureMap, mask, category) triples, each taken
    from an image containing exactly one annotated object. Samples with an
    empty mask are skipped with a warning.
    """
    for i, (features, mask, category) in enumerate(sparse_samples):
        if not (1 <= category <= bank.categories):
            raise ValidationError(
                f"sample {i}: category {category} outside [1, {bank.categories}]"
            )
        m = np.asarray(mask, dtype=bool)
        if m.shape != (features.height, features.width):
            raise ValidationError(
                f"sample {i}: mask shape {m.shape} does not match features"
            )
        if not m.any():
            warnings.warn(f"sample {i}: empty mask, skipped", stacklevel=2)
            continue
        bank = bank.updated(category, features.data[m].mean(axis=0))
    return bank


def _aggregate_array(x: np.ndarray, prototype: np.ndarray, params: AggregatorParams):
    """Aggregator forward pass on flattened (N, D) features; returns all
    intermediates needed to backpropagate."""
    u = x - prototype
    s = np.maximum(u @ params.w_sub + params.b_sub, 0.0)
    v = x * prototype
    m = np.maximum(v @ params.w_mul + params.b_mul, 0.0)
    cat = np.concatenate([s, m, x], axis=1)
    a = np.maximum(cat @ params.w_cat + params.b_cat, 0.0)
    return a, (u, v, s, m, cat)


def aggregate(features: FeatureMap, prototype: np.ndarray, params: AggregatorParams) -> FeatureMap:
    """Enhance features with one category prototype.

    Per pixel: s = relu(w_sub(F - prototype) + b), m = relu(w_mul(F * prototype) + b),
    out = relu(w_cat [s; m; F] + b). Spatial dimensions are preserved.
    """
    prototype = np.asarray(prototype, dtype=np.float64)
    d = features.channels
    if prototype.shape != (d,) or params.channels != d:
        raise ValidationError(
            f"dimension mismatch: features D={d}, prototype {prototype.shape}, params D={params.channels}"
        )
    x = features.data.reshape(-1, d)
    a, _ = _aggregate_array(x, prototype, params)
    return FeatureMap(a.reshape(features.height, features.width, d))


def predict_semantic(
    features: FeatureMap,
    bank: PrototypeBank,
    agg: AggregatorParams,
    pred: PredictorParams,
) -> SemanticMap:
    """Category scores with sparse-feature guidance.

    Branch c aggregates the features with prototype c and keeps channel c of
    the shared predictor. Unavailable prototypes fall back to the zero vector
    (with a warning).
    """
    scores, _ = _predict_semantic_cached(features, bank, agg, pred)
    return SemanticMap(scores.reshape(features.height, features.width, bank.categories))


def _predict_semantic_cached(features, bank, agg, pred):
    d, c_count = features.channels, bank.categories
    if bank.channels != d or agg.channels != d or pred.channels != d:
        raise ValidationError("feature dimension mismatch between bank/params")
    if pred.categories != c_count:
        raise ValidationError(
            f"predictor has {pred.categories} categories, bank has {c_count}"
        )
    missing = [c + 1 for c in range(c_count) if not bank.available[c]]
    if missing:
        warnings.warn(f"no prototype for categories {missing}; using zero vectors",
                      stacklevel=3)
    x = features.data.reshape(-1, d)
    scores = np.empty((x.shape[0], c_count))
    caches = []
    for c in range(c_count):
        prototype = bank.vectors[c] if bank.available[c] else np.zeros(d)
        a, inner = _aggregate_array(x, prototype, agg)
        logit_c = a @ pred.w[:, c] + pred.b[c]
        scores[:, c] = _sigmoid(logit_c)
        caches.append((a, inner))
    return scores, (x, caches, scores)


def predict_semantic_plain(features: FeatureMap, pred: PredictorParams) -> SemanticMap:
    """Category scores from the shared predictor alone (no guidance)."""
    if pred.channels != features.channels:
        raise ValidationError(
            f"predictor expects D={pred.channels}, features have D={features.channels}"
        )
    x = features.data.reshape(-1, features.channels)
    scores = _sigmoid(x @ pred.w + pred.b)
    return SemanticMap(scores.reshape(features.height, features.width, pred.categories))


def prototype_similarity_matrix(bank: PrototypeBank) -> np.ndarray:
    """Cosine similarity between every pair of prototypes.

    Pairs involving a zero-norm vector are reported as NaN with a warning;
    the diagonal of well-defined rows is exactly 1.
    """
    if not bank.available.all():
        raise ValidationError("similarity requires every category to be available")
    norms = np.linalg.norm(bank.vectors, axis=1)
    out = np.full((bank.categories, bank.categories), np.nan)
    bad = norms <= 0.0
    if bad.any():
        warnings.warn(
            f"zero-norm prototype vectors for categories {list(np.flatnonzero(bad) + 1)}; "
            "their similarities are NaN",
            stacklevel=2,
        )
    ok = ~bad
    safe = np.where(ok, norms, 1.0)
    unit = bank.vectors / safe[:, None]
    sims = unit @ unit.T
    out[np.ix_(ok, ok)] = sims[np.ix_(ok, ok)]
    np.fill_diagonal(out, np.where(ok, 1.0, np.nan))
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: magic "PLUG1", u32 LE D and C, then one f32 payload with
# w_sub, b_sub, w_mul, b_mul, w_cat, b_cat, predictor w, b, bank vectors and
# counts, in that order, row-major.
# ---------------------------------------------------------------------------


def save_checkpoint(path, agg: AggregatorParams, pred: PredictorParams,
                    bank: PrototypeBank) -> None:
    d, c = agg.channels, pred.categories
    if bank.categories != c or bank.channels != d or pred.channels != d:
        raise ValidationError("checkpoint parts disagree on D/C")
    payload = np.concatenate([
        agg.w_sub.ravel(), agg.b_sub, agg.w_mul.ravel(), agg.b_mul,
        agg.w_cat.ravel(), agg.b_cat,
        pred.w.ravel(), pred.b,
        bank.vectors.ravel(), bank.counts.astype(np.float64),
    ]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", d, c))
        fh.write(payload.tobytes())


def load_checkpoint(path) -> tuple[AggregatorParams, PredictorParams, PrototypeBank]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    if len(buf) < len(CHECKPOINT_MAGIC) + 8:
        raise FormatError(f"{path}: truncated checkpoint header")
    d, c = struct.unpack_from("<II", buf, len(CHECKPOINT_MAGIC))
    want = 5 * d * d + 3 * d + 2 * d * c + 2 * c
    payload = np.frombuffer(buf, dtype="<f4", offset=len(CHECKPOINT_MAGIC) + 8)
    if payload.size != want:
        raise FormatError(
            f"{path}: payload holds {payload.size} floats, expected {want} for D={d}, C={c}"
        )
    vals = payload.astype(np.float64)
    pieces = []
    offset = 0
    for size in (d * d, d, d * d, d, 3 * d * d, d, d * c, c, c * d, c):
        pieces.append(vals[offset : offset + size])
        offset += size
    agg = AggregatorParams(
        pieces[0].reshape(d, d), pieces[1], pieces[2].reshape(d, d), pieces[3],
        pieces[4].reshape(3 * d, d), pieces[5],
    )
    pred = PredictorParams(pieces[6].reshape(d, c), pieces[7])
    bank = PrototypeBank(pieces[8].reshape(c, d), pieces[9].astype(np.int64))
    return agg, pred, bank

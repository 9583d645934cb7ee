"""Instance labels from points via shortest paths.

Every pixel is assigned to the labeled point it can reach at minimum
accumulated cost, where a step between adjacent pixels costs the L2 distance
of their semantic score vectors plus a weighted L1 distance of their Sobel
edge magnitudes. Pixels whose cheapest instance exceeds a fixed threshold
become background. The stage has no trainable parameters.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .core import AssignmentMap, Box, ImageGrid, PointAnnotation, luma601
from .features import sobel_gradients
from .semantic import SemanticMap
from .errors import ValidationError

__all__ = [
    "EdgeMap",
    "CostMap",
    "LabelGenConfig",
    "PseudoInstance",
    "LabelGenResult",
    "sobel_edge_map",
    "neighbor_cost",
    "compute_cost_map",
    "assign",
    "extract_instances",
    "likelihood_maps",
    "bilinear_upsample",
    "generate_instance_labels",
]


@dataclass(frozen=True)
class EdgeMap:
    """Normalized Sobel edge magnitudes in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"edge map must be 2-d, got {arr.shape}")
        if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
            raise ValidationError("edge magnitudes must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CostMap:
    """Exact shortest-path costs from one labeled point.

    Entries are np.inf beyond the early-stop frontier; the cost at the
    instance's own point is 0.
    """

    instance_id: int
    costs: np.ndarray

    def __post_init__(self):
        arr = np.array(self.costs, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"cost map must be 2-d, got {arr.shape}")
        if np.nanmin(arr, initial=0.0) < 0.0:
            raise ValidationError("costs must be >= 0")
        arr.flags.writeable = False
        object.__setattr__(self, "costs", arr)


@dataclass(frozen=True)
class LabelGenConfig:
    """Knobs of the label generation stage."""

    lam: float = 0.5
    tau: float = 0.5
    connectivity: int = 8

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if self.tau <= 0.0:
            raise ValidationError(f"tau must be > 0, got {self.tau}")
        if self.connectivity not in (4, 8):
            raise ValidationError(f"connectivity must be 4 or 8, got {self.connectivity}")


@dataclass(frozen=True)
class PseudoInstance:
    """One generated instance: box, support mask and a degenerate flag.

    Degenerate instances had no assigned pixels; their box is the 3x3
    fallback around the point, clipped to the image, and the mask covers
    that fallback box.
    """

    instance_id: int
    category: int
    box: Box
    mask: np.ndarray
    degenerate: bool


@dataclass(frozen=True)
class LabelGenResult:
    edge: EdgeMap
    cost_maps: tuple[CostMap, ...]
    assignment: AssignmentMap
    instances: tuple[PseudoInstance, ...]


def sobel_edge_map(image: ImageGrid) -> EdgeMap:
    """Sobel magnitude of the Rec.601 luma, normalized by its global max."""
    gx, gy = sobel_gradients(luma601(image.data))
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak > 0.0:
        mag = mag / peak
    return EdgeMap(mag)


def _offsets(connectivity: int):
    offs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        offs += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    return offs


def _as_scores(sem) -> np.ndarray:
    arr = sem.scores if isinstance(sem, SemanticMap) else np.asarray(sem, dtype=np.float64)
    if arr.ndim != 3:
        raise ValidationError(f"semantic scores must be (H, W, C), got {arr.shape}")
    return arr


def neighbor_cost(sem, edge: EdgeMap, u: tuple[int, int], v: tuple[int, int],
                  lam: float, connectivity: int = 8) -> float:
    """Step cost between two grid-adjacent pixels (given as (row, col)).

    Cost = ||sem(u) - sem(v)||_2 over all category channels
    + lam * |edge(u) - edge(v)|. Symmetric in (u, v).
    """
    arr = _as_scores(sem)
    (ur, uc), (vr, vc) = u, v
    dr, dc = vr - ur, vc - uc
    if (dr, dc) not in _offsets(connectivity):
        raise ValidationError(f"pixels {u} and {v} are not adjacent (connectivity {connectivity})")
    d = arr[ur, uc, :] - arr[vr, vc, :]
    return float(np.sqrt(np.sum(d * d)) + lam * abs(edge.values[ur, uc] - edge.values[vr, vc]))


def _step_cost_grids(sem_arr: np.ndarray, edge_arr: np.ndarray, lam: float,
                     connectivity: int):
    """Per-direction (H, W) arrays of step costs; np.inf marks off-grid targets.

    Entry [r, c] of direction (dr, dc) is the cost of moving from (r, c) to
    (r+dr, c+dc), computed with the same operations as neighbor_cost so the
    two agree bit-for-bit.
    """
    h, w = edge_arr.shape
    grids = []
    for dr, dc in _offsets(connectivity):
        grid = np.full((h, w), np.inf)
        src_r = slice(max(0, -dr), h - max(0, dr))
        src_c = slice(max(0, -dc), w - max(0, dc))
        dst_r = slice(max(0, dr), h + min(0, dr))
        dst_c = slice(max(0, dc), w + min(0, dc))
        d = sem_arr[src_r, src_c] - sem_arr[dst_r, dst_c]
        cost = np.sqrt(np.sum(d * d, axis=-1)) + lam * np.abs(
            edge_arr[src_r, src_c] - edge_arr[dst_r, dst_c]
        )
        grid[src_r, src_c] = cost
        grids.append(grid.ravel())
    return grids


def _dijkstra(step_grids, move_offsets, source: int, tau: float, n: int) -> np.ndarray:
    """Single-source shortest paths with early stop.

    Expansion halts once the frontier minimum exceeds tau; pixels that were
    never finalized stay at np.inf (their true cost is > tau because all
    step costs are nonnegative).
    """
    tentative = np.full(n, np.inf)
    final = np.full(n, np.inf)
    tentative[source] = 0.0
    heap = [(0.0, source)]
    ndirs = len(step_grids)
    while heap:
        d, u = heapq.heappop(heap)
        if d > tau:
            break
        if d != tentative[u]:
            continue  # stale heap entry
        final[u] = d
        for k in range(ndirs):
            w = step_grids[k][u]
            if w == np.inf:
                continue
            nd = d + w
            v = u + move_offsets[k]
            if nd < tentative[v]:
                tentative[v] = nd
                heapq.heappush(heap, (nd, v))
    return final


def compute_cost_map(sem, edge: EdgeMap, point: PointAnnotation,
                     config: LabelGenConfig) -> CostMap:
    """Dijkstra cost map from one labeled point over the pixel grid."""
    sem_arr = _as_scores(sem)
    h, w = edge.height, edge.width
    if sem_arr.shape[:2] != (h, w):
        raise ValidationError(
            f"semantic grid {sem_arr.shape[:2]} does not match edge map {(h, w)}"
        )
    if not (0 <= point.x < w and 0 <= point.y < h):
        raise ValidationError(f"point {(point.x, point.y)} outside {w}x{h} grid")
    grids = _step_cost_grids(sem_arr, edge.values, config.lam, config.connectivity)
    moves = [dr * w + dc for dr, dc in _offsets(config.connectivity)]
    costs = _dijkstra(grids, moves, point.y * w + point.x, config.tau, h * w)
    return CostMap(point.instance_id, costs.reshape(h, w))


def assign(cost_maps, tau: float) -> AssignmentMap:
    """Label each pixel with its minimum-cost instance, or 0 for background.

    Ties go to the smallest instance id; a pixel whose cheapest cost exceeds
    tau (strictly) is background, so a cost of exactly tau still wins.
    """
    cost_maps = sorted(cost_maps, key=lambda cm: cm.instance_id)
    if not cost_maps:
        raise ValidationError("assign needs at least one cost map")
    shape = cost_maps[0].costs.shape
    best = np.full(shape, np.inf)
    labels = np.zeros(shape, dtype=np.int32)
    for cm in cost_maps:
        if cm.costs.shape != shape:
            raise ValidationError("cost maps disagree on grid shape")
        better = cm.costs < best
        best[better] = cm.costs[better]
        labels[better] = cm.instance_id
    labels[best > tau] = 0
    return AssignmentMap(labels)


def extract_instances(assignment: AssignmentMap, points) -> list[PseudoInstance]:
    """Boxes and masks of every instance present in the point set.

    The box is the tight bounding rectangle of the assigned pixels. Instances
    with empty support get a clipped 3x3 fallback box around their point and
    are flagged degenerate.
    """
    labels = assignment.labels
    h, w = labels.shape
    points = sorted(points, key=lambda p: p.instance_id)
    known = {p.instance_id for p in points}
    present = set(np.unique(labels).tolist()) - {0}
    if not present <= known:
        raise ValidationError(f"assignment contains unknown instance ids {sorted(present - known)}")
    out = []
    for p in points:
        mask = labels == p.instance_id
        ys, xs = np.nonzero(mask)
        if ys.size:
            box = Box(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()),
                      p.category, p.instance_id)
            degenerate = False
        else:
            box = Box(max(0, p.x - 1), max(0, p.y - 1),
                      min(w - 1, p.x + 1), min(h - 1, p.y + 1),
                      p.category, p.instance_id)
            mask = np.zeros((h, w), dtype=bool)
            mask[box.y_min : box.y_max + 1, box.x_min : box.x_max + 1] = True
            degenerate = True
        out.append(PseudoInstance(p.instance_id, p.category, box, mask, degenerate))
    return out


def likelihood_maps(cost_maps) -> list[np.ndarray]:
    """Per-instance maps of max(0, 1 - cost); unreached pixels are 0."""
    return [np.maximum(0.0, 1.0 - cm.costs) for cm in cost_maps]


def bilinear_upsample(scores: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, C) score array with bilinear interpolation.

    Output pixel centers are mapped into the input grid (half-pixel
    alignment) and samples are clamped at the borders.
    """
    arr = np.asarray(scores, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()

    def axis_coords(n_out, n_in):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(coords), 0, n_in - 1).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = np.clip(coords - lo, 0.0, 1.0)
        return lo, hi, frac

    ry0, ry1, fy = axis_coords(out_h, h)
    rx0, rx1, fx = axis_coords(out_w, w)
    top = arr[ry0][:, rx0] * (1 - fx)[None, :, None] + arr[ry0][:, rx1] * fx[None, :, None]
    bot = arr[ry1][:, rx0] * (1 - fx)[None, :, None] + arr[ry1][:, rx1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def generate_instance_labels(image: ImageGrid, sem, points, config: LabelGenConfig = LabelGenConfig()) -> LabelGenResult:
    """Full label generation for one image.

    The semantic map is bilinearly upsampled to the image resolution when it
    was predicted on a strided feature grid; the whole stage then runs at
    full resolution. Step-cost grids are shared across instances.
    """
    points = sorted(points, key=lambda p: p.instance_id)
    if not points:
        raise ValidationError("generate_instance_labels needs at least one labeled point")
    sem_arr = _as_scores(sem)
    if sem_arr.shape[:2] != (image.height, image.width):
        sem_arr = bilinear_upsample(sem_arr, image.height, image.width)
    edge = sobel_edge_map(image)
    h, w = image.height, image.width
    grids = _step_cost_grids(sem_arr, edge.values, config.lam, config.connectivity)
    moves = [dr * w + dc for dr, dc in _offsets(config.connectivity)]
    cost_maps = []
    for p in points:
        if not (0 <= p.x < w and 0 <= p.y < h):
            raise ValidationError(f"point {(p.x, p.y)} outside {w}x{h} image")
        costs = _dijkstra(grids, moves, p.y * w + p.x, config.tau, h * w)
        cost_maps.append(CostMap(p.instance_id, costs.reshape(h, w)))
    assignment = assign(cost_maps, config.tau)
    instances = extract_instances(assignment, points)
    return LabelGenResult(edge, tuple(cost_maps), assignment, tuple(instances))

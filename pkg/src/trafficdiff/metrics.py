"""Kernel two-sample statistics between scenes and simple plausibility stats."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import RasterSpec, boxes_overlap, normalize_angle
from .raster import Scene, rasterize_map

POSITION_BANDWIDTH = 4.0
HEADING_BANDWIDTH = 0.5


@dataclass(frozen=True)
class KernelParams:
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("kernel bandwidth must be positive")


@dataclass(frozen=True)
class SceneSample:
    """Agent centers ``(n, 2)`` and unit heading vectors ``(n, 2)``."""

    positions: np.ndarray
    headings: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        head = np.asarray(self.headings, dtype=np.float64).reshape(-1, 2)
        if len(pos) != len(head):
            raise ValueError("positions and headings must have the same length")
        if len(head) and np.abs(np.hypot(head[:, 0], head[:, 1]) - 1.0).max() > 1e-9:
            raise ValueError("heading vectors must be unit length")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "headings", head)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_scene(cls, scene: Scene) -> "SceneSample":
        if not scene.agents:
            return cls(np.zeros((0, 2)), np.zeros((0, 2)))
        pos = np.array([a.center for a in scene.agents], dtype=np.float64)
        h = np.array([a.heading for a in scene.agents])
        return cls(pos, np.stack([np.cos(h), np.sin(h)], axis=1))


def _kernel_mean(a, b, h):
    return float(np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * h * h)).mean())


def mmd2(p, q, kp: KernelParams | float = 1.0) -> float:
    """Biased (V-statistic) squared MMD under a Gaussian kernel.

    Args:
        p, q: sample sets, ``(n, d)`` and ``(m, d)``; 1-D input is read as
            scalar samples.
        kp: kernel bandwidth or :class:`KernelParams`.
    """
    h = kp.bandwidth if isinstance(kp, KernelParams) else KernelParams(float(kp)).bandwidth
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p[:, None] if p.ndim == 1 else p
    q = q[:, None] if q.ndim == 1 else q
    if len(p) == 0 or len(q) == 0:
        raise ValueError("mmd2 needs non-empty sample sets")
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"sample dimensions differ: {p.shape[1]} vs {q.shape[1]}")
    if np.array_equal(p, q):
        return 0.0
    val = _kernel_mean(p, p, h) + _kernel_mean(q, q, h) - 2.0 * _kernel_mean(p, q, h)
    return max(val, 0.0)


@dataclass(frozen=True)
class SceneMMD:
    position: float
    heading: float
    n_pairs: int
    n_skipped: int


def scene_mmd(pairs, kp_pos=None, kp_head=None) -> SceneMMD:
    """Average per-pair MMD^2 over (generated, reference) pairs.

    Pairs where either side has no agents are skipped and counted. If every
    pair is skipped both averages are NaN.
    """
    kp_pos = kp_pos or KernelParams(POSITION_BANDWIDTH)
    kp_head = kp_head or KernelParams(HEADING_BANDWIDTH)
    pos, head, skipped = [], [], 0
    for gen, ref in pairs:
        gen = SceneSample.from_scene(gen) if isinstance(gen, Scene) else gen
        ref = SceneSample.from_scene(ref) if isinstance(ref, Scene) else ref
        if len(gen) == 0 or len(ref) == 0:
            skipped += 1
            continue
        pos.append(mmd2(gen.positions, ref.positions, kp_pos))
        head.append(mmd2(gen.headings, ref.headings, kp_head))
    if not pos:
        return SceneMMD(math.nan, math.nan, 0, skipped)
    return SceneMMD(float(np.mean(pos)), float(np.mean(head)), len(pos), skipped)


@dataclass(frozen=True)
class SceneStats:
    agent_count: int
    overlap_count: int
    off_drivable_fraction: float
    mean_nn_spacing: float


def scene_stats(scene: Scene, spec: RasterSpec | None = None) -> SceneStats:
    """Agent count, overlapping pairs, off-road fraction and nearest-neighbor spacing.

    Spacing is center-to-center in meters; it is 0 with fewer than two agents.
    """
    spec = spec or RasterSpec()
    agents = list(scene.agents)
    n = len(agents)
    if n == 0:
        return SceneStats(0, 0, 0.0, 0.0)
    overlaps = sum(boxes_overlap(agents[i], agents[j]) for i in range(n) for j in range(i + 1, n))
    centers = np.array([a.center for a in agents], dtype=np.float64)
    drivable = rasterize_map(scene.road_map, spec).channels[0]
    inside = spec.contains(centers)
    idx = np.clip(spec.pixel_index(centers), 0, np.array(spec.shape) - 1)
    on_road = inside & (drivable[idx[:, 0], idx[:, 1]] > 0.5)
    spacing = 0.0
    if n > 1:
        d = cdist(centers, centers)
        np.fill_diagonal(d, np.inf)
        spacing = float(d.min(axis=1).mean())
    return SceneStats(n, int(overlaps), float(1.0 - on_road.mean()), spacing)


def match_boxes(pred, gt, center_tol=0.5, heading_tol_deg=5.0, extent_tol=0.1):
    """Greedy one-to-one matching of predicted to true boxes under fixed tolerances.

    A prediction matches a ground-truth box when the center error, heading
    error and relative length and width errors are all within tolerance.
    Candidates are taken closest-center first.

    Returns:
        ``(true_positives, n_pred, n_gt)``.
    """
    cands = []
    for j, g in enumerate(gt):
        for i, p in enumerate(pred):
            dc = math.hypot(p.center[0] - g.center[0], p.center[1] - g.center[1])
            dh = abs(normalize_angle(p.heading - g.heading))
            if (dc < center_tol and dh < math.radians(heading_tol_deg)
                    and abs(p.length - g.length) < extent_tol * g.length
                    and abs(p.width - g.width) < extent_tol * g.width):
                cands.append((dc, j, i))
    used_p, used_g, tp = set(), set(), 0
    for _, j, i in sorted(cands):
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            tp += 1
    return tp, len(pred), len(gt)


def precision_recall(preds, gts, **tol):
    """Pooled precision and recall over lists of per-scene box lists."""
    tp = n_pred = n_gt = 0
    for p, g in zip(preds, gts):
        a, b, c = match_boxes(list(p), list(g), **tol)
        tp, n_pred, n_gt = tp + a, n_pred + b, n_gt + c
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_gt if n_gt else 1.0
    return precision, recall

"""One-to-one oriented box matching and the detection loss.

Each ground-truth box is matched to exactly one grid cell by minimizing the
total of a weighted classification + L1 + vertex cost. The loss then trains
every cell's logit against the "was matched" indicator and regresses box
shape only on the matched cells. The matching is held fixed while
differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import (CellBoxParams, OrientedBox, RasterSpec, box_vertices, boxes_to_array,
                       cell_vertices, decode_cell, encode_cell, encode_pairs, encode_shape, sigmoid, vertices_from_array)

#: Cost charged to cells that are undecodable or (optionally) outside the box.
INVALID_CELL_COST = 1e6


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class MatchWeights:
    alpha_cls: float = 4.0
    alpha_l1: float = 1.0
    alpha_vert: float = 1.0
    beta_cls: float = 20.0
    beta_l1: float = 1.0
    beta_vert: float = 1.0
    #: only match cells whose reference point lies inside the ground-truth box
    inside_only: bool = False

    def __post_init__(self):
        vals = (self.alpha_cls, self.alpha_l1, self.alpha_vert,
                self.beta_cls, self.beta_l1, self.beta_vert)
        if any(v < 0 for v in vals):
            raise ValueError("match/loss weights must be non-negative")
        if self.alpha_cls + self.alpha_l1 + self.alpha_vert <= 0:
            raise ValueError("at least one matching weight must be positive")


@dataclass(frozen=True)
class BoxGrid:
    """Decoder output: seven channels per cell, one candidate box per cell."""

    channels: np.ndarray
    spec: RasterSpec = field(default_factory=lambda: RasterSpec(40, 40, 64.0))

    def __post_init__(self):
        if self.channels.shape != (7, *self.spec.shape):
            raise ValueError(f"grid channels {self.channels.shape} do not match {(7, *self.spec.shape)}")

    @property
    def n_cells(self) -> int:
        return self.spec.height_px * self.spec.width_px

    def cells(self) -> np.ndarray:
        """``(n_cells, 7)`` view in row-major cell order."""
        return self.channels.reshape(7, -1).T

    def refs(self) -> np.ndarray:
        return self.spec.pixel_centers().reshape(-1, 2)

    def cell(self, index: int) -> CellBoxParams:
        return CellBoxParams.from_array(self.cells()[index], self.refs()[index])


@dataclass(frozen=True)
class Assignment:
    """``pairs`` holds ``(gt index, cell index)`` sorted by gt index."""

    pairs: tuple[tuple[int, int], ...]
    unmatched: tuple[int, ...]
    total_cost: float = 0.0

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([j for j, _ in self.pairs], dtype=np.int64)

    @property
    def cell_indices(self) -> np.ndarray:
        return np.array([i for _, i in self.pairs], dtype=np.int64)


def vertex_cost(b: OrientedBox, g: OrientedBox) -> float:
    """Mean corner-to-corner distance, corners matched by label."""
    return float(np.linalg.norm(box_vertices(b) - box_vertices(g), axis=1).mean())


def l1_cost(cell: CellBoxParams, g: OrientedBox) -> float:
    target = encode_cell(g, cell.reference).as_array()
    return float(np.abs(cell.as_array()[1:] - target[1:]).sum())


def cls_cost(logit) -> float:
    """``-log(sigmoid(logit))`` in overflow-safe form."""
    return float(np.logaddexp(0.0, -np.asarray(logit, dtype=np.float64)))


def cost_terms(cells, refs, gts):
    """Per-pair cost components, each shaped ``(n_gt, n_cells)``."""
    cells = np.asarray(cells, dtype=np.float64)
    g = gts if isinstance(gts, np.ndarray) else boxes_to_array(gts)
    n, m = len(cells), len(g)
    c_cls = np.broadcast_to(np.logaddexp(0.0, -cells[:, 0])[None, :], (m, n))
    target = encode_shape(g, refs)  # (n, m, 6)
    target -= cells[:, None, 1:]
    np.abs(target, out=target)
    c_l1 = target.sum(axis=-1).T
    valid = np.hypot(cells[:, 1], cells[:, 2]) > 0
    pv = cell_vertices(cells, refs)  # (n, 4, 2)
    gv = vertices_from_array(g)  # (m, 4, 2)
    dx = pv[None, :, :, 0] - gv[:, None, :, 0]
    dy = pv[None, :, :, 1] - gv[:, None, :, 1]
    c_vert = np.sqrt(dx * dx + dy * dy).mean(axis=-1)
    c_vert = np.where(valid[None, :], c_vert, INVALID_CELL_COST)
    return c_cls, c_l1, c_vert


def outside_mask(refs, gts) -> np.ndarray:
    """``(n_gt, n_cells)`` mask of reference points strictly outside each box."""
    g = gts if isinstance(gts, np.ndarray) else boxes_to_array(gts)
    refs = np.asarray(refs, dtype=np.float64)
    dx = refs[None, :, 0] - g[:, None, 0]
    dy = refs[None, :, 1] - g[:, None, 1]
    c, s = np.cos(g[:, 2])[:, None], np.sin(g[:, 2])[:, None]
    along = np.abs(c * dx + s * dy)
    across = np.abs(-s * dx + c * dy)
    return (along > g[:, 3:4] / 2) | (across > g[:, 4:5] / 2)


def cost_matrix(cells, refs, gts, w: MatchWeights) -> np.ndarray:
    c_cls, c_l1, c_vert = cost_terms(cells, refs, gts)
    cost = w.alpha_cls * c_cls + w.alpha_l1 * c_l1 + w.alpha_vert * c_vert
    if w.inside_only:
        # a soft gate: a box with no inside cell still gets its cheapest cell
        cost = cost + INVALID_CELL_COST * outside_mask(refs, gts)
    return cost


def _solve(cost: np.ndarray, n_cells: int) -> Assignment:
    m = cost.shape[0]
    if m > n_cells:
        raise AssignmentError(f"{m} ground-truth boxes cannot be matched to {n_cells} cells")
    if m == 0:
        return Assignment((), tuple(range(n_cells)), 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple((int(j), int(i)) for j, i in zip(rows, cols))
    free = np.ones(n_cells, dtype=bool)
    free[cols] = False
    return Assignment(pairs, tuple(np.flatnonzero(free).tolist()), float(cost[rows, cols].sum()))


def assign(grid: BoxGrid, gts, w: MatchWeights | None = None) -> Assignment:
    """Minimum-total-cost injective matching of ground truth to cells."""
    w = w or MatchWeights()
    cells = grid.cells()
    if len(gts) > len(cells):
        raise AssignmentError(f"{len(gts)} ground-truth boxes cannot be matched to {len(cells)} cells")
    if len(gts) == 0:
        return Assignment((), tuple(range(len(cells))), 0.0)
    return _solve(cost_matrix(cells, grid.refs(), gts, w), len(cells))


def _vertex_loss_grad(cells, refs, gv):
    """Per-pair vertex cost and its gradient w.r.t. the 7 channels.

    ``cells`` ``(k, 7)``, ``refs`` ``(k, 2)``, ``gv`` ``(k, 4, 2)`` target corners.
    """
    q = cells[:, 1:3]
    n = np.hypot(q[:, 0], q[:, 1])
    u = q / n[:, None]
    v = np.stack([-u[:, 1], u[:, 0]], axis=-1)
    e = np.exp(cells[:, 3:7])  # front, left, back, right
    ef, el, eb, er = (e[:, k:k + 1] for k in range(4))
    pv = np.stack([refs + ef * u + el * v, refs + ef * u - er * v,
                   refs - eb * u + el * v, refs - eb * u - er * v], axis=1)
    diff = pv - gv
    dist = np.linalg.norm(diff, axis=-1)
    cost = dist.mean(axis=1)
    dP = 0.25 * diff / np.where(dist > 0, dist, 1.0)[..., None]
    dP[dist == 0] = 0.0
    dFL, dFR, dBL, dBR = (dP[:, k] for k in range(4))
    d_ef = ((dFL + dFR) * u).sum(-1)
    d_eb = -((dBL + dBR) * u).sum(-1)
    d_el = ((dFL + dBL) * v).sum(-1)
    d_er = -((dFR + dBR) * v).sum(-1)
    gu = ef * (dFL + dFR) - eb * (dBL + dBR)
    gv_ = el * (dFL + dBL) - er * (dFR + dBR)
    # v = (-u_y, u_x)
    gu = gu + np.stack([gv_[:, 1], -gv_[:, 0]], axis=-1)
    dq = (gu - (gu * u).sum(-1, keepdims=True) * u) / n[:, None]
    grad = np.zeros_like(cells)
    grad[:, 1:3] = dq
    grad[:, 3:7] = np.stack([d_ef, d_el, d_eb, d_er], axis=-1) * e
    return cost, grad


def detection_loss(grid: BoxGrid, gts, w: MatchWeights | None = None,
                   assignment: Assignment | None = None):
    """Detection loss and its gradient w.r.t. the grid channels.

    Args:
        grid: predicted cells.
        gts: ground-truth :class:`OrientedBox` list.
        w: matching and loss weights.
        assignment: reuse a fixed matching instead of solving one.

    Returns:
        ``(loss, grad, parts, assignment)`` with ``grad`` shaped like
        ``grid.channels`` and ``parts`` holding the unweighted
        ``cls``, ``l1`` and ``vert`` terms.
    """
    w = w or MatchWeights()
    if assignment is None:
        assignment = assign(grid, gts, w)
    cells = grid.cells()
    refs = grid.refs()
    n = len(cells)
    grad = np.zeros_like(cells)

    target = np.zeros(n)
    ci = assignment.cell_indices
    gi = assignment.gt_indices
    target[ci] = 1.0
    logits = cells[:, 0]
    l_cls = float(np.mean(np.logaddexp(0.0, logits) - target * logits))
    grad[:, 0] = w.beta_cls * (sigmoid(logits) - target) / n

    l_l1 = l_vert = 0.0
    if len(ci):
        g = boxes_to_array(gts)[gi]
        m = len(ci)
        tgt = encode_pairs(g, refs[ci])
        resid = cells[ci, 1:] - tgt
        l_l1 = float(np.abs(resid).sum() / m)
        grad[ci, 1:] += w.beta_l1 * np.sign(resid) / m
        vcost, vgrad = _vertex_loss_grad(cells[ci], refs[ci], vertices_from_array(g))
        l_vert = float(vcost.sum() / m)
        grad[ci] += w.beta_vert * vgrad / m

    loss = w.beta_cls * l_cls + w.beta_l1 * l_l1 + w.beta_vert * l_vert
    grad_channels = grad.T.reshape(grid.channels.shape)
    return loss, grad_channels, {"cls": l_cls, "l1": l_l1, "vert": l_vert}, assignment


def threshold_boxes(grid: BoxGrid, p_min: float = 0.9, warn=None) -> list[OrientedBox]:
    """Decode every cell with probability >= ``p_min``, most confident first.

    Cells with an undecodable orientation are skipped; ``warn`` (a callable)
    receives a message for each one.
    """
    if not 0.0 < p_min < 1.0:
        raise ValueError("p_min must lie in (0, 1)")
    cells = grid.cells()
    refs = grid.refs()
    probs = sigmoid(cells[:, 0])
    order = np.argsort(-probs, kind="stable")
    boxes = []
    for i in order:
        if probs[i] < p_min:
            break
        c, s = cells[i, 1], cells[i, 2]
        if c == 0.0 and s == 0.0:
            if warn is not None:
                warn(f"cell {int(i)} has a degenerate orientation; skipped")
            continue
        boxes.append(decode_cell(CellBoxParams.from_array(cells[i], refs[i])))
    return boxes

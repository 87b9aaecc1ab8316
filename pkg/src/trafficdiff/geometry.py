"""Oriented boxes, raster grids and the per-cell box encoding.

Conventions used everywhere in the package:

* world frame is metric, x to the right, y up; headings are measured
  counter-clockwise from +x and normalized to (-pi, pi];
* ``u = (cos h, sin h)`` points to the front of a box and
  ``u_perp = (-sin h, cos h)`` to its left;
* raster row 0 is the top (largest y) row, column 0 the leftmost.

A detection cell stores seven numbers
``(logit, cos, sin, d_front, d_left, d_back, d_right)`` where the ``d_*``
are log-distances from the cell center to the four sides of the box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

#: Floor applied to side distances before the log (meters).
DIST_FLOOR = 0.01
#: Probability clamp used before taking a logit.
PROB_EPS = 1e-6

N_CELL_CHANNELS = 7
VERTEX_NAMES = ("front_left", "front_right", "back_left", "back_right")


class DegenerateOrientationError(ValueError):
    """Raised when a cell's (cos, sin) pair is exactly zero."""


def normalize_angle(angle: float) -> float:
    """Wrap ``angle`` into (-pi, pi]."""
    a = math.remainder(float(angle), 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p: float) -> float:
    p = min(max(float(p), PROB_EPS), 1.0 - PROB_EPS)
    return math.log(p) - math.log1p(-p)


@dataclass(frozen=True)
class OrientedBox:
    """A vehicle footprint in world coordinates.

    ``length`` is the front-to-back extent and ``width`` the left-to-right
    extent, both in meters. ``probability`` is 1.0 for ground truth.
    """

    center: tuple[float, float]
    heading: float
    length: float
    width: float
    probability: float = 1.0

    def __post_init__(self):
        cx, cy = (float(c) for c in self.center)
        object.__setattr__(self, "center", (cx, cy))
        object.__setattr__(self, "heading", normalize_angle(self.heading))
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "width", float(self.width))
        object.__setattr__(self, "probability", float(self.probability))
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"box extents must be positive, got {self.length}x{self.width}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")
        if not all(math.isfinite(v) for v in (cx, cy, self.heading, self.length, self.width)):
            raise ValueError("box fields must be finite")

    @property
    def forward(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading)])

    @property
    def left(self) -> np.ndarray:
        return np.array([-math.sin(self.heading), math.cos(self.heading)])

    def as_array(self) -> np.ndarray:
        """``[cx, cy, heading, length, width]``."""
        return np.array([self.center[0], self.center[1], self.heading, self.length, self.width])


@dataclass(frozen=True)
class CellBoxParams:
    logit: float
    theta_c: float
    theta_s: float
    d_front: float
    d_left: float
    d_back: float
    d_right: float
    reference: tuple[float, float] = (0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.logit, self.theta_c, self.theta_s,
                         self.d_front, self.d_left, self.d_back, self.d_right])

    @classmethod
    def from_array(cls, values, reference) -> "CellBoxParams":
        v = [float(x) for x in np.asarray(values, dtype=np.float64).reshape(-1)]
        if len(v) != N_CELL_CHANNELS:
            raise ValueError(f"expected {N_CELL_CHANNELS} channels, got {len(v)}")
        return cls(*v, reference=(float(reference[0]), float(reference[1])))

    @property
    def probability(self) -> float:
        return float(sigmoid(self.logit))


@dataclass(frozen=True)
class RasterSpec:
    """Square metric raster centered on ``origin``."""

    height_px: int = 64
    width_px: int = 64
    extent_m: float = 64.0
    origin: tuple[float, float] = field(default=(0.0, 0.0))

    def __post_init__(self):
        if int(self.height_px) != self.height_px or self.height_px <= 0:
            raise ValueError("height_px must be a positive integer")
        if self.width_px != self.height_px:
            raise ValueError("rasters must be square (height_px == width_px)")
        if not self.extent_m > 0:
            raise ValueError("extent_m must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def meters_per_px(self) -> float:
        return self.extent_m / self.height_px

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    def pixel_to_world(self, row, col) -> np.ndarray:
        """World coordinates of pixel centers; accepts scalars or arrays."""
        row = np.asarray(row, dtype=np.float64)
        col = np.asarray(col, dtype=np.float64)
        half = self.extent_m / 2.0
        x = self.origin[0] - half + (col + 0.5) * self.meters_per_px
        y = self.origin[1] + half - (row + 0.5) * self.meters_per_px
        return np.stack([x, y], axis=-1)

    def world_to_pixel(self, points) -> np.ndarray:
        """Continuous ``(row, col)`` for world points; inverse of :meth:`pixel_to_world`."""
        p = np.asarray(points, dtype=np.float64)
        half = self.extent_m / 2.0
        col = (p[..., 0] - self.origin[0] + half) / self.meters_per_px - 0.5
        row = (self.origin[1] + half - p[..., 1]) / self.meters_per_px - 0.5
        return np.stack([row, col], axis=-1)

    def pixel_index(self, points) -> np.ndarray:
        """Integer ``(row, col)`` of the pixel containing each point (may be off-raster)."""
        rc = self.world_to_pixel(points)
        return np.floor(rc + 0.5).astype(np.int64)

    def pixel_centers(self) -> np.ndarray:
        """``(H, W, 2)`` read-only array of pixel-center world coordinates."""
        return _pixel_centers(self)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        half = self.extent_m / 2.0
        return ((np.abs(p[..., 0] - self.origin[0]) <= half)
                & (np.abs(p[..., 1] - self.origin[1]) <= half))


@lru_cache(maxsize=32)
def _pixel_centers(spec: RasterSpec) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(spec.height_px), np.arange(spec.width_px), indexing="ij")
    out = spec.pixel_to_world(rows, cols)
    out.flags.writeable = False
    return out


def box_vertices(box: OrientedBox) -> np.ndarray:
    """Corners of ``box`` as a ``(4, 2)`` array ordered FL, FR, BL, BR."""
    c = np.asarray(box.center)
    u = box.forward * (box.length / 2.0)
    v = box.left * (box.width / 2.0)
    return np.stack([c + u + v, c + u - v, c - u + v, c - u - v])


def vertices_from_array(boxes) -> np.ndarray:
    """Vectorized :func:`box_vertices` for ``(..., 5)`` box arrays; returns ``(..., 4, 2)``."""
    b = np.asarray(boxes, dtype=np.float64)
    c = b[..., 0:2]
    cos, sin = np.cos(b[..., 2]), np.sin(b[..., 2])
    u = np.stack([cos, sin], axis=-1) * (b[..., 3:4] / 2.0)
    v = np.stack([-sin, cos], axis=-1) * (b[..., 4:5] / 2.0)
    return np.stack([c + u + v, c + u - v, c - u + v, c - u - v], axis=-2)


def boxes_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 5))
    return np.stack([b.as_array() for b in boxes])


def decode_cell(params: CellBoxParams) -> OrientedBox:
    """Turn a cell encoding back into a world-space box."""
    norm = math.hypot(params.theta_c, params.theta_s)
    if norm == 0.0:
        raise DegenerateOrientationError("cannot decode a cell with theta_c = theta_s = 0")
    c, s = params.theta_c / norm, params.theta_s / norm
    ef, el = math.exp(params.d_front), math.exp(params.d_left)
    eb, er = math.exp(params.d_back), math.exp(params.d_right)
    along = (ef - eb) / 2.0
    across = (el - er) / 2.0
    cx = params.reference[0] + along * c - across * s
    cy = params.reference[1] + along * s + across * c
    return OrientedBox((cx, cy), math.atan2(s, c), ef + eb, el + er, params.probability)


def encode_cell(box: OrientedBox, reference) -> CellBoxParams:
    """Encode ``box`` relative to the cell center ``reference``.

    Side distances are signed; distances below :data:`DIST_FLOOR`
    (reference outside the box) are clipped before the log.
    """
    ref = np.asarray(reference, dtype=np.float64)
    t = encode_shape(box.as_array()[None, :], ref[None, :])[0, 0]
    return CellBoxParams(logit(box.probability), *t.tolist(), reference=(float(ref[0]), float(ref[1])))


def _encode_broadcast(b, r) -> np.ndarray:
    cos, sin = np.cos(b[..., 2]), np.sin(b[..., 2])
    dx, dy = b[..., 0] - r[..., 0], b[..., 1] - r[..., 1]
    along = dx * cos + dy * sin
    across = -dx * sin + dy * cos
    half_l, half_w = b[..., 3] / 2.0, b[..., 4] / 2.0
    out = np.empty(np.broadcast(along, half_l).shape + (6,))
    out[..., 0] = cos
    out[..., 1] = sin
    out[..., 2] = half_l + along
    out[..., 3] = half_w + across
    out[..., 4] = half_l - along
    out[..., 5] = half_w - across
    np.log(np.maximum(out[..., 2:], DIST_FLOOR), out=out[..., 2:])
    return out


def encode_shape(boxes, refs) -> np.ndarray:
    """Shape targets ``(cos, sin, d_front, d_left, d_back, d_right)``.

    Args:
        boxes: ``(M, 5)`` box array.
        refs: ``(N, 2)`` reference points.

    Returns:
        ``(N, M, 6)`` array: the encoding of every box from every reference.
    """
    b = np.asarray(boxes, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    return _encode_broadcast(b[None, :, :], r[:, None, :])


def encode_pairs(boxes, refs) -> np.ndarray:
    """Shape targets for matched ``(k, 5)`` boxes at ``(k, 2)`` references; ``(k, 6)``."""
    return _encode_broadcast(np.asarray(boxes, dtype=np.float64), np.asarray(refs, dtype=np.float64))


def decode_cells(params, refs):
    """Vectorized decode of ``(N, 7)`` cell channels at ``(N, 2)`` references.

    Returns:
        ``(boxes, valid)`` where ``boxes`` is ``(N, 6)``
        ``[cx, cy, heading, length, width, probability]`` and ``valid`` flags
        cells whose orientation pair is non-zero. Invalid rows are NaN.
    """
    p = np.asarray(params, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    norm = np.hypot(p[:, 1], p[:, 2])
    valid = norm > 0
    safe = np.where(valid, norm, 1.0)
    c, s = p[:, 1] / safe, p[:, 2] / safe
    ef, el, eb, er = (np.exp(p[:, k]) for k in (3, 4, 5, 6))
    along, across = (ef - eb) / 2.0, (el - er) / 2.0
    out = np.stack([r[:, 0] + along * c - across * s,
                    r[:, 1] + along * s + across * c,
                    np.arctan2(s, c), ef + eb, el + er, sigmoid(p[:, 0])], axis=-1)
    out[~valid] = np.nan
    return out, valid


def cell_vertices(params, refs) -> np.ndarray:
    """Corners FL, FR, BL, BR of decoded cells, ``(N, 4, 2)``.

    With ``u`` the normalized orientation, the corners are
    ``r + e_f u + e_l u_perp``, ``r + e_f u - e_r u_perp``,
    ``r - e_b u + e_l u_perp`` and ``r - e_b u - e_r u_perp``.
    """
    p = np.asarray(params, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    norm = np.hypot(p[:, 1], p[:, 2])
    norm = np.where(norm > 0, norm, 1.0)
    u = np.stack([p[:, 1], p[:, 2]], axis=-1) / norm[:, None]
    v = np.stack([-u[:, 1], u[:, 0]], axis=-1)
    ef, el, eb, er = (np.exp(p[:, k])[:, None] for k in (3, 4, 5, 6))
    return np.stack([r + ef * u + el * v, r + ef * u - er * v,
                     r - eb * u + el * v, r - eb * u - er * v], axis=1)


def points_in_box(points, box) -> np.ndarray:
    """Boolean mask of ``points`` (``(..., 2)``) inside ``box`` (boundary inclusive)."""
    b = box.as_array() if isinstance(box, OrientedBox) else np.asarray(box, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    dx, dy = p[..., 0] - b[0], p[..., 1] - b[1]
    cos, sin = math.cos(b[2]), math.sin(b[2])
    along = dx * cos + dy * sin
    across = -dx * sin + dy * cos
    return (np.abs(along) <= b[3] / 2.0) & (np.abs(across) <= b[4] / 2.0)


def boxes_overlap(a, b) -> bool:
    """Separating-axis test for two oriented rectangles.

    Touching boxes (zero-area contact) do not count as overlapping.
    """
    va = vertices_from_array(a.as_array() if isinstance(a, OrientedBox) else a)
    vb = vertices_from_array(b.as_array() if isinstance(b, OrientedBox) else b)
    for verts in (va, vb):
        # FL-FR spans the width axis, FL-BL the length axis
        for edge in (verts[0] - verts[1], verts[0] - verts[2]):
            axis = np.array([-edge[1], edge[0]])
            pa, pb = va @ axis, vb @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True

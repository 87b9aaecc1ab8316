"""Scene description, BEV rendering and the synthetic scene generator.

Maps are parametric: a list of directed lane corridors plus parking rows.
Both render into a 3-channel map image ``(drivable, sin, cos)``; agents
render into ``(occupancy, sin heading, cos heading)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox, RasterSpec, boxes_overlap, points_in_box, vertices_from_array

TEMPLATES = ("straight-road", "intersection", "parking-row")

LANE_WIDTH = 4.0
LENGTH_RANGE = (4.0, 6.0)
WIDTH_RANGE = (1.8, 2.2)
HEADING_JITTER = math.radians(5.0)
LATERAL_JITTER = 0.25
MIN_GAP = 1.5
GAP_SCALE = 3.0
EGO_ATTEMPTS = 1000


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LaneSegment:
    """Directed lane corridor from ``start`` to ``end``."""

    start: tuple[float, float]
    end: tuple[float, float]
    width: float = LANE_WIDTH

    @property
    def heading(self) -> float:
        return math.atan2(self.end[1] - self.start[1], self.end[0] - self.start[0])

    @property
    def length(self) -> float:
        return math.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1])

    def frame(self, points):
        """Longitudinal and signed lateral coordinates of ``points``."""
        p = np.asarray(points, dtype=np.float64)
        h = self.heading
        dx, dy = p[..., 0] - self.start[0], p[..., 1] - self.start[1]
        return dx * math.cos(h) + dy * math.sin(h), -dx * math.sin(h) + dy * math.cos(h)

    def contains(self, points):
        t, n = self.frame(points)
        return (t >= 0) & (t <= self.length) & (np.abs(n) <= self.width / 2.0)

    def centerline_distance(self, points):
        return np.abs(self.frame(points)[1])

    def point_at(self, t: float, lateral: float = 0.0) -> tuple[float, float]:
        h = self.heading
        return (self.start[0] + t * math.cos(h) - lateral * math.sin(h),
                self.start[1] + t * math.sin(h) + lateral * math.cos(h))


@dataclass(frozen=True)
class ParkingRow:
    """Rectangular parking area; ``heading`` is the direction parked cars face.

    ``depth`` is measured along ``heading`` and ``length`` along the row.
    """

    center: tuple[float, float]
    heading: float
    depth: float
    length: float
    stall_width: float = 2.8

    def _box(self) -> np.ndarray:
        return np.array([self.center[0], self.center[1], self.heading, self.depth, self.length])

    def contains(self, points):
        return points_in_box(points, self._box())

    def centerline_distance(self, points):
        p = np.asarray(points, dtype=np.float64)
        dx, dy = p[..., 0] - self.center[0], p[..., 1] - self.center[1]
        return np.abs(dx * math.cos(self.heading) + dy * math.sin(self.heading))

    def stall_centers(self) -> list[tuple[float, float]]:
        n = int(self.length // self.stall_width)
        h = self.heading
        out = []
        for k in range(n):
            s = -self.length / 2.0 + (k + 0.5) * self.stall_width
            out.append((self.center[0] - s * math.sin(h), self.center[1] + s * math.cos(h)))
        return out


@dataclass(frozen=True)
class RoadMap:
    lanes: tuple[LaneSegment, ...] = ()
    parking: tuple[ParkingRow, ...] = ()

    @property
    def primitives(self):
        return tuple(self.lanes) + tuple(self.parking)

    def drivable(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        out = np.zeros(p.shape[:-1], dtype=bool)
        for prim in self.primitives:
            out |= prim.contains(p)
        return out


@dataclass(frozen=True)
class Scene:
    road_map: RoadMap
    agents: tuple[OrientedBox, ...] = ()
    region_tag: str = ""
    seed: int = 0
    template: str = ""
    density: float = 0.0
    scene_id: str = ""
    model_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))


@dataclass(frozen=True)
class AgentRaster:
    channels: np.ndarray
    spec: RasterSpec = field(default_factory=RasterSpec)


@dataclass(frozen=True)
class MapRaster:
    channels: np.ndarray
    spec: RasterSpec = field(default_factory=RasterSpec)


def rasterize_agents(scene: Scene, spec: RasterSpec) -> AgentRaster:
    """Fill agent footprints with ``(1, sin, cos)``; later agents overwrite earlier ones."""
    chans = np.zeros((3, *spec.shape))
    centers = spec.pixel_centers()
    for box in scene.agents:
        mask = points_in_box(centers, box)
        chans[0][mask] = 1.0
        chans[1][mask] = math.sin(box.heading)
        chans[2][mask] = math.cos(box.heading)
    return AgentRaster(chans, spec)


def rasterize_map(scene_or_map, spec: RasterSpec) -> MapRaster:
    """Render ``(drivable, sin, cos)``; overlapping primitives pick the nearest centerline.

    Exact distance ties go to the primitive listed first (lanes before parking rows).
    """
    road_map = scene_or_map.road_map if isinstance(scene_or_map, Scene) else scene_or_map
    chans = np.zeros((3, *spec.shape))
    prims = road_map.primitives
    if not prims:
        return MapRaster(chans, spec)
    centers = spec.pixel_centers()
    dist = np.stack([np.where(p.contains(centers), p.centerline_distance(centers), np.inf)
                     for p in prims])
    best = np.argmin(dist, axis=0)
    inside = np.isfinite(dist.min(axis=0))
    headings = np.array([p.heading for p in prims])[best]
    chans[0][inside] = 1.0
    chans[1][inside] = np.sin(headings[inside])
    chans[2][inside] = np.cos(headings[inside])
    return MapRaster(chans, spec)


def template_map(template: str) -> RoadMap:
    """Fixed ego-centric road layouts; the ego lane's centerline passes through the origin."""
    far = 40.0
    road = (LaneSegment((-far, 0.0), (far, 0.0)), LaneSegment((far, LANE_WIDTH), (-far, LANE_WIDTH)))
    if template == "straight-road":
        return RoadMap(road)
    if template == "intersection":
        cross = (LaneSegment((14.0, -far), (14.0, far)), LaneSegment((10.0, far), (10.0, -far)))
        return RoadMap(road + cross)
    if template == "parking-row":
        depth = 6.5
        south = ParkingRow((0.0, -LANE_WIDTH / 2 - depth / 2), -math.pi / 2, depth, 56.0)
        north = ParkingRow((0.0, 1.5 * LANE_WIDTH + depth / 2), math.pi / 2, depth, 56.0)
        return RoadMap(road, (south, north))
    raise ValueError(f"unknown template {template!r}; expected one of {TEMPLATES}")


def _fits(box: OrientedBox, placed, road_map: RoadMap, spec: RasterSpec) -> bool:
    verts = vertices_from_array(box.as_array())
    if not spec.contains(verts).all():
        return False
    if not road_map.drivable(np.asarray(box.center)[None])[0]:
        return False
    return not any(boxes_overlap(box, other) for other in placed)


def _random_box(rng, center, heading) -> OrientedBox:
    length = rng.uniform(*LENGTH_RANGE)
    width = rng.uniform(*WIDTH_RANGE)
    return OrientedBox(center, heading + rng.uniform(-HEADING_JITTER, HEADING_JITTER), length, width)


def synth_scene(rng_seed: int, template: str = "straight-road", density: float = 0.5,
                spec: RasterSpec | None = None, region_tag: str | None = None) -> Scene:
    """Draw a synthetic scene for ``template``.

    Candidate slots are generated along every lane with shifted-exponential
    bumper gaps (and at every parking stall); each slot is kept with
    probability ``density`` and rejected if it overlaps an earlier agent,
    leaves the raster, or has its center off the drivable area. Agent 0 is
    the ego vehicle at the origin.
    """
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    spec = spec or RasterSpec()
    road_map = template_map(template)
    rng = np.random.default_rng(rng_seed)
    ego_heading = road_map.lanes[0].heading

    agents: list[OrientedBox] = []
    for _ in range(EGO_ATTEMPTS):
        ego = _random_box(rng, spec.origin, ego_heading)
        if _fits(ego, agents, road_map, spec):
            agents.append(ego)
            break
    else:
        raise GenerationError(f"could not place the ego vehicle in {EGO_ATTEMPTS} attempts")

    for lane in road_map.lanes:
        t = rng.uniform(0.0, MIN_GAP + GAP_SCALE)
        prev_half = 0.0
        while True:
            length = rng.uniform(*LENGTH_RANGE)
            t += prev_half + length / 2.0
            if t > lane.length:
                break
            prev_half = length / 2.0
            lateral = rng.uniform(-LATERAL_JITTER, LATERAL_JITTER)
            heading = lane.heading + rng.uniform(-HEADING_JITTER, HEADING_JITTER)
            width = rng.uniform(*WIDTH_RANGE)
            keep = rng.uniform() < density
            if keep:
                box = OrientedBox(lane.point_at(t, lateral), heading, length, width)
                if _fits(box, agents, road_map, spec):
                    agents.append(box)
            t += MIN_GAP + rng.exponential(GAP_SCALE)

    for row in road_map.parking:
        for center in row.stall_centers():
            box = _random_box(rng, center, row.heading)
            if rng.uniform() < density and _fits(box, agents, road_map, spec):
                agents.append(box)

    return Scene(road_map, tuple(agents), region_tag if region_tag is not None else template,
                 int(rng_seed), template, float(density))


def validate_scene(scene: Scene, spec: RasterSpec | None = None, tol: float = 1e-9) -> list[str]:
    """Return a list of violated scene invariants (empty when the scene is valid)."""
    spec = spec or RasterSpec()
    problems = []
    if not scene.agents:
        problems.append("scene has no agents")
        return problems
    ego = scene.agents[0]
    if math.hypot(ego.center[0] - spec.origin[0], ego.center[1] - spec.origin[1]) > tol:
        problems.append("agent 0 is not centered at the raster origin")
    centers = spec.pixel_centers()
    drivable = rasterize_map(scene, spec).channels[0] > 0
    for k, box in enumerate(scene.agents):
        if not (drivable & points_in_box(centers, box)).any() and \
                not scene.road_map.drivable(np.asarray(box.center)[None])[0]:
            problems.append(f"agent {k} does not overlap the drivable area")
    return problems

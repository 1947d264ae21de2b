"""Road geometry for multi-lane merging: lanes, merge point, collaborative area, routes.

Lane indexing runs left to right: main lanes are 0 .. main_lanes-1 (0 is the
leftmost) and the single ramp lane has index main_lanes, sitting to the right
of the rightmost main lane. Lane i is centered at y = -i * lane_width, so a
Left lane change lowers the index and a Right change raises it. The
longitudinal station of any point is simply its x coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CONFLICTING = "Conflicting"
NON_CONFLICTING = "NonConflicting"


class OffRoadError(ValueError):
    """Point cannot be mapped to any lane corridor."""


class ScenarioConfigError(ValueError):
    """Inconsistent lane counts or spawn placements."""


@dataclass(frozen=True)
class RoadNetwork:
    main_lanes: int = 3
    ramp_lanes: int = 1
    post_merge_lanes: int = 3
    lane_width: float = 3.5
    road_length: float = 600.0
    merge_point_s: float = 300.0
    collab_start: float = 220.0
    collab_end: float = 300.0
    ramp_start: float = 0.0
    taper_length: float = 40.0  # ramp-to-main transition length before the merge point

    # derived indices, precomputed because they sit on simulation hot paths
    ramp_lane_index: int = field(init=False, compare=False)
    lane_count: int = field(init=False, compare=False)

    def __post_init__(self):
        if self.main_lanes < 1 or self.ramp_lanes < 1 or self.post_merge_lanes < 1:
            raise ScenarioConfigError("all lane counts must be >= 1")
        if self.ramp_lanes != 1:
            raise ScenarioConfigError("only a single ramp lane is supported")
        if not self.collab_start < self.collab_end <= self.merge_point_s:
            raise ScenarioConfigError("collaborative area must satisfy s_start < s_end <= merge point")
        if not 0 < self.merge_point_s < self.road_length:
            raise ScenarioConfigError("merge point must lie inside the road")
        object.__setattr__(self, "ramp_lane_index", self.main_lanes)
        object.__setattr__(self, "lane_count", self.main_lanes + self.ramp_lanes)

    def lane_center_y(self, lane: int) -> float:
        if not 0 <= lane <= self.ramp_lane_index:
            raise ValueError(f"no such lane: {lane}")
        return -lane * self.lane_width

    def lane_x_range(self, lane: int) -> tuple[float, float]:
        if lane == self.ramp_lane_index:
            return (self.ramp_start, self.merge_point_s)
        return (0.0, self.road_length)

    def lane_centerline(self, lane: int, n: int = 50) -> np.ndarray:
        x0, x1 = self.lane_x_range(lane)
        xs = np.linspace(x0, x1, n)
        ys = np.full(n, self.lane_center_y(lane))
        return np.column_stack([xs, ys])

    def lane_of_point(self, x: float, y: float, tol: float = 0.25) -> int | None:
        """Lane whose corridor contains (x, y), or None when off-road."""
        half = self.lane_width / 2.0 + tol
        best, best_d = None, math.inf
        ramp = self.ramp_lane_index
        width = self.lane_width
        for lane in range(self.lane_count):
            if lane == ramp:
                if not (self.ramp_start - tol <= x <= self.merge_point_s + tol):
                    continue
            elif not (-tol <= x <= self.road_length + tol):
                continue
            d = abs(y + lane * width)
            if d < best_d:
                best, best_d = lane, d
        if best is None or best_d > half:
            return None
        return best


@dataclass(frozen=True)
class Route:
    """Ordered lanes from spawn to exit with a sampled centerline."""
    lanes: tuple[int, ...]
    centerline: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.lanes) < 1 or len(self.centerline) < 2:
            raise ValueError("route needs at least one lane and two centerline samples")

    def arc_table(self) -> tuple:
        """Lazily cached arc-length tables for fast projection and sampling:
        (cumulative arc length array, x-monotone flag, x samples, y samples,
        cumulative arc lengths, segment lengths), the last four as plain
        lists so per-tick projection stays scalar."""
        table = getattr(self, "_arc_table", None)
        if table is None:
            seg_vec = np.diff(self.centerline, axis=0)
            seg_len = np.linalg.norm(seg_vec, axis=1)
            s = np.concatenate([[0.0], np.cumsum(seg_len)])
            monotone = bool(np.all(np.diff(self.centerline[:, 0]) > 0))
            table = (s, monotone, self.centerline[:, 0].tolist(),
                     self.centerline[:, 1].tolist(), s.tolist(),
                     seg_len.tolist())
            object.__setattr__(self, "_arc_table", table)
        return table


def classify_merge_condition(net: RoadNetwork) -> str:
    """Conflicting iff the pre-merge lanes outnumber the post-merge lanes."""
    total_before = net.main_lanes + net.ramp_lanes
    return CONFLICTING if total_before > net.post_merge_lanes else NON_CONFLICTING


def in_collaborative_area(state, net: RoadNetwork) -> bool:
    """True when a ramp vehicle's station lies in the closed collaborative interval."""
    lane = net.lane_of_point(state.x, state.y)
    if lane is None:
        raise OffRoadError(f"point ({state.x:.2f}, {state.y:.2f}) is off-road")
    return net.collab_start <= state.x <= net.collab_end


def _resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], n)
    xs = np.interp(targets, s, points[:, 0])
    ys = np.interp(targets, s, points[:, 1])
    return np.column_stack([xs, ys])


def build_route(net: RoadNetwork, spawn_lane: int, n_samples: int = 50) -> Route:
    """Route from a spawn lane to the road end, uniform in arc length.

    The ramp route runs along the ramp, tapers diagonally into the rightmost
    main lane just before the merge point, and continues to the road end.
    """
    if n_samples < 2:
        raise ValueError("need at least two centerline samples")
    if spawn_lane == net.ramp_lane_index:
        target = net.main_lanes - 1
        y_ramp = net.lane_center_y(spawn_lane)
        y_main = net.lane_center_y(target)
        knots = np.array([
            [net.ramp_start, y_ramp],
            [net.merge_point_s - net.taper_length, y_ramp],
            [net.merge_point_s, y_main],
            [net.road_length, y_main],
        ])
        lanes = (spawn_lane, target)
    else:
        y = net.lane_center_y(spawn_lane)
        knots = np.array([[0.0, y], [net.road_length, y]])
        lanes = (spawn_lane,)
    return Route(lanes=lanes, centerline=_resample_polyline(knots, n_samples))


def nearest_centerline_distance(point: tuple[float, float], route: Route) -> float:
    """Minimum Euclidean distance from the point to the sampled centerline points."""
    p = np.asarray(point, dtype=float)
    return float(np.min(np.linalg.norm(route.centerline - p, axis=1)))


@dataclass(frozen=True)
class Spawn:
    agent_id: int
    lane: int
    station: float
    speed: float


def build_scenario(net: RoadNetwork, n_main: int, n_ramp: int, seed_rng,
                   min_gap: float = 30.0, n_route_samples: int = 50,
                   spawns: list[tuple[int, float, float]] | None = None,
                   ) -> tuple[list[Spawn], dict[int, Route]]:
    """Deterministic spawn list and routes for a Conflicting network.

    Explicit spawns are (lane, station, speed) triples; otherwise placements
    are drawn from seed_rng. Agent ids are assigned in (lane, station) order.
    """
    if classify_merge_condition(net) != CONFLICTING:
        raise ScenarioConfigError(
            "only Conflicting networks are simulated: "
            f"main+ramp={net.main_lanes + net.ramp_lanes} <= post={net.post_merge_lanes}")

    placements: list[tuple[int, float, float]] = []
    if spawns is not None:
        placements = [tuple(s) for s in spawns]
    else:
        for lane in range(net.main_lanes):
            per_lane = n_main // net.main_lanes + (1 if lane < n_main % net.main_lanes else 0)
            station = float(seed_rng.uniform(0.0, 40.0))
            for _ in range(per_lane):
                speed = float(seed_rng.uniform(7.0, 10.0))
                placements.append((lane, station, speed))
                station += float(seed_rng.uniform(min_gap, min_gap + 40.0))
        station = float(seed_rng.uniform(net.ramp_start, net.ramp_start + 30.0))
        for _ in range(n_ramp):
            speed = float(seed_rng.uniform(7.0, 9.0))
            placements.append((net.ramp_lane_index, station, speed))
            station += float(seed_rng.uniform(min_gap + 10.0, min_gap + 50.0))

    by_lane: dict[int, list[float]] = {}
    for lane, station, _ in placements:
        if not 0 <= lane <= net.ramp_lane_index:
            raise ScenarioConfigError(f"spawn references unknown lane {lane}")
        for other in by_lane.setdefault(lane, []):
            if abs(other - station) < 1e-9:
                raise ScenarioConfigError(
                    f"two spawns at identical station {station:.2f} in lane {lane}")
        by_lane[lane].append(station)

    placements.sort(key=lambda p: (p[0], p[1]))
    spawn_list = [Spawn(agent_id=i, lane=lane, station=station, speed=speed)
                  for i, (lane, station, speed) in enumerate(placements)]
    routes = {s.agent_id: build_route(net, s.lane, n_route_samples) for s in spawn_list}
    return spawn_list, routes

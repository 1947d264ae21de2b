"""Hierarchical planning: meta-actions, flat-space trajectory refinement,
trajectory word-tokenization, LM loss, the rule-based baseline policy, and the
external text-protocol reasoner client."""

from __future__ import annotations

import bisect
import enum
import math
import socket
import subprocess
from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING, Callable, Optional, Sequence

import numpy as np

from . import dynamics, metrics
from .dynamics import (ControlInput, FlatRecovery, FlatSample, VehicleParams,
                       VehicleState)
from .scenario import RoadNetwork

if TYPE_CHECKING:
    from .communication import Message
    from .simulation import HistoryBuffer, Observation


class MetaAction(enum.Enum):
    LEFT = "LEFT"
    RIGHT = "RIGHT"
    IDLE = "IDLE"
    ACC = "ACC"
    DEC = "DEC"


class InfeasibleManeuverError(ValueError):
    """Recovered steering or steering rate exceeds the actuator limits."""


class TokenParseError(ValueError):
    def __init__(self, msg: str, waypoint: int):
        super().__init__(f"{msg} at waypoint {waypoint}")
        self.waypoint = waypoint


class TransportError(RuntimeError):
    """External reasoning transport failed (connect, timeout, or protocol)."""


@dataclass(frozen=True)
class Trajectory:
    """Waypoints in flat-output space at uniform dt spacing; first point is
    the pose the plan starts from."""
    points: np.ndarray  # (K, 2)
    dt: float

    def __post_init__(self):
        pts = self.points
        if type(pts) is not np.ndarray or pts.dtype != np.float64:
            pts = np.asarray(pts, dtype=float)
            object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("trajectory points must be (K, 2)")
        if not np.isfinite(pts).all():
            raise ValueError("trajectory contains non-finite coordinates")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def __len__(self) -> int:
        return len(self.points)

    def translated(self, dx: float, dy: float) -> "Trajectory":
        return Trajectory(self.points + np.array([dx, dy]), self.dt)


@dataclass
class Decision:
    meta_action: MetaAction
    trajectory: Trajectory
    rationale: str = ""
    message: Optional["Message"] = None
    fallback: bool = False


# ---------------------------------------------------------------------------
# Trajectory word-tokenization

VOCABULARY: tuple[str, ...] = tuple("0123456789-.,;")
_VOCAB_INDEX = {c: i for i, c in enumerate(VOCABULARY)}


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]

    def __post_init__(self):
        for t in self.tokens:
            if t not in _VOCAB_INDEX:
                raise ValueError(f"token {t!r} outside the vocabulary")

    def text(self) -> str:
        return "".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


def _trusted_trajectory(points: np.ndarray, dt: float) -> Trajectory:
    """Wrap a freshly computed float64 array without re-validating it; only
    for the per-tick planners, where validation cost is measurable."""
    traj = object.__new__(Trajectory)
    object.__setattr__(traj, "points", points)
    object.__setattr__(traj, "dt", dt)
    return traj


def trajectory_text(traj: Trajectory) -> str:
    """Waypoints as 2-decimal fixed point, "x,y;" per waypoint."""
    pts = traj.points
    if len(pts) == 0:
        return ""
    flat = pts.ravel()
    if not np.isfinite(flat).all():
        raise ValueError("non-finite coordinate")
    if np.abs(flat).max() > 10_000:
        raise ValueError("coordinate outside +-10000 m")
    return ("%.2f,%.2f;" * len(pts)) % tuple(flat.tolist())


def tokenize_trajectory(traj: Trajectory) -> TokenSequence:
    """Render each waypoint as 2-decimal fixed point: "x,y;" per waypoint."""
    return TokenSequence(tuple(trajectory_text(traj)))


def detokenize_trajectory(tokens: TokenSequence, dt: float = 0.1) -> Trajectory:
    """Exact inverse of tokenize_trajectory on its output grammar."""
    text = tokens.text()
    points = []
    if text:
        if not text.endswith(";"):
            raise TokenParseError("missing trailing waypoint separator",
                                  text.count(";"))
        for i, chunk in enumerate(text[:-1].split(";")):
            fields = chunk.split(",")
            if len(fields) != 2:
                raise TokenParseError("expected 'x,y'", i)
            try:
                points.append((float(fields[0]), float(fields[1])))
            except ValueError:
                raise TokenParseError("malformed coordinate", i) from None
    return Trajectory(np.array(points).reshape(-1, 2), dt)


def lm_loss(target: TokenSequence, predicted_probs: np.ndarray) -> float:
    """Summed negative log-likelihood of the target tokens.

    predicted_probs is (len(target), len(VOCABULARY)); each row must be a
    probability distribution. A zero-probability target token yields inf.
    """
    probs = np.asarray(predicted_probs, dtype=float)
    if probs.shape != (len(target), len(VOCABULARY)):
        raise ValueError("one distribution per target position is required")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("each distribution must sum to 1")
    total = 0.0
    for i, tok in enumerate(target.tokens):
        p = probs[i, _VOCAB_INDEX[tok]]
        if p <= 0.0:
            return math.inf
        total -= math.log(p)
    return total


def lm_loss_normalized(target: TokenSequence, predicted_probs: np.ndarray) -> float:
    """Length-normalized variant used inside the reflection loss."""
    if len(target) == 0:
        return 0.0
    loss = lm_loss(target, predicted_probs)
    return loss / len(target)


# ---------------------------------------------------------------------------
# Quintic flat-space refinement


class QuinticPolynomial:
    """Quintic with position/velocity/acceleration boundary conditions."""

    def __init__(self, p0, v0, a0, p1, v1, a1, horizon):
        t = horizon
        self.c0, self.c1, self.c2 = p0, v0, a0 / 2.0
        mat = np.array([
            [t ** 3, t ** 4, t ** 5],
            [3 * t ** 2, 4 * t ** 3, 5 * t ** 4],
            [6 * t, 12 * t ** 2, 20 * t ** 3],
        ])
        rhs = np.array([
            p1 - self.c0 - self.c1 * t - self.c2 * t ** 2,
            v1 - self.c1 - 2 * self.c2 * t,
            a1 - 2 * self.c2,
        ])
        self.c3, self.c4, self.c5 = np.linalg.solve(mat, rhs)

    def value(self, t):
        return (self.c0 + self.c1 * t + self.c2 * t ** 2 + self.c3 * t ** 3
                + self.c4 * t ** 4 + self.c5 * t ** 5)

    def d1(self, t):
        return (self.c1 + 2 * self.c2 * t + 3 * self.c3 * t ** 2
                + 4 * self.c4 * t ** 3 + 5 * self.c5 * t ** 4)

    def d2(self, t):
        return (2 * self.c2 + 6 * self.c3 * t + 12 * self.c4 * t ** 2
                + 20 * self.c5 * t ** 3)

    def d3(self, t):
        return 6 * self.c3 + 24 * self.c4 * t + 60 * self.c5 * t ** 2


def _target_lane(meta: MetaAction, lane: int, net: RoadNetwork) -> int:
    if meta is MetaAction.LEFT:
        target = lane - 1
        if target < 0:
            raise InfeasibleManeuverError("no lane to the left")
        return target
    if meta is MetaAction.RIGHT:
        target = lane + 1
        if target > net.ramp_lane_index:
            raise InfeasibleManeuverError("no lane to the right")
        return target
    return lane


def check_flat_feasibility(qx: QuinticPolynomial, qy: QuinticPolynomial,
                           times: np.ndarray, params: VehicleParams) -> None:
    """Apply flatness recovery at every sample; raise if limits are exceeded."""
    d1x, d1y = qx.d1(times), qy.d1(times)
    d2x, d2y = qx.d2(times), qy.d2(times)
    d3x, d3y = qx.d3(times), qy.d3(times)
    u = np.hypot(d1x, d1y)
    moving = u > dynamics.EPSILON_SPEED  # standstill samples carry no steering demand
    if not np.any(moving):
        return
    r = params.axle_distance
    u = u[moving]
    d1x, d1y = d1x[moving], d1y[moving]
    d2x, d2y = d2x[moving], d2y[moving]
    d3x, d3y = d3x[moving], d3y[moving]
    nu = d1x * d2y - d1y * d2x
    beta = np.arctan(nu * r / u ** 3)
    omega = ((d1x * d3y - d1y * d3x) * u ** 2
             - 3.0 * nu * (d1x * d2x + d1y * d2y)) * u * r / (u ** 6 + nu ** 2 * r ** 2)
    u_peak = float(np.max(u))
    if u_peak > params.u_max + 1e-9:
        raise InfeasibleManeuverError(f"speed {u_peak:.2f} exceeds u_max")
    beta_peak = float(beta[np.argmax(np.abs(beta))])
    if abs(beta_peak) > params.beta_max + 1e-9:
        raise InfeasibleManeuverError(f"steering {beta_peak:.3f} exceeds beta_max")
    omega_peak = float(omega[np.argmax(np.abs(omega))])
    if abs(omega_peak) > params.omega_max + 1e-9:
        raise InfeasibleManeuverError(f"steering rate {omega_peak:.3f} exceeds omega_max")


def refine_to_trajectory(meta: MetaAction, state: VehicleState,
                         control: ControlInput, net: RoadNetwork,
                         horizon: float, params: VehicleParams,
                         dt: float = 0.1, target_speed: float | None = None,
                         target_y: float | None = None) -> Trajectory:
    """Quintic flat-output plan for one meta-action.

    Boundary conditions: current position/velocity with zero acceleration at
    t=0; target lane center, target speed, zero lateral velocity/acceleration
    at t=horizon. Every sample must pass flatness-recovery feasibility.
    """
    lane = net.lane_of_point(state.x, state.y)
    if lane is None:
        lane = min(range(net.lane_count),
                   key=lambda i: abs(state.y - net.lane_center_y(i)))
    target = _target_lane(meta, lane, net)

    u0 = control.u
    if target_speed is None:
        if meta is MetaAction.ACC:
            target_speed = min(u0 + params.a_max * horizon, params.u_max)
        elif meta is MetaAction.DEC:
            target_speed = max(u0 - params.a_max * horizon, 0.0)
        else:
            target_speed = u0
    if target_y is None:
        target_y = net.lane_center_y(target)

    vx0 = u0 * math.cos(state.alpha)
    vy0 = u0 * math.sin(state.alpha)
    x_end = state.x + 0.5 * (u0 + target_speed) * horizon
    qx = QuinticPolynomial(state.x, vx0, 0.0, x_end, target_speed, 0.0, horizon)
    qy = QuinticPolynomial(state.y, vy0, 0.0, target_y, 0.0, 0.0, horizon)

    n = max(int(round(horizon / dt)), 2)
    times = np.arange(n) * dt
    check_flat_feasibility(qx, qy, times, params)
    points = np.column_stack([qx.value(times), qy.value(times)])
    return Trajectory(points, dt)


# ---------------------------------------------------------------------------
# Rule-based baseline policy


@dataclass(frozen=True)
class PolicyConfig:
    gap_min: float = 15.0          # accepted merge gap (m)
    ttc_threshold: float = 5.0     # s
    cruise_speed: float = 11.0     # m/s, kept under the 11.11 m/s limit
    maneuver_window: float = 3.0   # s, lane-change duration
    horizon: float = 3.0           # s, planning horizon
    lane_change_trigger: float = 45.0  # m before the merge point
    follow_gap: float = 12.0       # car-following minimum gap (m)
    min_change_speed: float = 3.0  # m/s needed before starting a lane change


def route_follow_trajectory(route: "Route", state: VehicleState, u: float,
                            speed_meta: MetaAction, horizon: float,
                            params: VehicleParams, dt: float = 0.1) -> Trajectory:
    """Walk the route centerline from the projected ego position.

    The meta-action shapes the speed profile only; the path is the route
    itself, so merging vehicles track the taper instead of a free-form
    lane-change curve.
    """
    center = route.centerline
    s, monotone, xs, ys, s_list, seg_len = route.arc_table()
    px, py = state.x, state.y
    nseg = len(seg_len)
    if monotone:
        # x increases along the route: only segments bracketing the ego's x
        # can carry the closest point
        k = bisect.bisect_left(xs, px)
        lo, hi = max(k - 2, 0), min(k + 1, nseg)
    else:
        lo, hi = 0, nseg
    best_j, best_frac, best_d2 = lo, 0.0, math.inf
    for j in range(lo, hi):
        ax, ay = xs[j], ys[j]
        vx, vy = xs[j + 1] - ax, ys[j + 1] - ay
        length = seg_len[j]
        frac = ((px - ax) * vx + (py - ay) * vy) / (
            length ** 2 if length > 1e-12 else 1.0)
        frac = 0.0 if frac < 0.0 else (1.0 if frac > 1.0 else frac)
        dx, dy = px - (ax + frac * vx), py - (ay + frac * vy)
        d2 = dx * dx + dy * dy
        if d2 < best_d2:
            best_j, best_frac, best_d2 = j, frac, d2
    s0 = s_list[best_j] + best_frac * seg_len[best_j]

    n = max(int(round(horizon / dt)), 2)
    # the profile starts one step in so the first waypoint spacing already
    # reflects the commanded acceleration
    arc = s0 + _profile_distances(speed_meta, u, n, params.a_max,
                                  params.u_max, dt)
    s_end = s_list[-1]
    if arc[-1] > s_end:
        np.minimum(arc, s_end, out=arc)
    # interpolate against only the slice of the arc table the profile spans
    i0 = max(bisect.bisect_left(s_list, arc[0]) - 1, 0)
    i1 = min(bisect.bisect_left(s_list, arc[-1]) + 1, len(s_list) - 1)
    window = slice(i0, i1 + 1)
    sw = s[window]
    pts = np.empty((n, 2))
    pts[:, 0] = np.interp(arc, sw, center[window, 0])
    pts[:, 1] = np.interp(arc, sw, center[window, 1])
    pts[0] = (px, py)
    return _trusted_trajectory(pts, dt)


def _straight_profile(state: VehicleState, u: float, meta: MetaAction,
                      horizon: float, params: VehicleParams,
                      dt: float) -> Trajectory:
    """Speed profile along the current heading; feasible for any start state."""
    n = max(int(round(horizon / dt)), 2)
    dist = _profile_distances(meta, u, n, params.a_max, params.u_max, dt)
    points = np.empty((n, 2))
    if state.alpha == 0.0:
        points[:, 0] = state.x + dist
        points[:, 1] = state.y
    else:
        points[:, 0] = state.x + dist * math.cos(state.alpha)
        points[:, 1] = state.y + dist * math.sin(state.alpha)
    return _trusted_trajectory(points, dt)


@lru_cache(maxsize=4096)
def _profile_distances(meta: MetaAction, u: float, n: int, a_max: float,
                       u_max: float, dt: float) -> np.ndarray:
    """Cumulative distances of a ramped speed profile; cached because cruise
    and car-following cycles revisit the same (meta, speed) pairs every tick."""
    ramp = np.arange(1, n + 1) * a_max * dt
    if meta is MetaAction.ACC:
        speeds = np.minimum(u + ramp, u_max)
    elif meta is MetaAction.DEC:
        speeds = np.maximum(u - ramp, 0.0)
    else:
        speeds = np.full(n, u)
    dist = np.concatenate([[0.0], np.cumsum(speeds[:-1] * dt)])
    dist.flags.writeable = False
    return dist


def _revealed_vehicles(messages: Sequence["Message"]) -> list[tuple[int, float, float, int]]:
    out = []
    for m in messages:
        out.append((m.sender, m.x, m.speed, m.lane))
    return out


def _merge_conflicts(ego_x: float, ego_u: float, net: RoadNetwork,
                     vehicles: list[tuple[int, float, float, int]],
                     cfg: PolicyConfig) -> tuple[float, float]:
    """Projected merge gap and worst TTC against target-lane traffic."""
    target_lane = net.main_lanes - 1
    d_merge = net.merge_point_s - ego_x
    t_arrive = d_merge / ego_u if ego_u > 0.1 else math.inf
    min_gap = math.inf
    min_ttc = math.inf
    for _vid, vx, vu, vlane in vehicles:
        if vlane != target_lane:
            continue
        if vx > net.merge_point_s + cfg.gap_min:
            continue  # already past the merge zone
        if math.isfinite(t_arrive):
            gap = abs((vx + vu * t_arrive) - net.merge_point_s)
            min_gap = min(min_gap, gap)
        d = abs(vx - ego_x)
        rear_u, lead_u = (ego_u, vu) if ego_x <= vx else (vu, ego_u)
        min_ttc = min(min_ttc, metrics.ttc(d, rear_u, lead_u))
    return min_gap, min_ttc


def _lead_vehicle(ego_x: float, lanes: set[int] | int,
                  vehicles: list[tuple[int, float, float, int]]) -> tuple[float, float] | None:
    """(gap, speed) of the nearest vehicle ahead in the given lane(s)."""
    if isinstance(lanes, int):
        lanes = {lanes}
    best = None
    for _vid, vx, vu, vlane in vehicles:
        if vlane not in lanes or vx <= ego_x:
            continue
        gap = vx - ego_x
        if best is None or gap < best[0]:
            best = (gap, vu)
    return best


def _needs_braking(lead: tuple[float, float] | None, u: float,
                   params: VehicleParams, cfg: PolicyConfig) -> bool:
    """Headway too small to stop behind the lead even under full braking."""
    if lead is None:
        return False
    gap, u_lead = lead
    surplus = max(0.0, (u * u - u_lead * u_lead) / (2.0 * params.a_max))
    return (gap < cfg.follow_gap + surplus
            or metrics.ttc(gap, u, u_lead) <= cfg.ttc_threshold)


def baseline_decide(obs: "Observation", messages: Sequence["Message"],
                    history: "HistoryBuffer", net: RoadNetwork,
                    params: VehicleParams, cfg: PolicyConfig = PolicyConfig(),
                    dt: float = 0.1, hazard: str | None = None,
                    route: "Route | None" = None) -> Decision:
    """Deterministic gap-acceptance policy.

    On the ramp: accelerate when the projected merge gap and every conflict
    TTC are acceptable, change left close to the merge point, otherwise
    decelerate. On the main road: yield to committed merge messages that
    predict a conflict, follow the lead vehicle, else hold speed. The hazard
    argument forces the conservative branch when re-deciding for reflection.
    """
    state, u = obs.state, obs.speed
    lane = obs.lane_index
    vehicles = [(n.id, state.x + n.dx, n.speed, n.lane) for n in obs.neighbors]
    for rv in _revealed_vehicles(messages):
        if rv[0] != obs.ego_id and all(rv[0] != v[0] for v in vehicles):
            vehicles.append(rv)

    def refine(meta, rationale, target_speed=None, target_y=None):
        # straight-and-centered states need no quintic or feasibility check
        if (target_speed is None and target_y is None
                and meta not in (MetaAction.LEFT, MetaAction.RIGHT)
                and abs(state.alpha) < 1e-3 and abs(state.beta) < 1e-3
                and abs(state.y - lane_center) < 1e-2):
            return Decision(meta, _straight_profile(state, u, meta,
                                                    cfg.horizon, params, dt),
                            rationale)
        try:
            traj = refine_to_trajectory(meta, state, ControlInput(u, 0.0), net,
                                        cfg.horizon, params, dt,
                                        target_speed=target_speed,
                                        target_y=target_y)
        except InfeasibleManeuverError:
            traj = _straight_profile(state, u, meta, cfg.horizon, params, dt)
        return Decision(meta, traj, rationale)

    def speed_capped(meta):
        # one accelerated step must not carry the speed past the cruise target
        if meta is MetaAction.ACC and u + params.a_max * dt > cfg.cruise_speed:
            meta = MetaAction.IDLE
        # tracking overshoot (e.g. catching up along the merge taper) must be
        # bled off rather than held indefinitely
        if meta is MetaAction.IDLE and u > cfg.cruise_speed + 0.2:
            return MetaAction.DEC
        if meta is MetaAction.DEC and u <= 0.0:
            return MetaAction.IDLE
        return meta

    on_ramp = lane == net.ramp_lane_index
    lane_center = net.lane_center_y(lane)
    off_center = abs(state.y - lane_center) > 0.3

    if hazard in ("Collision", "RouteDeviation"):
        meta = speed_capped(MetaAction.DEC)
        if on_ramp and route is not None:
            traj = route_follow_trajectory(route, state, u, MetaAction.DEC,
                                           cfg.horizon, params, dt)
            return Decision(meta, traj, f"hazard {hazard}: slowing on route")
        return refine(meta, f"hazard {hazard}: yield and realign",
                      target_y=lane_center)

    if off_center and not on_ramp:
        # finish converging onto the lane center before fresh maneuvers
        return refine(MetaAction.IDLE, "realigning with lane center")

    if on_ramp and route is not None:
        gap, worst_ttc = _merge_conflicts(state.x, u, net, vehicles, cfg)
        clear = gap > cfg.gap_min and worst_ttc > cfg.ttc_threshold
        # near the merge the target main lane's traffic becomes lead traffic
        lead_lanes = {lane}
        if net.merge_point_s - state.x <= cfg.lane_change_trigger:
            lead_lanes.add(net.main_lanes - 1)
        lead = _lead_vehicle(state.x, lead_lanes, vehicles)
        pressured = _needs_braking(lead, u, params, cfg)

        def follow(meta, speed_meta, rationale):
            traj = route_follow_trajectory(route, state, u, speed_meta,
                                           cfg.horizon, params, dt)
            return Decision(meta, traj, rationale)

        if state.x >= net.merge_point_s - net.taper_length:
            # committed to the taper: the route handles the lateral motion and
            # only a lead vehicle ahead modulates speed; traffic approaching
            # from behind is expected to yield
            if pressured:
                return follow(MetaAction.LEFT, MetaAction.DEC,
                              f"merging along the taper behind a lead at {lead[0]:.1f} m")
            speed_meta = speed_capped(MetaAction.ACC)
            return follow(MetaAction.LEFT, speed_meta, "merging along the taper")
        if pressured:
            meta = speed_capped(MetaAction.DEC)
            return follow(meta, meta, f"following ramp lead at {lead[0]:.1f} m")
        if state.x < net.collab_start:
            # gap acceptance only applies inside the collaborative area;
            # upstream of it just keep pace with the ramp
            meta = speed_capped(MetaAction.ACC)
            return follow(meta, meta, "approaching the collaborative area")
        if clear:
            meta = speed_capped(MetaAction.ACC)
            return follow(meta, meta,
                          f"gap {gap:.1f} m > {cfg.gap_min}, TTC clear: proceed")
        meta = speed_capped(MetaAction.DEC)
        return follow(meta, meta,
                      f"gap {gap:.1f} m or TTC {worst_ttc:.1f} s unacceptable: yield")

    if on_ramp:
        # no route supplied: conservative quintic handling only
        if off_center:
            traj = refine_to_trajectory(
                MetaAction.LEFT, state, ControlInput(u, 0.0), net,
                cfg.maneuver_window, params, dt)
            return Decision(MetaAction.LEFT, traj, "continuing merge maneuver")
        gap, worst_ttc = _merge_conflicts(state.x, u, net, vehicles, cfg)
        clear = gap > cfg.gap_min and worst_ttc > cfg.ttc_threshold
        if clear and net.merge_point_s - state.x <= cfg.lane_change_trigger \
                and u >= cfg.min_change_speed:
            try:
                traj = refine_to_trajectory(
                    MetaAction.LEFT, state, ControlInput(u, 0.0), net,
                    cfg.maneuver_window, params, dt)
                return Decision(MetaAction.LEFT, traj,
                                f"merge gap {gap:.1f} m, TTC {worst_ttc:.1f} s: merging")
            except InfeasibleManeuverError:
                return refine(speed_capped(MetaAction.DEC), "merge maneuver infeasible")
        if clear:
            meta = speed_capped(MetaAction.ACC)
            return refine(meta, f"gap {gap:.1f} m > {cfg.gap_min}, TTC clear: proceed")
        meta = speed_capped(MetaAction.DEC)
        return refine(meta, f"gap {gap:.1f} m or TTC {worst_ttc:.1f} s unacceptable: yield")

    # main-road vehicle; in the rightmost main lane, ramp vehicles already on
    # the taper count as leads since the corridors are converging
    if lane == net.main_lanes - 1:
        taper_start = net.merge_point_s - net.taper_length
        candidates = [v for v in vehicles
                      if v[3] != net.ramp_lane_index or v[1] >= taper_start]
        lead = _lead_vehicle(state.x, {lane, net.ramp_lane_index}, candidates)
    else:
        lead = _lead_vehicle(state.x, lane, vehicles)
    if _needs_braking(lead, u, params, cfg):
        meta = speed_capped(MetaAction.DEC)
        return refine(meta, f"following lead at {lead[0]:.1f} m")
    if lane == net.main_lanes - 1 and state.x < net.merge_point_s:
        for m in messages:
            if m.lane != net.ramp_lane_index:
                continue
            if m.x <= state.x:
                continue  # senders behind the ego merge behind it
            if m.committed_action not in (MetaAction.ACC, MetaAction.LEFT, MetaAction.IDLE):
                continue
            t_sender = m.dist_to_merge / m.speed if m.speed > 0.1 else math.inf
            if not math.isfinite(t_sender):
                continue
            ego_at_sender_arrival = state.x + u * t_sender
            if abs(ego_at_sender_arrival - net.merge_point_s) < cfg.gap_min:
                meta = speed_capped(MetaAction.DEC)
                return refine(meta, f"yielding to committed merge from agent {m.sender}")
    if hazard == "LowEfficiency" or (u < cfg.cruise_speed - 0.5 and lead is None):
        return refine(speed_capped(MetaAction.ACC), "clear road: recover cruise speed")
    meta = speed_capped(MetaAction.IDLE)
    if meta is MetaAction.DEC:
        return refine(meta, "over cruise speed: slowing")
    return refine(MetaAction.IDLE, "holding speed")


# ---------------------------------------------------------------------------
# External reasoner protocol

RESPONSE_ACTIONS = {a.value: a for a in MetaAction}
PROTOCOL_END = "END"


def build_request_doc(scene_text: str, obs: "Observation",
                      messages: Sequence["Message"],
                      history: "HistoryBuffer") -> str:
    """Single-document request with labeled sections."""
    lines = ["SCENE", scene_text.rstrip("\n"), "", "EGO",
             (f"x={obs.state.x:.2f} y={obs.state.y:.2f} "
              f"heading={obs.state.alpha:.3f} speed={obs.speed:.2f} "
              f"lane={obs.lane_index} dist_to_merge={obs.dist_to_merge:.2f}"),
             "", "NEIGHBORS"]
    if obs.neighbors:
        for n in obs.neighbors:
            lines.append(f"id={n.id} dx={n.dx:.2f} dy={n.dy:.2f} "
                         f"speed={n.speed:.2f} lane={n.lane}")
    else:
        lines.append("none")
    lines += ["", "MESSAGES"]
    if messages:
        for m in messages:
            lines.append(m.summary())
    else:
        lines.append("none")
    lines += ["", "HISTORY"]
    items = list(history.items()) if history is not None else []
    if items:
        for o, a in items[-5:]:
            lines.append(f"t={o.time} action={a.value}")
    else:
        lines.append("none")
    lines += ["", "INSTRUCTIONS",
              "Reply with one meta-action on the first line: "
              "LEFT, RIGHT, IDLE, ACC, or DEC.",
              "Optionally give an ego-relative tokenized trajectory on the "
              "second line (x,y; pairs, 2 decimals) and rationale after."]
    return "\n".join(lines) + "\n"


def parse_response(text: str) -> tuple[MetaAction, TokenSequence | None, str]:
    lines = text.splitlines()
    if not lines or lines[0].strip().upper() not in RESPONSE_ACTIONS:
        raise TransportError(f"illegal meta-action line: {lines[0]!r}"
                             if lines else "empty response")
    meta = RESPONSE_ACTIONS[lines[0].strip().upper()]
    tokens = None
    rest = 1
    if len(lines) > 1 and lines[1].strip() and all(c in _VOCAB_INDEX for c in lines[1].strip()):
        tokens = TokenSequence(tuple(lines[1].strip()))
        rest = 2
    rationale = "\n".join(lines[rest:]).strip()
    return meta, tokens, rationale


class CallableTransport:
    """Wraps a plain function for in-process reasoners and tests."""

    def __init__(self, fn: Callable[[str], str]):
        self.fn = fn

    def request(self, doc: str) -> str:
        try:
            return self.fn(doc)
        except Exception as exc:  # noqa: BLE001 - surfaced as transport failure
            raise TransportError(str(exc)) from exc


class TcpTransport:
    """One request/response exchange per connection, END-line framed."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.host, self.port, self.timeout = host, port, timeout

    def request(self, doc: str) -> str:
        try:
            with socket.create_connection((self.host, self.port),
                                          timeout=self.timeout) as sock:
                sock.sendall(doc.encode("utf-8") + f"{PROTOCOL_END}\n".encode())
                chunks = []
                while True:
                    data = sock.recv(4096)
                    if not data:
                        break
                    chunks.append(data)
                    if f"\n{PROTOCOL_END}".encode() in b"".join(chunks):
                        break
            text = b"".join(chunks).decode("utf-8")
        except OSError as exc:
            raise TransportError(f"tcp transport failed: {exc}") from exc
        end = text.find(f"\n{PROTOCOL_END}")
        return text[:end] if end >= 0 else text


class PipeTransport:
    """Spawns a subprocess per request and exchanges the framed document."""

    def __init__(self, argv: Sequence[str], timeout: float = 5.0):
        self.argv, self.timeout = list(argv), timeout

    def request(self, doc: str) -> str:
        try:
            proc = subprocess.run(
                self.argv, input=doc + PROTOCOL_END + "\n",
                capture_output=True, text=True, timeout=self.timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise TransportError(f"pipe transport failed: {exc}") from exc
        text = proc.stdout
        end = text.find(f"\n{PROTOCOL_END}")
        return text[:end] if end >= 0 else text


def external_decide(obs: "Observation", messages: Sequence["Message"],
                    history: "HistoryBuffer", transport, net: RoadNetwork,
                    params: VehicleParams, scene_text: str = "",
                    cfg: PolicyConfig = PolicyConfig(), dt: float = 0.1,
                    route: "Route | None" = None) -> Decision:
    """Query the external reasoner; fall back to the baseline on any failure.

    Supplied trajectories are ego-relative at decision time; they are shifted
    into world coordinates and must pass flatness feasibility.
    """
    doc = build_request_doc(scene_text, obs, messages, history)
    try:
        response = transport.request(doc)
        meta, tokens, rationale = parse_response(response)
        if tokens is not None:
            rel = detokenize_trajectory(tokens, dt)
            if len(rel) < 2:
                raise TransportError("trajectory needs at least two waypoints")
            traj = rel.translated(obs.state.x, obs.state.y)
            _check_waypoint_feasibility(traj, params)
        else:
            traj = refine_to_trajectory(meta, obs.state,
                                        ControlInput(obs.speed, 0.0), net,
                                        cfg.horizon, params, dt)
        return Decision(meta, traj, rationale)
    except (TransportError, TokenParseError, InfeasibleManeuverError,
            ValueError) as exc:
        fb = baseline_decide(obs, messages, history, net, params, cfg, dt,
                             route=route)
        fb.fallback = True
        fb.rationale = f"fallback ({exc}); {fb.rationale}"
        return fb


def _check_waypoint_feasibility(traj: Trajectory, params: VehicleParams) -> None:
    """Finite-difference flatness feasibility for externally supplied waypoints."""
    pts, dt = traj.points, traj.dt
    if len(pts) < 4:
        return
    d1 = np.gradient(pts, dt, axis=0)
    d2 = np.gradient(d1, dt, axis=0)
    d3 = np.gradient(d2, dt, axis=0)
    for i in range(1, len(pts) - 1):
        speed = math.hypot(*d1[i])
        if speed <= dynamics.EPSILON_SPEED:
            continue
        rec = dynamics.flat_recover(
            FlatSample(tuple(pts[i]), tuple(d1[i]), tuple(d2[i]), tuple(d3[i])),
            params)
        if (rec.u > params.u_max + 1e-6 or abs(rec.beta) > params.beta_max + 1e-6
                or abs(rec.omega) > params.omega_max + 1e-6):
            raise InfeasibleManeuverError(f"waypoint {i} violates actuator limits")

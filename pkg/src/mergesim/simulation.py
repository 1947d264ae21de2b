"""DPOMDP-Com environment: joint state, partial observations, synchronized
meta-action execution, events, and step rewards."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import dynamics, metrics
from .dynamics import ControlInput, VehicleParams, VehicleState
from .metrics import ComfortLimits, ScoreWeights
from .planning import Decision, MetaAction, Trajectory
from .scenario import RoadNetwork, Route, Spawn, classify_merge_condition

SPEED_LIMIT = 11.11  # m/s

EV_COLLISION = "Collision"
EV_OFF_ROAD = "OffRoad"
EV_MERGE_COMPLETED = "MergeCompleted"
EV_SPEED_VIOLATION = "SpeedViolation"

_HEADING_GAIN = 2.0      # P gain steering the heading toward the aimed waypoint
_LOOKAHEAD_STEPS = 10    # waypoints ahead used as the steering aim point
_HISTORY_SAMPLES = 6     # post-step samples kept for accel/jerk estimation


class UnknownAgentError(KeyError):
    pass


class NeighborInfo(NamedTuple):
    id: int
    dx: float    # relative position, world-aligned axes (m)
    dy: float
    speed: float
    lane: int


class Observation(NamedTuple):
    ego_id: int
    state: VehicleState
    speed: float
    lane_index: int
    lane_count: int
    dist_to_merge: float
    neighbors: tuple[NeighborInfo, ...]
    time: int


class HistoryBuffer:
    """Bounded chronological (observation, action) history for one agent."""

    def __init__(self, maxlen: int = 50):
        self._items: deque[tuple[Observation, MetaAction]] = deque(maxlen=maxlen)

    def push(self, obs: Observation, action: MetaAction) -> None:
        self._items.append((obs, action))

    def items(self) -> list[tuple[Observation, MetaAction]]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)


@dataclass(frozen=True)
class Event:
    kind: str
    time: int
    agents: tuple[int, ...]


@dataclass
class AgentRecord:
    agent_id: int
    state: VehicleState
    speed: float
    route: Route
    origin_lane: int
    lane: int
    alive: bool = True
    merged: bool = False
    terminal: str | None = None
    speed_hist: deque = field(default_factory=lambda: deque(maxlen=_HISTORY_SAMPLES))
    y_hist: deque = field(default_factory=lambda: deque(maxlen=_HISTORY_SAMPLES))


class SimState:
    """Joint simulation state owned by the stepping loop."""

    def __init__(self, net: RoadNetwork, params: VehicleParams,
                 spawns: Sequence[Spawn], routes: dict[int, Route],
                 dt: float = 0.1, sensing_radius: float = 100.0,
                 speed_limit: float = SPEED_LIMIT, eps_col: float = 0.05,
                 weights: ScoreWeights = ScoreWeights(),
                 comfort_limits: ComfortLimits = ComfortLimits(),
                 ttc_threshold: float = 5.0, noise_std: float = 0.0,
                 noise_seed: int = 0, collision_penalty: float = 1.0):
        self.net = net
        self.params = params
        self.dt = dt
        self.t = 0
        self.sensing_radius = sensing_radius
        self.speed_limit = speed_limit
        self.eps_col = eps_col
        self.weights = weights
        self.comfort_limits = comfort_limits
        self.ttc_threshold = ttc_threshold
        self.noise_std = noise_std
        self.collision_penalty = collision_penalty
        self._noise_rng = np.random.default_rng([noise_seed, 0x0B5E])
        self.merge_condition = classify_merge_condition(net)
        self.last_scores: dict[int, tuple[float, float, float]] = {}
        self.collided_this_tick: set[int] = set()

        self.agents: dict[int, AgentRecord] = {}
        for s in spawns:
            state = VehicleState(s.station, net.lane_center_y(s.lane), 0.0, 0.0)
            rec = AgentRecord(agent_id=s.agent_id, state=state, speed=s.speed,
                              route=routes[s.agent_id], origin_lane=s.lane,
                              lane=s.lane)
            rec.speed_hist.append(s.speed)
            rec.y_hist.append(state.y)
            self.agents[s.agent_id] = rec

    def alive_ids(self) -> list[int]:
        # agent records are keyed in ascending id order at construction
        return [a for a, r in self.agents.items() if r.alive]


def observe(sim: SimState, agent_id: int) -> Observation:
    """Deterministic partial view of the joint state for one agent."""
    if agent_id not in sim.agents:
        raise UnknownAgentError(agent_id)
    ego = sim.agents[agent_id]
    ranked = []
    # agent records are inserted in ascending id order at build time, which
    # keeps the noise-draw order deterministic without re-sorting
    for oid, other in sim.agents.items():
        if oid == agent_id or not other.alive:
            continue
        dx = other.state.x - ego.state.x
        dy = other.state.y - ego.state.y
        if sim.noise_std > 0:
            dx += float(sim._noise_rng.normal(0.0, sim.noise_std))
            dy += float(sim._noise_rng.normal(0.0, sim.noise_std))
        d = math.hypot(dx, dy)
        if d <= sim.sensing_radius:
            ranked.append((d, oid, NeighborInfo(oid, dx, dy, other.speed,
                                                other.lane)))
    ranked.sort()
    neighbors = [t[2] for t in ranked]
    return Observation(
        ego_id=agent_id, state=ego.state, speed=ego.speed,
        lane_index=ego.lane, lane_count=sim.net.lane_count,
        dist_to_merge=sim.net.merge_point_s - ego.state.x,
        neighbors=tuple(neighbors), time=sim.t)


def _track_control(rec: AgentRecord, decision: Decision, sim: SimState
                   ) -> tuple[ControlInput, float]:
    """Control tracking the trajectory's next waypoint under the meta-action's
    speed rule: Acc/Dec apply +-a_max*dt clipped to [0, u_max], Idle holds,
    lane changes take their speed from the waypoint spacing."""
    params, dt = sim.params, sim.dt
    meta = decision.meta_action
    u = rec.speed
    if meta is MetaAction.ACC:
        u_cmd = min(u + params.a_max * dt, params.u_max)
    elif meta is MetaAction.DEC:
        u_cmd = max(u - params.a_max * dt, 0.0)
    elif meta in (MetaAction.LEFT, MetaAction.RIGHT):
        pts = decision.trajectory.points
        # the spacing between the second and third waypoints is free of the
        # ego's current cross-track error
        if len(pts) > 2:
            step_len = float(np.hypot(*(pts[2] - pts[1])))
        elif len(pts) > 1:
            step_len = float(np.hypot(*(pts[1] - pts[0])))
        else:
            step_len = u * dt
        u_cmd = min(step_len / dt, params.u_max)
        # waypoint spacing can demand a speed jump; honor the accel limit
        u_cmd = max(u - params.a_max * dt, min(u_cmd, u + params.a_max * dt))
    else:
        u_cmd = u

    pts = decision.trajectory.points
    target = pts[min(_LOOKAHEAD_STEPS, len(pts) - 1)]
    dx = target[0] - rec.state.x
    dy = target[1] - rec.state.y
    if math.hypot(dx, dy) > 1e-9 and u_cmd > 0.05:
        heading_des = math.atan2(dy, dx)
    else:
        heading_des = rec.state.alpha
    err = dynamics.normalize_angle(heading_des - rec.state.alpha)
    beta_des = max(-params.beta_max, min(params.beta_max, _HEADING_GAIN * err))
    omega = max(-params.omega_max,
                min(params.omega_max, (beta_des - rec.state.beta) / dt))
    return ControlInput(u_cmd, omega), u_cmd


def _conflict_ttc(sim: SimState, rec: AgentRecord,
                  others: list[AgentRecord]) -> float:
    """Min TTC to traffic ahead in the ego lane; ramp vehicles approaching the
    merge also consider the target main lane."""
    lanes = {rec.lane}
    if rec.lane == sim.net.ramp_lane_index:
        lanes.add(sim.net.main_lanes - 1)
    min_ttc = math.inf
    for other in others:
        if other.lane not in lanes or other.state.x <= rec.state.x:
            continue
        d = other.state.x - rec.state.x
        min_ttc = min(min_ttc, metrics.ttc(d, rec.speed, other.speed))
    return min_ttc


def score_agent_step(speed_hist: Sequence[float], y_hist: Sequence[float],
                     ego_x: float, ego_speed: float, ego_lane: int,
                     others: Sequence[tuple[float, float, int]],
                     net: RoadNetwork, dt: float,
                     comfort_limits: ComfortLimits, speed_limit: float,
                     ttc_threshold: float) -> tuple[float, float, float]:
    """Per-tick (CS, ES, SS) from post-step state; shared by the live loop and
    trace replay so reported metrics have a single implementation.

    others: (station, speed, lane) of every other alive vehicle this tick.
    """
    u = list(speed_hist)
    y = list(y_hist)
    # peak |accel| and |jerk| from forward differences, without materializing
    # the intermediate lists (this loop runs once per agent per tick)
    pk_al = pk_jl = pk_aa = pk_ja = 0.0
    a_prev = aa_prev = v_prev = None
    for i in range(1, len(u)):
        a = (u[i] - u[i - 1]) / dt
        if abs(a) > pk_al:
            pk_al = abs(a)
        if a_prev is not None:
            j = (a - a_prev) / dt
            if abs(j) > pk_jl:
                pk_jl = abs(j)
        a_prev = a
        v = (y[i] - y[i - 1]) / dt
        if v_prev is not None:
            aa = (v - v_prev) / dt
            if abs(aa) > pk_aa:
                pk_aa = abs(aa)
            if aa_prev is not None:
                ja = (aa - aa_prev) / dt
                if abs(ja) > pk_ja:
                    pk_ja = abs(ja)
            aa_prev = aa
        v_prev = v
    cs = metrics.comfort_score_from_peaks(pk_al, pk_aa, pk_jl, pk_ja,
                                          comfort_limits)

    speeds = [s for _, s, _ in others]
    v_avg = sum(speeds) / len(speeds) if speeds else speed_limit
    if v_avg <= 0.0:
        # fully stopped surrounding traffic is a degenerate reference
        v_avg = speed_limit
    es = metrics.efficiency_score(ego_speed, v_avg, speed_limit)

    lanes = {ego_lane}
    if ego_lane == net.ramp_lane_index:
        lanes.add(net.main_lanes - 1)
    min_ttc = math.inf
    for station, speed, lane in others:
        if lane in lanes and station > ego_x and ego_speed > speed:
            t = (station - ego_x) / (ego_speed - speed)
            if t < min_ttc:
                min_ttc = t
    ss = metrics.safety_score(min_ttc, ttc_threshold)
    return cs, es, ss


def advance(sim: SimState, decisions: dict[int, Decision]
            ) -> tuple[SimState, list[Event]]:
    """Execute one synchronized tick; all new states derive from the old joint
    state, applied in ascending agent-id order."""
    alive = sim.alive_ids()
    missing = [a for a in alive if a not in decisions]
    if missing:
        raise ValueError(f"missing decisions for agents {missing}")
    for aid in alive:
        traj = decisions[aid].trajectory
        if abs(traj.dt - sim.dt) > 1e-12:
            raise ValueError(
                f"trajectory dt {traj.dt} mismatched with simulation dt {sim.dt}")

    events: list[Event] = []
    sim.t += 1
    sim.collided_this_tick.clear()

    new_states: dict[int, tuple[VehicleState, float]] = {}
    for aid in alive:
        rec = sim.agents[aid]
        control, u_cmd = _track_control(rec, decisions[aid], sim)
        new_states[aid] = (dynamics.step(rec.state, control, sim.params, sim.dt),
                           u_cmd)

    for aid in alive:
        rec = sim.agents[aid]
        rec.state, rec.speed = new_states[aid]
        rec.speed_hist.append(rec.speed)
        rec.y_hist.append(rec.state.y)
        if rec.speed > sim.speed_limit:
            events.append(Event(EV_SPEED_VIOLATION, sim.t, (aid,)))

        if rec.state.x > sim.net.road_length:
            # reached the downstream end of the modeled road: leaves the scene
            rec.alive = False
            rec.terminal = "RoadEnd"
            continue
        lane = sim.net.lane_of_point(rec.state.x, rec.state.y, tol=0.6)
        if lane is None:
            events.append(Event(EV_OFF_ROAD, sim.t, (aid,)))
            rec.alive = False
            rec.terminal = EV_OFF_ROAD
            continue
        # lane attribution flips only once the vehicle has settled near the
        # new lane center, so an in-progress change keeps its source lane
        if abs(rec.state.y - sim.net.lane_center_y(lane)) < 0.5:
            rec.lane = lane
        if (rec.origin_lane == sim.net.ramp_lane_index and not rec.merged
                and lane < sim.net.main_lanes
                and abs(rec.state.y - sim.net.lane_center_y(lane)) < 0.5):
            rec.merged = True
            rec.terminal = EV_MERGE_COMPLETED
            events.append(Event(EV_MERGE_COMPLETED, sim.t, (aid,)))

    # pairwise collision check on the post-step states
    live = [a for a in alive if sim.agents[a].alive]
    # boxes of diagonal sqrt(l^2+w^2) cannot overlap beyond that center distance
    reach = math.hypot(sim.params.length, sim.params.width)
    from .reflection import obb_iou, vehicle_box
    for i, a in enumerate(live):
        for b in live[i + 1:]:
            ra, rb = sim.agents[a], sim.agents[b]
            if math.hypot(ra.state.x - rb.state.x,
                          ra.state.y - rb.state.y) > reach:
                continue
            iou = obb_iou(vehicle_box(ra.state, sim.params),
                          vehicle_box(rb.state, sim.params))
            if iou > sim.eps_col:
                events.append(Event(EV_COLLISION, sim.t, (a, b)))
                sim.collided_this_tick.update((a, b))
    for aid in sorted(sim.collided_this_tick):
        rec = sim.agents[aid]
        rec.alive = False
        rec.terminal = EV_COLLISION

    # per-tick scores on the post-step joint state
    still_alive = sim.alive_ids()
    snapshot = [(sim.agents[o].state.x, sim.agents[o].speed,
                 sim.agents[o].lane) for o in still_alive]
    for aid in alive:
        rec = sim.agents[aid]
        others = [t for i, t in zip(still_alive, snapshot) if i != aid]
        sim.last_scores[aid] = score_agent_step(
            rec.speed_hist, rec.y_hist, rec.state.x, rec.speed, rec.lane,
            others, sim.net, sim.dt, sim.comfort_limits, sim.speed_limit,
            sim.ttc_threshold)
    return sim, events


def reward(sim: SimState, agent_id: int) -> float:
    """Step reward: weighted CS/ES/SS minus a collision penalty."""
    if agent_id not in sim.agents:
        raise UnknownAgentError(agent_id)
    cs, es, ss = sim.last_scores.get(agent_id, (1.0, 1.0, 1.0))
    w = sim.weights
    r = w.k1 * cs + w.k2 * es + w.k3 * ss
    if agent_id in sim.collided_this_tick:
        r -= sim.collision_penalty
    return r


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return sum(r * gamma ** t for t, r in enumerate(rewards))

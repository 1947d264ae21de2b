"""Failure detection and reflection-record emission: oriented-box IoU, the four
failure detectors, and the combined cross-entropy + trajectory-MSE loss."""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dynamics
from .dynamics import ControlInput, VehicleParams, VehicleState
from .planning import (Decision, MetaAction, PolicyConfig, Trajectory,
                       baseline_decide, refine_to_trajectory,
                       tokenize_trajectory)
from .scenario import RoadNetwork, Route, nearest_centerline_distance

COLLISION = "Collision"
ROUTE_DEVIATION = "RouteDeviation"
LOW_EFFICIENCY = "LowEfficiency"
LOW_COMFORT = "LowComfort"


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    heading: float
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("box dimensions must be positive")

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


@dataclass(frozen=True)
class Thresholds:
    eps_col: float = 0.05   # IoU
    eps_p: float = 1.0      # m
    eps_e: float = 0.5
    eps_c: float = 0.5
    alpha_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.eps_col < 1.0:
            raise ValueError("eps_col must lie in (0, 1)")
        if min(self.eps_p, self.eps_e, self.eps_c) <= 0 or self.alpha_weight < 0:
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True)
class FailureCase:
    kind: str
    tick: int
    agent: int
    value: float
    threshold: float


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_halfplane(poly: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of poly on the left of directed edge a->b (Sutherland-Hodgman)."""
    out = []
    n = len(poly)
    edge = b - a
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        side_p = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])
        side_q = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0])
        if side_p >= 0:
            out.append(p)
        if (side_p > 0 > side_q) or (side_p < 0 < side_q):
            t = side_p / (side_p - side_q)
            out.append(p + t * (q - p))
    return out


def obb_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection-over-union of two oriented rectangles via polygon clipping."""
    if a == b:
        # clipping a polygon against itself only accumulates roundoff
        return 1.0
    # world-axis projections separate most far pairs without any clipping
    ca, sa = math.cos(a.heading), math.sin(a.heading)
    cb, sb = math.cos(b.heading), math.sin(b.heading)
    if abs(a.cx - b.cx) * 2.0 > (a.length * abs(ca) + a.width * abs(sa)
                                 + b.length * abs(cb) + b.width * abs(sb)):
        return 0.0
    if abs(a.cy - b.cy) * 2.0 > (a.length * abs(sa) + a.width * abs(ca)
                                 + b.length * abs(sb) + b.width * abs(cb)):
        return 0.0
    pa, pb = a.corners(), b.corners()
    poly = [p for p in pa]
    for i in range(4):
        poly = _clip_halfplane(poly, pb[i], pb[(i + 1) % 4])
        if len(poly) < 3:
            return 0.0
    inter = _polygon_area(np.asarray(poly))
    union = a.length * a.width + b.length * b.width - inter
    return inter / union


def vehicle_box(state: VehicleState, params: VehicleParams) -> OrientedBox:
    """Vehicle footprint; the body center sits half a length ahead of the rear axle
    along the heading, minus the rear overhang."""
    offset = params.axle_distance / 2.0
    return OrientedBox(
        cx=state.x + offset * math.cos(state.alpha),
        cy=state.y + offset * math.sin(state.alpha),
        heading=state.alpha, length=params.length, width=params.width)


def _trajectory_headings(points: np.ndarray, fallback: float) -> np.ndarray:
    diffs = np.diff(points, axis=0)
    headings = np.empty(len(points))
    prev = fallback
    for i, d in enumerate(diffs):
        if np.hypot(*d) > 1e-9:
            prev = math.atan2(d[1], d[0])
        headings[i] = prev
    headings[-1] = prev
    return headings


def detect_failures(ego_trajectory: Trajectory, ego_heading: float,
                    neighbors: Sequence[tuple[VehicleState, ControlInput]],
                    route: Route, es: float, cs: float,
                    thresholds: Thresholds, params: VehicleParams,
                    tick: int = 0, agent: int = 0,
                    prefilter_radius: float = 30.0) -> list[FailureCase]:
    """Run the four independent detectors for one agent at one tick.

    Collision uses bicycle-model rollouts of the neighbors under held controls
    against the ego's planned waypoints; route deviation compares every
    waypoint with the sampled route centerline; efficiency and comfort
    compare the supplied step scores with their thresholds.
    """
    failures: list[FailureCase] = []
    pts = ego_trajectory.points
    dt = ego_trajectory.dt
    headings: list[np.ndarray] = []  # filled on first ego box request

    max_iou = 0.0
    ego0 = pts[0]
    n = len(pts)
    # overlap is impossible beyond the box diagonal plus both center offsets
    reach = math.hypot(params.length, params.width) + params.axle_distance
    off = params.axle_distance / 2.0
    half_l, half_w = params.length / 2.0, params.width / 2.0
    ego_boxes: dict[int, OrientedBox] = {}
    ego_geom: list = []  # lazy (headings, box centers, world-axis half-extents)

    def ego_geometry():
        if not ego_geom:
            h = _trajectory_headings(pts, ego_heading)
            ch, sh = np.cos(h), np.sin(h)
            ego_geom.append((
                h,
                pts[:, 0] + off * ch, pts[:, 1] + off * sh,
                half_l * np.abs(ch) + half_w * np.abs(sh),
                half_l * np.abs(sh) + half_w * np.abs(ch)))
        return ego_geom[0]

    def ego_box_at(k: int) -> OrientedBox:
        box = ego_boxes.get(k)
        if box is None:
            h = ego_geometry()[0]
            box = ego_boxes[k] = vehicle_box(
                VehicleState(pts[k][0], pts[k][1], h[k], 0.0), params)
        return box

    for state, control in neighbors:
        if math.hypot(state.x - ego0[0], state.y - ego0[1]) > prefilter_radius:
            continue
        if state.beta == 0.0 and control.omega == 0.0:
            # straight rollout in closed form; exact clipping runs only where
            # the boxes' world-axis projections fail to separate the pair
            _, ecx, ecy, erx, ery = ego_geometry()
            ca, sa = math.cos(state.alpha), math.sin(state.alpha)
            steps = np.arange(n) * (dt * control.u)
            ncx = state.x + off * ca + steps * ca
            ncy = state.y + off * sa + steps * sa
            nrx = half_l * abs(ca) + half_w * abs(sa)
            nry = half_l * abs(sa) + half_w * abs(ca)
            close = np.flatnonzero(
                (np.abs(ecx - ncx) <= erx + nrx)
                & (np.abs(ecy - ncy) <= ery + nry))
            for k in close:
                px = state.x + steps[k] * ca
                py = state.y + steps[k] * sa
                other = VehicleState(px, py, state.alpha, 0.0)
                iou = obb_iou(ego_box_at(k), vehicle_box(other, params))
                if iou > max_iou:
                    max_iou = iou
        else:
            pred = state
            for k in range(n):
                if k > 0:
                    pred = dynamics.step(pred, control, params, dt)
                if math.hypot(pred.x - pts[k][0], pred.y - pts[k][1]) > reach:
                    continue
                iou = obb_iou(ego_box_at(k), vehicle_box(pred, params))
                if iou > max_iou:
                    max_iou = iou
    if max_iou > thresholds.eps_col:
        failures.append(FailureCase(COLLISION, tick, agent, max_iou,
                                    thresholds.eps_col))

    cl = route.centerline
    if len(cl) > 64:
        _, monotone, xs, _, _, _ = route.arc_table()
        if monotone:
            # only centerline samples near the plan's x-span can be nearest
            lo = bisect.bisect_left(xs, float(pts[:, 0].min()) - 50.0)
            hi = bisect.bisect_right(xs, float(pts[:, 0].max()) + 50.0)
            cl = cl[max(lo - 1, 0):hi + 1]
    d2 = ((pts[:, None, :] - cl[None, :, :]) ** 2).sum(axis=-1)
    max_dev = float(np.sqrt(d2.min(axis=1).max()))
    if max_dev > thresholds.eps_p:
        failures.append(FailureCase(ROUTE_DEVIATION, tick, agent, max_dev,
                                    thresholds.eps_p))

    if es < thresholds.eps_e:
        failures.append(FailureCase(LOW_EFFICIENCY, tick, agent, es,
                                    thresholds.eps_e))
    if cs < thresholds.eps_c:
        failures.append(FailureCase(LOW_COMFORT, tick, agent, cs,
                                    thresholds.eps_c))
    return failures


def trajectory_mse(pred: Trajectory, target: Trajectory) -> float:
    """Mean over waypoints of the squared Euclidean waypoint error."""
    if len(pred) != len(target):
        raise ValueError("trajectory length mismatch")
    diff = pred.points - target.points
    return float(np.mean(np.sum(diff * diff, axis=1)))


def reflection_loss(lm_part: float, predicted: Trajectory, target: Trajectory,
                    alpha_weight: float = 1.0) -> float:
    """Length-normalized LM cross-entropy plus weighted waypoint MSE."""
    return lm_part + alpha_weight * trajectory_mse(predicted, target)


@dataclass(frozen=True)
class ReflectionRecord:
    prompt: str
    target_text: str
    target_trajectory: Trajectory
    failure_kind: str
    episode: int
    tick: int

    def to_json(self) -> str:
        return json.dumps({
            "prompt": self.prompt,
            "target_text": self.target_text,
            "target_trajectory": tokenize_trajectory(self.target_trajectory).text(),
            "failure_kind": self.failure_kind,
            "episode": self.episode,
            "tick": self.tick,
        }, sort_keys=True)


_FAILURE_BLURB = {
    COLLISION: "the planned trajectory overlaps a predicted neighbor footprint",
    ROUTE_DEVIATION: "a planned waypoint strays from the route centerline",
    LOW_EFFICIENCY: "the efficiency score fell below its threshold",
    LOW_COMFORT: "the comfort score fell below its threshold",
}


def emit_reflection_record(failure: FailureCase, scene_text: str,
                           decision: Decision, obs, messages, history,
                           net: RoadNetwork, params: VehicleParams,
                           cfg: PolicyConfig = PolicyConfig(), dt: float = 0.1,
                           episode: int = 0, route: Route | None = None
                           ) -> ReflectionRecord:
    """Deterministic prompt/target pair for one detected failure.

    The corrected meta-action comes from re-running the baseline policy with
    the failure's hazard injected as a hard constraint.
    """
    prompt = "\n".join([
        "=== SCENE ===",
        scene_text.rstrip("\n"),
        "=== DECISION ===",
        f"meta-action: {decision.meta_action.value}",
        f"trajectory: {tokenize_trajectory(decision.trajectory).text()}",
        f"rationale: {decision.rationale}",
        "=== FAILURE ===",
        f"kind: {failure.kind}",
        f"detail: {_FAILURE_BLURB[failure.kind]}",
        f"measured: {failure.value:.6f} threshold: {failure.threshold:.6f} "
        f"tick: {failure.tick}",
    ]) + "\n"

    corrected = baseline_decide(obs, messages, history, net, params, cfg, dt,
                                hazard=failure.kind, route=route)
    target_text = "\n".join([
        f"The previous decision failed because {_FAILURE_BLURB[failure.kind]}.",
        f"Corrected meta-action: {corrected.meta_action.value}",
        f"Corrected reasoning: {corrected.rationale}",
    ]) + "\n"

    return ReflectionRecord(
        prompt=prompt, target_text=target_text,
        target_trajectory=corrected.trajectory,
        failure_kind=failure.kind, episode=episode, tick=failure.tick)

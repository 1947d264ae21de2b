"""Turn detected planning failures into training records.

Builds two failing plans by hand — one that strays from the route centerline
and one that runs into a slow lead vehicle's predicted footprint — then runs
the failure detectors and prints the resulting prompt/target reflection
records exactly as the episode loop would emit them.
"""

import numpy as np

from mergesim.dynamics import ControlInput, VehicleParams, VehicleState
from mergesim.planning import Decision, MetaAction, Trajectory
from mergesim.reflection import (Thresholds, detect_failures,
                                 emit_reflection_record)
from mergesim.scenario import RoadNetwork, build_route
from mergesim.simulation import HistoryBuffer, Observation


def straight_plan(x0, y0, speed, n=30, dt=0.1):
    d = np.arange(n) * speed * dt
    return Trajectory(np.column_stack([x0 + d, np.full(n, y0)]), dt)


def main():
    net, params = RoadNetwork(), VehicleParams()
    route = build_route(net, 0, 1201)
    thresholds = Thresholds()

    cases = [
        ("drifting 2 m off the lane-0 centerline",
         straight_plan(50.0, 2.0, 8.0), []),
        ("closing on a 1 m/s lead 10 m ahead",
         straight_plan(50.0, 0.0, 10.0),
         [(VehicleState(60.0, 0.0, 0.0, 0.0), ControlInput(1.0, 0.0))]),
    ]

    for title, plan, neighbors in cases:
        print(f"=== {title} ===")
        failures = detect_failures(plan, 0.0, neighbors, route, es=1.0,
                                   cs=1.0, thresholds=thresholds,
                                   params=params, tick=12)
        for failure in failures:
            print(f"detected {failure.kind}: value={failure.value:.3f} "
                  f"threshold={failure.threshold}")
            obs = Observation(ego_id=0, state=VehicleState(*plan.points[0],
                                                           0.0, 0.0),
                              speed=8.0, lane_index=0,
                              lane_count=net.lane_count, dist_to_merge=250.0,
                              neighbors=(), time=12)
            decision = Decision(MetaAction.IDLE, plan,
                                rationale="holding speed")
            record = emit_reflection_record(failure, "lane 0, clear road\n",
                                            decision, obs, [],
                                            HistoryBuffer(), net, params,
                                            route=route)
            print("--- prompt ---")
            print(record.prompt)
            print("--- target ---")
            print(record.target_text)


if __name__ == "__main__":
    main()

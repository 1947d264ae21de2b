"""Seeded episode orchestration: observe -> plan -> communicate -> execute ->
reflect, with trace emission."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import communication, perception, planning, reflection, scenario, simulation
from .config import RunConfig
from .dynamics import ControlInput
from .planning import (CallableTransport, Decision, PolicyConfig, TcpTransport,
                       baseline_decide, external_decide)
from .simulation import HistoryBuffer, SimState
from .trace import EpisodeTrace, episode_metrics_from_scores, make_header

ENDPOINT_ENV_VAR = "MERGESIM_REASONER_ENDPOINT"

_SPAWN_STREAM = 0x5EED

# tick records keep the executed portion of each plan: one step plus the
# tracking lookahead; the full plan is regenerable by re-running the seed
_TRACE_WAYPOINTS = simulation._LOOKAHEAD_STEPS + 1


@dataclass
class EpisodeResult:
    trace: EpisodeTrace
    events: list[simulation.Event] = field(default_factory=list)
    failures: list[reflection.FailureCase] = field(default_factory=list)
    reflection_records: list[reflection.ReflectionRecord] = field(default_factory=list)
    terminals: dict[int, str] = field(default_factory=dict)
    channel: communication.Channel | None = None
    commitment_violations: int = 0


def _make_transport(cfg: RunConfig, override=None):
    if override is not None:
        return override
    endpoint = os.environ.get(ENDPOINT_ENV_VAR) or cfg.get("policies", "endpoint")
    if not endpoint:
        return CallableTransport(lambda doc: (_ for _ in ()).throw(
            planning.TransportError("no reasoner endpoint configured")))
    host, _, port = endpoint.rpartition(":")
    return TcpTransport(host or "127.0.0.1", int(port),
                        timeout=cfg.get("policies", "timeout"))


def build_sim(cfg: RunConfig, seed: int | None = None
              ) -> tuple[SimState, list[scenario.Spawn]]:
    seed = cfg.get("run", "seed") if seed is None else seed
    net = cfg.network()
    spawn_rng = np.random.default_rng([seed, _SPAWN_STREAM])
    spawns, routes = scenario.build_scenario(
        net, cfg.get("scenario", "n_main_vehicles"),
        cfg.get("scenario", "n_ramp_vehicles"), spawn_rng,
        n_route_samples=cfg.get("scenario", "n_route_samples"),
        spawns=cfg.explicit_spawns())
    sim = SimState(
        net=net, params=cfg.vehicle_params(), spawns=spawns, routes=routes,
        dt=cfg.get("run", "dt"), sensing_radius=cfg.get("run", "sensing_radius"),
        speed_limit=cfg.get("run", "speed_limit"),
        eps_col=cfg.get("thresholds", "eps_col"), weights=cfg.score_weights(),
        comfort_limits=cfg.comfort_limits(),
        ttc_threshold=cfg.get("run", "ttc_threshold"),
        noise_std=cfg.get("run", "noise_std"), noise_seed=seed,
        collision_penalty=cfg.get("run", "collision_penalty"))
    return sim, spawns


def run_episode(cfg: RunConfig, seed: int | None = None, transport=None,
                emit_reflections: bool = True) -> EpisodeResult:
    """Execute one full episode; deterministic for a fixed (config, seed)."""
    seed = cfg.get("run", "seed") if seed is None else seed
    sim, spawns = build_sim(cfg, seed)
    net, params, dt = sim.net, sim.params, sim.dt
    horizon = cfg.get("run", "horizon")
    pol_cfg = cfg.policy_config()
    thresholds = cfg.thresholds()
    channel = communication.Channel(cfg.channel_config())
    histories = {a: HistoryBuffer(cfg.get("run", "history_cap"))
                 for a in sim.agents}
    ext_transport = _make_transport(cfg, transport)
    default_policy = cfg.get("policies", "default")

    initial = {str(a): {"x": r.state.x, "y": r.state.y, "alpha": r.state.alpha,
                        "beta": r.state.beta, "u": r.speed, "lane": r.lane,
                        "origin_lane": r.origin_lane}
               for a, r in sim.agents.items()}
    result = EpisodeResult(trace=EpisodeTrace(header=make_header(cfg, seed, initial)),
                           channel=channel)

    all_scores: list[tuple[float, float, float]] = []
    n_coll = 0
    n_speed = 0
    sid = {a: str(a) for a in sim.agents}

    for _ in range(horizon):
        alive = sim.alive_ids()
        if not alive:
            break
        inbox = {a: channel.collect(a, sim.t) for a in alive}
        observations = {a: simulation.observe(sim, a) for a in alive}

        decisions: dict[int, Decision] = {}
        scene_texts: dict[int, str] = {}

        def scene_text_for(a: int) -> str:
            text = scene_texts.get(a)
            if text is None:
                ranked = perception.rank_critical_objects(observations[a], net)
                text = scene_texts[a] = perception.build_scene_description(
                    observations[a], net, ranked)
            return text

        for a in alive:
            obs = observations[a]
            policy = cfg.agent_policies.get(a, default_policy)
            if policy == "external":
                decisions[a] = external_decide(
                    obs, inbox[a], histories[a], ext_transport, net, params,
                    scene_text=scene_text_for(a), cfg=pol_cfg, dt=dt,
                    route=sim.agents[a].route)
            else:
                decisions[a] = baseline_decide(
                    obs, inbox[a], histories[a], net, params, pol_cfg, dt,
                    route=sim.agents[a].route)
            histories[a].push(obs, decisions[a].meta_action)

        sent_messages: list[communication.Message] = []
        for a in alive:
            rec = sim.agents[a]
            if channel.should_broadcast(rec.state, rec.lane, net):
                msg = communication.encode_message(
                    decisions[a], rec.state, rec.speed, rec.lane, net, a, sim.t,
                    window_s=pol_cfg.maneuver_window)
                decisions[a].message = msg
                channel.broadcast(msg, alive)
                sent_messages.append(msg)

        if emit_reflections:
            rollouts = [(o, (sim.agents[o].state,
                             ControlInput(sim.agents[o].speed, 0.0)))
                        for o in alive]
            for a in alive:
                prev = sim.last_scores.get(a, (1.0, 1.0, 1.0))
                neighbors = [t for o, t in rollouts if o != a]
                fails = reflection.detect_failures(
                    decisions[a].trajectory, sim.agents[a].state.alpha,
                    neighbors, sim.agents[a].route, es=prev[1], cs=prev[0],
                    thresholds=thresholds, params=params, tick=sim.t, agent=a)
                for f in fails:
                    result.failures.append(f)
                    result.reflection_records.append(
                        reflection.emit_reflection_record(
                            f, scene_text_for(a), decisions[a], observations[a],
                            inbox[a], histories[a], net, params, pol_cfg, dt,
                            episode=seed, route=sim.agents[a].route))

        sim, events = simulation.advance(sim, decisions)
        result.events.extend(events)
        for ev in events:
            if ev.kind == simulation.EV_COLLISION:
                n_coll += 1
            elif ev.kind == simulation.EV_SPEED_VIOLATION:
                n_speed += 1

        # self-committing consistency: each broadcast message must mirror the
        # meta-action executed in the advance that follows it
        for msg in sent_messages:
            if decisions[msg.sender].meta_action is not msg.committed_action:
                result.commitment_violations += 1

        states = {}
        scores = {}
        decided = {}
        w = sim.weights
        for a in alive:
            rec = sim.agents[a]
            st = rec.state
            states[sid[a]] = {"x": st.x, "y": st.y,
                              "alpha": st.alpha, "beta": st.beta,
                              "u": rec.speed, "lane": rec.lane,
                              "alive": rec.alive}
            cs, es, ss = sim.last_scores[a]
            # same arithmetic as simulation.reward, without the per-agent call
            r = w.k1 * cs + w.k2 * es + w.k3 * ss
            if a in sim.collided_this_tick:
                r -= sim.collision_penalty
            scores[sid[a]] = {"cs": cs, "es": es, "ss": ss, "reward": r}
            all_scores.append((cs, es, ss))
            d = decisions[a]
            # waypoints were validated finite when the Trajectory was built
            pts = d.trajectory.points[:_TRACE_WAYPOINTS]
            decided[sid[a]] = {
                "meta": d.meta_action.value,
                "trajectory": ("%.2f,%.2f;" * len(pts)) % tuple(pts.ravel().tolist()),
                "fallback": d.fallback}
        obs_digest = "%08x" % (hash(tuple(
            (a, observations[a].state.x, observations[a].state.y,
             len(observations[a].neighbors)) for a in alive)) & 0xFFFFFFFF)
        result.trace.ticks.append({
            "kind": "tick", "t": sim.t, "states": states, "scores": scores,
            "decisions": decided,
            "messages": [m.to_dict() for m in sent_messages],
            "events": [{"kind": e.kind, "time": e.time, "agents": list(e.agents)}
                       for e in events],
            "obs_digest": obs_digest,
        })

    for a, rec in sim.agents.items():
        result.terminals[a] = rec.terminal if rec.terminal else "horizon-end"
    summary = episode_metrics_from_scores(all_scores, n_coll, n_speed,
                                          sim.weights)
    result.trace.footer = {
        "kind": "footer", "metrics": summary,
        "terminals": {str(a): t for a, t in result.terminals.items()},
        "commitment_violations": result.commitment_violations,
        "channel": {"sent": channel.sent, "delivered": channel.delivered,
                    "dropped": channel.dropped, "in_flight": channel.in_flight},
        "failure_count": len(result.failures),
    }
    return result

"""Episode trace persistence (JSON Lines) and score-recomputing replay."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import metrics, simulation
from .config import RunConfig
from .metrics import ScoreWeights

TRACE_VERSION = 1


class TraceError(ValueError):
    pass


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class EpisodeTrace:
    header: dict
    ticks: list[dict] = field(default_factory=list)
    footer: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [_dumps(self.header)]
        lines += [_dumps(t) for t in self.ticks]
        lines.append(_dumps(self.footer))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def make_header(cfg: RunConfig, seed: int, initial: dict) -> dict:
    return {"kind": "header", "version": TRACE_VERSION, "seed": seed,
            "config_hash": cfg.config_hash(), "config": cfg.to_dict(),
            "initial": initial}


def read_trace(path: str | Path) -> EpisodeTrace:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2:
        raise TraceError("trace needs at least a header and a footer")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TraceError(f"corrupted header: {exc}") from exc
    if header.get("kind") != "header":
        raise TraceError("first record is not a header")
    ticks = []
    for i, line in enumerate(lines[1:-1]):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"corrupted tick record {i + 1}: {exc}") from exc
        if rec.get("kind") != "tick":
            raise TraceError(f"record {i + 1} is not a tick record")
        ticks.append(rec)
    try:
        footer = json.loads(lines[-1])
    except json.JSONDecodeError as exc:
        raise TraceError(f"corrupted footer: {exc}") from exc
    if footer.get("kind") != "footer":
        raise TraceError("last record is not a footer (truncated trace?)")
    last_t = 0
    for rec in ticks:
        if rec["t"] <= last_t:
            raise TraceError(f"tick numbers not strictly increasing at t={rec['t']}")
        last_t = rec["t"]
    return EpisodeTrace(header=header, ticks=ticks, footer=footer)


def episode_metrics_from_scores(all_scores: list[tuple[float, float, float]],
                                n_collisions: int, n_speed_violations: int,
                                weights: ScoreWeights) -> dict:
    """Aggregate per-tick scores into the episode summary via the metrics module."""
    if all_scores:
        cs = sum(s[0] for s in all_scores) / len(all_scores)
        es = sum(s[1] for s in all_scores) / len(all_scores)
        ss = sum(s[2] for s in all_scores) / len(all_scores)
        ss_min = min(s[2] for s in all_scores)
    else:
        cs = es = ss = ss_min = 1.0
    ds = metrics.driving_score(cs, es, ss, weights,
                               lambda1=n_collisions, lambda2=n_speed_violations)
    return {"cs": cs, "es": es, "ss": ss, "ss_min": ss_min, "ds": ds,
            "collisions": n_collisions, "speed_violations": n_speed_violations}


def replay(path: str | Path, weights: ScoreWeights | None = None) -> dict:
    """Recompute every per-tick score from the stored states.

    Returns {"canonical": bool, "metrics": ..., "mismatches": int}. Scores must
    reproduce exactly under the stored config; passing alternative weights
    flags the result as non-canonical.
    """
    trace = read_trace(path)
    cfg = RunConfig(values=trace.header["config"]["values"],
                    agent_policies={int(k): v for k, v in
                                    trace.header["config"]["agent_policies"].items()})
    if cfg.config_hash() != trace.header["config_hash"]:
        raise TraceError("config hash mismatch: trace was tampered with")

    canonical = weights is None
    w = weights if weights is not None else cfg.score_weights()
    net = cfg.network()
    dt = cfg.get("run", "dt")
    limits = cfg.comfort_limits()
    speed_limit = cfg.get("run", "speed_limit")
    t_t = cfg.get("run", "ttc_threshold")

    hist: dict[str, dict[str, list[float]]] = {}
    for aid, init in trace.header["initial"].items():
        hist[aid] = {"u": [init["u"]], "y": [init["y"]]}

    mismatches = 0
    all_scores: list[tuple[float, float, float]] = []
    n_coll = 0
    n_speed = 0
    for rec in trace.ticks:
        required = {"t", "states", "scores", "events", "messages"}
        if not required <= rec.keys():
            raise TraceError(f"corrupted tick record at t={rec.get('t', '?')}: "
                             f"missing {sorted(required - rec.keys())}")
        states = rec["states"]
        for aid, st in states.items():
            h = hist.setdefault(aid, {"u": [], "y": []})
            h["u"].append(st["u"])
            h["y"].append(st["y"])
            if len(h["u"]) > simulation._HISTORY_SAMPLES:
                h["u"].pop(0)
                h["y"].pop(0)
        for ev in rec["events"]:
            if ev["kind"] == simulation.EV_COLLISION:
                n_coll += 1
            elif ev["kind"] == simulation.EV_SPEED_VIOLATION:
                n_speed += 1
        for aid, st in states.items():
            others = [(o["x"], o["u"], o["lane"]) for oid, o in states.items()
                      if oid != aid and o["alive"]]
            cs, es, ss = simulation.score_agent_step(
                hist[aid]["u"], hist[aid]["y"], st["x"], st["u"], st["lane"],
                others, net, dt, limits, speed_limit, t_t)
            stored = rec["scores"][aid]
            if (cs, es, ss) != (stored["cs"], stored["es"], stored["ss"]):
                mismatches += 1
            all_scores.append((cs, es, ss))

    summary = episode_metrics_from_scores(all_scores, n_coll, n_speed, w)
    return {"canonical": canonical, "metrics": summary,
            "mismatches": mismatches, "ticks": len(trace.ticks)}

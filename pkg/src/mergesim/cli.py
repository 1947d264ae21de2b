"""Command-line entry points: run, replay, eval, reflect."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import dataset as dataset_mod
from .config import ConfigError, RunConfig, load_config
from .episode import ENDPOINT_ENV_VAR, run_episode
from .planning import TcpTransport, TransportError
from .trace import TraceError, read_trace, replay


class CliError(RuntimeError):
    pass


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("run", "seed")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_episode(cfg, seed=seed)
    trace_path = out / "trace.jsonl"
    result.trace.write(trace_path)
    refl_path = out / "reflections.jsonl"
    refl_path.write_text(
        "".join(r.to_json() + "\n" for r in result.reflection_records))
    report_path = out / "report.json"
    report_path.write_text(json.dumps(result.trace.footer, sort_keys=True,
                                      indent=2) + "\n")
    m = result.trace.footer["metrics"]
    print(f"episode seed={seed} ticks={len(result.trace.ticks)} "
          f"ds={m['ds']:.4f} cs={m['cs']:.4f} es={m['es']:.4f} "
          f"ss={m['ss']:.4f} collisions={m['collisions']} "
          f"reflections={len(result.reflection_records)}")
    print(f"wrote {trace_path}, {refl_path}, {report_path}")
    return 0


def _cmd_replay(args) -> int:
    result = replay(args.trace)
    m = result["metrics"]
    print(f"replay ticks={result['ticks']} mismatches={result['mismatches']} "
          f"canonical={result['canonical']} ds={m['ds']:.4f} "
          f"cs={m['cs']:.4f} es={m['es']:.4f} ss={m['ss']:.4f}")
    if result["mismatches"]:
        raise CliError(f"{result['mismatches']} recomputed scores differ "
                       "from the stored values")
    return 0


def _external_transport() -> TcpTransport:
    endpoint = os.environ.get(ENDPOINT_ENV_VAR, "")
    if not endpoint:
        raise CliError(f"external predictor requires {ENDPOINT_ENV_VAR}")
    host, _, port = endpoint.rpartition(":")
    return TcpTransport(host or "127.0.0.1", int(port))


def _cmd_eval(args) -> int:
    data = dataset_mod.ingest_dataset(args.dataset)
    if args.predictor == "external":
        predictor = dataset_mod.external_predictor(_external_transport())
    else:
        predictor = dataset_mod.PREDICTORS[args.predictor]()
    report = dataset_mod.evaluate_open_loop(data, predictor)
    print(dataset_mod.format_report(report))
    return 0


def _cmd_reflect(args) -> int:
    trace = read_trace(args.trace)
    cfg = RunConfig(values=trace.header["config"]["values"],
                    agent_policies={int(k): v for k, v in
                                    trace.header["config"]["agent_policies"].items()})
    if cfg.config_hash() != trace.header["config_hash"]:
        raise CliError("config hash mismatch: trace was tampered with")
    result = run_episode(cfg, seed=trace.header["seed"], emit_reflections=True)
    if result.trace.to_jsonl() != trace.to_jsonl():
        raise CliError("re-run diverged from the stored trace; "
                       "cannot attribute reflection records to it")
    Path(args.out).write_text(
        "".join(r.to_json() + "\n" for r in result.reflection_records))
    print(f"wrote {len(result.reflection_records)} reflection records "
          f"to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergesim",
        description="Deterministic ramp-merging simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one episode and write its trace")
    p_run.add_argument("--config", required=True, help="config file path")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(func=_cmd_run)

    p_replay = sub.add_parser("replay",
                              help="recompute scores from a stored trace")
    p_replay.add_argument("--trace", required=True, help="trace file path")
    p_replay.set_defaults(func=_cmd_replay)

    p_eval = sub.add_parser("eval", help="open-loop trajectory prediction")
    p_eval.add_argument("--dataset", required=True, help="CSV dataset path")
    p_eval.add_argument("--predictor", required=True,
                        choices=("echo", "const-vel", "external"))
    p_eval.set_defaults(func=_cmd_eval)

    p_reflect = sub.add_parser(
        "reflect", help="re-derive reflection records from a trace")
    p_reflect.add_argument("--trace", required=True, help="trace file path")
    p_reflect.add_argument("--out", required=True, help="output JSONL path")
    p_reflect.set_defaults(func=_cmd_reflect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, TraceError, TransportError,
            dataset_mod.DatasetError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Run configuration: INI-style sections with strict key validation."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .communication import ChannelConfig
from .dynamics import VehicleParams
from .metrics import ComfortLimits, ScoreWeights
from .planning import PolicyConfig
from .reflection import Thresholds
from .scenario import RoadNetwork, classify_merge_condition, CONFLICTING


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "scenario": {
        "main_lanes": (int, 3), "ramp_lanes": (int, 1),
        "post_merge_lanes": (int, 3), "lane_width": (float, 3.5),
        "road_length": (float, 600.0), "merge_point_s": (float, 300.0),
        "collab_length": (float, 80.0), "ramp_start": (float, 0.0),
        "taper_length": (float, 40.0), "n_main_vehicles": (int, 2),
        "n_ramp_vehicles": (int, 2), "n_route_samples": (int, 1201),
        "spawns": (str, ""),
    },
    "vehicles": {
        "axle_distance": (float, 2.5), "length": (float, 4.5),
        "width": (float, 1.8), "u_max": (float, 15.0), "a_max": (float, 3.0),
        "beta_max": (float, 0.6), "omega_max": (float, 1.0),
    },
    "policies": {
        "default": (str, "baseline"), "endpoint": (str, ""),
        "timeout": (float, 5.0),
    },
    "channel": {
        "delay": (int, 0), "drop_prob": (float, 0.0),
        "enabled": (bool, True),
    },
    "thresholds": {
        "eps_col": (float, 0.05), "eps_p": (float, 1.0),
        "eps_e": (float, 0.5), "eps_c": (float, 0.5),
        "alpha_weight": (float, 1.0), "accel_limit": (float, 3.0),
        "jerk_limit": (float, 2.0),
    },
    "weights": {
        "k1": (float, 0.25), "k2": (float, 0.25), "k3": (float, 0.5),
        "alpha_pen": (float, 0.6), "beta_pen": (float, 0.9),
    },
    "run": {
        "seed": (int, 0), "horizon": (int, 400), "dt": (float, 0.1),
        "sensing_radius": (float, 100.0), "speed_limit": (float, 11.11),
        "gap_min": (float, 15.0), "ttc_threshold": (float, 5.0),
        "cruise_speed": (float, 11.0), "noise_std": (float, 0.0),
        "history_cap": (int, 50), "collision_penalty": (float, 1.0),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    agent_policies: dict[int, str] = field(default_factory=dict)

    def __getitem__(self, key: tuple[str, str]):
        return self.values[key[0]][key[1]]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def to_dict(self) -> dict:
        return {"values": self.values,
                "agent_policies": {str(k): v for k, v in self.agent_policies.items()}}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    # typed views --------------------------------------------------------
    def network(self) -> RoadNetwork:
        s = self.values["scenario"]
        return RoadNetwork(
            main_lanes=s["main_lanes"], ramp_lanes=s["ramp_lanes"],
            post_merge_lanes=s["post_merge_lanes"], lane_width=s["lane_width"],
            road_length=s["road_length"], merge_point_s=s["merge_point_s"],
            collab_start=s["merge_point_s"] - s["collab_length"],
            collab_end=s["merge_point_s"], ramp_start=s["ramp_start"],
            taper_length=s["taper_length"])

    def vehicle_params(self) -> VehicleParams:
        return VehicleParams(**self.values["vehicles"])

    def channel_config(self) -> ChannelConfig:
        c = self.values["channel"]
        return ChannelConfig(delay=c["delay"], drop_prob=c["drop_prob"],
                             seed=self.values["run"]["seed"],
                             enabled=c["enabled"])

    def thresholds(self) -> Thresholds:
        t = {k: v for k, v in self.values["thresholds"].items()
             if k not in ("accel_limit", "jerk_limit")}
        return Thresholds(**t)

    def score_weights(self) -> ScoreWeights:
        return ScoreWeights(**self.values["weights"])

    def comfort_limits(self) -> ComfortLimits:
        t = self.values["thresholds"]
        return ComfortLimits(accel_lon=t["accel_limit"],
                             accel_lat=t["accel_limit"],
                             jerk_lon=t["jerk_limit"],
                             jerk_lat=t["jerk_limit"])

    def policy_config(self) -> PolicyConfig:
        r = self.values["run"]
        return PolicyConfig(gap_min=r["gap_min"],
                            ttc_threshold=r["ttc_threshold"],
                            cruise_speed=r["cruise_speed"])

    def explicit_spawns(self) -> list[tuple[int, float, float]] | None:
        text = self.values["scenario"]["spawns"].strip()
        if not text:
            return None
        spawns = []
        for part in text.replace("\n", " ").split():
            lane, station, speed = part.split(":")
            spawns.append((int(lane), float(station), float(speed)))
        return spawns


def _coerce(section: str, key: str, raw: str):
    typ, _default = _SCHEMA[section][key]
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return typ(raw)
    except ValueError:
        raise ConfigError(
            f"invalid value for [{section}] {key}: {raw!r}") from None


def default_config() -> RunConfig:
    values = {section: {k: d for k, (_t, d) in keys.items()}
              for section, keys in _SCHEMA.items()}
    return RunConfig(values=values)


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a config file; unknown sections or keys are errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    if "scenario" not in parser:
        raise ConfigError("missing required section: scenario")

    cfg = default_config()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section: {section}")
        for key, raw in parser[section].items():
            if section == "policies" and key.startswith("agent_"):
                try:
                    aid = int(key[len("agent_"):])
                except ValueError:
                    raise ConfigError(f"invalid agent policy key: {key}") from None
                if raw not in ("baseline", "external"):
                    raise ConfigError(f"unknown policy {raw!r} for {key}")
                cfg.agent_policies[aid] = raw
                continue
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key in [{section}]: {key}")
            cfg.values[section][key] = _coerce(section, key, raw)

    if cfg.values["policies"]["default"] not in ("baseline", "external"):
        raise ConfigError("policies.default must be 'baseline' or 'external'")
    net = cfg.network()  # validates geometry
    if classify_merge_condition(net) != CONFLICTING:
        raise ConfigError(
            "scenario is NonConflicting (main+ramp <= post-merge lanes); "
            "only Conflicting networks are simulated")
    cfg.vehicle_params()
    cfg.channel_config()
    cfg.thresholds()
    cfg.score_weights()
    return cfg

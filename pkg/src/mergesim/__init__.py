"""Deterministic multi-agent ramp-merging simulator.

Vehicles follow kinematic bicycle dynamics, decide via a rule-based baseline
or an external text-protocol reasoner, exchange speech-act messages near the
merge point, and are scored on comfort, efficiency, and safety. Every episode
is reproducible from (config, seed) and persisted as a JSONL trace.
"""

from .config import RunConfig, default_config, load_config
from .episode import EpisodeResult, run_episode
from .trace import EpisodeTrace, read_trace, replay

__all__ = [
    "RunConfig", "default_config", "load_config",
    "EpisodeResult", "run_episode",
    "EpisodeTrace", "read_trace", "replay",
]

__version__ = "0.1.0"

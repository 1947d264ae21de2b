"""Speech-act messaging: self-revealing + self-committing packets routed through
a collaborative-area-gated channel with configurable delay and loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .planning import Decision, MetaAction
from .scenario import RoadNetwork

MAIN_ROAD_BROADCAST_WINDOW = 120.0  # m upstream of the merge point


@dataclass(frozen=True)
class Message:
    sender: int
    time: int
    # self-revealing payload
    x: float
    y: float
    lane: int
    speed: float
    dist_to_merge: float
    # self-committing payload
    committed_action: MetaAction
    window_s: float

    def summary(self) -> str:
        return (f"from={self.sender} t={self.time} lane={self.lane} "
                f"x={self.x:.2f} speed={self.speed:.2f} "
                f"dist_to_merge={self.dist_to_merge:.2f} "
                f"commits={self.committed_action.value} window={self.window_s:.1f}s")

    def to_dict(self) -> dict:
        return {
            "sender": self.sender, "time": self.time, "x": self.x, "y": self.y,
            "lane": self.lane, "speed": self.speed,
            "dist_to_merge": self.dist_to_merge,
            "committed_action": self.committed_action.value,
            "window_s": self.window_s,
        }


@dataclass(frozen=True)
class ChannelConfig:
    delay: int = 0
    drop_prob: float = 0.0
    seed: int = 0
    enabled: bool = True

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("delay must be >= 0 ticks")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop probability must lie in [0, 1]")


def encode_message(decision: Decision, state, speed: float, lane: int,
                   net: RoadNetwork, sender: int, tick: int,
                   window_s: float = 3.0) -> Message:
    """Pure function of (decision, state): reveal the state, commit the action."""
    return Message(
        sender=sender, time=tick, x=state.x, y=state.y, lane=lane, speed=speed,
        dist_to_merge=net.merge_point_s - state.x,
        committed_action=decision.meta_action, window_s=window_s,
    )


@dataclass
class _Delivery:
    deliver_tick: int
    recipient: int
    message: Message


class Channel:
    """Broadcast channel; one delivery unit per (message, recipient).

    Delivery units become collectable once their tick arrives; each is
    delivered at most once. Drop draws come from a dedicated seeded stream so
    toggling losses does not perturb any other randomness.
    """

    def __init__(self, config: ChannelConfig = ChannelConfig()):
        self.config = config
        self._pending: list[_Delivery] = []
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self._drop_rng = np.random.default_rng([config.seed, 0xD509])

    @property
    def in_flight(self) -> int:
        return len(self._pending)

    def should_broadcast(self, state, lane: int, net: RoadNetwork) -> bool:
        """Ramp vehicles inside the collaborative area broadcast; so do
        main-road vehicles within the merge-zone window."""
        if lane == net.ramp_lane_index:
            return net.collab_start <= state.x <= net.collab_end
        return net.merge_point_s - MAIN_ROAD_BROADCAST_WINDOW <= state.x <= net.merge_point_s

    def broadcast(self, message: Message, recipients) -> int:
        """Enqueue one delivery per recipient; returns the number enqueued."""
        n = 0
        for rid in sorted(recipients):
            if rid == message.sender:
                continue
            self.sent += 1
            n += 1
            if self.config.drop_prob > 0 and \
                    self._drop_rng.random() < self.config.drop_prob:
                self.dropped += 1
                continue
            self._pending.append(_Delivery(
                deliver_tick=message.time + self.config.delay,
                recipient=rid, message=message))
        return n

    def collect(self, agent_id: int, tick: int) -> list[Message]:
        """Deliver every due pending message for the agent, sorted by sender."""
        if not self.config.enabled:
            return []
        due = [d for d in self._pending
               if d.recipient == agent_id and d.deliver_tick <= tick]
        self._pending = [d for d in self._pending
                         if not (d.recipient == agent_id and d.deliver_tick <= tick)]
        self.delivered += len(due)
        return sorted((d.message for d in due), key=lambda m: (m.sender, m.time))

    def conservation_holds(self) -> bool:
        return self.delivered + self.dropped + self.in_flight == self.sent

"""Driving-quality metrics: efficiency, comfort, safety, aggregate score, errors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ScoreWeights:
    k1: float = 0.25        # comfort weight
    k2: float = 0.25        # efficiency weight
    k3: float = 0.5         # safety weight
    alpha_pen: float = 0.6  # collision penalty factor
    beta_pen: float = 0.9   # speed-violation penalty factor

    def __post_init__(self):
        if abs(self.k1 + self.k2 + self.k3 - 1.0) > 1e-9:
            raise ValueError("score weights must sum to 1")
        if not (0.0 <= self.alpha_pen < 1.0 and 0.0 <= self.beta_pen < 1.0):
            raise ValueError("penalty factors must lie in [0, 1)")


@dataclass(frozen=True)
class ComfortLimits:
    accel_lon: float = 3.0  # m/s^2
    accel_lat: float = 3.0  # m/s^2
    jerk_lon: float = 2.0   # m/s^3
    jerk_lat: float = 2.0   # m/s^3

    def __post_init__(self):
        if min(self.accel_lon, self.accel_lat, self.jerk_lon, self.jerk_lat) <= 0:
            raise ValueError("comfort limits must be positive")


def efficiency_score(v_ego: float, v_avg: float, v_lmt: float,
                     sigma: float = 0.0) -> float:
    """Speed relative to min(average traffic speed, speed limit) + sigma."""
    if v_ego < 0 or v_avg < 0 or v_lmt < 0:
        raise ValueError("speeds must be non-negative")
    v0 = min(v_avg, v_lmt) + sigma
    if v0 <= 0:
        raise ValueError("reference speed must be positive")
    return 1.0 if v_ego >= v0 else v_ego / v0


def comfort_score_from_peaks(accel_lon: float, accel_lat: float,
                             jerk_lon: float, jerk_lat: float,
                             limits: ComfortLimits = ComfortLimits()) -> float:
    """Mean of the four sub-scores given precomputed peak magnitudes."""
    return (
        (1.0 if accel_lon <= limits.accel_lon else limits.accel_lon / accel_lon)
        + (1.0 if accel_lat <= limits.accel_lat else limits.accel_lat / accel_lat)
        + (1.0 if jerk_lon <= limits.jerk_lon else limits.jerk_lon / jerk_lon)
        + (1.0 if jerk_lat <= limits.jerk_lat else limits.jerk_lat / jerk_lat)
    ) / 4.0


def comfort_score(accel_lon: Sequence[float], accel_lat: Sequence[float],
                  jerk_lon: Sequence[float], jerk_lat: Sequence[float],
                  limits: ComfortLimits = ComfortLimits()) -> float:
    """Mean of the four peak-based sub-scores (longitudinal/lateral accel and jerk)."""
    peak = lambda samples: max(map(abs, samples), default=0.0)
    return comfort_score_from_peaks(peak(accel_lon), peak(accel_lat),
                                    peak(jerk_lon), peak(jerk_lat), limits)


def ttc(d: float, v_ego: float, v_lead: float) -> float:
    """Time to collision; infinite when the gap is not closing."""
    if d < 0:
        raise ValueError("distance must be non-negative")
    v_rel = v_ego - v_lead
    if v_rel <= 0:
        return math.inf
    return d / v_rel


def safety_score(t_ego: float, t_t: float = 5.0) -> float:
    if t_t <= 0:
        raise ValueError("TTC threshold must be positive")
    if t_ego < 0:
        raise ValueError("TTC must be non-negative")
    return 1.0 if t_ego >= t_t else t_ego / t_t


def driving_score(cs: float, es: float, ss: float,
                  weights: ScoreWeights = ScoreWeights(),
                  lambda1: int = 0, lambda2: int = 0) -> float:
    """Penalized convex combination of comfort, efficiency, and safety."""
    for s in (cs, es, ss):
        if not 0.0 <= s <= 1.0:
            raise ValueError("scores must lie in [0, 1]")
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("occurrence counts must be non-negative")
    base = weights.k1 * cs + weights.k2 * es + weights.k3 * ss
    return (weights.alpha_pen ** lambda1) * (weights.beta_pen ** lambda2) * base


def l2_error(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean Euclidean waypoint distance over N scenarios x K waypoints."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise ValueError("expected matching (N, K, 2) arrays")
    return float(np.mean(np.linalg.norm(pred - truth, axis=-1)))


def collision_rate(collisions: Sequence[int], horizon: float) -> float:
    """Mean over scenarios of collision count divided by trajectory duration."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    counts = list(collisions)
    if not counts:
        return 0.0
    return sum(c / horizon for c in counts) / len(counts)


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))

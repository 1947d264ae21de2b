"""Scene understanding kernels: patch arithmetic, cross-attention token
alignment, critical-object ranking, and the structured scene description."""

from __future__ import annotations

import math
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .scenario import RoadNetwork

if TYPE_CHECKING:
    from .simulation import Observation


def patchify(height: int, width: int, channels: int,
             patch_size: int) -> tuple[int, int]:
    """Patch-sequence shape (N, patch_dim) for an image split into PxP patches."""
    if height <= 0 or width <= 0 or channels <= 0 or patch_size <= 0:
        raise ValueError("dimensions must be positive")
    if height % patch_size or width % patch_size:
        raise ValueError(
            f"image {height}x{width} not divisible by patch size {patch_size}")
    n = (height * width) // (patch_size * patch_size)
    return n, patch_size * patch_size * channels


def cross_attention_align(queries: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Scaled dot-product cross-attention: softmax(Q F^T / sqrt(D)) F.

    Each output row is a convex combination of the feature rows.
    """
    q = np.asarray(queries, dtype=float)
    f = np.asarray(features, dtype=float)
    if q.ndim != 2 or f.ndim != 2 or q.shape[1] != f.shape[1]:
        raise ValueError("query and feature matrices must share the column count")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(f))):
        raise ValueError("matrices must be finite")
    logits = q @ f.T / math.sqrt(f.shape[1])
    logits -= logits.max(axis=1, keepdims=True)  # row-max shift for stability
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ f


def load_feature_matrix(path: str | Path) -> np.ndarray:
    """Plain-text matrix file: first line "N D", then N rows of D decimals."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines:
        raise ValueError("empty feature matrix file")
    n, d = (int(v) for v in lines[0].split())
    if len(lines) - 1 != n:
        raise ValueError(f"expected {n} rows, found {len(lines) - 1}")
    rows = [[float(v) for v in line.split()] for line in lines[1:]]
    mat = np.array(rows, dtype=float)
    if mat.shape != (n, d):
        raise ValueError(f"expected {n}x{d} matrix, found {mat.shape}")
    return mat


def save_feature_matrix(path: str | Path, mat: np.ndarray) -> None:
    mat = np.asarray(mat, dtype=float)
    lines = [f"{mat.shape[0]} {mat.shape[1]}"]
    lines += [" ".join(f"{v:.9g}" for v in row) for row in mat]
    Path(path).write_text("\n".join(lines) + "\n")


def rank_critical_objects(obs: "Observation", net: RoadNetwork) -> list[int]:
    """Neighbors ordered by collision potential at the merge point.

    Sort key: TTC to the ego's conflict point ascending, then distance, then
    id. Vehicles already past the merge point are excluded.
    """
    scored = []
    for n in obs.neighbors:
        station = obs.state.x + n.dx
        if station > net.merge_point_s:
            continue
        to_conflict = net.merge_point_s - station
        ttc = to_conflict / n.speed if n.speed > 1e-9 else math.inf
        dist = math.hypot(n.dx, n.dy)
        scored.append((ttc, dist, n.id))
    scored.sort()
    return [vid for _, _, vid in scored]


def build_scene_description(obs: "Observation", net: RoadNetwork,
                            ranked: Sequence[int]) -> str:
    """Deterministic structured text fed to the reasoning engine.

    Fixed section order: road structure, lane count, ego lane, ego
    speed/position, critical objects, merge-zone distance. Every section is
    present even when empty.
    """
    on_ramp = obs.lane_index == net.ramp_lane_index
    by_id = {n.id: n for n in obs.neighbors}
    lines = [
        "road structure: "
        f"{net.main_lanes}-lane main road joined by a {net.ramp_lanes}-lane ramp, "
        f"{net.post_merge_lanes} lanes after the merge point",
        f"lane count: {net.lane_count}",
        "ego lane: " + ("ramp" if on_ramp else f"main lane {obs.lane_index}"),
        f"ego speed/position: {obs.speed:.2f} m/s at "
        f"({obs.state.x:.2f}, {obs.state.y:.2f}), heading {obs.state.alpha:.3f} rad",
        "critical objects: " + (
            "; ".join(
                f"vehicle {vid} at ({by_id[vid].dx:+.2f}, {by_id[vid].dy:+.2f}) "
                f"rel, {by_id[vid].speed:.2f} m/s, lane {by_id[vid].lane}"
                for vid in ranked if vid in by_id) or "none"),
        f"merge-zone distance: {obs.dist_to_merge:.2f} m",
    ]
    return "\n".join(lines) + "\n"

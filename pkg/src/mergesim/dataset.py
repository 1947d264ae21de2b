"""Trajectory dataset ingestion and open-loop prediction evaluation.

Recorded tracks sampled at 10 Hz are cut into 100-frame windows: 6 s of past
(60 frames) and 4 s of future (40 frames). A predictor maps the past window
to a predicted future; accuracy is reported as horizon-sliced L2 and RMSE.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .planning import (TokenSequence, Trajectory, detokenize_trajectory,
                       tokenize_trajectory)
from .reflection import OrientedBox, obb_iou

FRAME_RATE_HZ = 10
PAST_FRAMES = 60
FUTURE_FRAMES = 40
WINDOW_FRAMES = PAST_FRAMES + FUTURE_FRAMES
WINDOW_STRIDE = 50

REQUIRED_COLUMNS = ("id", "frame", "x", "y", "vx", "vy")

L2_HORIZONS_S = (1, 2, 3)
RMSE_HORIZONS_S = (1, 2, 3, 4)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryPair:
    """One past/future window for a single vehicle."""

    vehicle_id: int
    start_frame: int
    past: np.ndarray        # (60, 2) positions
    past_vel: np.ndarray    # (60, 2) velocities
    future: np.ndarray      # (40, 2) positions


@dataclass
class TrajectoryDataset:
    pairs: list[TrajectoryPair] = field(default_factory=list)
    skipped_vehicles: int = 0


def ingest_dataset(path: str | Path) -> TrajectoryDataset:
    """Read a CSV of (id, frame, x, y, vx, vy) rows into past/future pairs.

    Frames per vehicle must be contiguous; vehicles with fewer than 100
    frames are skipped and counted. Windows advance by a 50-frame stride.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DatasetError("empty dataset file")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DatasetError(f"missing required columns: {missing}")
        tracks: dict[int, list[tuple[int, float, float, float, float]]] = {}
        for row in reader:
            try:
                vid = int(row["id"])
                rec = (int(row["frame"]), float(row["x"]), float(row["y"]),
                       float(row["vx"]), float(row["vy"]))
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"malformed row: {row}") from exc
            tracks.setdefault(vid, []).append(rec)

    dataset = TrajectoryDataset()
    for vid in sorted(tracks):
        rows = tracks[vid]
        frames = [r[0] for r in rows]
        for prev, cur in zip(frames, frames[1:]):
            if cur != prev + 1:
                raise DatasetError(
                    f"vehicle {vid}: frames not contiguous at {prev} -> {cur}")
        if len(rows) < WINDOW_FRAMES:
            dataset.skipped_vehicles += 1
            continue
        pos = np.array([(r[1], r[2]) for r in rows])
        vel = np.array([(r[3], r[4]) for r in rows])
        for start in range(0, len(rows) - WINDOW_FRAMES + 1, WINDOW_STRIDE):
            dataset.pairs.append(TrajectoryPair(
                vehicle_id=vid, start_frame=frames[start],
                past=pos[start:start + PAST_FRAMES],
                past_vel=vel[start:start + PAST_FRAMES],
                future=pos[start + PAST_FRAMES:start + WINDOW_FRAMES]))
    return dataset


# -- predictors -------------------------------------------------------------

def echo_predictor(pair: TrajectoryPair) -> np.ndarray:
    """Ground-truth oracle: returns the recorded future unchanged."""
    return pair.future.copy()


def constant_velocity_predictor(pair: TrajectoryPair) -> np.ndarray:
    """Extrapolate from the last observed position and velocity."""
    dt = 1.0 / FRAME_RATE_HZ
    steps = np.arange(1, FUTURE_FRAMES + 1)[:, None] * dt
    return pair.past[-1] + steps * pair.past_vel[-1]


def external_predictor(transport):
    """Wrap a text transport as a predictor.

    The request carries the tokenized past window; the response must be a
    single line of tokenized future waypoints (40 of them).
    """
    dt = 1.0 / FRAME_RATE_HZ

    def predict(pair: TrajectoryPair) -> np.ndarray:
        past_tokens = tokenize_trajectory(Trajectory(pair.past, dt))
        doc = ("=== PAST ===\n" + past_tokens.text() + "\n"
               "=== INSTRUCTIONS ===\n"
               f"predict the next {FUTURE_FRAMES} waypoints as x,y; tokens "
               "on one line\n")
        reply = transport.request(doc).strip().splitlines()
        if not reply:
            raise DatasetError("empty predictor response")
        traj = detokenize_trajectory(TokenSequence(tuple(reply[0].strip())), dt)
        return traj.points

    return predict


PREDICTORS = {
    "echo": lambda transport=None: echo_predictor,
    "const-vel": lambda transport=None: constant_velocity_predictor,
    "external": external_predictor,
}


# -- evaluation -------------------------------------------------------------

def _prediction_boxes(points: np.ndarray, length: float, width: float
                      ) -> list[OrientedBox]:
    headings = np.arctan2(np.gradient(points[:, 1]), np.gradient(points[:, 0]))
    return [OrientedBox(x, y, h, length, width)
            for (x, y), h in zip(points, headings)]


def _count_predicted_collisions(dataset: TrajectoryDataset,
                                predicted: list[np.ndarray],
                                length: float, width: float) -> int:
    """Count window/frame overlaps between predictions that share a time base."""
    by_start: dict[int, list[int]] = {}
    for i, pair in enumerate(dataset.pairs):
        by_start.setdefault(pair.start_frame, []).append(i)
    collisions = 0
    for indices in by_start.values():
        boxes = {i: _prediction_boxes(predicted[i], length, width)
                 for i in indices}
        for a_pos, i in enumerate(indices):
            for j in indices[a_pos + 1:]:
                if dataset.pairs[i].vehicle_id == dataset.pairs[j].vehicle_id:
                    continue
                if any(obb_iou(ba, bb) > 0.0
                       for ba, bb in zip(boxes[i], boxes[j])):
                    collisions += 1
                    break
    return collisions


def evaluate_open_loop(dataset: TrajectoryDataset, predictor,
                       vehicle_length: float = 4.5,
                       vehicle_width: float = 1.8) -> dict:
    """Score a predictor over every pair in the dataset.

    L2 at horizon h averages the Euclidean waypoint error over all frames up
    to h seconds; RMSE follows the same cumulative slicing. The collision
    check counts predicted-box overlaps between co-temporal windows of
    different vehicles.
    """
    if not dataset.pairs:
        raise DatasetError("dataset contains no past/future pairs")
    predicted = []
    for pair in dataset.pairs:
        pred = np.asarray(predictor(pair), dtype=float)
        if pred.shape != (FUTURE_FRAMES, 2):
            raise DatasetError(
                f"predictor returned shape {pred.shape}, "
                f"expected ({FUTURE_FRAMES}, 2)")
        predicted.append(pred)

    pred_arr = np.stack(predicted)                       # (N, 40, 2)
    true_arr = np.stack([p.future for p in dataset.pairs])

    report: dict = {"pairs": len(dataset.pairs),
                    "skipped_vehicles": dataset.skipped_vehicles}
    for h in L2_HORIZONS_S:
        n = h * FRAME_RATE_HZ
        report[f"l2_{h}s"] = metrics.l2_error(pred_arr[:, :n], true_arr[:, :n])
    for h in RMSE_HORIZONS_S:
        n = h * FRAME_RATE_HZ
        diff = pred_arr[:, :n] - true_arr[:, :n]
        report[f"rmse_{h}s"] = metrics.rmse(
            np.linalg.norm(diff, axis=-1).ravel(),
            np.zeros(diff.shape[0] * diff.shape[1]))
    report["predicted_collisions"] = _count_predicted_collisions(
        dataset, predicted, vehicle_length, vehicle_width)
    report["collision_free"] = report["predicted_collisions"] == 0
    return report


def format_report(report: dict) -> str:
    """Render the evaluation report as an aligned horizon table."""
    lines = [f"pairs evaluated: {report['pairs']}"
             f" (skipped vehicles: {report['skipped_vehicles']})",
             "horizon   L2 (m)     RMSE (m)"]
    for h in RMSE_HORIZONS_S:
        l2 = report.get(f"l2_{h}s")
        l2_txt = f"{l2:10.4f}" if l2 is not None else "         -"
        lines.append(f"{h:>4} s  {l2_txt}  {report[f'rmse_{h}s']:10.4f}")
    lines.append("collision-free: %s (%d predicted overlaps)"
                 % (report["collision_free"], report["predicted_collisions"]))
    return "\n".join(lines)

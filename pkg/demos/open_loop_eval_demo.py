"""Score trajectory predictors against recorded tracks.

Synthesizes a small 10 Hz dataset (one cruising vehicle, one accelerating
vehicle), cuts it into 6 s past / 4 s future windows, and compares the echo
oracle with the constant-velocity extrapolator. The constant-velocity error
on the accelerating track follows the closed-form 1/2·a·t² profile.
"""

import csv
import tempfile
from pathlib import Path

from mergesim.dataset import (FRAME_RATE_HZ, constant_velocity_predictor,
                              echo_predictor, evaluate_open_loop,
                              format_report, ingest_dataset)


def synthesize(path):
    dt = 1.0 / FRAME_RATE_HZ
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "frame", "x", "y", "vx", "vy"])
        for k in range(100):
            t = k * dt
            writer.writerow([1, k, 10.0 * t, 0.0, 10.0, 0.0])
            writer.writerow([2, k, 4.0 * t + 0.75 * t * t, 40.0,
                             4.0 + 1.5 * t, 0.0])


def main():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "tracks.csv"
        synthesize(path)
        dataset = ingest_dataset(path)

    for name, predictor in (("echo", echo_predictor),
                            ("constant velocity", constant_velocity_predictor)):
        print(f"=== {name} predictor ===")
        print(format_report(evaluate_open_loop(dataset, predictor)))
        print()


if __name__ == "__main__":
    main()

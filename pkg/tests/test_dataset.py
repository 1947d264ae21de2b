"""Dataset windowing and open-loop prediction evaluation."""

import csv

import numpy as np
import pytest

from mergesim.dataset import (FRAME_RATE_HZ, FUTURE_FRAMES, PAST_FRAMES,
                              DatasetError, constant_velocity_predictor,
                              echo_predictor, evaluate_open_loop,
                              external_predictor, format_report,
                              ingest_dataset)
from mergesim.planning import CallableTransport

DT = 1.0 / FRAME_RATE_HZ


def write_csv(path, rows):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "frame", "x", "y", "vx", "vy"])
        writer.writerows(rows)
    return path


def vehicle_rows(vid, n_frames, x0=0.0, v0=10.0, a=0.0, y=0.0):
    """Straight longitudinal motion sampled at the dataset frame rate."""
    rows = []
    for k in range(n_frames):
        t = k * DT
        rows.append([vid, k, repr(x0 + v0 * t + 0.5 * a * t * t), repr(y),
                     repr(v0 + a * t), "0.0"])
    return rows


class TestIngest:
    def test_exactly_one_window(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", vehicle_rows(1, 100))
        data = ingest_dataset(path)
        assert len(data.pairs) == 1 and data.skipped_vehicles == 0
        pair = data.pairs[0]
        assert pair.past.shape == (PAST_FRAMES, 2)
        assert pair.future.shape == (FUTURE_FRAMES, 2)

    def test_short_vehicle_skipped(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", vehicle_rows(1, 99))
        data = ingest_dataset(path)
        assert data.pairs == [] and data.skipped_vehicles == 1

    def test_stride_windows(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", vehicle_rows(1, 150))
        data = ingest_dataset(path)
        assert len(data.pairs) == 2
        assert [p.start_frame for p in data.pairs] == [0, 50]

    def test_missing_column(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,frame,x,y\n1,0,0,0\n")
        with pytest.raises(DatasetError, match="vx"):
            ingest_dataset(path)

    def test_non_contiguous_frames(self, tmp_path):
        rows = vehicle_rows(1, 100)
        rows[50][1] = 60
        path = write_csv(tmp_path / "d.csv", rows)
        with pytest.raises(DatasetError, match="contiguous"):
            ingest_dataset(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            ingest_dataset(tmp_path / "nope.csv")


class TestPredictors:
    def test_echo_scores_zero(self, tmp_path):
        path = write_csv(tmp_path / "d.csv",
                         vehicle_rows(1, 100) + vehicle_rows(2, 100, y=50.0))
        report = evaluate_open_loop(ingest_dataset(path), echo_predictor)
        for h in (1, 2, 3):
            assert report[f"l2_{h}s"] == 0.0
        for h in (1, 2, 3, 4):
            assert report[f"rmse_{h}s"] == 0.0

    def test_const_vel_exact_on_const_vel_data(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", vehicle_rows(1, 100, v0=7.0))
        report = evaluate_open_loop(ingest_dataset(path),
                                    constant_velocity_predictor)
        assert report["rmse_4s"] == pytest.approx(0.0, abs=1e-9)

    def test_const_vel_on_const_accel_matches_kinematics(self, tmp_path):
        # under constant acceleration the extrapolation error is 1/2 a t^2
        a = 1.0
        path = write_csv(tmp_path / "d.csv", vehicle_rows(1, 100, v0=2.0, a=a))
        report = evaluate_open_loop(ingest_dataset(path),
                                    constant_velocity_predictor)
        for h in (1, 2, 3, 4):
            steps = np.arange(1, h * FRAME_RATE_HZ + 1) * DT
            errors = 0.5 * a * steps ** 2
            assert report[f"rmse_{h}s"] == pytest.approx(
                float(np.sqrt(np.mean(errors ** 2))), abs=1e-9)
            if h <= 3:
                assert report[f"l2_{h}s"] == pytest.approx(
                    float(np.mean(errors)), abs=1e-9)

    def test_external_predictor_round_trip(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", vehicle_rows(1, 100, v0=5.0))
        data = ingest_dataset(path)
        truth = data.pairs[0].future

        def serve(doc):
            assert "PAST" in doc and "INSTRUCTIONS" in doc
            return "".join(f"{x:.2f},{y:.2f};" for x, y in truth) + "\n"

        predictor = external_predictor(CallableTransport(serve))
        report = evaluate_open_loop(data, predictor)
        assert report["rmse_4s"] <= 0.005  # quantization only

    def test_bad_shape_rejected(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", vehicle_rows(1, 100))
        with pytest.raises(DatasetError, match="shape"):
            evaluate_open_loop(ingest_dataset(path),
                               lambda pair: pair.future[:10])


class TestCollisionCheck:
    def test_parallel_tracks_collision_free(self, tmp_path):
        path = write_csv(tmp_path / "d.csv",
                         vehicle_rows(1, 100) + vehicle_rows(2, 100, y=50.0))
        report = evaluate_open_loop(ingest_dataset(path), echo_predictor)
        assert report["collision_free"]

    def test_crossing_predictions_flagged(self, tmp_path):
        # same corridor, one vehicle starting inside the other's future path
        rows = vehicle_rows(1, 100, x0=0.0, v0=10.0) + \
            vehicle_rows(2, 100, x0=2.0, v0=10.0)
        path = write_csv(tmp_path / "d.csv", rows)
        report = evaluate_open_loop(ingest_dataset(path), echo_predictor)
        assert not report["collision_free"]
        assert report["predicted_collisions"] >= 1


def test_format_report_lists_horizons(tmp_path):
    path = write_csv(tmp_path / "d.csv", vehicle_rows(1, 100))
    report = evaluate_open_loop(ingest_dataset(path), echo_predictor)
    text = format_report(report)
    assert "pairs evaluated: 1" in text
    assert "4 s" in text and "collision-free" in text

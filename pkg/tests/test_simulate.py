import numpy as np
import pytest
from dataclasses import replace

from featservo.errors import TooFewVisibleLandmarks
from featservo.features import SyntheticDetectorConfig, synthetic_detect
from featservo.geometry import Pose, compose, pose_error, se3_exp
from featservo.simulate import (
    Scene,
    ServoLoop,
    ServoRunConfig,
    make_box_scene,
    make_planar_scene,
    render_target,
    run_servo,
    servo_step,
    write_trace_csv,
    write_trace_summary,
)


@pytest.fixture
def box_scene():
    return make_box_scene(seed=1)


@pytest.fixture
def clean_scene(box_scene):
    return box_scene.without_clutter()


def offset_config(target_pose, xi, **kwargs):
    return ServoRunConfig(
        target_pose=target_pose, initial_pose=compose(target_pose, se3_exp(xi)), **kwargs
    )


class TestScene:
    def test_ids_unique_across_groups(self, box_scene):
        all_ids = np.concatenate([box_scene.object_ids, box_scene.clutter_ids])
        assert len(np.unique(all_ids)) == len(all_ids)

    def test_generation_deterministic(self):
        a, b = make_box_scene(seed=4), make_box_scene(seed=4)
        assert np.array_equal(a.object_points, b.object_points)
        assert np.array_equal(a.object_descriptors, b.object_descriptors)
        assert not np.array_equal(a.object_points, make_box_scene(seed=5).object_points)

    def test_save_load_round_trip(self, box_scene, tmp_path):
        path = tmp_path / "scene.json"
        box_scene.save(path)
        loaded = Scene.load(path)
        assert np.array_equal(loaded.object_points, box_scene.object_points)
        assert np.array_equal(loaded.clutter_points, box_scene.clutter_points)
        # descriptors regenerate from the stored seed
        assert np.array_equal(loaded.object_descriptors, box_scene.object_descriptors)
        assert np.array_equal(loaded.clutter_descriptors, box_scene.clutter_descriptors)

    def test_planar_scene_is_planar(self):
        scene = make_planar_scene(seed=2)
        assert np.all(scene.object_points[:, 2] == 0.0)


class TestRenderTarget:
    def test_axis_landmark_at_principal_point(self, intrinsics):
        scene = Scene([[0.0, 0.0, 0.0]], np.zeros((0, 3)), seed=0, descriptor_dim=16)
        # needs >= 3 visible landmarks, so add two off-axis ones
        scene = Scene(
            [[0.0, 0.0, 0.0], [0.02, 0.0, 0.0], [0.0, 0.02, 0.0]],
            np.zeros((0, 3)),
            seed=0,
            descriptor_dim=16,
        )
        fs = render_target(scene, Pose(np.eye(3), (0, 0, -0.3)), intrinsics)
        on_axis = np.flatnonzero(fs.landmark_ids == 0)[0]
        assert np.allclose(fs.pixels[on_axis], (160.0, 120.0))
        assert fs.depths[on_axis] == pytest.approx(0.3)

    def test_excludes_clutter(self, box_scene, intrinsics, target_pose):
        fs = render_target(box_scene, target_pose, intrinsics)
        assert np.all(np.isin(fs.landmark_ids, box_scene.object_ids))
        assert not np.any(np.isin(fs.landmark_ids, box_scene.clutter_ids))

    def test_consistent_with_noiseless_detector(self, box_scene, intrinsics, target_pose):
        fs = render_target(box_scene, target_pose, intrinsics)
        detected = synthetic_detect(box_scene, target_pose, intrinsics, SyntheticDetectorConfig())
        by_id = {int(i): p for i, p in zip(detected.landmark_ids, detected.pixels)}
        for lid, pix in zip(fs.landmark_ids, fs.pixels):
            assert np.array_equal(by_id[int(lid)], pix)

    def test_too_few_visible(self, box_scene, intrinsics):
        looking_away = Pose(np.eye(3), (0.0, 0.0, 0.5))  # object behind camera
        with pytest.raises(TooFewVisibleLandmarks):
            render_target(box_scene, looking_away, intrinsics)


class TestServoStep:
    def test_fixed_point_at_target(self, clean_scene, target_pose):
        cfg = ServoRunConfig(target_pose=target_pose, initial_pose=target_pose)
        loop = ServoLoop(clean_scene, cfg)
        rec = servo_step(loop)
        assert rec.mean_error == 0.0
        assert np.allclose(rec.twist, 0.0, atol=1e-12)

    def test_error_decreases_on_first_cycle(self, clean_scene, target_pose):
        cfg = offset_config(target_pose, [0.01, 0, 0, 0, 0, 0])
        loop = ServoLoop(clean_scene, cfg)
        first = servo_step(loop)
        second = servo_step(loop)
        assert second.mean_error < first.mean_error

    def test_full_dropout_reports_starvation(self, clean_scene, target_pose):
        cfg = offset_config(
            target_pose,
            [0.01, 0, 0, 0, 0, 0],
            detector=SyntheticDetectorConfig(detection_dropout=1.0),
        )
        loop = ServoLoop(clean_scene, cfg)
        rec = servo_step(loop)
        assert rec.event == "insufficient_features"
        assert np.all(rec.twist == 0)


class TestRunServo:
    def test_converges_immediately_at_target(self, clean_scene, target_pose):
        trace = run_servo(clean_scene, ServoRunConfig(target_pose=target_pose,
                                                      initial_pose=target_pose))
        assert trace.status == "Converged"
        assert len(trace) == 1

    def test_full_dropout_terminates(self, clean_scene, target_pose):
        cfg = offset_config(
            target_pose,
            [0.01, 0, 0, 0, 0, 0],
            detector=SyntheticDetectorConfig(detection_dropout=1.0),
            max_cycles=50,
        )
        trace = run_servo(clean_scene, cfg)
        assert trace.status == "InsufficientFeatures"
        assert len(trace) < 50

    def test_noisy_cluttered_runs_converge(self, box_scene, target_pose):
        # 2 cm + 5 deg offsets, default noise, 100 clutter landmarks
        detector = SyntheticDetectorConfig(
            descriptor_noise_sigma=0.02, pixel_noise_sigma=0.3
        )
        rng = np.random.default_rng(0)
        for seed in range(20):
            direction = rng.normal(size=3)
            direction *= 0.02 / np.linalg.norm(direction)
            axis = rng.normal(size=3)
            axis *= np.deg2rad(5.0) / np.linalg.norm(axis)
            cfg = offset_config(
                target_pose,
                np.concatenate([direction, axis]),
                detector=replace(detector, seed=seed),
                ransac=replace(ServoRunConfig(target_pose, target_pose).ransac, seed=seed),
            )
            trace = run_servo(box_scene, cfg)
            assert trace.status == "Converged", f"seed {seed}: {trace.status}"
            assert len(trace) <= 400
            assert trace.final_mean_error < 2.0

    def test_far_offset_reports_honestly(self, clean_scene, target_pose):
        cfg = offset_config(target_pose, [0.20, 0, 0, 0, 0, 0], max_cycles=30)
        trace = run_servo(clean_scene, cfg)
        assert trace.status in ("Converged", "MaxCycles", "InsufficientFeatures")

    def test_target_purity_throughout_run(self, box_scene, target_pose):
        cfg = offset_config(target_pose, [0.01, -0.005, 0.01, 0.02, 0, 0])
        trace = run_servo(box_scene, cfg)
        clutter = set(int(i) for i in box_scene.clutter_ids)
        for rec in trace.records:
            assert not (set(rec.inlier_target_ids) & clutter)

    def test_tracked_inlier_counts_non_increasing(self, clean_scene, target_pose):
        cfg = offset_config(target_pose, [0.01, 0.005, 0, 0, 0.02, 0])
        trace = run_servo(clean_scene, cfg)
        counts = [r.n_inliers for r in trace.records if r.tracking]
        assert len(counts) > 0
        assert all(b <= a for a, b in zip(counts, counts[1:]))

    def test_noiseless_converged_pose_matches_ground_truth(self, clean_scene, target_pose):
        cfg = offset_config(
            target_pose, [0.008, -0.004, 0.006, 0.01, -0.02, 0.01], success_threshold=0.25
        )
        trace = run_servo(clean_scene, cfg)
        assert trace.status == "Converged"
        t_err, r_err = pose_error(trace.final_pose, target_pose)
        assert t_err < 1e-3
        assert np.degrees(r_err) < 0.2


class TestTraceOutput:
    def _trace(self, scene, target_pose):
        cfg = offset_config(
            target_pose,
            [0.01, 0, -0.005, 0, 0.01, 0],
            detector=SyntheticDetectorConfig(pixel_noise_sigma=0.2, seed=4),
        )
        return run_servo(scene, cfg), cfg

    def test_trace_csv_deterministic(self, box_scene, target_pose, tmp_path):
        trace_a, cfg = self._trace(box_scene, target_pose)
        trace_b, _ = self._trace(box_scene, target_pose)
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        write_trace_csv(trace_a, pa)
        write_trace_csv(trace_b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_summary_fields(self, clean_scene, target_pose, tmp_path):
        trace, _ = self._trace(clean_scene, target_pose)
        path = tmp_path / "summary.json"
        write_trace_summary(trace, path)
        import json

        summary = json.loads(path.read_text())
        assert summary["status"] == trace.status
        assert summary["cycles"] == len(trace)
        assert len(summary["final_pose"]) == 12

    def test_one_row_per_cycle(self, clean_scene, target_pose, tmp_path):
        trace, _ = self._trace(clean_scene, target_pose)
        path = tmp_path / "trace.csv"
        write_trace_csv(trace, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2 + len(trace)  # schema comment + header + rows

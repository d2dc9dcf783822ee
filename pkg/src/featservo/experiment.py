"""Evaluation harness: accuracy grids, batched success-ratio sweeps over
increasing initial offsets, profile exports, and the experiment config file.
"""

from __future__ import annotations

import concurrent.futures
import json
from dataclasses import dataclass, replace

import numpy as np

from .control import ControlConfig
from .errors import ConfigError
from .features import SyntheticDetectorConfig
from .geometry import CameraIntrinsics, Pose, compose
from .matching import RansacConfig
from .simulate import (
    DEFAULT_INTRINSICS,
    Scene,
    ServoRunConfig,
    ServoTrace,
    make_box_scene,
    run_servo,
)

_NUM = "%.17g"


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def camera_pose_looking_at(position, target_point, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera pose at `position` with the optical axis through `target_point`."""
    p = np.asarray(position, dtype=float)
    z = np.asarray(target_point, dtype=float) - p
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=float), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross((1.0, 0.0, 0.0), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), p)


def sample_offset_pose(
    rng: np.random.Generator,
    translation_band_m: tuple[float, float],
    rotation_bounds_deg,
) -> Pose:
    """Random perturbation: direction uniform on the sphere, magnitude uniform
    in the band, per-axis rotation angles uniform within their bounds."""
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction) + 1e-300
    magnitude = rng.uniform(*translation_band_m)
    angles = np.deg2rad([rng.uniform(-b, b) for b in rotation_bounds_deg])
    R = _rot_x(angles[0]) @ _rot_y(angles[1]) @ _rot_z(angles[2])
    return Pose(R, magnitude * direction)


def _run_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _seeded_run_config(base: ServoRunConfig, *seed_parts) -> ServoRunConfig:
    return replace(
        base,
        detector=replace(base.detector, seed=_run_seed(*seed_parts, 1)),
        ransac=replace(base.ransac, seed=_run_seed(*seed_parts, 2)),
    )


# ---------------------------------------------------------------------------
# Accuracy grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AccuracyRecord:
    scene_index: int
    goal_index: int
    start_index: int
    status: str
    cycles: int
    avg1: float  # mean px error over all final inliers
    avg2: float  # mean px error over ground-truth-verified final pairs


def _final_errors(trace: ServoTrace) -> tuple[float, float]:
    rec = trace.records[-1]
    if rec.pair_errors is None or rec.pair_errors.size == 0:
        return float("nan"), float("nan")
    avg1 = float(np.mean(rec.pair_errors))
    if rec.pair_id_match is None or not np.any(rec.pair_id_match):
        return avg1, float("nan")
    return avg1, float(np.mean(rec.pair_errors[rec.pair_id_match]))


def run_accuracy_suite(
    scenes: list[Scene],
    goal_poses: list[Pose],
    start_offsets: list[Pose],
    base_cfg: ServoRunConfig,
    seed: int = 0,
    keep_traces: bool = False,
):
    """Run every (scene, goal, start) combination and report AVG1/AVG2.

    AVG2 verification uses simulator landmark ids: a final pair counts only
    when the matched current and target keypoints come from the same
    landmark. Non-converged runs keep their status and are excluded from
    converged-only aggregates.
    """
    records = []
    traces = []
    for si, scene in enumerate(scenes):
        for gi, goal in enumerate(goal_poses):
            for ti, offset in enumerate(start_offsets):
                cfg = _seeded_run_config(base_cfg, seed, si, gi, ti)
                cfg = replace(cfg, target_pose=goal, initial_pose=compose(goal, offset))
                trace = run_servo(scene, cfg)
                avg1, avg2 = _final_errors(trace)
                records.append(
                    AccuracyRecord(si, gi, ti, trace.status, len(trace), avg1, avg2)
                )
                if keep_traces:
                    traces.append(trace)
    return (records, traces) if keep_traces else records


def aggregate_accuracy(records) -> dict:
    """Converged-only means of AVG1/AVG2 plus run counts."""
    conv = [r for r in records if r.status == "Converged"]
    avg1 = [r.avg1 for r in conv if np.isfinite(r.avg1)]
    avg2 = [r.avg2 for r in conv if np.isfinite(r.avg2)]
    return {
        "runs": len(records),
        "converged": len(conv),
        "mean_avg1_px": float(np.mean(avg1)) if avg1 else float("nan"),
        "mean_avg2_px": float(np.mean(avg2)) if avg2 else float("nan"),
    }


# ---------------------------------------------------------------------------
# Batched success-ratio sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchSpec:
    bands_cm: tuple  # ((lo, hi), ...) translation distance bands
    rotation_bounds_deg: tuple  # per-axis rotation bounds
    trials: int = 8
    clutter: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        prev_hi = 0.0
        for lo, hi in self.bands_cm:
            if hi <= lo or lo < prev_hi:
                raise ConfigError("bands must be non-overlapping and increasing")
            prev_hi = hi
        if len(self.rotation_bounds_deg) != 3:
            raise ConfigError("rotation_bounds_deg needs one bound per axis")


@dataclass(frozen=True)
class BatchResult:
    band_cm: tuple
    clutter: bool
    trials: int
    converged: int
    statuses: tuple

    @property
    def success_ratio(self) -> float:
        return self.converged / self.trials


def _batch_trial(scene, base_cfg, spec, band_idx, trial, seed):
    rng = np.random.default_rng([seed, band_idx, trial])
    lo, hi = spec.bands_cm[band_idx]
    offset = sample_offset_pose(rng, (lo / 100.0, hi / 100.0), spec.rotation_bounds_deg)
    cfg = _seeded_run_config(base_cfg, seed, band_idx, trial)
    cfg = replace(cfg, initial_pose=compose(base_cfg.target_pose, offset))
    return run_servo(scene, cfg)


def run_batch_suite(
    spec: BatchSpec,
    scene: Scene,
    base_cfg: ServoRunConfig,
    seed: int = 0,
    threads: int = 1,
    keep_traces: bool = False,
):
    """Per band: fraction of trials that converge below the success threshold.

    Trials are seeded independently, so they can run concurrently; results
    aggregate in (band, trial) order regardless of completion order.
    """
    work_scene = scene if spec.clutter else scene.without_clutter()
    jobs = [(bi, t) for bi in range(len(spec.bands_cm)) for t in range(spec.trials)]
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            traces = list(
                pool.map(lambda j: _batch_trial(work_scene, base_cfg, spec, *j, seed), jobs)
            )
    else:
        traces = [_batch_trial(work_scene, base_cfg, spec, bi, t, seed) for bi, t in jobs]

    results = []
    for bi, band in enumerate(spec.bands_cm):
        batch = traces[bi * spec.trials : (bi + 1) * spec.trials]
        statuses = tuple(tr.status for tr in batch)
        results.append(
            BatchResult(
                band_cm=tuple(band),
                clutter=spec.clutter,
                trials=spec.trials,
                converged=sum(s == "Converged" for s in statuses),
                statuses=statuses,
            )
        )
    return (results, traces) if keep_traces else results


# ---------------------------------------------------------------------------
# File outputs
# ---------------------------------------------------------------------------


def export_profiles(trace: ServoTrace, twist_path, errors_path) -> None:
    """Two per-cycle CSVs: twist components, and (mean error, correspondence
    count, tracking flag). Deterministic byte-for-byte for a given trace."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    with open(twist_path, "w") as f:
        f.write("# featservo_twist_profile_v1\n")
        f.write("cycle,vx,vy,vz,wx,wy,wz\n")
        for r in trace.records:
            f.write(str(r.cycle) + "," + ",".join(_NUM % v for v in r.twist) + "\n")
    with open(errors_path, "w") as f:
        f.write("# featservo_error_profile_v1\n")
        f.write("cycle,mean_error_px,correspondence_count,tracking\n")
        for r in trace.records:
            f.write(
                f"{r.cycle},{_NUM % r.mean_error},{r.n_correspondences},"
                f"{1 if r.tracking else 0}\n"
            )


def write_accuracy_csv(records, path) -> None:
    with open(path, "w") as f:
        f.write("# featservo_accuracy_v1\n")
        f.write("scene,goal,start,status,cycles,avg1_px,avg2_px\n")
        for r in records:
            f.write(
                f"{r.scene_index},{r.goal_index},{r.start_index},{r.status},"
                f"{r.cycles},{_NUM % r.avg1},{_NUM % r.avg2}\n"
            )


def write_batch_csv(results, path) -> None:
    with open(path, "w") as f:
        f.write("# featservo_batch_v1\n")
        f.write("band_lo_cm,band_hi_cm,clutter,trials,converged,success_ratio\n")
        for r in results:
            f.write(
                f"{_NUM % r.band_cm[0]},{_NUM % r.band_cm[1]},{1 if r.clutter else 0},"
                f"{r.trials},{r.converged},{_NUM % r.success_ratio}\n"
            )


# ---------------------------------------------------------------------------
# Config file
# ---------------------------------------------------------------------------

CONFIG_SCHEMA = "featservo_config_v1"

_DEFAULT_CONFIG = {
    "schema": CONFIG_SCHEMA,
    "seed": 0,
    "camera": {"fx": 600.0, "fy": 600.0, "cx": 160.0, "cy": 120.0, "width": 320, "height": 240},
    "scene": {
        "n_object": 120,
        "n_clutter": 100,
        "box_size": 0.12,
        "clutter_shell": [0.15, 0.30],
        "view_cone_deg": 85.0,
        "descriptor_dim": 256,
    },
    "detector": {
        "descriptor_noise_sigma": 0.02,
        "detection_dropout": 0.0,
        "pixel_noise_sigma": 0.3,
    },
    "control": {"gain": 0.5, "svd_tolerance": 1e-10, "max_twist": None},
    "ransac": {
        "inlier_threshold": 2.0,
        "max_iterations": 1000,
        "confidence": 0.999,
        "min_sample": 4,
    },
    "servo": {
        "dt": 0.05,
        "tracking_threshold": 10.0,
        "success_threshold": 2.0,
        "max_cycles": 400,
        "top_k": 500,
    },
    "run": {"camera_distance": 0.40, "offset_cm": 2.0, "rotation_deg": [5.0, 5.0, 3.0]},
    "accuracy": {
        "goals": 2,
        "starts": 3,
        "scenes": 3,
        "offset_cm": [2.0, 4.0],
        "rotation_deg": [6.0, 6.0, 4.0],
    },
    "batch": {
        "bands_cm": [[0.0, 1.0], [1.0, 2.0], [2.0, 3.0], [3.0, 4.0], [4.0, 5.0], [5.0, 6.0]],
        "rotation_deg": [8.0, 10.0, 8.0],
        "trials": 8,
        "clutter": "both",
    },
}


def _merge_strict(defaults: dict, user: dict, path: str = "") -> dict:
    out = dict(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a table")
            out[key] = _merge_strict(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """Parse and validate the experiment config; unknown keys are errors."""
    with open(path) as f:
        try:
            user = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError("config root must be an object")
    if user.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
        raise ConfigError(f"unsupported config schema {user.get('schema')!r}")
    cfg = _merge_strict(_DEFAULT_CONFIG, user)
    if cfg["batch"]["clutter"] not in (True, False, "both"):
        raise ConfigError("batch.clutter must be true, false, or \"both\"")
    BatchSpec(  # validates bands/trials early
        bands_cm=tuple(tuple(b) for b in cfg["batch"]["bands_cm"]),
        rotation_bounds_deg=tuple(cfg["batch"]["rotation_deg"]),
        trials=cfg["batch"]["trials"],
    )
    return cfg


def batch_specs(cfg: dict) -> list[BatchSpec]:
    """One spec per requested clutter mode, clutter-on first."""
    mode = cfg["batch"]["clutter"]
    modes = [True, False] if mode == "both" else [bool(mode)]
    return [
        BatchSpec(
            bands_cm=tuple(tuple(b) for b in cfg["batch"]["bands_cm"]),
            rotation_bounds_deg=tuple(cfg["batch"]["rotation_deg"]),
            trials=cfg["batch"]["trials"],
            clutter=m,
        )
        for m in modes
    ]


def build_scene(cfg: dict, seed_offset: int = 0) -> Scene:
    sc = cfg["scene"]
    return make_box_scene(
        seed=cfg["seed"] + seed_offset,
        n_object=sc["n_object"],
        n_clutter=sc["n_clutter"],
        box_size=sc["box_size"],
        clutter_shell=tuple(sc["clutter_shell"]),
        view_cone_deg=sc["view_cone_deg"],
        descriptor_dim=sc["descriptor_dim"],
    )


def build_run_config(cfg: dict) -> ServoRunConfig:
    cam = cfg["camera"]
    intrinsics = CameraIntrinsics(
        fx=cam["fx"], fy=cam["fy"], cx=cam["cx"], cy=cam["cy"],
        width=cam["width"], height=cam["height"],
    )
    ctrl = cfg["control"]
    servo = cfg["servo"]
    det = cfg["detector"]
    rs = cfg["ransac"]
    target = Pose(np.eye(3), (0.0, 0.0, -cfg["run"]["camera_distance"]))
    rng = np.random.default_rng([cfg["seed"], 0x0FF])
    offset = sample_offset_pose(
        rng,
        (0.0, cfg["run"]["offset_cm"] / 100.0),
        cfg["run"]["rotation_deg"],
    )
    return ServoRunConfig(
        target_pose=target,
        initial_pose=compose(target, offset),
        intrinsics=intrinsics,
        control=ControlConfig(
            gain=ctrl["gain"],
            svd_tolerance=ctrl["svd_tolerance"],
            max_twist=None if ctrl["max_twist"] is None else tuple(ctrl["max_twist"]),
        ),
        ransac=RansacConfig(
            inlier_threshold=rs["inlier_threshold"],
            max_iterations=rs["max_iterations"],
            confidence=rs["confidence"],
            min_sample=rs["min_sample"],
            seed=cfg["seed"],
        ),
        detector=SyntheticDetectorConfig(
            descriptor_noise_sigma=det["descriptor_noise_sigma"],
            detection_dropout=det["detection_dropout"],
            pixel_noise_sigma=det["pixel_noise_sigma"],
            seed=cfg["seed"],
        ),
        dt=servo["dt"],
        tracking_threshold=servo["tracking_threshold"],
        success_threshold=servo["success_threshold"],
        max_cycles=servo["max_cycles"],
        top_k=servo["top_k"],
    )


def default_goal_poses(camera_distance: float, count: int = 2) -> list[Pose]:
    """Goal cameras aimed at the object: straight-on, then slightly tilted."""
    goals = [Pose(np.eye(3), (0.0, 0.0, -camera_distance))]
    tilts = [(8.0, 0.05), (-6.0, -0.04)]
    for deg, lateral in tilts[: max(count - 1, 0)]:
        d = camera_distance * 0.95
        pos = np.array([lateral, 0.0, -np.sqrt(max(d * d - lateral * lateral, 1e-6))])
        goals.append(camera_pose_looking_at(pos, (0.0, 0.0, 0.0)))
    return goals[:count]


def default_start_offsets(cfg: dict) -> list[Pose]:
    acc = cfg["accuracy"]
    lo, hi = acc["offset_cm"]
    rng = np.random.default_rng([cfg["seed"], 0xACC])
    return [
        sample_offset_pose(rng, (lo / 100.0, hi / 100.0), acc["rotation_deg"])
        for _ in range(acc["starts"])
    ]

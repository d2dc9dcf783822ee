"""Simulated world and closed servo loop: landmark scenes with clutter,
noiseless target rendering with exact feature depths, and the
detect/match/reject/control cycle driven to convergence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .control import ControlConfig, control_law, stack_interaction
from .errors import (
    EmptySet,
    InsufficientFeatures,
    TooFewCorrespondences,
    TooFewVisibleLandmarks,
    TrackingLost,
)
from .features import (
    FeatureSet,
    SyntheticDetectorConfig,
    landmark_scores,
    synthetic_detect,
    top_k,
    _order_by_score,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    Twist,
    integrate_twist,
    pixel_to_normalized,
    project_many,
)
from .matching import (
    RansacConfig,
    TrackingState,
    match_nn,
    mean_correspondence_error,
    ransac_inliers,
    tracking_update,
)

DEFAULT_INTRINSICS = CameraIntrinsics(fx=600.0, fy=600.0, cx=160.0, cy=120.0, width=320, height=240)

_SCENE_SCHEMA = "featservo_scene_v1"
_INSUFFICIENT_LIMIT = 10  # consecutive starved cycles before giving up


class Scene:
    """3D landmark world: object landmarks (rendered in target views) plus
    clutter landmarks visible only in current views.

    Canonical descriptors are regenerated deterministically from the seed,
    so serialization stores only geometry and the seed.
    """

    def __init__(
        self,
        object_points,
        clutter_points,
        seed: int,
        object_normals=None,
        max_incidence_deg: float | None = None,
        descriptor_dim: int = 256,
    ):
        self.object_points = np.asarray(object_points, dtype=float).reshape(-1, 3)
        self.clutter_points = np.asarray(clutter_points, dtype=float).reshape(-1, 3)
        self.seed = int(seed)
        self.descriptor_dim = int(descriptor_dim)
        self.max_incidence_deg = max_incidence_deg
        if object_normals is not None:
            object_normals = np.asarray(object_normals, dtype=float).reshape(-1, 3)
            if object_normals.shape[0] != self.object_points.shape[0]:
                raise ValueError("one normal per object landmark required")
            object_normals = object_normals / np.linalg.norm(object_normals, axis=1, keepdims=True)
        self.object_normals = object_normals

        n, m = self.object_points.shape[0], self.clutter_points.shape[0]
        self.object_ids = np.arange(n, dtype=np.int64)
        self.clutter_ids = np.arange(n, n + m, dtype=np.int64)
        rng = np.random.default_rng(self.seed)
        desc = rng.normal(size=(n + m, self.descriptor_dim))
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        self.object_descriptors = desc[:n]
        self.clutter_descriptors = desc[n:]

    @property
    def n_object(self) -> int:
        return self.object_points.shape[0]

    @property
    def n_clutter(self) -> int:
        return self.clutter_points.shape[0]

    def current_view_landmarks(self):
        """Everything a current-view detector can see: object + clutter."""
        return (
            np.vstack([self.object_points, self.clutter_points]),
            np.vstack([self.object_descriptors, self.clutter_descriptors]),
            np.concatenate([self.object_ids, self.clutter_ids]),
        )

    def view_cone_mask(self, points: np.ndarray, camera_position: np.ndarray) -> np.ndarray:
        """Per-landmark visibility from a camera position, by incidence angle.

        Only object landmarks carry normals; clutter always passes.
        """
        mask = np.ones(points.shape[0], dtype=bool)
        if self.object_normals is None or self.max_incidence_deg is None:
            return mask
        n = self.n_object
        to_cam = camera_position - points[:n]
        to_cam /= np.linalg.norm(to_cam, axis=1, keepdims=True) + 1e-300
        cos_inc = np.sum(to_cam * self.object_normals, axis=1)
        mask[:n] = cos_inc >= np.cos(np.deg2rad(self.max_incidence_deg))
        return mask

    def without_clutter(self) -> "Scene":
        scene = Scene(
            self.object_points,
            np.zeros((0, 3)),
            self.seed,
            self.object_normals,
            self.max_incidence_deg,
            self.descriptor_dim,
        )
        # keep the same canonical descriptors for object landmarks
        scene.object_descriptors = self.object_descriptors
        return scene

    def to_dict(self) -> dict:
        return {
            "schema": _SCENE_SCHEMA,
            "seed": self.seed,
            "descriptor_dim": self.descriptor_dim,
            "max_incidence_deg": self.max_incidence_deg,
            "object_points": self.object_points.tolist(),
            "object_normals": None
            if self.object_normals is None
            else self.object_normals.tolist(),
            "clutter_points": self.clutter_points.tolist(),
        }

    @staticmethod
    def from_dict(data: dict) -> "Scene":
        if data.get("schema") != _SCENE_SCHEMA:
            raise ValueError(f"unsupported scene schema {data.get('schema')!r}")
        return Scene(
            np.asarray(data["object_points"]),
            np.asarray(data["clutter_points"]),
            data["seed"],
            None if data.get("object_normals") is None else np.asarray(data["object_normals"]),
            data.get("max_incidence_deg"),
            data.get("descriptor_dim", 256),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @staticmethod
    def load(path) -> "Scene":
        with open(path) as f:
            return Scene.from_dict(json.load(f))


def make_box_scene(
    seed: int,
    n_object: int = 120,
    n_clutter: int = 100,
    box_size: float = 0.12,
    clutter_shell: tuple[float, float] = (0.15, 0.30),
    view_cone_deg: float | None = 85.0,
    descriptor_dim: int = 256,
) -> Scene:
    """Landmarks on three faces of a box at the origin plus a clutter shell.

    The face at z = -size/2 faces a camera placed on the -z axis; the two
    side faces only become visible from tilted viewpoints, which reproduces
    features that exist in one image but not the other.
    """
    rng = np.random.default_rng([seed, 0xB0])
    half = box_size / 2.0
    n_front = int(round(0.6 * n_object))
    n_side = (n_object - n_front) // 2
    n_side2 = n_object - n_front - n_side

    def face(n, fixed_axis, fixed_value, normal):
        pts = rng.uniform(-half, half, size=(n, 3))
        pts[:, fixed_axis] = fixed_value
        normals = np.tile(np.asarray(normal, dtype=float), (n, 1))
        return pts, normals

    f0, nrm0 = face(n_front, 2, -half, (0.0, 0.0, -1.0))
    f1, nrm1 = face(n_side, 0, half, (1.0, 0.0, 0.0))
    f2, nrm2 = face(n_side2, 1, -half, (0.0, -1.0, 0.0))
    object_points = np.vstack([f0, f1, f2])
    object_normals = np.vstack([nrm0, nrm1, nrm2]) if view_cone_deg is not None else None

    direction = rng.normal(size=(n_clutter, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True) + 1e-300
    lo, hi = clutter_shell
    radius = (rng.uniform(lo**3, hi**3, size=n_clutter)) ** (1.0 / 3.0)
    clutter_points = direction * radius[:, None]

    return Scene(
        object_points,
        clutter_points,
        seed,
        object_normals,
        view_cone_deg,
        descriptor_dim,
    )


def make_planar_scene(
    seed: int,
    n_object: int = 80,
    n_clutter: int = 0,
    extent: float = 0.12,
    clutter_shell: tuple[float, float] = (0.15, 0.30),
    descriptor_dim: int = 256,
) -> Scene:
    """Landmarks on the z = 0 plane: all views of the object are related by
    an exact homography, so the consensus set stays stable across cycles."""
    rng = np.random.default_rng([seed, 0xF1])
    half = extent / 2.0
    pts = rng.uniform(-half, half, size=(n_object, 3))
    pts[:, 2] = 0.0
    if n_clutter > 0:
        direction = rng.normal(size=(n_clutter, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True) + 1e-300
        lo, hi = clutter_shell
        radius = rng.uniform(lo**3, hi**3, size=n_clutter) ** (1.0 / 3.0)
        clutter = direction * radius[:, None]
    else:
        clutter = np.zeros((0, 3))
    return Scene(pts, clutter, seed, None, None, descriptor_dim)


def render_target(scene: Scene, target_pose: Pose, intrinsics: CameraIntrinsics) -> FeatureSet:
    """Noiseless feature render of the target view, with exact depths.

    Only object landmarks appear; clutter is never part of the target.
    """
    cam_pts = target_pose.world_to_camera(scene.object_points)
    pixels, depths = project_many(cam_pts, intrinsics)
    w, h = intrinsics.width, intrinsics.height
    visible = (depths > 1e-9) & np.all(np.isfinite(pixels), axis=1)
    visible &= (pixels[:, 0] >= 0) & (pixels[:, 0] < w) & (pixels[:, 1] >= 0) & (pixels[:, 1] < h)
    if scene.object_normals is not None and scene.max_incidence_deg is not None:
        to_cam = target_pose.translation - scene.object_points
        to_cam /= np.linalg.norm(to_cam, axis=1, keepdims=True) + 1e-300
        visible &= np.sum(to_cam * scene.object_normals, axis=1) >= np.cos(
            np.deg2rad(scene.max_incidence_deg)
        )
    idx = np.flatnonzero(visible)
    if idx.size < 3:
        raise TooFewVisibleLandmarks(f"only {idx.size} object landmarks visible from target pose")
    scores = landmark_scores(scene.seed, scene.object_ids[idx])
    order = _order_by_score(pixels[idx], scores)
    idx = idx[order]
    return FeatureSet(
        pixels[idx],
        scene.object_descriptors[idx],
        landmark_scores(scene.seed, scene.object_ids[idx]),
        (w, h),
        depths=depths[idx],
        landmark_ids=scene.object_ids[idx],
    )


@dataclass(frozen=True)
class ServoRunConfig:
    target_pose: Pose
    initial_pose: Pose
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    control: ControlConfig = field(default_factory=ControlConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    detector: SyntheticDetectorConfig = field(default_factory=SyntheticDetectorConfig)
    dt: float = 0.05
    tracking_threshold: float = 10.0  # px mean error to enter tracking mode
    success_threshold: float = 2.0  # px mean inlier error for convergence
    max_cycles: int = 400
    top_k: int = 500
    use_current_interaction: bool = False  # diagnostic: true L(s, Z) each cycle

    def __post_init__(self):
        if self.success_threshold <= 0:
            raise ValueError("success_threshold must be positive")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")


@dataclass(frozen=True)
class CycleRecord:
    cycle: int
    pose: Pose  # camera pose the cycle's image was taken from
    twist: np.ndarray  # commanded twist, 6-vector
    n_correspondences: int
    n_inliers: int
    mean_error: float  # px, NaN when no inlier set exists
    error_norm: float  # norm of the normalized-coordinate error vector
    tracking: bool  # matching was restricted to the locked target subset
    event: str = ""  # "", "tracking_lost", "insufficient_features"
    inlier_target_ids: tuple = ()
    pair_errors: np.ndarray | None = None  # px per inlier pair
    pair_id_match: np.ndarray | None = None  # ground-truth verification per pair


@dataclass(frozen=True)
class ServoTrace:
    records: list
    status: str  # Converged | MaxCycles | TrackingLost | InsufficientFeatures

    @property
    def final_pose(self) -> Pose:
        return self.records[-1].pose

    @property
    def final_mean_error(self) -> float:
        return self.records[-1].mean_error

    def __len__(self) -> int:
        return len(self.records)


class ServoLoop:
    """One closed-loop servo run; owns all per-run mutable state."""

    def __init__(self, scene: Scene, cfg: ServoRunConfig):
        self.scene = scene
        self.cfg = cfg
        self.target_full = render_target(scene, cfg.target_pose, cfg.intrinsics)
        self.pose = cfg.initial_pose
        self.cycle = 0
        self.tracking = TrackingState(activation_threshold=cfg.tracking_threshold)
        self.tracking_disabled = False
        self._detect_rng = np.random.default_rng([cfg.detector.seed, 0xDE])
        self._ransac_rng = np.random.default_rng([cfg.ransac.seed, 0x5C])

    def _starved_record(self, n_corr: int, tracking_flag: bool, event: str) -> CycleRecord:
        return CycleRecord(
            cycle=self.cycle,
            pose=self.pose,
            twist=np.zeros(6),
            n_correspondences=n_corr,
            n_inliers=0,
            mean_error=float("nan"),
            error_norm=float("nan"),
            tracking=tracking_flag,
            event=event,
        )

    def step(self) -> CycleRecord:
        cfg = self.cfg
        self.cycle += 1

        current = synthetic_detect(
            self.scene, self.pose, cfg.intrinsics, cfg.detector, self._detect_rng
        )
        current = top_k(current, cfg.top_k)
        target = self.tracking.matchable_target(self.target_full)
        tracking_flag = self.tracking.active

        C = match_nn(current, target)
        try:
            R = ransac_inliers(C, cfg.ransac, rng=self._ransac_rng)
            mean_error = mean_correspondence_error(R)
        except (TooFewCorrespondences, EmptySet):
            if tracking_flag:
                # tracked matching starved out: fall back to full matching
                self.tracking = TrackingState(activation_threshold=cfg.tracking_threshold)
                self.tracking_disabled = True
                return self._starved_record(len(C), tracking_flag, "tracking_lost")
            return self._starved_record(len(C), tracking_flag, "insufficient_features")

        s = pixel_to_normalized(R.current_pixels, cfg.intrinsics).reshape(-1)
        s_star = pixel_to_normalized(R.target_pixels, cfg.intrinsics).reshape(-1)
        e = s - s_star
        event = ""
        try:
            if cfg.use_current_interaction:
                depths = current.depths[R.current_indices]
                L = stack_interaction(s, depths)
            else:
                depths = target.depths[R.target_indices]
                L = stack_interaction(s_star, depths)
            twist = control_law(e, L, cfg.control)
        except InsufficientFeatures:
            twist = Twist.zero()
            event = "insufficient_features"

        pair_errors = np.linalg.norm(R.current_pixels - R.target_pixels, axis=1)
        pair_id_match = None
        inlier_ids = ()
        if target.landmark_ids is not None:
            inlier_ids = tuple(int(i) for i in np.sort(target.landmark_ids[R.target_indices]))
            if current.landmark_ids is not None:
                pair_id_match = (
                    current.landmark_ids[R.current_indices]
                    == target.landmark_ids[R.target_indices]
                )

        record = CycleRecord(
            cycle=self.cycle,
            pose=self.pose,
            twist=twist.as_vector(),
            n_correspondences=len(C),
            n_inliers=len(R),
            mean_error=mean_error,
            error_norm=float(np.linalg.norm(e)),
            tracking=tracking_flag,
            event=event,
            inlier_target_ids=inlier_ids,
            pair_errors=pair_errors,
            pair_id_match=pair_id_match,
        )

        self.pose = integrate_twist(self.pose, twist, cfg.dt)
        if not self.tracking_disabled and event == "":
            try:
                self.tracking = tracking_update(self.tracking, target, R, mean_error)
            except TrackingLost:
                self.tracking = TrackingState(activation_threshold=cfg.tracking_threshold)
                self.tracking_disabled = True
                record = replace(record, event="tracking_lost")
        return record


def servo_step(loop: ServoLoop) -> CycleRecord:
    """Run one detect/match/reject/control cycle of an existing loop."""
    return loop.step()


def run_servo(scene: Scene, cfg: ServoRunConfig) -> ServoTrace:
    """Iterate the servo loop to convergence, cycle budget, or feature loss."""
    loop = ServoLoop(scene, cfg)
    records = []
    status = "MaxCycles"
    starved = 0
    for _ in range(cfg.max_cycles):
        rec = loop.step()
        records.append(rec)
        if np.isfinite(rec.mean_error) and rec.mean_error < cfg.success_threshold:
            status = "Converged"
            break
        if rec.event == "insufficient_features":
            starved += 1
            if starved >= _INSUFFICIENT_LIMIT:
                status = "InsufficientFeatures"
                break
        else:
            starved = 0
    return ServoTrace(records=records, status=status)


_TRACE_SCHEMA = "featservo_trace_v1"
_NUM = "%.17g"


def write_trace_csv(trace: ServoTrace, path) -> None:
    """Full per-cycle trace, one row per cycle; stable column order."""
    cols = (
        ["cycle", "tracking", "event", "n_correspondences", "n_inliers", "mean_error_px",
         "error_norm", "vx", "vy", "vz", "wx", "wy", "wz"]
        + [f"pose_{i}" for i in range(12)]
        + ["inlier_target_ids"]
    )
    with open(path, "w") as f:
        f.write(f"# {_TRACE_SCHEMA}\n")
        f.write(",".join(cols) + "\n")
        for r in trace.records:
            row = [
                str(r.cycle),
                "1" if r.tracking else "0",
                r.event,
                str(r.n_correspondences),
                str(r.n_inliers),
                _NUM % r.mean_error,
                _NUM % r.error_norm,
            ]
            row += [_NUM % v for v in r.twist]
            row += [_NUM % v for v in r.pose.to_flat()]
            row.append(";".join(str(i) for i in r.inlier_target_ids))
            f.write(",".join(row) + "\n")


def write_trace_summary(trace: ServoTrace, path) -> None:
    summary = {
        "schema": "featservo_trace_summary_v1",
        "status": trace.status,
        "cycles": len(trace),
        "final_mean_error_px": trace.final_mean_error,
        "final_pose": trace.final_pose.to_flat(),
        "tracking_cycles": sum(1 for r in trace.records if r.tracking),
        "events": [
            {"cycle": r.cycle, "event": r.event} for r in trace.records if r.event
        ],
    }
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")

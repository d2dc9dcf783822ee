"""Keypoint/descriptor data model, the detector abstraction, a synthetic
oracle detector over landmark scenes, and the feature-exchange file format
used to plug in external learned detectors.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DetectorUnavailable, ParseError, SchemaVersionMismatch
from .geometry import CameraIntrinsics, Pose, project_many

DESCRIPTOR_DIM = 256
_FORMAT_VERSION = 1
_FLOAT_FMT = "%.17g"  # exact float64 round trip


@dataclass(frozen=True)
class Keypoint:
    """One detected feature; landmark_id is simulation ground truth only."""

    pixel: np.ndarray
    descriptor: np.ndarray
    score: float
    landmark_id: int | None = None


class FeatureSet:
    """Immutable, ordered set of keypoints for one image.

    Stored as parallel arrays: pixels (n,2), descriptors (n,d), scores (n,).
    Depths (meters) are present for target renders; landmark ids only for
    simulated detections.
    """

    __slots__ = ("pixels", "descriptors", "scores", "image_size", "depths", "landmark_ids")

    def __init__(self, pixels, descriptors, scores, image_size, depths=None, landmark_ids=None):
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        descriptors = np.atleast_2d(np.asarray(descriptors, dtype=float))
        scores = np.asarray(scores, dtype=float).reshape(-1)
        n = scores.size
        if pixels.shape != (n, 2) and not (n == 0 and pixels.size == 0):
            raise ValueError(f"pixels shape {pixels.shape} != ({n}, 2)")
        if n > 0 and descriptors.shape[0] != n:
            raise ValueError("descriptor row count mismatch")
        w, h = int(image_size[0]), int(image_size[1])
        if n > 0:
            if np.any(pixels[:, 0] < 0) or np.any(pixels[:, 0] >= w) or np.any(
                pixels[:, 1] < 0
            ) or np.any(pixels[:, 1] >= h):
                raise ValueError("keypoint pixel outside image bounds")
            if np.any(scores < 0) or np.any(scores > 1):
                raise ValueError("scores must lie in [0, 1]")
            norms = np.linalg.norm(descriptors, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("descriptors must be unit norm")
        if depths is not None:
            depths = np.asarray(depths, dtype=float).reshape(-1)
            if depths.size != n:
                raise ValueError("depth count != keypoint count")
            if np.any(depths <= 0):
                raise ValueError("depths must be positive")
        if landmark_ids is not None:
            landmark_ids = np.asarray(landmark_ids, dtype=np.int64).reshape(-1)
            if landmark_ids.size != n:
                raise ValueError("landmark id count != keypoint count")
        self.pixels = pixels.reshape(n, 2)
        if n == 0:
            d = descriptors.shape[1] if descriptors.ndim == 2 and descriptors.shape[1] else DESCRIPTOR_DIM
            descriptors = np.zeros((0, d))
        self.descriptors = descriptors.reshape(n, -1) if n else descriptors
        self.scores = scores
        self.image_size = (w, h)
        self.depths = depths
        self.landmark_ids = landmark_ids
        for a in (self.pixels, self.descriptors, self.scores, depths, landmark_ids):
            if a is not None:
                a.setflags(write=False)

    def __len__(self) -> int:
        return self.scores.size

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1] if len(self) else DESCRIPTOR_DIM

    def keypoint(self, i: int) -> Keypoint:
        lid = None if self.landmark_ids is None else int(self.landmark_ids[i])
        return Keypoint(self.pixels[i], self.descriptors[i], float(self.scores[i]), lid)

    def subset(self, indices) -> "FeatureSet":
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureSet(
            self.pixels[idx],
            self.descriptors[idx],
            self.scores[idx],
            self.image_size,
            None if self.depths is None else self.depths[idx],
            None if self.landmark_ids is None else self.landmark_ids[idx],
        )

    @staticmethod
    def empty(image_size, descriptor_dim=DESCRIPTOR_DIM) -> "FeatureSet":
        return FeatureSet(
            np.zeros((0, 2)), np.zeros((0, descriptor_dim)), np.zeros(0), image_size
        )


@dataclass(frozen=True)
class SyntheticDetectorConfig:
    """Imperfection model for the oracle detector."""

    descriptor_noise_sigma: float = 0.0
    detection_dropout: float = 0.0
    pixel_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.descriptor_noise_sigma < 0 or self.pixel_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.detection_dropout <= 1.0:
            raise ValueError("dropout must be a probability")


def landmark_scores(seed: int, ids) -> np.ndarray:
    """Deterministic per-landmark confidence in [0, 1): splitmix64 of (seed, id)."""
    mixed_seed = (int(seed) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = np.asarray(ids, dtype=np.uint64) + np.uint64(mixed_seed)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return (x >> np.uint64(11)).astype(np.float64) / float(2**53)


def _order_by_score(pixels, scores):
    """Descending score; ties broken by pixel (u, v) ascending."""
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort((pixels[:, 1], pixels[:, 0], -scores))


def synthetic_detect(
    scene,
    camera: Pose,
    intrinsics: CameraIntrinsics,
    cfg: SyntheticDetectorConfig,
    rng: np.random.Generator | None = None,
) -> FeatureSet:
    """Oracle detector over a landmark scene.

    Projects every visible landmark (positive depth, in frame, within the
    scene's view cone), applies dropout and pixel/descriptor noise, and
    records ground-truth landmark ids and depths. Deterministic given
    (scene, camera, cfg.seed) when no generator is supplied.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    points, descriptors, ids = scene.current_view_landmarks()
    w, h = intrinsics.width, intrinsics.height
    if points.shape[0] == 0:
        return FeatureSet.empty((w, h), descriptors.shape[1] if descriptors.size else DESCRIPTOR_DIM)

    cam_pts = camera.world_to_camera(points)
    pixels, depths = project_many(cam_pts, intrinsics)
    visible = (depths > 1e-9) & np.all(np.isfinite(pixels), axis=1)
    visible &= (pixels[:, 0] >= 0) & (pixels[:, 0] < w) & (pixels[:, 1] >= 0) & (pixels[:, 1] < h)
    visible &= scene.view_cone_mask(points, camera.translation)

    idx = np.flatnonzero(visible)
    # one draw per visible landmark, in scene order, so runs are reproducible
    keep = rng.random(idx.size) >= cfg.detection_dropout
    idx = idx[keep]
    n = idx.size
    if n == 0:
        return FeatureSet.empty((w, h), descriptors.shape[1])

    noisy_pixels = pixels[idx]
    if cfg.pixel_noise_sigma > 0:
        noisy_pixels = noisy_pixels + rng.normal(0.0, cfg.pixel_noise_sigma, size=(n, 2))
    desc = descriptors[idx]
    if cfg.descriptor_noise_sigma > 0:
        desc = desc + rng.normal(0.0, cfg.descriptor_noise_sigma, size=desc.shape)
    desc = desc / np.linalg.norm(desc, axis=1, keepdims=True)

    # keypoints pushed out of frame by noise are dropped, never clamped
    inb = (
        (noisy_pixels[:, 0] >= 0)
        & (noisy_pixels[:, 0] < w)
        & (noisy_pixels[:, 1] >= 0)
        & (noisy_pixels[:, 1] < h)
    )
    idx, noisy_pixels, desc = idx[inb], noisy_pixels[inb], desc[inb]
    scores = landmark_scores(scene.seed, ids[idx])

    order = _order_by_score(noisy_pixels, scores)
    return FeatureSet(
        noisy_pixels[order],
        desc[order],
        scores[order],
        (w, h),
        depths=depths[idx][order],
        landmark_ids=ids[idx][order],
    )


class SyntheticDetector:
    """Stateful detector bound to one scene/camera; owns its noise stream."""

    def __init__(self, scene, intrinsics: CameraIntrinsics, cfg: SyntheticDetectorConfig):
        self.scene = scene
        self.intrinsics = intrinsics
        self.cfg = cfg
        self._rng = np.random.default_rng(cfg.seed)

    def detect(self, camera: Pose) -> FeatureSet:
        return synthetic_detect(self.scene, camera, self.intrinsics, self.cfg, self._rng)


class FileDetector:
    """Replays stored feature files, one per detect() call, in order."""

    def __init__(self, paths):
        self._paths = list(paths)
        self._next = 0

    def detect(self, camera: Pose = None) -> FeatureSet:
        if self._next >= len(self._paths):
            raise DetectorUnavailable("no more stored feature records")
        fs = read_features(self._paths[self._next])
        self._next += 1
        return fs


def top_k(fs: FeatureSet, k: int) -> FeatureSet:
    """Keep the k highest-confidence keypoints (all if fewer)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if k >= len(fs):
        return fs
    order = _order_by_score(fs.pixels, fs.scores)
    return fs.subset(order[:k])


def write_features(fs: FeatureSet, sink) -> None:
    """Serialize a FeatureSet as versioned, self-describing text."""
    own = isinstance(sink, (str, Path))
    f = open(sink, "w") if own else sink
    try:
        has_depths = 1 if fs.depths is not None else 0
        d = fs.descriptor_dim
        f.write(
            f"featureset v{_FORMAT_VERSION} d={d} width={fs.image_size[0]} "
            f"height={fs.image_size[1]} count={len(fs)} depths={has_depths}\n"
        )
        for i in range(len(fs)):
            parts = [
                _FLOAT_FMT % fs.pixels[i, 0],
                _FLOAT_FMT % fs.pixels[i, 1],
                _FLOAT_FMT % fs.scores[i],
            ]
            if has_depths:
                parts.append(_FLOAT_FMT % fs.depths[i])
            parts.extend(_FLOAT_FMT % v for v in fs.descriptors[i])
            f.write(" ".join(parts) + "\n")
    finally:
        if own:
            f.close()


def _parse_header(line: str) -> dict:
    tokens = line.split()
    if len(tokens) != 7 or tokens[0] != "featureset":
        raise ParseError(f"line 1: bad header {line!r}")
    if tokens[1] != f"v{_FORMAT_VERSION}":
        raise SchemaVersionMismatch(f"unsupported feature file version {tokens[1]!r}")
    out = {}
    for i, (token, key) in enumerate(
        zip(tokens[2:], ("d", "width", "height", "count", "depths")), start=3
    ):
        name, _, value = token.partition("=")
        if name != key:
            raise ParseError(f"line 1, field {i}: expected {key}=..., got {token!r}")
        try:
            out[key] = int(value)
        except ValueError:
            raise ParseError(f"line 1, field {i}: non-integer {value!r}") from None
    return out


def read_features(source) -> FeatureSet:
    """Parse a feature file; inverse of write_features."""
    own = isinstance(source, (str, Path))
    f = open(source, "r") if own else source
    try:
        header_line = f.readline()
        if not header_line:
            raise ParseError("line 1: empty file")
        hdr = _parse_header(header_line.rstrip("\n"))
        d, count, has_depths = hdr["d"], hdr["count"], hdr["depths"]
        per_line = 3 + has_depths + d
        rows = np.zeros((count, per_line))
        for i in range(count):
            line = f.readline()
            if not line:
                raise ParseError(f"line {i + 2}: truncated record, expected {count} keypoints")
            fields = line.split()
            if len(fields) != per_line:
                raise ParseError(f"line {i + 2}: expected {per_line} fields, got {len(fields)}")
            try:
                rows[i] = [float(v) for v in fields]
            except ValueError as exc:
                raise ParseError(f"line {i + 2}: {exc}") from None
        depths = rows[:, 3] if has_depths else None
        try:
            return FeatureSet(
                rows[:, 0:2],
                rows[:, 3 + has_depths :],
                rows[:, 2],
                (hdr["width"], hdr["height"]),
                depths=depths,
            )
        except ValueError as exc:
            raise ParseError(str(exc)) from None
    finally:
        if own:
            f.close()


def features_to_string(fs: FeatureSet) -> str:
    buf = io.StringIO()
    write_features(fs, buf)
    return buf.getvalue()


def features_from_string(text: str) -> FeatureSet:
    return read_features(io.StringIO(text))

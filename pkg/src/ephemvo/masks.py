"""Per-frame depth and ephemerality providers.

The VO backends consume a uniform FramePrediction regardless of where the
maps come from: simulator ground truth (oracle), the geometric prior
pipeline, or externally predicted files. Providers validate their outputs so
VO never has to.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .fileio import read_pfm
from .geometry import CameraModel, Pose
from .labelling import EphemeralityMask, LabellingConfig, PriorMap, StructureImage, ephemerality, render_prior
from .sim import SceneSpec, SimFrame, render_frame


class MissingFrameError(DataError):
    """No prediction files exist for the requested frame."""


class FrameDimensionError(DataError):
    """Disparity and ephemerality images disagree in size."""


class NonFiniteFrameError(DataError):
    """More than 1% of an imported image is non-finite."""


@dataclass
class FramePrediction:
    """Disparity plus ephemerality for one frame; NaN disparity = invalid."""

    disparity: np.ndarray
    ephemerality: EphemeralityMask
    frame_id: int

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, dtype=np.float64)
        if self.disparity.shape != self.ephemerality.shape:
            raise FrameDimensionError("disparity and ephemerality must share dimensions")
        valid = np.isfinite(self.disparity)
        if np.any(self.disparity[valid] <= 0):
            raise DataError("valid disparities must be positive")


def resolve_unlabelled(mask: EphemeralityMask, policy: str = "static") -> np.ndarray:
    """Fill unlabelled pixels per policy: 'static' -> 0, 'ephemeral' -> 1."""
    if policy not in ("static", "ephemeral"):
        raise DataError(f"unknown unlabelled policy {policy!r}")
    fill = 0.0 if policy == "static" else 1.0
    return np.where(np.isfinite(mask.values), mask.values, fill)


def provider_oracle(sim_frame: SimFrame, cam: CameraModel) -> FramePrediction:
    """Ground-truth prediction: exact disparity, E = 1 exactly on movers."""
    depth = sim_frame.depth
    disparity = np.where(np.isfinite(depth), cam.fx * cam.baseline / np.where(np.isfinite(depth), depth, 1.0), np.nan)
    values = sim_frame.mover_mask.astype(np.float64)
    return FramePrediction(disparity, EphemeralityMask(values), frame_id=0)


def provider_geometric(
    prior: PriorMap,
    pose: Pose,
    cam: CameraModel,
    observed: StructureImage,
    config: LabellingConfig,
) -> FramePrediction:
    """Prior-map route: render the static cloud and compare with observation."""
    rendered = render_prior(prior, pose, cam, config)
    mask = ephemerality(rendered, observed, config)
    return FramePrediction(observed.disparity.copy(), mask, frame_id=0)


def prediction_paths(directory, frame_id: int) -> tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"{frame_id:06d}_disp.pfm", directory / f"{frame_id:06d}_eph.pfm"


def provider_files(directory, frame_id: int) -> tuple[FramePrediction, int]:
    """Load an externally predicted disparity/ephemerality pair.

    Values outside the invariants are clamped; returns (prediction,
    clamp_warning_count).
    """
    disp_path, eph_path = prediction_paths(directory, frame_id)
    if not disp_path.exists() or not eph_path.exists():
        raise MissingFrameError(f"no prediction for frame {frame_id} in {directory}")
    disparity = read_pfm(disp_path).astype(np.float64)
    eph = read_pfm(eph_path).astype(np.float64)
    if disparity.ndim != 2 or eph.ndim != 2:
        raise FrameDimensionError("predictions must be grayscale images")
    if disparity.shape != eph.shape:
        raise FrameDimensionError(
            f"disparity {disparity.shape} vs ephemerality {eph.shape} for frame {frame_id}"
        )
    for name, img in (("disparity", disparity), ("ephemerality", eph)):
        bad = ~np.isfinite(img)
        if bad.mean() > 0.01:
            raise NonFiniteFrameError(f"{name} for frame {frame_id} is {bad.mean():.1%} non-finite")

    warnings = 0
    negative_disp = np.isfinite(disparity) & (disparity <= 0)
    warnings += int(negative_disp.sum())
    disparity = np.where(negative_disp, np.nan, disparity)
    out_of_range = np.isfinite(eph) & ((eph < 0) | (eph > 1))
    warnings += int(out_of_range.sum())
    eph = np.clip(eph, 0.0, 1.0)
    return FramePrediction(disparity, EphemeralityMask(eph), frame_id=frame_id), warnings


class SimOracleProvider:
    """Simulated session as both a frame source and an oracle provider.

    Satisfies the VO source protocol (frame_count / intensity /
    timestamp_ns) and is callable as a provider, rendering each frame once.
    """

    def __init__(self, scene: SceneSpec, session: int = 0, max_frames: int | None = None):
        self.scene = scene
        self.session = session
        self._max_frames = max_frames
        self._cache: dict[int, SimFrame] = {}

    def frame_count(self) -> int:
        n = self.scene.frame_count()
        return n if self._max_frames is None else min(n, self._max_frames)

    def frame(self, frame_id: int) -> SimFrame:
        if frame_id not in self._cache:
            if len(self._cache) > 2:
                self._cache.pop(min(self._cache))
            self._cache[frame_id] = render_frame(self.scene, self.session, self.scene.frame_time(frame_id))
        return self._cache[frame_id]

    def intensity(self, frame_id: int) -> np.ndarray:
        return self.frame(frame_id).intensity

    def timestamp_ns(self, frame_id: int) -> int:
        return self.scene.timestamp_ns(frame_id)

    def ground_truth_pose(self, frame_id: int) -> Pose:
        return self.scene.camera_pose(self.session, self.scene.frame_time(frame_id))

    def __call__(self, frame_id: int) -> FramePrediction:
        pred = provider_oracle(self.frame(frame_id), self.scene.camera)
        pred.frame_id = frame_id
        return pred


class FileFrameSource:
    """Frame source over a directory written by the simulator CLI."""

    def __init__(self, directory):
        from .fileio import read_pgm, read_trajectory

        self.directory = Path(directory)
        self._read_pgm = read_pgm
        traj = read_trajectory(self.directory / "trajectory.txt")
        self.timestamps = traj.timestamps_ns

    def frame_count(self) -> int:
        return len(self.timestamps)

    def intensity(self, frame_id: int) -> np.ndarray:
        return self._read_pgm(self.directory / f"{frame_id:06d}.pgm")

    def timestamp_ns(self, frame_id: int) -> int:
        return int(self.timestamps[frame_id])


class FilePredictionProvider:
    """Streams file-backed predictions; counts clamp warnings across frames."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.clamp_warnings = 0

    def __call__(self, frame_id: int) -> FramePrediction:
        pred, warnings = provider_files(self.directory, frame_id)
        self.clamp_warnings += warnings
        return pred


class GeometricProvider:
    """Prior-map provider: needs localised poses and observed structure."""

    def __init__(self, prior: PriorMap, cam: CameraModel, config: LabellingConfig, poses, observed_source):
        self.prior = prior
        self.cam = cam
        self.config = config
        self.poses = poses  # frame_id -> Pose (sequence or mapping)
        self.observed_source = observed_source  # frame_id -> StructureImage

    def __call__(self, frame_id: int) -> FramePrediction:
        pred = provider_geometric(
            self.prior,
            self.poses[frame_id],
            self.cam,
            self.observed_source(frame_id),
            self.config,
        )
        pred.frame_id = frame_id
        return pred

"""Hand position extraction and 3D speed profiling.

Per frame, the hand is summarized by the centroid of its mask, lifted to a
3D camera-frame point with the median masked depth.  Consecutive depth-map
point clouds are registered with point-to-point ICP; composing the pairwise
transforms expresses every hand point in the first frame's coordinates, from
which the per-frame speed profile is differenced.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

from .sequence_store import CameraIntrinsics, Sequence


class HandMotionError(Exception):
    """Base for motion extraction errors."""


class NonPositiveDepthError(HandMotionError):
    """Backprojection requires strictly positive depth."""


class EmptyCloudError(HandMotionError):
    """A depth map produced no valid 3D points."""


class InsufficientTrackError(HandMotionError):
    """Fewer than two frames have a hand position; no speeds derivable."""


#: Longest mask gap (consecutive frames without a hand position) bridged by
#: linear interpolation; longer gaps yield infinite speeds at those frames so
#: keyframe selection never picks them.
MAX_INTERP_GAP = 5


def mask_centroid(mask: np.ndarray) -> tuple[float, float] | None:
    """Mean (u, v) pixel coordinate over nonzero mask pixels, or None."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return float(cols.mean()), float(rows.mean())


def hand_depth(mask: np.ndarray, depth_m: np.ndarray) -> float | None:
    """Median depth over masked pixels with valid (positive) depth."""
    values = depth_m[(mask > 0) & (depth_m > 0)]
    if values.size == 0:
        return None
    return float(np.median(values))


def backproject(
    p2d: tuple[float, float], depth_m: float, intr: CameraIntrinsics
) -> np.ndarray:
    """Lift a pixel with known depth to camera coordinates.

    Raises NonPositiveDepthError when depth_m <= 0.
    """
    if depth_m <= 0:
        raise NonPositiveDepthError(f"depth must be positive, got {depth_m}")
    u, v = p2d
    return np.array(
        [
            (u - intr.cx) * depth_m / intr.fx,
            (v - intr.cy) * depth_m / intr.fy,
            depth_m,
        ]
    )


def depth_to_cloud(
    depth_m: np.ndarray, intr: CameraIntrinsics, stride: int = 1
) -> np.ndarray:
    """Backproject every stride-th valid pixel into an (M, 3) cloud."""
    d = depth_m[::stride, ::stride]
    vs, us = np.mgrid[0 : depth_m.shape[0] : stride, 0 : depth_m.shape[1] : stride]
    valid = d > 0
    if not valid.any():
        raise EmptyCloudError("depth map has no valid pixels")
    z = d[valid].astype(np.float64)
    u = us[valid].astype(np.float64)
    v = vs[valid].astype(np.float64)
    return np.column_stack(((u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z))


@dataclass(frozen=True)
class IcpParams:
    """Point-to-point ICP settings.

    voxel_size subsamples the source cloud (one representative point per
    voxel); convergence_tol is the minimum change in mean correspondence
    residual (meters) between iterations; divergence_residual marks a pair as
    failed when the final mean residual stays above it.
    """

    voxel_size: float = 0.02
    max_iterations: int = 50
    convergence_tol: float = 1e-5
    divergence_residual: float = 0.05


@dataclass
class HandTrack2D:
    """Per-frame optional pixel positions, NaN rows where the hand is absent."""

    positions: np.ndarray  # (N, 2) float64

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.positions[:, 0])


@dataclass
class HandTrack3D:
    """Per-frame optional 3D positions in camera or first-frame coordinates."""

    positions: np.ndarray  # (N, 3) float64
    frame_kind: Literal["camera", "global"] = "camera"

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.positions[:, 0])


@dataclass
class PoseSequence:
    """Rigid transforms mapping each frame's camera coordinates to frame 0.

    transforms[t] is a 4x4 matrix; transforms[0] is the identity.  Frames
    whose pairwise registration diverged (identity fallback) are listed in
    diverged_frames.
    """

    transforms: np.ndarray  # (N, 4, 4) float64
    diverged_frames: list[int] = field(default_factory=list)


@dataclass
class SpeedProfile:
    """Per-frame scalar speeds; the last entry duplicates its predecessor.

    Frames not covered by the (possibly interpolated) track carry +inf so
    that keyframe selection never chooses them.
    """

    speeds: np.ndarray  # (N,) float64
    delta: float


def _voxel_subsample(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Keep the lowest-index point of each occupied voxel.

    Representatives are measured points (not averages), so clean clouds keep
    exact counterparts in the full target cloud.
    """
    if voxel_size <= 0 or points.shape[0] == 0:
        return points
    keys = np.floor(points / voxel_size).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation aligning paired points."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    H = (src - sc).T @ (dst - dc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = dc - R @ sc
    return R, t


def icp_point_to_point(
    source: np.ndarray, target: np.ndarray, params: IcpParams = IcpParams()
) -> tuple[np.ndarray, float]:
    """Align source onto target; returns (4x4 transform, final mean residual)."""
    if source.shape[0] == 0 or target.shape[0] == 0:
        raise EmptyCloudError("cannot register an empty cloud")
    if source.shape == target.shape and np.array_equal(source, target):
        return np.eye(4), 0.0
    src = _voxel_subsample(source, params.voxel_size)
    tree = cKDTree(target)
    R = np.eye(3)
    t = target.mean(axis=0) - src.mean(axis=0)
    prev_residual = None
    residual = math.inf
    for _ in range(params.max_iterations):
        moved = src @ R.T + t
        dist, idx = tree.query(moved)
        residual = float(dist.mean())
        # Residual at float noise: updating would only stir rounding error
        # into the pose, so identical clouds map to the exact identity.
        if residual < 1e-12:
            break
        if prev_residual is not None and abs(prev_residual - residual) < params.convergence_tol:
            break
        prev_residual = residual
        R_step, t_step = _kabsch(moved, target[idx])
        R = R_step @ R
        t = R_step @ t + t_step
    out = np.eye(4)
    out[:3, :3] = R
    out[:3, 3] = t
    return out, residual


def register_sequence(
    clouds: list[np.ndarray], params: IcpParams = IcpParams()
) -> PoseSequence:
    """Chain pairwise registrations into frame-0 poses.

    Each consecutive pair (t -> t-1) is aligned with ICP; a pair whose
    residual stays above the divergence threshold falls back to the identity
    and is flagged rather than raising.
    """
    n = len(clouds)
    transforms = np.tile(np.eye(4), (n, 1, 1))
    diverged: list[int] = []
    for t in range(1, n):
        step, residual = icp_point_to_point(clouds[t], clouds[t - 1], params)
        if residual > params.divergence_residual:
            step = np.eye(4)
            diverged.append(t)
        transforms[t] = transforms[t - 1] @ step
    return PoseSequence(transforms=transforms, diverged_frames=diverged)


def to_global(track: HandTrack3D, poses: PoseSequence) -> HandTrack3D:
    """Map camera-frame hand positions into frame-0 coordinates."""
    if track.frame_kind != "camera":
        raise ValueError("track is already in global coordinates")
    n = track.positions.shape[0]
    out = np.full((n, 3), np.nan)
    for t in range(n):
        p = track.positions[t]
        if np.isnan(p[0]):
            continue
        M = poses.transforms[t]
        out[t] = M[:3, :3] @ p + M[:3, 3]
    return HandTrack3D(positions=out, frame_kind="global")


def _interpolate_gaps(positions: np.ndarray, max_gap: int) -> np.ndarray:
    """Linearly fill interior NaN runs of length <= max_gap."""
    out = positions.copy()
    present = ~np.isnan(out[:, 0])
    idx = np.flatnonzero(present)
    for a, b in zip(idx[:-1], idx[1:]):
        gap = b - a - 1
        if gap == 0 or gap > max_gap:
            continue
        for k in range(1, gap + 1):
            w = k / (b - a)
            out[a + k] = (1 - w) * out[a] + w * out[b]
    return out


def speed_profile(
    track: HandTrack3D | HandTrack2D, delta: float, max_gap: int = MAX_INTERP_GAP
) -> SpeedProfile:
    """Finite-difference speeds of the (gap-filled) track.

    speeds[t] = ||p[t+1] - p[t]|| / delta for covered consecutive pairs;
    speeds[N-1] duplicates speeds[N-2]; uncovered frames get +inf.

    Raises InsufficientTrackError with fewer than two present positions.
    """
    positions = track.positions
    n = positions.shape[0]
    if int((~np.isnan(positions[:, 0])).sum()) < 2:
        raise InsufficientTrackError("need at least two frames with a hand position")
    filled = _interpolate_gaps(positions, max_gap)
    covered = ~np.isnan(filled[:, 0])
    speeds = np.full(n, np.inf)
    diff = filled[1:] - filled[:-1]
    norms = np.linalg.norm(diff, axis=1) / delta
    pair_ok = covered[:-1] & covered[1:]
    speeds[: n - 1][pair_ok] = norms[pair_ok]
    speeds[n - 1] = speeds[n - 2]
    return SpeedProfile(speeds=speeds, delta=delta)


def extract_hand_track_2d(seq: Sequence) -> HandTrack2D:
    positions = np.full((seq.n_frames, 2), np.nan)
    for t, frame in enumerate(seq.frames):
        if frame.mask is None:
            continue
        c = mask_centroid(frame.mask)
        if c is not None:
            positions[t] = c
    return HandTrack2D(positions=positions)


def extract_hand_track_camera(seq: Sequence) -> HandTrack3D:
    """2D centroids lifted with the median masked depth, camera coordinates."""
    positions = np.full((seq.n_frames, 3), np.nan)
    for t, frame in enumerate(seq.frames):
        if frame.mask is None:
            continue
        c = mask_centroid(frame.mask)
        if c is None:
            continue
        z = hand_depth(frame.mask, frame.depth)
        if z is None:
            continue
        positions[t] = backproject(c, z, seq.intrinsics)
    return HandTrack3D(positions=positions, frame_kind="camera")


@dataclass
class MotionResult:
    """Global hand track plus the derived speed profile."""

    track_global: HandTrack3D
    profile: SpeedProfile
    poses: PoseSequence | None = None


def save_motion(path: Path, result: MotionResult) -> None:
    """Persist global positions and speeds; floats round-trip bit-exactly."""
    positions = [
        None if np.isnan(p[0]) else [float(p[0]), float(p[1]), float(p[2])]
        for p in result.track_global.positions
    ]
    payload = {
        "positions_glob": positions,
        "speeds": [float(s) for s in result.profile.speeds],
        "delta": result.profile.delta,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_motion(path: Path) -> MotionResult:
    with open(path) as fh:
        payload = json.load(fh)
    positions = np.array(
        [[np.nan] * 3 if p is None else p for p in payload["positions_glob"]], dtype=np.float64
    ).reshape(-1, 3)
    return MotionResult(
        track_global=HandTrack3D(positions=positions, frame_kind="global"),
        profile=SpeedProfile(
            speeds=np.array(payload["speeds"], dtype=np.float64), delta=payload["delta"]
        ),
    )


def compute_motion(
    seq: Sequence,
    *,
    use_2d: bool = False,
    cloud_stride: int = 4,
    icp_params: IcpParams = IcpParams(),
    cache: bool = False,
) -> MotionResult:
    """Run the extraction pipeline for one sequence.

    With use_2d the speeds come from pixel-space centroid differences and
    registration is skipped entirely.  With cache enabled, results are
    reloaded from (or written to) motion.json in the sequence directory;
    2D-mode results are never cached since they share the file name.
    """
    cache_path = None
    if cache and not use_2d and seq.source_dir is not None:
        cache_path = seq.source_dir / "motion.json"
        if cache_path.is_file():
            return load_motion(cache_path)

    if use_2d:
        track2d = extract_hand_track_2d(seq)
        if int(track2d.present.sum()) < 2:
            raise InsufficientTrackError("need at least two frames with a hand position")
        profile = speed_profile(track2d, seq.delta)
        glob = np.full((seq.n_frames, 3), np.nan)
        glob[:, :2] = track2d.positions
        glob[track2d.present, 2] = 0.0
        return MotionResult(
            track_global=HandTrack3D(positions=glob, frame_kind="global"), profile=profile
        )

    track_cam = extract_hand_track_camera(seq)
    if int(track_cam.present.sum()) < 2:
        raise InsufficientTrackError("need at least two frames with a hand position")
    clouds = [
        depth_to_cloud(frame.depth, seq.intrinsics, stride=cloud_stride)
        for frame in seq.frames
    ]
    poses = register_sequence(clouds, icp_params)
    track_glob = to_global(track_cam, poses)
    profile = speed_profile(track_glob, seq.delta)
    result = MotionResult(track_global=track_glob, profile=profile, poses=poses)
    if cache_path is not None:
        save_motion(cache_path, result)
    return result

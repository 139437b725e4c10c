"""Synthetic egocentric grasp clips with exact ground truth.

The hand is a colored disc following a smooth reach -> manipulate -> retract
path in front of a layered static backdrop; depth, RGB, and exact hand masks
are rendered per frame.  The speed schedule holds the hand briefly static
around the annotated contact and separation frames, so those frames are
guaranteed to be among the lowest-speed frames of their search windows even
after millimeter depth quantization and pixel rasterization.  Smooth ramps
with zero speed at the event boundaries alone do not survive quantization:
their near-boundary steps are micrometers per frame, orders of magnitude
below centroid rasterization noise.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .sequence_store import (
    CameraIntrinsics,
    FrameRecord,
    GroundTruth,
    Manifest,
    Sequence,
    depth_meters_to_mm,
    depth_mm_to_meters,
    save_annotations,
    save_intrinsics,
    save_manifest,
    save_meta,
    write_frame_images,
)
from .vlm_gateway import OracleNoise  # noqa: F401  (re-export: noise pairs with synth corpora)

HAND_COLOR = (206, 158, 120)
OBJECT_COLOR = (225, 130, 40)

# Designed per-frame step speeds (m/s) at the segment boundaries.  Ordering
# is what matters: retract must leave separation slower than manipulation
# leaves contact, which in turn is slower than the reach arrives, so the
# lowest-speed frames of each search window bracket the annotated events.
# Derived speeds carry up to ~0.03 m/s of centroid rasterization noise
# (~0.2 px at the hand's depth), so adjacent levels keep gaps above twice
# that; otherwise a slow manipulation step can undercut the retract step and
# drag a separation keyframe to the wrong end of the clip.
V_RETRACT_OUT = 0.02
V_MANIP_IN = 0.10
V_MANIP_OUT = 0.14
V_REACH_IN = 0.16


class SynthError(Exception):
    """Base for generator errors."""


class InfeasibleTimingError(SynthError):
    """Requested contact/separation leave a segment under 3 frames."""


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 150
    fps: float = 30.0
    contact_frame: int = 40
    separation_frame: int = 105
    width: int = 128
    height: int = 96
    reach_amplitude: float = 0.35
    speed_noise_sigma: float = 0.0
    camera_motion_amplitude: float = 0.0
    mask_jitter: float = 0.0
    seed: int = 0

    def intrinsics(self) -> CameraIntrinsics:
        f = 120.0 * self.width / 128.0
        return CameraIntrinsics(
            fx=f, fy=f, cx=self.width / 2 - 0.5, cy=self.height / 2 - 0.5,
            width=self.width, height=self.height,
        )


def _validate_timing(cfg: SynthConfig) -> None:
    c, s, n = cfg.contact_frame, cfg.separation_frame, cfg.n_frames
    if not (0 < c < s < n - 1):
        raise InfeasibleTimingError(
            f"need 0 < contact < separation < {n - 1}, got ({c}, {s})"
        )
    if c < 3 or s - c < 3 or (n - 1) - s < 3:
        raise InfeasibleTimingError(
            f"each of reach/manipulate/retract needs at least 3 frames, "
            f"got ({c}, {s - c}, {n - 1 - s})"
        )


def _dwell_spans(cfg: SynthConfig) -> tuple[int, int, int, int]:
    """Static spans straddling the events: frames [a, b] and [c2, d] inclusive."""
    c, s, n = cfg.contact_frame, cfg.separation_frame, cfg.n_frames
    pre_c = min(2, c - 1)
    post_c = min(1, max(0, s - c - 4))
    pre_s = min(2, max(0, s - c - 3 - post_c))
    post_s = min(1, n - 2 - s)
    return c - pre_c, c + post_c, s - pre_s, s + post_s


def _segment_speeds(n: int, v_in: float, plateau: float, v_out: float) -> np.ndarray:
    """Ramp v_in -> plateau -> v_out over n steps; endpoints land exactly."""
    ramp = min(4, n // 2)
    out = np.full(n, plateau)
    if ramp:
        out[:ramp] = np.linspace(v_in, plateau, ramp + 1)[:ramp]
        out[-ramp:] = np.linspace(plateau, v_out, ramp + 1)[1:]
    else:
        out[:] = np.linspace(v_in, v_out, max(n, 1))
    out[0] = v_in
    out[-1] = v_out
    return out


def step_speed_schedule(cfg: SynthConfig) -> np.ndarray:
    """Designed |p[t+1] - p[t]| / delta for every step t in [0, n-2]."""
    _validate_timing(cfg)
    n = cfg.n_frames
    a, b, c2, d = _dwell_spans(cfg)
    v = np.zeros(n - 1)
    reach_steps = a  # moving steps [0, a)
    reach_plateau = float(np.clip(cfg.reach_amplitude / max(reach_steps / cfg.fps, 1e-6),
                                  V_REACH_IN * 1.5, 0.55))
    v[:reach_steps] = _segment_speeds(reach_steps, reach_plateau, reach_plateau, V_REACH_IN)
    manip = slice(b, c2)  # moving steps between the dwells
    n_manip = c2 - b
    v[manip] = _segment_speeds(n_manip, V_MANIP_IN, 0.22, V_MANIP_OUT)
    retract = slice(d, n - 1)
    n_retract = (n - 1) - d
    v[retract] = _segment_speeds(n_retract, V_RETRACT_OUT, 0.30, 0.30)
    # dwell steps [a, b) and [c2, d) stay exactly zero
    return v


@dataclass
class HandPathPlan:
    """Analytic hand positions, designed step speeds, and camera poses."""

    positions: np.ndarray  # (N, 3) global coordinates (= frame-0 camera)
    step_speeds: np.ndarray  # (N-1,) m/s, before position noise
    camera_transforms: np.ndarray  # (N, 4, 4) camera-t -> global
    object_center: np.ndarray  # (3,) static graspable target


def _steer(pos_xy: np.ndarray, direction: np.ndarray, radius: float = 0.13,
           gain: float = 0.9) -> np.ndarray:
    """Bend the direction back toward the view center as the path drifts out."""
    dist = float(np.linalg.norm(pos_xy))
    if dist < 1e-9:
        return direction
    pull = gain * (dist / radius) ** 4
    steered = direction - pull * pos_xy / dist
    return steered / np.linalg.norm(steered)


def _camera_transforms(cfg: SynthConfig) -> np.ndarray:
    n = cfg.n_frames
    amp = cfg.camera_motion_amplitude
    t = np.arange(n) / max(n, 1)
    out = np.tile(np.eye(4), (n, 1, 1))
    if amp == 0:
        return out
    # Head-sway scale: at amp=1 the apparent shift at hand depth stays well
    # inside the field of view, so the hand never leaves the frame, and the
    # per-pair registration error stays small against the dwell contrast.
    cx = 0.02 * amp * (np.sin(2 * np.pi * t) - 0.0)
    cy = 0.012 * amp * (np.sin(4 * np.pi * t + 1.3) - np.sin(1.3))
    cz = 0.010 * amp * (np.sin(2 * np.pi * t + 0.7) - np.sin(0.7))
    yaw = 0.06 * amp * (np.sin(2 * np.pi * t + 0.5) - np.sin(0.5))
    pitch = 0.04 * amp * (np.sin(4 * np.pi * t + 2.1) - np.sin(2.1))
    for i in range(n):
        cyw, syw = np.cos(yaw[i]), np.sin(yaw[i])
        cp, sp = np.cos(pitch[i]), np.sin(pitch[i])
        ry = np.array([[cyw, 0, syw], [0, 1, 0], [-syw, 0, cyw]])
        rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
        out[i, :3, :3] = ry @ rx
        out[i, :3, 3] = (cx[i], cy[i], cz[i])
    return out


def plan_hand_path(cfg: SynthConfig) -> HandPathPlan:
    """Integrate the speed schedule along a steered lateral path.

    The hand stays on the z = 0.52 m plane through reach, grasp, and early
    retract (constant depth keeps millimeter quantization out of the
    low-speed ordering), then recedes in depth as the retract speeds up.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_frames
    delta = 1.0 / cfg.fps
    speeds = step_speed_schedule(cfg)
    _, _, _, d = _dwell_spans(cfg)

    positions = np.zeros((n, 3))
    angle = rng.uniform(0, 2 * np.pi)
    start_r = rng.uniform(0.07, 0.11)
    positions[0] = (start_r * np.cos(angle), start_r * np.sin(angle), 0.52)
    direction = -positions[0, :2] / np.linalg.norm(positions[0, :2])
    turn = rng.uniform(-0.06, 0.06)
    cos_t, sin_t = np.cos(turn), np.sin(turn)

    retract_started = False
    for t in range(n - 1):
        if speeds[t] == 0.0:
            positions[t + 1] = positions[t]
            continue
        if t >= d and not retract_started:
            retract_started = True
            away = positions[t, :2] - positions[cfg.contact_frame, :2]
            norm = np.linalg.norm(away)
            direction = away / norm if norm > 1e-6 else -direction
        if not retract_started:
            direction = np.array(
                [cos_t * direction[0] - sin_t * direction[1],
                 sin_t * direction[0] + cos_t * direction[1]]
            )
            direction = _steer(positions[t, :2], direction)
        step = speeds[t] * delta
        z_frac = 0.0
        if retract_started:
            # Straight radial escape, handing motion over to depth recession:
            # steering back toward the view center would drag the hand behind
            # the object and occlusion-bias the mask centroid.  The quick
            # handover (fully depth-wise by step 12) bounds lateral travel to
            # ~0.09 m so the blob never reaches the image border.
            k = t - d
            z_frac = min(1.0, max(0.0, (k - 4) / 8))
            # The frame is wider than tall; fade the outward vertical
            # component before the blob can reach the top/bottom edge.
            y = positions[t, 1]
            dir_y = direction[1]
            if np.sign(dir_y) == np.sign(y):
                dir_y *= max(0.0, 1.0 - max(abs(y) - 0.10, 0.0) / 0.05)
            esc = np.array([direction[0], dir_y])
            n_esc = np.linalg.norm(esc)
            if n_esc > 1e-9:
                direction = esc / n_esc
            else:
                direction = np.array([1.0 if direction[0] >= 0 else -1.0, 0.0])
        lateral = step * np.sqrt(1 - z_frac**2)
        positions[t + 1, :2] = positions[t, :2] + lateral * direction
        positions[t + 1, 2] = positions[t, 2] + step * z_frac

    if cfg.speed_noise_sigma > 0:
        positions = positions + rng.normal(0, cfg.speed_noise_sigma, positions.shape)

    return HandPathPlan(
        positions=positions,
        step_speeds=speeds,
        camera_transforms=_camera_transforms(cfg),
        object_center=positions[cfg.contact_frame].copy() + (0.0, 0.0, 0.03),
    )


@dataclass(frozen=True)
class _Board:
    """Axis-aligned billboard at a fixed world depth."""

    z: float
    cx: float
    cy: float
    half_w: float
    half_h: float
    color: tuple[int, int, int]


# Backdrop sits well behind the deepest hand retraction (~1.1 m) so the
# receding blob is never culled by the depth test against the relief.
_RELIEF_BASE_Z = 1.60
_RELIEF_CELL = 0.10
_RELIEF_LEVELS = (0.0, 0.025, 0.045, 0.065)


def _relief_level(ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """Deterministic depth level per backdrop cell; the 'room' never changes."""
    return ((ix * 73856093) ^ (iy * 19349663)) % len(_RELIEF_LEVELS)


def _static_boards(rng: np.random.Generator) -> list[_Board]:
    palette = [(96, 110, 128), (110, 128, 96), (128, 104, 96), (90, 120, 120), (118, 118, 90)]
    boards = []
    # Depths sit behind the deepest hand retraction so the receding blob is
    # never occluded, yet in front of the relief so their edges add parallax.
    for i, z in enumerate((1.20, 1.25, 1.30, 1.35, 1.40)):
        boards.append(
            _Board(
                z=z,
                cx=float(rng.uniform(-0.35, 0.35)),
                cy=float(rng.uniform(-0.25, 0.25)),
                half_w=float(rng.uniform(0.06, 0.13)),
                half_h=float(rng.uniform(0.05, 0.11)),
                color=palette[i],
            )
        )
    return boards


def _render_frame(
    cfg: SynthConfig,
    intr: CameraIntrinsics,
    cam: np.ndarray,
    hand: np.ndarray,
    obj: np.ndarray,
    boards: list[_Board],
    mask_shift: tuple[float, float],
    ray_grid: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-cast depth, RGB, and the exact hand mask for one camera pose."""
    h, w = cfg.height, cfg.width
    R = cam[:3, :3]
    origin = cam[:3, 3]
    dirs = ray_grid @ R.T  # world-frame ray directions, camera z-depth = s

    depth = np.full((h, w), np.inf)
    color = np.zeros((h, w, 3), np.uint8)
    vgrad = (40 * np.arange(h) / h).astype(np.uint8)[:, None]

    def cast(z_world: float) -> tuple[np.ndarray, np.ndarray]:
        s = (z_world - origin[2]) / dirs[..., 2]
        lat = origin[:2] + s[..., None] * dirs[..., :2]
        return s, lat

    # Backdrop: fronto-parallel relief cells at four depths keyed by world
    # (x, y).  The depth edges pin lateral motion for point-to-point ICP,
    # which a single flat plane cannot (it slides within itself freely).
    s, lat = cast(_RELIEF_BASE_Z)
    hit = s > 0
    depth[hit] = s[hit]
    base_col = np.zeros((h, w, 3), np.uint8)
    base_col[..., 0] = 140 + vgrad
    base_col[..., 1] = 140 + vgrad
    base_col[..., 2] = 150 + vgrad
    color[hit] = base_col[hit]
    for li, offset in enumerate(_RELIEF_LEVELS[1:], start=1):
        s, lat = cast(_RELIEF_BASE_Z - offset)
        ix = np.floor(lat[..., 0] / _RELIEF_CELL).astype(np.int64)
        iy = np.floor(lat[..., 1] / _RELIEF_CELL).astype(np.int64)
        hit = (s > 0) & (_relief_level(ix, iy) == li) & (s < depth)
        depth[hit] = s[hit]
        tone = np.uint8(118 + 14 * li)
        shade = ((ix * 7 + iy * 13) % 3).astype(np.uint8) * 6
        for ch, bump in enumerate((0, 4, 10)):
            channel = color[..., ch]
            channel[hit] = tone + bump + shade[hit]

    for board in boards + [
        _Board(z=float(obj[2]), cx=float(obj[0]), cy=float(obj[1]),
               half_w=0.030, half_h=0.026, color=OBJECT_COLOR)
    ]:
        s, lat = cast(board.z)
        hit = (
            (s > 0)
            & (s < depth)
            & (np.abs(lat[..., 0] - board.cx) <= board.half_w)
            & (np.abs(lat[..., 1] - board.cy) <= board.half_h)
        )
        depth[hit] = s[hit]
        color[hit] = board.color

    s, lat = cast(float(hand[2]))
    r2 = (lat[..., 0] - hand[0]) ** 2 + (lat[..., 1] - hand[1]) ** 2
    hand_hit = (s > 0) & (s < depth) & (r2 <= 0.045**2)
    depth[hand_hit] = s[hand_hit]
    color[hand_hit] = HAND_COLOR

    if mask_shift == (0.0, 0.0):
        mask = hand_hit
    else:
        shift = (
            mask_shift[0] * hand[2] / intr.fx,
            mask_shift[1] * hand[2] / intr.fy,
        )
        r2s = (lat[..., 0] - hand[0] - shift[0]) ** 2 + (lat[..., 1] - hand[1] - shift[1]) ** 2
        mask = (s > 0) & (r2s <= 0.045**2)

    depth[~np.isfinite(depth)] = 0.0
    return color, depth, (mask * np.uint8(255))


def generate_sequence(cfg: SynthConfig, out_dir: Path | str | None = None) -> Sequence:
    """Render one annotated clip; optionally write it in the on-disk layout.

    Same config (including seed) always produces byte-identical output.
    """
    _validate_timing(cfg)
    rng = np.random.default_rng(cfg.seed)
    plan = plan_hand_path(cfg)
    boards = _static_boards(np.random.default_rng(cfg.seed + 1))
    intr = cfg.intrinsics()

    us, vs = np.meshgrid(np.arange(cfg.width), np.arange(cfg.height))
    ray_grid = np.stack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us, float)],
        axis=-1,
    )

    jitters = (
        rng.uniform(-cfg.mask_jitter, cfg.mask_jitter, (cfg.n_frames, 2))
        if cfg.mask_jitter > 0
        else np.zeros((cfg.n_frames, 2))
    )

    rgbs, depths, masks = [], [], []
    for t in range(cfg.n_frames):
        rgb, depth, mask = _render_frame(
            cfg, intr, plan.camera_transforms[t], plan.positions[t],
            plan.object_center, boards, (float(jitters[t, 0]), float(jitters[t, 1])),
            ray_grid,
        )
        rgbs.append(rgb)
        depths.append(depth)
        masks.append(mask)

    gt = GroundTruth(contact_frame=cfg.contact_frame, separation_frame=cfg.separation_frame)
    frames = [
        FrameRecord(
            index=t,
            rgb=rgbs[t],
            depth=depth_mm_to_meters(depth_meters_to_mm(depths[t])),
            mask=masks[t],
        )
        for t in range(cfg.n_frames)
    ]

    seq_dir = None
    if out_dir is not None:
        seq_dir = Path(out_dir)
        seq_dir.mkdir(parents=True, exist_ok=True)
        write_frame_images(seq_dir, rgbs, depths, masks)
        save_intrinsics(seq_dir / "intrinsics.json", intr)
        save_meta(seq_dir / "meta.json", cfg.fps)
        save_annotations(seq_dir / "annotations.json", gt)

    return Sequence(frames=frames, fps=cfg.fps, intrinsics=intr, annotation=gt,
                    source_dir=seq_dir)


@dataclass(frozen=True)
class CorpusRanges:
    """Per-sequence randomization bounds for generate_corpus."""

    n_frames: int = 150
    fps: float = 30.0
    contact: tuple[int, int] = (25, 60)
    separation: tuple[int, int] = (85, 125)
    reach_amplitude: tuple[float, float] = (0.25, 0.45)
    speed_noise_sigma: float = 0.0
    camera_motion_amplitude: float = 0.0
    mask_jitter: float = 0.0


def _derive_seed(seed: int, index: int) -> int:
    import hashlib

    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def generate_corpus(
    count: int, out_dir: Path | str, ranges: CorpusRanges = CorpusRanges(), seed: int = 0
) -> Manifest:
    """Write `count` sequences plus a manifest and a config echo.

    A sequence that fails mid-write is removed before the error propagates.
    """
    if count < 1:
        raise SynthError("count must be at least 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(count):
        cfg = SynthConfig(
            n_frames=ranges.n_frames,
            fps=ranges.fps,
            contact_frame=int(rng.integers(ranges.contact[0], ranges.contact[1] + 1)),
            separation_frame=int(
                rng.integers(ranges.separation[0], ranges.separation[1] + 1)
            ),
            reach_amplitude=float(
                rng.uniform(ranges.reach_amplitude[0], ranges.reach_amplitude[1])
            ),
            speed_noise_sigma=ranges.speed_noise_sigma,
            camera_motion_amplitude=ranges.camera_motion_amplitude,
            mask_jitter=ranges.mask_jitter,
            seed=_derive_seed(seed, i),
        )
        name = f"seq_{i:03d}"
        seq_dir = out_dir / name
        try:
            generate_sequence(cfg, seq_dir)
        except Exception:
            if seq_dir.exists():
                shutil.rmtree(seq_dir)
            raise
        names.append(name)

    import json

    with open(out_dir / "synth_config.json", "w") as fh:
        json.dump(
            {
                "count": count,
                "seed": seed,
                "ranges": {
                    "n_frames": ranges.n_frames,
                    "fps": ranges.fps,
                    "contact": list(ranges.contact),
                    "separation": list(ranges.separation),
                    "reach_amplitude": list(ranges.reach_amplitude),
                    "speed_noise_sigma": ranges.speed_noise_sigma,
                    "camera_motion_amplitude": ranges.camera_motion_amplitude,
                    "mask_jitter": ranges.mask_jitter,
                },
                "tool_version": __version__,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    save_manifest(out_dir / "manifest.txt", names)
    from .sequence_store import load_manifest

    return load_manifest(out_dir / "manifest.txt")

"""Shared fixtures: tiny in-memory clips and one real synthetic sequence."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from tiloc.sequence_store import (
    CameraIntrinsics,
    FrameRecord,
    GroundTruth,
    Sequence,
    save_annotations,
    save_intrinsics,
    save_meta,
    write_frame_images,
)


def make_intrinsics(width: int = 32, height: int = 24, f: float = 40.0) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=f, fy=f, cx=width / 2 - 0.5, cy=height / 2 - 0.5, width=width, height=height
    )


def make_sequence(
    n_frames: int = 12,
    width: int = 32,
    height: int = 24,
    gt: tuple[int, int] | None = None,
    fps: float = 30.0,
) -> Sequence:
    """In-memory clip: constant depth and a small block mask sliding right."""
    frames = []
    for t in range(n_frames):
        rgb = np.full((height, width, 3), (t * 7) % 256, dtype=np.uint8)
        depth = np.full((height, width), 0.8, dtype=np.float32)
        mask = np.zeros((height, width), dtype=np.uint8)
        x = 2 + t % (width - 8)
        mask[5:9, x:x + 4] = 255
        frames.append(FrameRecord(index=t, rgb=rgb, depth=depth, mask=mask))
    annotation = GroundTruth(*gt) if gt is not None else None
    return Sequence(
        frames=frames, fps=fps, intrinsics=make_intrinsics(width, height),
        annotation=annotation,
    )


def write_sequence_dir(
    seq_dir: Path,
    n_frames: int = 5,
    width: int = 16,
    height: int = 12,
    fps: float = 30.0,
    gt: tuple[int, int] | None = (1, 3),
    mask_every_frame: bool = True,
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Write a small valid sequence directory; returns the arrays written."""
    rng = np.random.default_rng(7)
    rgbs, depths, masks = [], [], []
    for t in range(n_frames):
        rgbs.append(rng.integers(0, 256, (height, width, 3), dtype=np.uint8))
        depths.append(np.full((height, width), 0.5, dtype=np.float32))
        mask = np.zeros((height, width), dtype=np.uint8)
        if mask_every_frame or t % 2 == 0:
            mask[4:7, 5 + t % 4:9 + t % 4] = 255
        masks.append(mask)
    write_frame_images(seq_dir, rgbs, depths, masks)
    save_intrinsics(seq_dir / "intrinsics.json", make_intrinsics(width, height, f=20.0))
    save_meta(seq_dir / "meta.json", fps)
    if gt is not None:
        save_annotations(seq_dir / "annotations.json", GroundTruth(*gt))
    return rgbs, depths, masks


@pytest.fixture(scope="session")
def synth_seq(tmp_path_factory: pytest.TempPathFactory) -> Sequence:
    """Default synthetic clip (150 frames, events at 40/105), written to disk."""
    from tiloc.synth import SynthConfig, generate_sequence

    out = tmp_path_factory.mktemp("synth_default") / "seq"
    return generate_sequence(SynthConfig(), out)


@pytest.fixture(scope="session")
def synth_motion(synth_seq):
    from tiloc.hand_motion import compute_motion

    return compute_motion(synth_seq, cache=True)

"""On-disk layout round-trips and validation failures."""
from __future__ import annotations

import json

import cv2
import numpy as np
import pytest
from hypothesis import given, strategies as st

from tiloc.sequence_store import (
    CameraIntrinsics,
    DanglingPathError,
    DimensionMismatchError,
    GroundTruth,
    InvalidAnnotationError,
    ManifestParseError,
    MissingFileError,
    NonContiguousIndicesError,
    TooFewFramesError,
    depth_meters_to_mm,
    depth_mm_to_meters,
    load_annotations,
    load_manifest,
    load_meta,
    load_sequence,
    save_annotations,
    save_intrinsics,
    save_manifest,
    save_meta,
    write_frame_images,
)

from conftest import write_sequence_dir


def test_round_trip_bit_exact(tmp_path):
    rgbs, depths, masks = write_sequence_dir(tmp_path / "seq")
    seq = load_sequence(tmp_path / "seq")
    assert seq.n_frames == 5
    assert seq.fps == 30.0
    assert seq.delta == 1.0 / 30.0
    assert seq.annotation == GroundTruth(1, 3)
    assert seq.source_dir == tmp_path / "seq"
    for t, frame in enumerate(seq.frames):
        assert frame.index == t
        assert np.array_equal(frame.rgb, rgbs[t])
        # 0.5 m = 500 mm is exactly representable through the uint16 store
        assert np.array_equal(frame.depth, depths[t])
        assert np.array_equal(frame.mask, masks[t])


def test_rgb_stored_as_bgr_on_disk(tmp_path):
    rgbs, _, _ = write_sequence_dir(tmp_path / "seq")
    raw = cv2.imread(str(tmp_path / "seq" / "rgb" / "000000.png"), cv2.IMREAD_COLOR)
    assert np.array_equal(raw[:, :, ::-1], rgbs[0])


def test_masks_are_optional(tmp_path):
    write_sequence_dir(tmp_path / "seq")
    for p in (tmp_path / "seq" / "masks").glob("*.png"):
        p.unlink()
    (tmp_path / "seq" / "masks").rmdir()
    seq = load_sequence(tmp_path / "seq")
    assert all(f.mask is None for f in seq.frames)


def test_annotation_is_optional(tmp_path):
    write_sequence_dir(tmp_path / "seq", gt=None)
    assert load_sequence(tmp_path / "seq").annotation is None


def test_depth_mm_round_trip_whole_range():
    mm = np.arange(0, 65536, dtype=np.uint16).reshape(256, 256)
    assert np.array_equal(depth_meters_to_mm(depth_mm_to_meters(mm)), mm)


@given(st.floats(min_value=0.0, max_value=65.0, allow_nan=False))
def test_depth_quantization_error_bounded(meters):
    back = depth_mm_to_meters(depth_meters_to_mm(np.array([meters])))
    assert abs(float(back[0]) - meters) <= 0.0005 + 1e-9


def test_depth_zero_stays_invalid():
    z = depth_mm_to_meters(np.zeros((2, 2), dtype=np.uint16))
    assert z.dtype == np.float32
    assert np.all(z == 0.0)


def test_too_few_frames(tmp_path):
    write_sequence_dir(tmp_path / "seq", n_frames=3)
    with pytest.raises(TooFewFramesError):
        load_sequence(tmp_path / "seq")


def test_missing_depth_frame(tmp_path):
    write_sequence_dir(tmp_path / "seq")
    (tmp_path / "seq" / "depth" / "000002.png").unlink()
    with pytest.raises((MissingFileError, NonContiguousIndicesError)):
        load_sequence(tmp_path / "seq")


def test_missing_intrinsics(tmp_path):
    write_sequence_dir(tmp_path / "seq")
    (tmp_path / "seq" / "intrinsics.json").unlink()
    with pytest.raises(MissingFileError):
        load_sequence(tmp_path / "seq")


def test_non_contiguous_indices(tmp_path):
    write_sequence_dir(tmp_path / "seq")
    rgb = tmp_path / "seq" / "rgb"
    (rgb / "000004.png").rename(rgb / "000007.png")
    with pytest.raises(NonContiguousIndicesError):
        load_sequence(tmp_path / "seq")


def test_depth_must_be_16bit(tmp_path):
    write_sequence_dir(tmp_path / "seq")
    eight_bit = np.full((12, 16), 80, dtype=np.uint8)
    cv2.imwrite(str(tmp_path / "seq" / "depth" / "000001.png"), eight_bit)
    with pytest.raises(DimensionMismatchError):
        load_sequence(tmp_path / "seq")


def test_rgb_dimension_mismatch(tmp_path):
    write_sequence_dir(tmp_path / "seq")
    small = np.zeros((6, 8, 3), dtype=np.uint8)
    cv2.imwrite(str(tmp_path / "seq" / "rgb" / "000003.png"), small)
    with pytest.raises(DimensionMismatchError):
        load_sequence(tmp_path / "seq")


def test_annotation_validation(tmp_path):
    path = tmp_path / "annotations.json"
    save_annotations(path, GroundTruth(3, 3))
    with pytest.raises(InvalidAnnotationError):
        load_annotations(path, n_frames=10)
    save_annotations(path, GroundTruth(2, 10))
    with pytest.raises(InvalidAnnotationError):
        load_annotations(path, n_frames=10)
    path.write_text(json.dumps({"contact_frame": 1}))
    with pytest.raises(InvalidAnnotationError):
        load_annotations(path, n_frames=10)


def test_meta_fps_validation(tmp_path):
    path = tmp_path / "meta.json"
    save_meta(path, 0.0)
    with pytest.raises(ManifestParseError):
        load_meta(path)
    path.write_text("{}")
    with pytest.raises(ManifestParseError):
        load_meta(path)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1, fy=40, cx=8, cy=6, width=16, height=12)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=40, fy=40, cx=20, cy=6, width=16, height=12)


def test_intrinsics_round_trip(tmp_path):
    intr = CameraIntrinsics(fx=40.5, fy=41.25, cx=7.5, cy=5.5, width=16, height=12)
    save_intrinsics(tmp_path / "intr.json", intr)
    from tiloc.sequence_store import load_intrinsics

    assert load_intrinsics(tmp_path / "intr.json") == intr


def test_write_frame_images_rejects_mismatched_counts(tmp_path):
    rgb = [np.zeros((4, 4, 3), dtype=np.uint8)]
    depth = [np.zeros((4, 4), dtype=np.float32)] * 2
    with pytest.raises(ValueError):
        write_frame_images(tmp_path / "seq", rgb, depth, None)


def test_manifest_round_trip(tmp_path):
    for name in ("seq_a", "seq_b"):
        write_sequence_dir(tmp_path / name)
    save_manifest(tmp_path / "manifest.txt", ["seq_a", "seq_b"])
    man = load_manifest(tmp_path / "manifest.txt")
    assert [e.path.name for e in man.entries] == ["seq_a", "seq_b"]
    assert man.dataset_name == tmp_path.resolve().name


def test_manifest_comments_blanks_and_split_tags(tmp_path):
    write_sequence_dir(tmp_path / "seq_a")
    write_sequence_dir(tmp_path / "seq_b")
    (tmp_path / "manifest.txt").write_text(
        "# corpus header\n\nseq_a\ttrain\nseq_b\n"
    )
    man = load_manifest(tmp_path / "manifest.txt")
    assert len(man.entries) == 2
    assert man.entries[0].split == "train"


def test_manifest_dangling_path(tmp_path):
    (tmp_path / "manifest.txt").write_text("ghost_seq\n")
    with pytest.raises(DanglingPathError):
        load_manifest(tmp_path / "manifest.txt")


def test_manifest_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        load_manifest(tmp_path / "manifest.txt")

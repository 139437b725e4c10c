"""On-disk layout and in-memory model for RGB-D grasp sequences.

A sequence directory holds:

    rgb/%06d.png          8-bit 3-channel frames
    depth/%06d.png        16-bit single-channel depth in millimeters (0 = invalid)
    masks/%06d.png        optional 8-bit hand masks (nonzero = hand)
    intrinsics.json       {fx, fy, cx, cy, width, height}
    meta.json             {fps}
    annotations.json      optional {contact_frame, separation_frame}

A manifest file lists one sequence directory per line (``#`` comments allowed);
an optional split tag may follow the path after a tab.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np


class SequenceStoreError(Exception):
    """Base for sequence loading and manifest errors."""


class MissingFileError(SequenceStoreError):
    """A required file or directory is absent; the message names it."""


class DimensionMismatchError(SequenceStoreError):
    """Image dimensions disagree with the declared intrinsics."""


class NonContiguousIndicesError(SequenceStoreError):
    """Frame filenames do not form 000000..N-1 without gaps."""


class InvalidAnnotationError(SequenceStoreError):
    """Annotated contact/separation frames are out of range or unordered."""


class TooFewFramesError(SequenceStoreError):
    """Sequences must contain at least 4 frames."""


class ManifestParseError(SequenceStoreError):
    """Manifest line could not be interpreted."""


class DanglingPathError(SequenceStoreError):
    """Manifest references a directory that does not exist."""


class EmptyManifestError(SequenceStoreError):
    """Manifest contains no sequence entries."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


@dataclass(frozen=True)
class GroundTruth:
    """Annotated grasp interval; both endpoints are in-contact frames."""

    contact_frame: int
    separation_frame: int


@dataclass
class FrameRecord:
    """One frame: RGB, metric depth, and an optional hand mask."""

    index: int
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray | None = None


@dataclass
class Sequence:
    """A fully loaded clip plus its capture metadata."""

    frames: list[FrameRecord]
    fps: float
    intrinsics: CameraIntrinsics
    annotation: GroundTruth | None = None
    source_dir: Path | None = None

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def delta(self) -> float:
        """Inter-frame interval in seconds."""
        return 1.0 / self.fps


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    split: str | None = None


@dataclass
class Manifest:
    dataset_name: str
    entries: list[ManifestEntry] = field(default_factory=list)


def _frame_name(index: int) -> str:
    return f"{index:06d}.png"


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    with open(path) as fh:
        return json.load(fh)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_intrinsics(path: Path) -> CameraIntrinsics:
    raw = _read_json(path)
    try:
        return CameraIntrinsics(
            fx=float(raw["fx"]),
            fy=float(raw["fy"]),
            cx=float(raw["cx"]),
            cy=float(raw["cy"]),
            width=int(raw["width"]),
            height=int(raw["height"]),
        )
    except KeyError as exc:
        raise ManifestParseError(f"intrinsics file {path} lacks key {exc}") from exc


def save_intrinsics(path: Path, intr: CameraIntrinsics) -> None:
    _write_json(
        path,
        {
            "fx": intr.fx,
            "fy": intr.fy,
            "cx": intr.cx,
            "cy": intr.cy,
            "width": intr.width,
            "height": intr.height,
        },
    )


def load_meta(path: Path) -> float:
    raw = _read_json(path)
    if "fps" not in raw:
        raise ManifestParseError(f"meta file {path} lacks key 'fps'")
    fps = float(raw["fps"])
    if not math.isfinite(fps) or fps <= 0:
        raise ManifestParseError(f"meta file {path} has non-positive fps")
    return fps


def save_meta(path: Path, fps: float) -> None:
    _write_json(path, {"fps": fps})


def load_annotations(path: Path, n_frames: int) -> GroundTruth:
    raw = _read_json(path)
    try:
        contact = int(raw["contact_frame"])
        separation = int(raw["separation_frame"])
    except KeyError as exc:
        raise InvalidAnnotationError(f"annotations file {path} lacks key {exc}") from exc
    if not (0 <= contact < separation <= n_frames - 1):
        raise InvalidAnnotationError(
            f"annotations require 0 <= contact < separation <= {n_frames - 1}, "
            f"got contact={contact} separation={separation}"
        )
    return GroundTruth(contact_frame=contact, separation_frame=separation)


def save_annotations(path: Path, gt: GroundTruth) -> None:
    _write_json(
        path,
        {"contact_frame": gt.contact_frame, "separation_frame": gt.separation_frame},
    )


def _listed_indices(dir_path: Path) -> list[int]:
    """Indices parsed from %06d.png names, verified gap-free from zero."""
    names = sorted(p.name for p in dir_path.glob("*.png"))
    if not names:
        raise MissingFileError(f"no frames found under {dir_path}")
    indices = []
    for name in names:
        stem = name[:-4]
        if len(stem) != 6 or not stem.isdigit():
            raise NonContiguousIndicesError(f"unexpected frame name {dir_path / name}")
        indices.append(int(stem))
    expected = list(range(len(indices)))
    if indices != expected:
        raise NonContiguousIndicesError(
            f"frame indices under {dir_path} are not contiguous from 000000"
        )
    return indices


def _imread(path: Path, flags: int) -> np.ndarray:
    img = cv2.imread(str(path), flags)
    if img is None:
        raise MissingFileError(f"unreadable image: {path}")
    return img


def depth_mm_to_meters(depth_mm: np.ndarray) -> np.ndarray:
    """Millimeter uint16 depth to float32 meters; 0 stays 0 (invalid)."""
    return depth_mm.astype(np.float32) / 1000.0


def depth_meters_to_mm(depth_m: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(depth_m, dtype=np.float64) * 1000.0).clip(0, 65535).astype(np.uint16)


def load_sequence(seq_dir: Path | str) -> Sequence:
    """Load and validate one sequence directory.

    Raises:
        MissingFileError: a required file is absent (named in the message).
        DimensionMismatchError: image size disagrees with intrinsics.
        NonContiguousIndicesError: frame names are not 000000..N-1.
        InvalidAnnotationError: annotation interval is malformed.
        TooFewFramesError: fewer than 4 frames.
    """
    seq_dir = Path(seq_dir)
    if not seq_dir.is_dir():
        raise MissingFileError(f"missing sequence directory: {seq_dir}")
    intr = load_intrinsics(seq_dir / "intrinsics.json")
    fps = load_meta(seq_dir / "meta.json")

    rgb_dir = seq_dir / "rgb"
    depth_dir = seq_dir / "depth"
    mask_dir = seq_dir / "masks"
    if not rgb_dir.is_dir():
        raise MissingFileError(f"missing file: {rgb_dir}")
    if not depth_dir.is_dir():
        raise MissingFileError(f"missing file: {depth_dir}")

    indices = _listed_indices(rgb_dir)
    n = len(indices)
    if n < 4:
        raise TooFewFramesError(f"{seq_dir} holds {n} frames; at least 4 required")

    for i in indices:
        depth_path = depth_dir / _frame_name(i)
        if not depth_path.is_file():
            raise MissingFileError(f"missing file: {depth_path}")

    frames: list[FrameRecord] = []
    for i in indices:
        bgr = _imread(rgb_dir / _frame_name(i), cv2.IMREAD_COLOR)
        rgb = np.ascontiguousarray(bgr[:, :, ::-1])
        depth_raw = _imread(depth_dir / _frame_name(i), cv2.IMREAD_UNCHANGED)
        if depth_raw.ndim != 2 or depth_raw.dtype != np.uint16:
            raise DimensionMismatchError(
                f"{depth_dir / _frame_name(i)} must be single-channel 16-bit"
            )
        if rgb.shape[:2] != (intr.height, intr.width) or depth_raw.shape != (
            intr.height,
            intr.width,
        ):
            raise DimensionMismatchError(
                f"frame {i} size {rgb.shape[1]}x{rgb.shape[0]} does not match "
                f"intrinsics {intr.width}x{intr.height}"
            )
        mask = None
        mask_path = mask_dir / _frame_name(i)
        if mask_path.is_file():
            mask_raw = _imread(mask_path, cv2.IMREAD_GRAYSCALE)
            if mask_raw.shape != (intr.height, intr.width):
                raise DimensionMismatchError(
                    f"mask {i} size does not match intrinsics "
                    f"{intr.width}x{intr.height}"
                )
            mask = mask_raw
        frames.append(
            FrameRecord(index=i, rgb=rgb, depth=depth_mm_to_meters(depth_raw), mask=mask)
        )

    annotation = None
    ann_path = seq_dir / "annotations.json"
    if ann_path.is_file():
        annotation = load_annotations(ann_path, n)

    return Sequence(
        frames=frames,
        fps=fps,
        intrinsics=intr,
        annotation=annotation,
        source_dir=seq_dir,
    )


def write_frame_images(
    seq_dir: Path,
    rgb: list[np.ndarray],
    depth_m: list[np.ndarray],
    masks: list[np.ndarray] | None = None,
) -> None:
    """Write frame image files in the on-disk layout (RGB in, BGR PNGs out)."""
    if len(rgb) != len(depth_m) or (masks is not None and len(masks) != len(rgb)):
        raise ValueError("rgb, depth, and mask lists must have equal lengths")
    seq_dir = Path(seq_dir)
    (seq_dir / "rgb").mkdir(parents=True, exist_ok=True)
    (seq_dir / "depth").mkdir(parents=True, exist_ok=True)
    if masks is not None:
        (seq_dir / "masks").mkdir(parents=True, exist_ok=True)
    for i, (im, d) in enumerate(zip(rgb, depth_m)):
        cv2.imwrite(str(seq_dir / "rgb" / _frame_name(i)), im[:, :, ::-1])
        cv2.imwrite(str(seq_dir / "depth" / _frame_name(i)), depth_meters_to_mm(d))
        if masks is not None:
            cv2.imwrite(str(seq_dir / "masks" / _frame_name(i)), masks[i])


def load_manifest(path: Path | str) -> Manifest:
    """Parse a manifest file; paths are resolved relative to its directory.

    Raises DanglingPathError for entries that are not existing directories.
    An empty manifest loads fine; evaluation rejects it later.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    entries: list[ManifestEntry] = []
    for lineno, raw_line in enumerate(path.read_text().splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        split: str | None = None
        if "\t" in line:
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip():
                raise ManifestParseError(f"{path}:{lineno}: expected 'path<TAB>split'")
            line, split = parts[0].strip(), parts[1].strip() or None
        seq_path = Path(line)
        if not seq_path.is_absolute():
            seq_path = path.parent / seq_path
        if not seq_path.is_dir():
            raise DanglingPathError(f"{path}:{lineno}: no such sequence directory: {seq_path}")
        entries.append(ManifestEntry(path=seq_path, split=split))
    # The enclosing directory names the dataset; "manifest.txt" itself does not.
    return Manifest(dataset_name=path.resolve().parent.name, entries=entries)


def save_manifest(path: Path, entry_names: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {len(entry_names)} sequences"] + entry_names
    path.write_text("\n".join(lines) + "\n")

"""Keyframe selection and chronologically labeled grid-image assembly.

The frames with the lowest hand speeds inside a search window become keyframe
candidates; one is drawn uniformly as the anchor and embedded in an
n_adj x n_adj grid of consecutive (stride-spaced) frames, each tile labeled
with its chronological number for the vision-language backend to choose from.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .hand_motion import SpeedProfile
from .sequence_store import Sequence


class SamplerError(Exception):
    """Base for sampling and grid construction errors."""


class EmptyKeyframeSetError(SamplerError):
    """No frame satisfied the selection constraints."""


class SequenceTooShortError(SamplerError):
    """Grid needs n_adj**2 frames at the given stride."""


@dataclass(frozen=True)
class SearchWindow:
    """Inclusive frame range [start, end]."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid window [{self.start}, {self.end}]")

    def indices(self) -> range:
        return range(self.start, self.end + 1)


@dataclass(frozen=True)
class KeyframeSet:
    """Ascending frame indices of the lowest-speed candidates."""

    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("keyframe indices must be strictly ascending")


@dataclass(frozen=True)
class LabelStyle:
    """Burned-in tile label appearance."""

    color: tuple[int, int, int] = (255, 255, 255)
    outline: tuple[int, int, int] = (0, 0, 0)
    scale: float | None = None  # None derives from tile height


@dataclass(frozen=True)
class GridSpec:
    n_adj: int = 2
    stride: int = 1
    label_style: LabelStyle = field(default_factory=LabelStyle)

    def __post_init__(self) -> None:
        if self.n_adj < 2:
            raise ValueError("n_adj must be at least 2")
        if self.stride < 1:
            raise ValueError("stride must be at least 1")

    @property
    def n_tiles(self) -> int:
        return self.n_adj * self.n_adj


@dataclass
class GridImage:
    """Composite image plus the mapping from tile labels to frame indices.

    n_tiles counts every tile position including blanks, so it bounds the
    valid label range even when trailing tiles are unmapped.
    """

    image: np.ndarray  # (n_adj*h, n_adj*w, 3) uint8
    tile_to_frame: dict[int, int]
    anchor_tile: int
    n_tiles: int

    def frame_for_label(self, label: int) -> int:
        """Frame behind a tile label; blank labels snap to the nearest mapped one."""
        if label in self.tile_to_frame:
            return self.tile_to_frame[label]
        nearest = min(self.tile_to_frame, key=lambda m: (abs(m - label), m))
        return self.tile_to_frame[nearest]


def select_keyframes(
    profile: SpeedProfile | np.ndarray,
    window: SearchWindow,
    n_key: int = 4,
    max_speed: float | None = None,
) -> KeyframeSet:
    """Pick up to n_key lowest-speed frames in the window, ascending.

    Ties resolve toward earlier frames.  With max_speed set, only frames with
    speed strictly below it qualify.  Raises EmptyKeyframeSetError when no
    frame qualifies.
    """
    speeds = profile.speeds if isinstance(profile, SpeedProfile) else np.asarray(profile)
    if window.end >= speeds.shape[0]:
        raise ValueError("window extends past the speed profile")
    candidates = [
        t for t in window.indices() if max_speed is None or speeds[t] < max_speed
    ]
    if not candidates:
        raise EmptyKeyframeSetError(
            f"no frames below speed bound in [{window.start}, {window.end}]"
        )
    ranked = sorted(candidates, key=lambda t: (speeds[t], t))
    return KeyframeSet(indices=tuple(sorted(ranked[:n_key])))


def sample_anchor(keys: KeyframeSet, rng: np.random.Generator) -> int:
    """Draw one keyframe uniformly; the caller owns the random stream."""
    if not keys.indices:
        raise EmptyKeyframeSetError("cannot sample from an empty keyframe set")
    return int(keys.indices[int(rng.integers(len(keys.indices)))])


def anchor_tile_index(n_tiles: int) -> int:
    """1-based tile position the anchor occupies before boundary clamping."""
    return math.ceil(n_tiles / 2)


def grid_frame_indices(
    anchor: int, n_frames: int, spec: GridSpec
) -> tuple[list[int], int]:
    """Frames tiled around the anchor, and the anchor's 1-based tile.

    Tiles stay on the anchor's stride lattice; when the window would leave
    [0, n_frames-1] it shifts inward, which moves the anchor off its home
    tile but preserves chronological order and uniform spacing.
    """
    n_tiles = spec.n_tiles
    if n_frames < n_tiles * spec.stride:
        raise SequenceTooShortError(
            f"need at least {n_tiles * spec.stride} frames for a "
            f"{spec.n_adj}x{spec.n_adj} grid at stride {spec.stride}"
        )
    if not (0 <= anchor < n_frames):
        raise ValueError(f"anchor {anchor} outside sequence of {n_frames} frames")
    before = anchor_tile_index(n_tiles) - 1
    max_before = anchor // spec.stride
    max_after = (n_frames - 1 - anchor) // spec.stride
    before = min(before, max_before)
    after = n_tiles - 1 - before
    if after > max_after:
        after = max_after
        before = n_tiles - 1 - after
    frames = [anchor + (k - before) * spec.stride for k in range(n_tiles)]
    return frames, before + 1


def _label_tiles(
    canvas: np.ndarray, tile_h: int, tile_w: int, n_adj: int, labels: list[int | None],
    style: LabelStyle,
) -> None:
    scale = style.scale if style.scale is not None else max(0.35, tile_h / 64.0)
    thickness = max(1, int(round(scale * 2)))
    for pos, label in enumerate(labels):
        if label is None:
            continue
        r, c = divmod(pos, n_adj)
        text = str(label)
        (_, text_h), _ = cv2.getTextSize(text, cv2.FONT_HERSHEY_SIMPLEX, scale, thickness)
        org = (c * tile_w + 3, r * tile_h + text_h + 3)
        cv2.putText(canvas, text, org, cv2.FONT_HERSHEY_SIMPLEX, scale,
                    style.outline, thickness + 2, cv2.LINE_AA)
        cv2.putText(canvas, text, org, cv2.FONT_HERSHEY_SIMPLEX, scale,
                    style.color, thickness, cv2.LINE_AA)


def compose_grid(
    images: list[np.ndarray | None],
    frame_indices: list[int | None],
    n_adj: int,
    anchor_tile: int = 1,
    style: LabelStyle = LabelStyle(),
) -> GridImage:
    """Tile images row-major into an n_adj x n_adj labeled composite.

    None entries produce blank (black, unlabeled) tiles with no frame
    mapping; mapped frame indices must be strictly increasing.
    """
    n_tiles = n_adj * n_adj
    if len(images) != n_tiles or len(frame_indices) != n_tiles:
        raise ValueError(f"expected {n_tiles} tiles, got {len(images)}")
    shapes = [im.shape for im in images if im is not None]
    if not shapes:
        raise ValueError("grid needs at least one non-blank tile")
    if any(s != shapes[0] for s in shapes):
        raise ValueError("all tiles must share one image size")
    mapped = [f for f in frame_indices if f is not None]
    if any(b <= a for a, b in zip(mapped, mapped[1:])):
        raise ValueError("tile frame indices must be strictly increasing")
    tile_h, tile_w = shapes[0][:2]
    canvas = np.zeros((n_adj * tile_h, n_adj * tile_w, 3), dtype=np.uint8)
    labels: list[int | None] = []
    tile_to_frame: dict[int, int] = {}
    for pos in range(n_tiles):
        label = pos + 1
        if images[pos] is None:
            labels.append(None)
            continue
        r, c = divmod(pos, n_adj)
        canvas[r * tile_h : (r + 1) * tile_h, c * tile_w : (c + 1) * tile_w] = images[pos]
        labels.append(label)
        tile_to_frame[label] = int(frame_indices[pos])
    _label_tiles(canvas, tile_h, tile_w, n_adj, labels, style)
    return GridImage(
        image=canvas,
        tile_to_frame=tile_to_frame,
        anchor_tile=anchor_tile,
        n_tiles=n_tiles,
    )


def build_grid(seq: Sequence, anchor: int, spec: GridSpec) -> GridImage:
    """Grid of stride-spaced frames with the anchor at the center tile."""
    frames, anchor_tile = grid_frame_indices(anchor, seq.n_frames, spec)
    images = [seq.frames[f].rgb for f in frames]
    return compose_grid(images, list(frames), spec.n_adj, anchor_tile, spec.label_style)


def encode_grid_png(grid: GridImage) -> bytes:
    """Byte-deterministic PNG encoding of the composite image."""
    ok, buf = cv2.imencode(".png", grid.image[:, :, ::-1])
    if not ok:
        raise SamplerError("PNG encoding failed")
    return buf.tobytes()


def dump_grid(grid: GridImage, out_dir: Path, phase: str, round_index: int) -> Path:
    """Write grid_<phase>_<round>.png plus a JSON sidecar with the tile map."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png_path = out_dir / f"grid_{phase}_{round_index}.png"
    png_path.write_bytes(encode_grid_png(grid))
    sidecar = {
        "anchor_tile": grid.anchor_tile,
        "tile_to_frame": {str(k): v for k, v in sorted(grid.tile_to_frame.items())},
    }
    with open(out_dir / f"grid_{phase}_{round_index}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return png_path

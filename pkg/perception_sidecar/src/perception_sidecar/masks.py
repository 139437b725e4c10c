"""Per-frame hand segmentation in the sequence-store mask format.

The built-in ``chroma-prior`` segmenter scores every pixel by its (Cr, Cb)
distance to a canonical skin tone and keeps the connected component with
the highest mean score.  It ships no weights and uses no randomness, so
extraction is reproducible byte for byte.  The config still carries the
prompt/threshold/device surface of a text-prompted detector, letting a
heavier open-vocabulary model slot in behind the same CLI later; asking
for such a model without local weights raises :class:`ModelLoadError`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

logger = logging.getLogger("perception_sidecar")

BUILTIN_MODEL = "chroma-prior"

# Skin chroma centroid in full-range YCrCb; sigma sets how quickly
# confidence decays for off-skin colors.
_SKIN_CR = 155.0
_SKIN_CB = 105.0
_SKIN_SIGMA = 12.0


class SidecarError(Exception):
    """Base error for mask extraction."""


class ModelLoadError(SidecarError):
    """Requested segmentation model could not be loaded."""


@dataclass(frozen=True)
class SidecarConfig:
    """Settings for one extraction pass over a sequence directory."""

    input_dir: Path
    output_dir: Path
    prompt: str = "hand"
    threshold: float = 0.3
    device: str = "cpu"
    model: str = BUILTIN_MODEL

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_dir", Path(self.input_dir))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if not self.prompt.strip():
            raise ValueError("prompt must be a non-empty string")
        if self.device != "cpu" and not self.device.startswith("cuda"):
            raise ValueError(f"device must be 'cpu' or 'cuda[:N]', got {self.device!r}")


def skin_probability(rgb: np.ndarray) -> np.ndarray:
    """Map an HxWx3 uint8 RGB image to per-pixel skin likelihood in [0, 1]."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise SidecarError(f"expected HxWx3 uint8 image, got {rgb.dtype} {rgb.shape}")
    ycrcb = cv2.cvtColor(rgb, cv2.COLOR_RGB2YCrCb).astype(np.float32)
    d2 = (ycrcb[..., 1] - _SKIN_CR) ** 2 + (ycrcb[..., 2] - _SKIN_CB) ** 2
    return np.exp(-d2 / (2.0 * _SKIN_SIGMA**2))


def segment_frame(rgb: np.ndarray, threshold: float) -> tuple[np.ndarray, float]:
    """Segment the most skin-like region of one frame.

    Pixels at or above ``threshold`` likelihood form candidate regions;
    the connected component with the highest mean likelihood wins.  When
    nothing qualifies the mask is all zero and the confidence is 0.0.

    Returns:
        (mask, confidence) where mask is HxW uint8 with 255 inside the
        detection and confidence is the kept component's mean likelihood.
    """
    prob = skin_probability(rgb)
    candidates = (prob >= threshold).astype(np.uint8)
    mask = np.zeros(prob.shape, dtype=np.uint8)
    if not candidates.any():
        return mask, 0.0
    n_labels, labels = cv2.connectedComponents(candidates, connectivity=8)
    best_label = 0
    best_conf = -1.0
    for label in range(1, n_labels):
        conf = float(prob[labels == label].mean())
        if conf > best_conf:
            best_label = label
            best_conf = conf
    mask[labels == best_label] = 255
    return mask, best_conf


def _load_segmenter(config: SidecarConfig):
    if config.model != BUILTIN_MODEL:
        raise ModelLoadError(
            f"model {config.model!r} has no local weights; only"
            f" {BUILTIN_MODEL!r} is bundled"
        )
    if config.prompt != "hand":
        raise SidecarError(
            f"the built-in segmenter only answers the prompt 'hand',"
            f" got {config.prompt!r}"
        )
    return lambda rgb: segment_frame(rgb, config.threshold)


def _read_rgb(path: Path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise SidecarError(f"unreadable image: {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def _sequence_shape(frames: list[Path]) -> tuple[int, int]:
    """Height and width shared by the sequence, from its first readable frame."""
    for path in frames:
        bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if bgr is not None:
            return bgr.shape[0], bgr.shape[1]
    raise SidecarError(f"no readable frame among {len(frames)} files")


def extract_masks(config: SidecarConfig) -> int:
    """Write one mask per RGB frame of a sequence directory.

    Masks land in ``config.output_dir`` under the same file names as the
    frames in ``config.input_dir / "rgb"``, nonzero where the hand was
    detected.  A frame whose inference fails yields an all-zero mask and
    a warning rather than aborting the pass.

    Returns:
        Number of mask files written.
    """
    segmenter = _load_segmenter(config)
    rgb_dir = config.input_dir / "rgb"
    if not rgb_dir.is_dir():
        raise SidecarError(f"no rgb/ directory under {config.input_dir}")
    frames = sorted(rgb_dir.glob("*.png"))
    if not frames:
        raise SidecarError(f"no frames found in {rgb_dir}")
    shape = _sequence_shape(frames)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for frame_path in frames:
        try:
            mask, confidence = segmenter(_read_rgb(frame_path))
        except Exception as exc:
            logger.warning("frame %s: %s; writing empty mask", frame_path.name, exc)
            mask, confidence = np.zeros(shape, dtype=np.uint8), 0.0
        out_path = config.output_dir / frame_path.name
        if not cv2.imwrite(str(out_path), mask):
            raise SidecarError(f"failed to write {out_path}")
        logger.debug("frame %s: confidence %.3f", frame_path.name, confidence)
        written += 1
    return written

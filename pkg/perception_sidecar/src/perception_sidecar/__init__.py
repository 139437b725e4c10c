"""Hand mask extraction for RGB sequences in the sequence-store layout."""

from perception_sidecar.masks import (
    ModelLoadError,
    SidecarConfig,
    SidecarError,
    extract_masks,
    segment_frame,
    skin_probability,
)

__version__ = "0.1.0"

__all__ = [
    "ModelLoadError",
    "SidecarConfig",
    "SidecarError",
    "extract_masks",
    "segment_frame",
    "skin_probability",
    "__version__",
]

"""Command line entry point: extract-masks."""

from __future__ import annotations

import argparse
import logging
import sys

from perception_sidecar import __version__
from perception_sidecar.masks import BUILTIN_MODEL, SidecarConfig, SidecarError, extract_masks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extract-masks",
        description="Write per-frame hand masks for a sequence directory.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--in", dest="input_dir", required=True, metavar="DIR",
        help="sequence directory containing an rgb/ subdirectory",
    )
    parser.add_argument(
        "--out", dest="output_dir", required=True, metavar="DIR",
        help="directory that receives one mask PNG per frame",
    )
    parser.add_argument("--prompt", default="hand", help="object to segment (default: hand)")
    parser.add_argument(
        "--threshold", type=float, default=0.3,
        help="minimum per-pixel confidence in (0, 1) (default: 0.3)",
    )
    parser.add_argument(
        "--model", default=BUILTIN_MODEL,
        help=f"segmentation model name (default: {BUILTIN_MODEL})",
    )
    parser.add_argument("--device", default="cpu", help="cpu or cuda[:N] (default: cpu)")
    parser.add_argument("--verbose", action="store_true", help="log per-frame confidences")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = SidecarConfig(
            input_dir=args.input_dir,
            output_dir=args.output_dir,
            prompt=args.prompt,
            threshold=args.threshold,
            device=args.device,
            model=args.model,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        count = extract_masks(config)
    except (SidecarError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {count} masks to {config.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

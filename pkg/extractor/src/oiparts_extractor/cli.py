"""Command line: dump feature files for a batch of images."""

from __future__ import annotations

import argparse
import sys

from .backends import WeightsUnavailable
from .extract import ExtractSpec, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oiparts-extract",
        description="write DINOv2 + Stable Diffusion feature maps as NPY tensors",
    )
    parser.add_argument("--images", nargs="+", required=True, help="input image paths")
    parser.add_argument("--category", required=True, help="object category for the text prompt")
    parser.add_argument("--timestep", type=int, default=100, help="diffusion timestep")
    parser.add_argument("--resolution", type=int, default=60, help="output grid size")
    parser.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = ExtractSpec(
            images=tuple(args.images),
            category=args.category,
            out_dir=args.out,
            timestep=args.timestep,
            resolution=args.resolution,
        )
        result = extract(spec)
    except WeightsUnavailable as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {len(result.outputs)} image(s) -> {result.manifest_path.parent}")
    if result.skipped:
        print(f"skipped {len(result.skipped)} non-image file(s)", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())

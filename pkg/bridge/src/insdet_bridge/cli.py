"""Command line entry point: extract embeddings and a manifest from images."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import BridgeError
from .extract import extract, load_job


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="insdet-extract",
        description="Crop images, run a vision backbone, and write engine-ready dataset files",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="run an extraction job")
    p.add_argument("--images", nargs="*", default=[], type=Path,
                   help="whole images used as references, one instance each")
    p.add_argument("--boxes", type=Path, default=None,
                   help="JSON job file with per-image crop boxes (reference and scene entries)")
    p.add_argument("--backbone", default="grid",
                   help="'grid' (offline, deterministic) or 'hub:<dinov2 entry>'")
    p.add_argument("--resolution", type=int, default=518, help="square input side fed to the backbone")
    p.add_argument("--pooling", choices=("cls", "mean"), default="cls",
                   help="token pooling for transformer backbones")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = load_job(args.boxes, list(args.images), args.backbone, args.resolution,
                       args.pooling, args.out)
        manifest = extract(job)
    except BridgeError as exc:
        print(f"ERROR {exc.code}: {exc.message}", file=sys.stderr)
        return 2
    print(f"wrote {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end: `avuextract extract --video ... --out ...`."""

import argparse
import sys

from .errors import ExtractError
from .extract import ExtractionJob, extract


def build_parser():
    parser = argparse.ArgumentParser(
        prog="avuextract",
        description="convert a media clip into a feature bundle")
    sub = parser.add_subparsers(dest="command", required=True)
    e = sub.add_parser("extract", help="extract one clip")
    e.add_argument("--video", required=True, help="input video file")
    e.add_argument("--out", required=True, help="output bundle path (.avuf)")
    e.add_argument("--segments", type=int, default=10,
                   help="clip length T in one-second segments")
    e.add_argument("--grid", type=int, default=4,
                   help="patch grid side (cells per frame = grid^2)")
    e.add_argument("--mask-hw", type=int, default=64,
                   help="mask raster side recorded in the header")
    e.add_argument("--backend", default="builtin",
                   help="embedding backend name")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    job = None
    try:
        job = ExtractionJob(video=args.video, out=args.out,
                            segments=args.segments, grid=args.grid,
                            mask_hw=args.mask_hw, backend=args.backend)
        path = extract(job)
    except (ExtractError, OSError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    print(f"wrote {path} ({args.segments} segments, grid {args.grid})")
    return 0


if __name__ == "__main__":
    sys.exit(main())

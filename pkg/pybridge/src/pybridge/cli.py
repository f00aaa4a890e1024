"""Command-line entry point.

The engine invokes the adapter as ``<command> --in <file> --out <dir>``;
mode and model selection ride along in the command string, e.g.::

    idforge generate ... --bridge-cmd "pybridge --mode images" --bridge-mode images

The --mode given here must match the engine's bridge mode, otherwise the
engine will fail to collect the outputs it expects.
"""

import argparse
import sys

from pybridge.adapter import AdapterConfig, serve_batch


def build_parser():
    ap = argparse.ArgumentParser(prog="pybridge", description=__doc__)
    ap.add_argument("--in", dest="in_file", required=True,
                    help="input IDV1 batch file")
    ap.add_argument("--out", dest="out_dir", required=True,
                    help="output directory")
    ap.add_argument("--mode", choices=("embeddings", "images"),
                    default="embeddings")
    ap.add_argument("--model", default="echo",
                    help="'echo' or a path to IDV1 linear weights")
    ap.add_argument("--device", default="cpu")
    ap.add_argument("--batch-size", type=int, default=64,
                    help="internal chunk size; does not change results")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = AdapterConfig(
            model=args.model,
            device=args.device,
            batch_size=args.batch_size,
            mode=args.mode,
        )
    except ValueError as exc:
        print(f"pybridge: {exc}", file=sys.stderr)
        return 2
    return serve_batch(args.in_file, args.out_dir, config)


if __name__ == "__main__":
    sys.exit(main())

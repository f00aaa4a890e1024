#!/usr/bin/env python3
"""Generate a synthetic face-embedding corpus and write it as an IDV1 file.

The corpus is what you fit the PCA + latent Gaussian models on when you do
not have a real embedding dump lying around.  Defaults match the pipeline's
internal corpus stage, so a file produced here can be fed to a run via
`corpus_path` to reproduce the built-in behaviour.
"""

import argparse
import sys

from idforge.corpus import synthetic_face_corpus
from idforge.formats import write_idv
from idforge.numkit import RngState


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=2048, help="number of corpus rows")
    ap.add_argument("--dim", type=int, default=512)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--total-variance", type=float, default=400.0)
    ap.add_argument("--decay", type=float, default=180.0)
    ap.add_argument("--out", required=True, help="output .idv path")
    args = ap.parse_args(argv)

    rng = RngState(args.seed).derive(1)
    corpus = synthetic_face_corpus(
        args.count,
        dim=args.dim,
        rng=rng,
        total_variance=args.total_variance,
        decay=args.decay,
    )
    write_idv(args.out, corpus, metadata={
        "kind": "corpus",
        "seed": args.seed,
        "total_variance": args.total_variance,
        "decay": args.decay,
    })
    norms = (corpus * corpus).sum(axis=1) ** 0.5
    print(f"wrote {args.count} x {args.dim} corpus to {args.out}")
    print(f"row norms: min {norms.min():.3f}  median "
          f"{sorted(norms)[len(norms) // 2]:.3f}  max {norms.max():.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

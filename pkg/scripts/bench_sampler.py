#!/usr/bin/env python3
"""Benchmark tau-separated identity sampling at increasing pool sizes.

Reports wall time, candidate throughput, and the rejection fraction for
each size so you can sanity-check scaling before kicking off a big run.
"""

import argparse
import sys
import time

from idforge.corpus import synthetic_face_corpus
from idforge.errors import ExhaustionError
from idforge.idsampler import SamplerConfig, sample_identity_vectors
from idforge.numkit import RngState
from idforge.pca import latent_gaussian_fit, pca_fit


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="1000,10000,100000",
                    help="comma-separated pool sizes")
    ap.add_argument("--dim", type=int, default=512)
    ap.add_argument("--tau", type=float, default=0.3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--corpus-count", type=int, default=2048)
    ap.add_argument("--batch", type=int, default=4096)
    args = ap.parse_args(argv)

    rng = RngState(args.seed)
    corpus = synthetic_face_corpus(args.corpus_count, dim=args.dim,
                                   rng=rng.derive(1))
    t0 = time.perf_counter()
    pca = pca_fit(corpus, min(args.corpus_count - 1, args.dim))
    latent = latent_gaussian_fit(pca, corpus)
    print(f"model fit: {time.perf_counter() - t0:.2f}s "
          f"(rank {pca.rank}, dim {args.dim})")

    for n in (int(s) for s in args.sizes.split(",")):
        cfg = SamplerConfig(n=n, tau=args.tau, seed=args.seed,
                            candidate_batch=args.batch)
        t0 = time.perf_counter()
        try:
            pool = sample_identity_vectors(cfg, pca, latent)
        except ExhaustionError as exc:
            print(f"n={n:>7}  exhausted: {exc}")
            continue
        dt = time.perf_counter() - t0
        drawn = pool.accepted + pool.rejected
        print(f"n={n:>7}  wall {dt:8.2f}s  "
              f"{drawn / dt:10.0f} cand/s  "
              f"rejected {pool.rejected}/{drawn} "
              f"({pool.rejection_rate:.2%})")
    return 0


if __name__ == "__main__":
    sys.exit(main())

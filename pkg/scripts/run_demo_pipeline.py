#!/usr/bin/env python3
"""Run a small end-to-end dataset build and print the audit summary.

Desk-scale demo: a few dozen identities, toy renderer, full QA audit.
Finishes in well under a minute and leaves a browsable output tree
(pool.idv, variants/, final/, images/, qa_report.json, manifest.json).
"""

import argparse
import json
import pathlib
import sys

from idforge.attrop import AttrOpConfig
from idforge.perturb import PerturbSpec
from idforge.pipeline import PipelineConfig, run_pipeline


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=32, help="identities")
    ap.add_argument("--images-per-id", type=int, default=10)
    ap.add_argument("--dim", type=int, default=512)
    ap.add_argument("--no-attrop", action="store_true",
                    help="skip the attribute-descent stage")
    ap.add_argument("--no-resume", action="store_true",
                    help="ignore any checkpoint in --out-dir")
    args = ap.parse_args(argv)

    cfg = PipelineConfig(
        seed=args.seed,
        out_dir=args.out_dir,
        n=args.n,
        dim=args.dim,
        perturb=PerturbSpec(images_per_id=args.images_per_id),
        attrop=AttrOpConfig(iterations=5),
        attrop_targets=((60.0, 2), (85.0, 1)),
        attrop_enabled=not args.no_attrop,
        impostor_sample=5000,
    )
    manifest = run_pipeline(cfg, resume=not args.no_resume)

    out = pathlib.Path(args.out_dir)
    report = json.loads((out / "report.json").read_text())
    print(f"identities: {report['identity_count']}  "
          f"images: {report['image_count']}")
    print(f"eer: {report['eer']:.4f} @ threshold {report['eer_threshold']:.4f}")
    print(f"outlier rate: {report['outlier_rate']:.4f}  "
          f"merge pairs: {len(report['merge_pairs'])}  "
          f"separable: {report['separability_count']}")
    print(f"identities in manifest: {len(manifest.records)}; "
          f"artifacts under {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

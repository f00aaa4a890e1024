"""Command-line front end.

Each subcommand wraps one pipeline stage with file I/O so stages can be
rerun in isolation, plus `run` for the whole pipeline. Errors exit with
a class-specific code (2 usage/config, 3 data, 4 bridge, 5 numeric) and
print a machine-parsable JSON diagnostic line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .attrop import AttrOpConfig, attrop_adjust
from .errors import IdforgeError, UsageError
from .formats import read_idv, write_idv, write_image
from .genbridge import (
    BridgeConfig,
    bridge_generate,
    make_surrogate_evaluators,
    make_toy_generator,
    toy_embed,
)
from .idsampler import SamplerConfig, load_pool, sample_identity_vectors, save_pool
from .numkit import RngState
from .pca import LatentGaussian, PcaModel, latent_gaussian_fit, pca_fit
from .perturb import PerturbSpec, load_perturbed_set, perturb_identity, save_perturbed_set
from .pipeline import (
    PipelineConfig,
    parallel_map,
    run_pipeline,
)
from .qa import DatasetEmbeddings, QaThresholds, compute_report, identity_leakage_rate


class _Parser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting directly."""

    def error(self, message):
        raise UsageError(message)


def _diag(exc: Exception):
    record = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def _parse_mixture(text: str):
    """'0.3:0.4,0.5:0.4,0.7:0.2' -> ((sigma, fraction), ...)"""
    entries = []
    for part in text.split(","):
        sigma, _, fraction = part.partition(":")
        try:
            entries.append((float(sigma), float(fraction)))
        except ValueError as exc:
            raise UsageError(f"bad mixture entry {part!r} (want sigma:fraction)") from exc
    return tuple(entries)


def _parse_targets(text: str):
    """'60:20,85:10' -> ((pose, count), ...)"""
    entries = []
    for part in text.split(","):
        pose, _, count = part.partition(":")
        try:
            entries.append((float(pose), int(count)))
        except ValueError as exc:
            raise UsageError(f"bad target entry {part!r} (want pose:count)") from exc
    return tuple(entries)


def _parse_kv_file(path: str) -> dict:
    """Declarative `key = value` config file; '#' starts a comment."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value, got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _build_parser() -> _Parser:
    parser = _Parser(prog="idforge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-pca", help="fit the latent models over a corpus file")
    p.add_argument("--in", dest="corpus", required=True, help="corpus IDV1 file")
    p.add_argument("--k", type=int, default=None, help="components (default min(n-1, d))")
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--out-pca", required=True)
    p.add_argument("--out-latent", required=True)

    p = sub.add_parser("sample-ids", help="rejection-sample identity vectors")
    p.add_argument("--pca", required=True)
    p.add_argument("--latent", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--batch", type=int, default=4096)
    p.add_argument("--max-candidates", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("perturb", help="draw constrained variants per identity")
    p.add_argument("--pool", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--images-per-id", type=int, default=50)
    p.add_argument("--s-min", type=float, default=0.5)
    p.add_argument("--mixture", type=_parse_mixture, default=None)
    p.add_argument("--sigma-is-std", action="store_true")
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("attrop", help="adjust variants toward pose/quality targets")
    p.add_argument("--pool", required=True)
    p.add_argument("--variants-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trace-dir", default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--targets", type=_parse_targets, default=((60.0, 20), (85.0, 10)))
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--grad-mode", choices=("analytic", "finite-difference"), default="analytic")
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--quality", type=float, default=27.0)
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("generate", help="render variant vectors to images")
    p.add_argument("--variants-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bridge-cmd", default=None, help="adapter command (default: toy generator)")
    p.add_argument("--bridge-mode", choices=("images", "embeddings"), default="images")
    p.add_argument("--bridge-timeout", type=float, default=120.0)
    p.add_argument("--bridge-batch", type=int, default=256)
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("audit", help="quality analytics over a generated dataset")
    p.add_argument("--images-dir", default=None, help="images/id_<i>/img_<k>.pgm tree")
    p.add_argument("--embeddings-dir", default=None, help="id_<i>.idv embedding files")
    p.add_argument("--pool", default=None, help="identity vectors for separability")
    p.add_argument("--reference", default=None, help="reference IDV1 for leakage")
    p.add_argument("--impostor-sample", type=int, default=20_000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--outlier", type=float, default=0.3)
    p.add_argument("--merge", type=float, default=0.7)
    p.add_argument("--separability", type=float, default=0.4)
    p.add_argument("--leakage", type=float, default=0.7)
    p.add_argument("--out", default=None, help="report path (default stdout)")

    p = sub.add_parser("leakage", help="synthetic-vs-reference similarity screening")
    p.add_argument("--synthetic", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--threshold", type=float, default=0.7)

    p = sub.add_parser("run", help="full pipeline into one output directory")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--no-resume", action="store_true")
    return parser


def _cmd_fit_pca(args) -> int:
    data, _ = read_idv(args.corpus)
    k = args.k if args.k is not None else min(data.shape[0] - 1, data.shape[1])
    model = pca_fit(data, k)
    lg = latent_gaussian_fit(model, data, jitter=args.jitter)
    model.save(args.out_pca)
    lg.save(args.out_latent)
    print(json.dumps({"rank": model.rank, "dim": model.dim, "rows": data.shape[0]}))
    return 0


def _cmd_sample_ids(args) -> int:
    model = PcaModel.load(args.pca)
    lg = LatentGaussian.load(args.latent)
    cfg = SamplerConfig(
        n=args.n,
        tau=args.tau,
        candidate_batch=args.batch,
        max_candidates=args.max_candidates,
        seed=args.seed,
    )
    started = time.monotonic()
    pool = sample_identity_vectors(cfg, model, lg)
    save_pool(args.out, pool, seed=args.seed, wall_time_s=time.monotonic() - started)
    print(json.dumps({
        "accepted": pool.accepted,
        "rejected": pool.rejected,
        "rejection_rate": pool.rejection_rate,
    }))
    return 0


def _cmd_perturb(args) -> int:
    pool = load_pool(args.pool)
    spec = PerturbSpec(
        mixture=args.mixture if args.mixture is not None else PerturbSpec().mixture,
        images_per_id=args.images_per_id,
        s_min=args.s_min,
        sigma_is_std=args.sigma_is_std,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    base = RngState(args.seed)
    vectors = pool.vectors

    def one(i: int):
        pset = perturb_identity(vectors[i], spec, base.derive(3, i))
        save_perturbed_set(args.out_dir, i, pset, s_min=spec.s_min)

    parallel_map(one, range(vectors.shape[0]), args.threads)
    print(json.dumps({"identities": vectors.shape[0], "images_per_id": spec.images_per_id}))
    return 0


def _iter_variant_files(directory: str):
    i = 0
    while True:
        path = os.path.join(directory, f"id_{i}.idv")
        if not os.path.exists(path):
            return
        yield i, path
        i += 1


def _cmd_attrop(args) -> int:
    from dataclasses import replace as dc_replace

    pool = load_pool(args.pool)
    vectors = pool.vectors
    dim = vectors.shape[1]
    import math

    side = max(24, math.isqrt(dim - 1) + 1)
    toy = make_toy_generator(height=side, width=side, dim=dim)
    evaluators = make_surrogate_evaluators(toy)
    base_cfg = AttrOpConfig(
        target_quality=args.quality,
        iterations=args.iterations,
        step_size=args.step_size,
        grad_mode=args.grad_mode,
        grad_clip=args.grad_clip,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    trace_dir = args.trace_dir
    if trace_dir:
        os.makedirs(trace_dir, exist_ok=True)
    jobs = list(_iter_variant_files(args.variants_dir))
    if not jobs:
        raise UsageError(f"{args.variants_dir}: no id_<i>.idv files found")
    total_targets = sum(c for _, c in args.targets)

    def one(item):
        i, path = item
        from .numkit import cosine_similarity

        pset = load_perturbed_set(path)
        if total_targets > pset.count:
            raise UsageError(
                f"targets replace {total_targets} variants but id_{i} has {pset.count}"
            )
        variants = pset.variants.copy()
        sims = pset.similarities.copy()
        gen = RngState(args.seed).derive(4, i).generator()
        chosen = gen.choice(pset.count, size=total_targets, replace=False)
        cursor = 0
        for pose, count in args.targets:
            for k in chosen[cursor : cursor + count]:
                cfg = dc_replace(base_cfg, target_pose=float(pose))
                adjusted, trace = attrop_adjust(vectors[i], variants[int(k)], toy, evaluators, cfg)
                variants[int(k)] = adjusted
                sims[int(k)] = cosine_similarity(adjusted, vectors[i])
                if trace_dir:
                    trace.dump_jsonl(os.path.join(trace_dir, f"id_{i}_var_{int(k)}.jsonl"))
            cursor += count
        out = dc_replace(pset, variants=variants, similarities=sims)
        save_perturbed_set(args.out_dir, i, out)

    parallel_map(one, jobs, args.threads)
    print(json.dumps({"identities": len(jobs), "adjusted_per_id": total_targets}))
    return 0


def _cmd_generate(args) -> int:
    jobs = list(_iter_variant_files(args.variants_dir))
    if not jobs:
        raise UsageError(f"{args.variants_dir}: no id_<i>.idv files found")

    if args.bridge_cmd is None:
        first = load_perturbed_set(jobs[0][1])
        dim = first.variants.shape[1]
        import math

        side = max(24, math.isqrt(dim - 1) + 1)
        toy = make_toy_generator(height=side, width=side, dim=dim)

        def one(item):
            i, path = item
            pset = load_perturbed_set(path)
            id_dir = os.path.join(args.out_dir, f"id_{i}")
            os.makedirs(id_dir, exist_ok=True)
            for k in range(pset.count):
                image = toy.generate(pset.variants[k])
                write_image(os.path.join(id_dir, f"img_{k}.pgm"), image.pixels)

        parallel_map(one, jobs, args.threads)
        print(json.dumps({"identities": len(jobs), "generator": "toy"}))
        return 0

    total = 0
    for i, path in jobs:
        pset = load_perturbed_set(path)
        cfg = BridgeConfig(
            command=args.bridge_cmd,
            work_dir=os.path.join(args.out_dir, ".bridge", f"id_{i}"),
            batch_size=args.bridge_batch,
            timeout_seconds=args.bridge_timeout,
            mode=args.bridge_mode,
        )
        result = bridge_generate(cfg, pset.variants)
        id_dir = os.path.join(args.out_dir, f"id_{i}")
        os.makedirs(id_dir, exist_ok=True)
        if args.bridge_mode == "images":
            for k, image in enumerate(result):
                ext = "pgm" if image.channels == 1 else "ppm"
                write_image(os.path.join(id_dir, f"img_{k}.{ext}"), image.pixels)
            total += len(result)
        else:
            write_idv(os.path.join(args.out_dir, f"id_{i}.idv"), result)
            total += result.shape[0]
    print(json.dumps({"identities": len(jobs), "outputs": total, "generator": "bridge"}))
    return 0


def _load_dataset_embeddings(args) -> DatasetEmbeddings:
    if (args.images_dir is None) == (args.embeddings_dir is None):
        raise UsageError("provide exactly one of --images-dir / --embeddings-dir")
    identities = []
    if args.embeddings_dir:
        for i, path in _iter_variant_files(args.embeddings_dir):
            rows, _ = read_idv(path)
            identities.append((i, rows))
    else:
        from .formats import read_image
        from .genbridge import Image

        i = 0
        toy = None
        while True:
            id_dir = os.path.join(args.images_dir, f"id_{i}")
            if not os.path.isdir(id_dir):
                break
            rows = []
            k = 0
            while True:
                hit = None
                for ext in ("pgm", "ppm"):
                    candidate = os.path.join(id_dir, f"img_{k}.{ext}")
                    if os.path.exists(candidate):
                        hit = candidate
                        break
                if hit is None:
                    break
                image = Image(read_image(hit))
                if toy is None:
                    import math

                    p = image.height * image.width
                    dim = min(512, p)
                    toy = make_toy_generator(
                        height=image.height, width=image.width, dim=dim
                    )
                rows.append(toy_embed(toy, image))
                k += 1
            if rows:
                identities.append((i, np.vstack(rows)))
            i += 1
    if not identities:
        raise UsageError("no identities found to audit")
    return DatasetEmbeddings(identities)


def _cmd_audit(args) -> int:
    ds = _load_dataset_embeddings(args)
    thresholds = QaThresholds(
        outlier=args.outlier,
        merge=args.merge,
        separability=args.separability,
        leakage=args.leakage,
    )
    id_vectors = None
    if args.pool:
        id_vectors = load_pool(args.pool).vectors
    reference = None
    if args.reference:
        reference, _ = read_idv(args.reference)
    report = compute_report(
        ds,
        thresholds,
        id_vectors=id_vectors,
        reference=reference,
        impostor_sample=args.impostor_sample,
        rng=RngState(args.seed),
    )
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _cmd_leakage(args) -> int:
    synthetic, _ = read_idv(args.synthetic)
    reference, _ = read_idv(args.reference)
    rate, indices = identity_leakage_rate(synthetic, reference, args.threshold)
    print(json.dumps({"rate": rate, "offending": indices, "threshold": args.threshold}))
    return 0


_PIPELINE_KEYS = {
    "seed": int,
    "out_dir": str,
    "n": int,
    "dim": int,
    "tau": float,
    "candidate_batch": int,
    "max_candidates": int,
    "corpus_count": int,
    "corpus_path": str,
    "pca_k": int,
    "images_per_id": int,
    "s_min": float,
    "mixture": _parse_mixture,
    "sigma_is_std": lambda s: s.lower() in ("1", "true", "yes"),
    "attrop_targets": _parse_targets,
    "attrop_enabled": lambda s: s.lower() in ("1", "true", "yes"),
    "attrop_iterations": int,
    "attrop_step_size": float,
    "attrop_grad_clip": float,
    "attrop_quality": float,
    "bridge_command": str,
    "bridge_timeout": float,
    "bridge_batch": int,
    "impostor_sample": int,
    "outlier": float,
    "merge": float,
    "separability": float,
    "leakage": float,
    "threads": int,
}


def _pipeline_config_from(values: dict) -> PipelineConfig:
    parsed = {}
    for key, raw in values.items():
        if key not in _PIPELINE_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        parsed[key] = _PIPELINE_KEYS[key](raw) if isinstance(raw, str) else raw
    if "seed" not in parsed:
        raise UsageError("seed is mandatory (set it in the config file or via --seed)")
    if "out_dir" not in parsed:
        raise UsageError("out_dir is mandatory (config file or --out-dir)")
    perturb_kwargs = {}
    for src, dst in (
        ("mixture", "mixture"),
        ("images_per_id", "images_per_id"),
        ("s_min", "s_min"),
        ("sigma_is_std", "sigma_is_std"),
    ):
        if src in parsed:
            perturb_kwargs[dst] = parsed.pop(src)
    attrop_kwargs = {}
    for src, dst in (
        ("attrop_iterations", "iterations"),
        ("attrop_step_size", "step_size"),
        ("attrop_grad_clip", "grad_clip"),
        ("attrop_quality", "target_quality"),
    ):
        if src in parsed:
            attrop_kwargs[dst] = parsed.pop(src)
    thresholds_kwargs = {}
    for key in ("outlier", "merge", "separability", "leakage"):
        if key in parsed:
            thresholds_kwargs[key] = parsed.pop(key)
    bridge = None
    if parsed.get("bridge_command"):
        bridge = BridgeConfig(
            command=parsed.pop("bridge_command"),
            work_dir=os.path.join(parsed["out_dir"], ".bridge"),
            batch_size=parsed.pop("bridge_batch", 256),
            timeout_seconds=parsed.pop("bridge_timeout", 120.0),
            mode="images",
        )
    else:
        parsed.pop("bridge_command", None)
        parsed.pop("bridge_batch", None)
        parsed.pop("bridge_timeout", None)
    return PipelineConfig(
        perturb=PerturbSpec(**perturb_kwargs),
        attrop=AttrOpConfig(**attrop_kwargs),
        thresholds=QaThresholds(**thresholds_kwargs),
        bridge=bridge,
        **parsed,
    )


def _cmd_run(args) -> int:
    values: dict = {}
    if args.config:
        values.update(_parse_kv_file(args.config))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out_dir is not None:
        values["out_dir"] = args.out_dir
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        values[key.strip()] = value.strip()
    cfg = _pipeline_config_from(values)
    manifest = run_pipeline(cfg, resume=not args.no_resume)
    print(json.dumps({
        "identities": len(manifest.records),
        "images": sum(len(r["image_files"]) for r in manifest.records),
        "manifest": os.path.join(cfg.out_dir, "manifest.jsonl"),
    }))
    return 0


_COMMANDS = {
    "fit-pca": _cmd_fit_pca,
    "sample-ids": _cmd_sample_ids,
    "perturb": _cmd_perturb,
    "attrop": _cmd_attrop,
    "generate": _cmd_generate,
    "audit": _cmd_audit,
    "leakage": _cmd_leakage,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except IdforgeError as exc:
        _diag(exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        _diag(exc)
        return 3
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end dataset pipeline: corpus -> fit -> sample -> perturb ->
attribute adjustment -> image generation -> audit.

Every stage reads its inputs from files and writes its outputs to files
under one output directory, so a resumed run sees exactly the bytes an
uninterrupted run would. Stage completion is checkpointed atomically;
randomness comes exclusively from the run seed through per-stage,
per-identity derived streams, so results are independent of worker
count and identical across reruns. The manifest (line-delimited JSON,
relative paths, resolved config embedded) is written last.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import qa
from .attrop import AttrOpConfig, attrop_adjust
from .corpus import synthetic_face_corpus
from .errors import ConfigError, DataError
from .formats import atomic_write_bytes, read_idv, read_image, write_idv, write_image
from .genbridge import (
    BridgeConfig,
    Image,
    bridge_generate,
    make_surrogate_evaluators,
    make_toy_generator,
    toy_embed,
)
from .idsampler import SamplerConfig, load_pool, sample_identity_vectors, save_pool
from .numkit import RngState, cosine_similarity
from .pca import LatentGaussian, PcaModel, latent_gaussian_fit, pca_fit
from .perturb import PerturbSpec, load_perturbed_set, perturb_identity, save_perturbed_set
from .qa import QaThresholds

THREADS_ENV = "IDFORGE_THREADS"
STAGES = ("corpus", "fit", "sample", "perturb", "attrop", "generate", "audit")

# RNG stream lanes, one per randomized stage
LANE_CORPUS = 1
LANE_SAMPLE = 2
LANE_PERTURB = 3
LANE_ATTROP = 4
LANE_AUDIT = 5


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved settings for one run; the seed is mandatory."""

    seed: int
    out_dir: str
    n: int = 64
    dim: int = 512
    tau: float = 0.3
    candidate_batch: int = 4096
    max_candidates: int | None = None
    corpus_count: int = 2048
    corpus_path: str | None = None
    pca_k: int | None = None  # None -> min(corpus rows - 1, dim)
    perturb: PerturbSpec = field(default_factory=PerturbSpec)
    attrop: AttrOpConfig = field(default_factory=AttrOpConfig)
    attrop_targets: tuple = ((60.0, 20), (85.0, 10))
    attrop_enabled: bool = True
    bridge: BridgeConfig | None = None
    thresholds: QaThresholds = field(default_factory=QaThresholds)
    impostor_sample: int = 20_000
    threads: int | None = None

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory (no ambient entropy)")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit int, got {self.seed}")
        if not self.out_dir:
            raise ConfigError("out_dir is mandatory")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        targets = tuple((float(p), int(c)) for p, c in self.attrop_targets)
        for pose, count in targets:
            if count < 0:
                raise ConfigError(f"attrop target count must be >= 0, got {count}")
            if pose < 0:
                raise ConfigError(f"attrop target pose must be >= 0, got {pose}")
        total = sum(c for _, c in targets)
        if self.attrop_enabled and total > self.perturb.images_per_id:
            raise ConfigError(
                f"attrop replaces {total} variants but images_per_id is "
                f"{self.perturb.images_per_id}"
            )
        if self.bridge is not None and self.bridge.mode != "images":
            raise ConfigError("pipeline bridge must run in images mode")
        object.__setattr__(self, "attrop_targets", targets)

    @property
    def planned_images(self) -> int:
        return self.n * self.perturb.images_per_id

    def resolved(self) -> dict:
        """Semantic config for provenance/hashing: everything that can
        change the produced bytes. Environmental fields (out_dir,
        threads) are excluded so equal-seed runs match byte for byte
        wherever and however parallel they execute."""
        raw = asdict(self)
        del raw["out_dir"]
        del raw["threads"]
        raw["attrop_targets"] = [list(t) for t in self.attrop_targets]
        raw["perturb"]["mixture"] = [list(t) for t in self.perturb.mixture]
        raw["planned_images"] = self.planned_images
        return raw

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def worker_count(threads: int | None = None) -> int:
    """Explicit arg, else IDFORGE_THREADS, else CPU count."""
    if threads is not None:
        if threads < 1:
            raise ConfigError(f"threads must be >= 1, got {threads}")
        return threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
        if value < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1


def parallel_map(fn, items, threads: int | None = None):
    """Order-preserving map over items; results are independent of the
    worker count because each item owns its inputs and RNG stream."""
    items = list(items)
    workers = min(worker_count(threads), max(len(items), 1))
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- manifest ----------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Header (resolved config) plus one record per identity."""

    config: dict
    records: list = field(default_factory=list)

    def write_jsonl(self, path):
        lines = [json.dumps({"kind": "run", "config": self.config}, sort_keys=True)]
        for record in self.records:
            lines.append(json.dumps(record, sort_keys=True))
        payload = ("\n".join(lines) + "\n").encode("utf-8")
        atomic_write_bytes(path, payload)

    @classmethod
    def read_jsonl(cls, path) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line for line in fh.read().splitlines() if line.strip()]
        if not lines:
            raise DataError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("kind") != "run":
            raise DataError(f"{path}: first line is not a run header")
        return cls(config=header["config"], records=[json.loads(line) for line in lines[1:]])


# --- locking & checkpoints ---------------------------------------------------


class _RunLock:
    """One pipeline per output directory; stale locks from dead
    processes are reclaimed."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            if not self._stale():
                raise ConfigError(
                    f"{self.path}: output directory is in use by another run"
                ) from None
            os.unlink(self.path)
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def _stale(self) -> bool:
        try:
            with open(self.path, "r", encoding="utf-8") as fh:
                pid = int(fh.read().strip() or "0")
        except (OSError, ValueError):
            return True
        if pid <= 0:
            return True
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return pid == os.getpid()

    def __exit__(self, *_exc):
        try:
            os.unlink(self.path)
        except OSError:
            pass


def _checkpoint_path(out_dir: str) -> str:
    return os.path.join(out_dir, "checkpoint.json")


def _read_checkpoint(out_dir: str) -> dict:
    path = _checkpoint_path(out_dir)
    if not os.path.exists(path):
        return {"completed": [], "config_sha256": None}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_checkpoint(out_dir: str, completed: list, config_hash: str):
    payload = json.dumps(
        {"completed": completed, "config_sha256": config_hash}, sort_keys=True, indent=2
    )
    atomic_write_bytes(_checkpoint_path(out_dir), (payload + "\n").encode("utf-8"))


# --- stage implementations ---------------------------------------------------


def _paths(cfg: PipelineConfig) -> dict:
    out = cfg.out_dir
    return {
        "corpus": os.path.join(out, "corpus.idv"),
        "pca": os.path.join(out, "pca.idv"),
        "latent": os.path.join(out, "latent.idv"),
        "pool": os.path.join(out, "pool.idv"),
        "raw_dir": os.path.join(out, "variants", "raw"),
        "final_dir": os.path.join(out, "variants", "final"),
        "trace_dir": os.path.join(out, "traces"),
        "image_dir": os.path.join(out, "images"),
        "report": os.path.join(out, "report.json"),
        "manifest": os.path.join(out, "manifest.jsonl"),
    }


def stage_corpus(cfg: PipelineConfig, paths: dict):
    if cfg.corpus_path:
        data, _ = read_idv(cfg.corpus_path)
        if data.shape[1] != cfg.dim:
            raise DataError(
                f"{cfg.corpus_path}: corpus dim {data.shape[1]} != configured dim {cfg.dim}"
            )
        if data.shape[0] < 2:
            raise DataError(f"{cfg.corpus_path}: corpus needs at least 2 rows")
    else:
        data = synthetic_face_corpus(
            cfg.corpus_count, cfg.dim, rng=RngState(cfg.seed).derive(LANE_CORPUS)
        )
    write_idv(paths["corpus"], data)


def stage_fit(cfg: PipelineConfig, paths: dict):
    data, _ = read_idv(paths["corpus"])
    k = cfg.pca_k if cfg.pca_k is not None else min(data.shape[0] - 1, cfg.dim)
    model = pca_fit(data, k)
    lg = latent_gaussian_fit(model, data)
    model.save(paths["pca"])
    lg.save(paths["latent"])


def stage_sample(cfg: PipelineConfig, paths: dict):
    model = PcaModel.load(paths["pca"])
    lg = LatentGaussian.load(paths["latent"])
    scfg = SamplerConfig(
        n=cfg.n,
        tau=cfg.tau,
        candidate_batch=cfg.candidate_batch,
        max_candidates=cfg.max_candidates,
        seed=cfg.seed,
    )
    started = time.monotonic()
    pool = sample_identity_vectors(scfg, model, lg, rng=RngState(cfg.seed).derive(LANE_SAMPLE))
    save_pool(paths["pool"], pool, seed=cfg.seed, wall_time_s=time.monotonic() - started)


def stage_perturb(cfg: PipelineConfig, paths: dict):
    pool = load_pool(paths["pool"])
    os.makedirs(paths["raw_dir"], exist_ok=True)
    base = RngState(cfg.seed)
    vectors = pool.vectors

    def one(i: int):
        pset = perturb_identity(vectors[i], cfg.perturb, base.derive(LANE_PERTURB, i))
        save_perturbed_set(paths["raw_dir"], i, pset, s_min=cfg.perturb.s_min)

    parallel_map(one, range(vectors.shape[0]), cfg.threads)


def _toy_generator_for(cfg: PipelineConfig):
    side = max(24, math.isqrt(cfg.dim - 1) + 1)
    return make_toy_generator(height=side, width=side, dim=cfg.dim)


def _choose_replacements(cfg: PipelineConfig, identity: int):
    """Deterministically pick which variants get adjusted, and to what pose."""
    total = sum(c for _, c in cfg.attrop_targets)
    if total == 0:
        return []
    gen = RngState(cfg.seed).derive(LANE_ATTROP, identity).generator()
    chosen = gen.choice(cfg.perturb.images_per_id, size=total, replace=False)
    jobs = []
    cursor = 0
    for pose, count in cfg.attrop_targets:
        for k in chosen[cursor : cursor + count]:
            jobs.append((int(k), float(pose)))
        cursor += count
    return jobs


def _attrop_active(cfg: PipelineConfig) -> bool:
    return cfg.attrop_enabled and sum(c for _, c in cfg.attrop_targets) > 0


def _variants_dir(cfg: PipelineConfig, paths: dict) -> str:
    return paths["final_dir"] if _attrop_active(cfg) else paths["raw_dir"]


def stage_attrop(cfg: PipelineConfig, paths: dict):
    os.makedirs(paths["final_dir"], exist_ok=True)
    os.makedirs(paths["trace_dir"], exist_ok=True)
    pool = load_pool(paths["pool"])
    vectors = pool.vectors
    toy = _toy_generator_for(cfg)
    evaluators = make_surrogate_evaluators(toy)

    def one(i: int):
        pset = load_perturbed_set(os.path.join(paths["raw_dir"], f"id_{i}.idv"))
        variants = pset.variants.copy()
        sims = pset.similarities.copy()
        v_id = vectors[i]
        jobs = _choose_replacements(cfg, i)
        trace_files = []
        for k, pose in jobs:
            acfg = replace(cfg.attrop, target_pose=pose)
            adjusted, trace = attrop_adjust(v_id, variants[k], toy, evaluators, acfg)
            variants[k] = adjusted
            sims[k] = cosine_similarity(adjusted, v_id)
            trace_path = os.path.join(paths["trace_dir"], f"id_{i}_var_{k}.jsonl")
            trace.dump_jsonl(trace_path)
            trace_files.append(trace_path)
        out = replace(pset, variants=variants, similarities=sims)
        save_perturbed_set(paths["final_dir"], i, out, s_min=cfg.perturb.s_min)
        return trace_files

    parallel_map(one, range(vectors.shape[0]), cfg.threads)


def stage_generate(cfg: PipelineConfig, paths: dict):
    pool = load_pool(paths["pool"])
    source = _variants_dir(cfg, paths)

    if cfg.bridge is None:
        toy = _toy_generator_for(cfg)

        def one(i: int):
            pset = load_perturbed_set(os.path.join(source, f"id_{i}.idv"))
            id_dir = os.path.join(paths["image_dir"], f"id_{i}")
            os.makedirs(id_dir, exist_ok=True)
            for k in range(pset.count):
                image = toy.generate(pset.variants[k])
                write_image(os.path.join(id_dir, f"img_{k}.pgm"), image.pixels)

        parallel_map(one, range(pool.accepted), cfg.threads)
        return

    for i in range(pool.accepted):
        pset = load_perturbed_set(os.path.join(source, f"id_{i}.idv"))
        id_dir = os.path.join(paths["image_dir"], f"id_{i}")
        os.makedirs(id_dir, exist_ok=True)
        bridge_cfg = replace(cfg.bridge, work_dir=os.path.join(cfg.bridge.work_dir, f"id_{i}"))
        images = bridge_generate(bridge_cfg, pset.variants)
        for k, image in enumerate(images):
            ext = "pgm" if image.channels == 1 else "ppm"
            write_image(os.path.join(id_dir, f"img_{k}.{ext}"), image.pixels)


def _image_files(image_dir: str, identity: int) -> list:
    id_dir = os.path.join(image_dir, f"id_{identity}")
    k = 0
    files = []
    while True:
        hit = None
        for ext in ("pgm", "ppm"):
            candidate = os.path.join(id_dir, f"img_{k}.{ext}")
            if os.path.exists(candidate):
                hit = candidate
                break
        if hit is None:
            return files
        files.append(hit)
        k += 1


def stage_audit(cfg: PipelineConfig, paths: dict):
    pool = load_pool(paths["pool"])
    toy = _toy_generator_for(cfg)

    def embed_identity(i: int):
        files = _image_files(paths["image_dir"], i)
        if not files:
            raise DataError(f"no images found for identity {i}")
        return np.vstack([toy_embed(toy, Image(read_image(f))) for f in files])

    embeddings = parallel_map(embed_identity, range(pool.accepted), cfg.threads)
    ds = qa.DatasetEmbeddings(list(enumerate(embeddings)))
    report = qa.compute_report(
        ds,
        cfg.thresholds,
        id_vectors=pool.vectors,
        impostor_sample=cfg.impostor_sample,
        rng=RngState(cfg.seed).derive(LANE_AUDIT),
    )
    atomic_write_bytes(paths["report"], (report.to_json() + "\n").encode("utf-8"))


def _build_manifest(cfg: PipelineConfig, paths: dict) -> DatasetManifest:
    manifest = DatasetManifest(config=cfg.resolved())
    out = cfg.out_dir

    def rel(path: str) -> str:
        return os.path.relpath(path, out)

    pool = load_pool(paths["pool"])
    for i in range(pool.accepted):
        variants_file = os.path.join(_variants_dir(cfg, paths), f"id_{i}.idv")
        pset = load_perturbed_set(variants_file)
        jobs = _choose_replacements(cfg, i) if _attrop_active(cfg) else []
        trace_files = [
            os.path.join(paths["trace_dir"], f"id_{i}_var_{k}.jsonl") for k, _ in jobs
        ]
        images = _image_files(paths["image_dir"], i)
        record = {
            "label": i,
            "pool_file": rel(paths["pool"]),
            "pool_row": i,
            "variants_file": rel(variants_file),
            "sigmas": pset.sigmas.tolist(),
            "attrop": {
                "indices": [k for k, _ in jobs],
                "poses": [p for _, p in jobs],
                "quality": cfg.attrop.target_quality,
            },
            "trace_files": [rel(t) for t in trace_files],
            "image_files": [rel(f) for f in images],
        }
        for path in [variants_file, *trace_files, *images]:
            if not os.path.exists(path):
                raise DataError(f"manifest references missing file: {path}")
        if len(images) != pset.count:
            raise DataError(
                f"identity {i}: {len(images)} images for {pset.count} variants"
            )
        manifest.records.append(record)
    return manifest


_STAGE_FNS = {
    "corpus": stage_corpus,
    "fit": stage_fit,
    "sample": stage_sample,
    "perturb": stage_perturb,
    "attrop": stage_attrop,
    "generate": stage_generate,
    "audit": stage_audit,
}


def run_pipeline(cfg: PipelineConfig, resume: bool = True) -> DatasetManifest:
    """Execute all stages, checkpointing after each; returns the manifest.

    With resume=True, stages already checkpointed for this exact config
    are skipped; a checkpoint from a different config is an error.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    paths = _paths(cfg)
    cfg_hash = cfg.config_hash()
    stages = [s for s in STAGES if s != "attrop" or _attrop_active(cfg)]
    with _RunLock(cfg.out_dir):
        state = _read_checkpoint(cfg.out_dir)
        if state["completed"] and state.get("config_sha256") != cfg_hash:
            raise ConfigError(
                f"{cfg.out_dir}: existing checkpoint belongs to a different config"
            )
        completed = list(state["completed"]) if resume else []
        for stage in stages:
            if stage in completed:
                continue
            _STAGE_FNS[stage](cfg, paths)
            completed.append(stage)
            _write_checkpoint(cfg.out_dir, completed, cfg_hash)
        manifest = _build_manifest(cfg, paths)
        manifest.write_jsonl(paths["manifest"])
    return manifest

import json
import os

import numpy as np
import pytest

from idforge import pipeline
from idforge.attrop import AttrOpConfig
from idforge.errors import BridgeExitError, ConfigError, DataError
from idforge.genbridge import BridgeConfig
from idforge.perturb import PerturbSpec
from idforge.pipeline import (
    DatasetManifest,
    PipelineConfig,
    _RunLock,
    parallel_map,
    run_pipeline,
    worker_count,
)
from idforge.qa import QaReport

# wall-clock sidecar: the one run artifact allowed to differ between runs
VOLATILE = {"pool.idv.stats.json"}


def _tiny_cfg(out_dir, **overrides):
    base = dict(
        seed=77,
        out_dir=str(out_dir),
        n=6,
        dim=32,
        corpus_count=96,
        candidate_batch=64,
        perturb=PerturbSpec(images_per_id=4, mixture=((0.3, 0.5), (0.5, 0.5)), s_min=0.3),
        attrop=AttrOpConfig(iterations=2),
        attrop_targets=((60.0, 1),),
        impostor_sample=500,
    )
    base.update(overrides)
    return PipelineConfig(**base)


def _snapshot(out_dir):
    """{relative path: bytes} for every file under the run directory."""
    out = {}
    for root, _dirs, files in os.walk(out_dir):
        for name in files:
            path = os.path.join(root, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, out_dir)] = fh.read()
    return out


def _assert_runs_match(dir_a, dir_b):
    a, b = _snapshot(dir_a), _snapshot(dir_b)
    assert set(a) == set(b)
    for rel in sorted(a):
        if os.path.basename(rel) in VOLATILE:
            continue
        assert a[rel] == b[rel], f"{rel} differs between runs"


# ---------------------------------------------------------------- end to end


def test_end_to_end_artifacts(tmp_path):
    cfg = _tiny_cfg(tmp_path / "run")
    manifest = run_pipeline(cfg)

    assert len(manifest.records) == cfg.n
    assert [r["label"] for r in manifest.records] == list(range(cfg.n))
    for record in manifest.records:
        assert len(record["image_files"]) == cfg.perturb.images_per_id
        assert len(record["sigmas"]) == cfg.perturb.images_per_id
        assert record["attrop"]["indices"] and len(record["attrop"]["indices"]) == 1
        assert record["trace_files"]
        for rel in record["image_files"] + record["trace_files"]:
            assert os.path.exists(os.path.join(cfg.out_dir, rel))
            assert not os.path.isabs(rel)

    with open(os.path.join(cfg.out_dir, "checkpoint.json")) as fh:
        state = json.load(fh)
    assert state["completed"] == list(pipeline.STAGES)
    assert state["config_sha256"] == cfg.config_hash()

    with open(os.path.join(cfg.out_dir, "report.json")) as fh:
        report = QaReport.from_json(fh.read())
    assert report.identity_count == cfg.n
    assert report.image_count == cfg.planned_images
    assert report.impostor_count == cfg.impostor_sample

    reread = DatasetManifest.read_jsonl(os.path.join(cfg.out_dir, "manifest.jsonl"))
    assert reread.config == manifest.config == cfg.resolved()
    assert reread.records == manifest.records
    assert not os.path.exists(os.path.join(cfg.out_dir, ".lock"))


def test_same_seed_runs_are_byte_identical(tmp_path):
    run_pipeline(_tiny_cfg(tmp_path / "a"))
    run_pipeline(_tiny_cfg(tmp_path / "b"))
    _assert_runs_match(tmp_path / "a", tmp_path / "b")


def test_seed_changes_output(tmp_path):
    run_pipeline(_tiny_cfg(tmp_path / "a"))
    run_pipeline(_tiny_cfg(tmp_path / "b", seed=78))
    a, b = _snapshot(tmp_path / "a"), _snapshot(tmp_path / "b")
    assert a["pool.idv"] != b["pool.idv"]


# ------------------------------------------------------------------- resume


def test_resume_after_crash_matches_fresh_run(tmp_path):
    cfg = _tiny_cfg(tmp_path / "crashy")

    def boom(cfg, paths):
        raise RuntimeError("injected crash")

    with pytest.MonkeyPatch.context() as mp:
        mp.setitem(pipeline._STAGE_FNS, "generate", boom)
        with pytest.raises(RuntimeError, match="injected crash"):
            run_pipeline(cfg)

    with open(os.path.join(cfg.out_dir, "checkpoint.json")) as fh:
        state = json.load(fh)
    assert state["completed"] == ["corpus", "fit", "sample", "perturb", "attrop"]

    resumed = run_pipeline(cfg)  # picks up at the failed stage
    assert len(resumed.records) == cfg.n

    run_pipeline(_tiny_cfg(tmp_path / "fresh"))
    _assert_runs_match(cfg.out_dir, tmp_path / "fresh")


def test_resume_false_recomputes(tmp_path):
    cfg = _tiny_cfg(tmp_path / "run")
    run_pipeline(cfg)
    before = _snapshot(cfg.out_dir)
    run_pipeline(cfg, resume=False)
    after = _snapshot(cfg.out_dir)
    assert set(before) == set(after)
    for rel in before:
        if os.path.basename(rel) not in VOLATILE:
            assert before[rel] == after[rel]


def test_checkpoint_from_other_config_rejected(tmp_path):
    cfg = _tiny_cfg(tmp_path / "run")
    run_pipeline(cfg)
    other = _tiny_cfg(tmp_path / "run", tau=0.5)
    with pytest.raises(ConfigError, match="different config"):
        run_pipeline(other)


# ------------------------------------------------------------------ locking


def test_lock_blocks_live_owner(tmp_path):
    lock_path = tmp_path / ".lock"
    lock_path.write_text("1")  # pid 1 is always alive
    with pytest.raises(ConfigError, match="in use"):
        _RunLock(str(tmp_path)).__enter__()


@pytest.mark.parametrize("stale_content", ["0", "not-a-pid", ""])
def test_lock_reclaims_stale(tmp_path, stale_content):
    (tmp_path / ".lock").write_text(stale_content)
    with _RunLock(str(tmp_path)):
        assert (tmp_path / ".lock").read_text() == str(os.getpid())
    assert not (tmp_path / ".lock").exists()


def test_lock_reclaims_own_pid(tmp_path):
    (tmp_path / ".lock").write_text(str(os.getpid()))
    with _RunLock(str(tmp_path)):
        pass
    assert not (tmp_path / ".lock").exists()


# ------------------------------------------------------------ attrop routing


def test_attrop_disabled_skips_stage(tmp_path):
    cfg = _tiny_cfg(tmp_path / "run", attrop_enabled=False)
    manifest = run_pipeline(cfg)

    with open(os.path.join(cfg.out_dir, "checkpoint.json")) as fh:
        state = json.load(fh)
    assert "attrop" not in state["completed"]
    assert not os.path.exists(os.path.join(cfg.out_dir, "variants", "final"))
    for record in manifest.records:
        assert record["attrop"]["indices"] == []
        assert record["trace_files"] == []
        assert record["variants_file"].startswith(os.path.join("variants", "raw"))


def test_attrop_zero_targets_equivalent_to_disabled(tmp_path):
    cfg = _tiny_cfg(tmp_path / "run", attrop_targets=())
    run_pipeline(cfg)
    with open(os.path.join(cfg.out_dir, "checkpoint.json")) as fh:
        assert "attrop" not in json.load(fh)["completed"]


# ----------------------------------------------------------------- bridging


def test_missing_bridge_command_fails_at_generate(tmp_path):
    bridge = BridgeConfig(command="/nonexistent/renderer-xyz", work_dir=str(tmp_path / "wk"))
    cfg = _tiny_cfg(tmp_path / "run", bridge=bridge)
    with pytest.raises(BridgeExitError):
        run_pipeline(cfg)
    with open(os.path.join(cfg.out_dir, "checkpoint.json")) as fh:
        completed = json.load(fh)["completed"]
    assert completed == ["corpus", "fit", "sample", "perturb", "attrop"]


def test_bridge_must_emit_images():
    bad = BridgeConfig(command="true", work_dir="/tmp/x", mode="embeddings")
    with pytest.raises(ConfigError, match="images mode"):
        _tiny_cfg("/tmp/run", bridge=bad)


# ----------------------------------------------------------------- plumbing


def test_parallel_map_preserves_order():
    items = list(range(40))
    assert parallel_map(lambda x: x * x, items, threads=4) == [x * x for x in items]
    assert parallel_map(lambda x: x + 1, items, threads=1) == [x + 1 for x in items]
    assert parallel_map(lambda x: x, [], threads=4) == []


def test_parallel_map_propagates_errors():
    def sometimes(x):
        if x == 3:
            raise ValueError("item 3")
        return x

    with pytest.raises(ValueError, match="item 3"):
        parallel_map(sometimes, range(8), threads=4)


def test_worker_count_sources(monkeypatch):
    assert worker_count(5) == 5
    with pytest.raises(ConfigError):
        worker_count(0)
    monkeypatch.setenv(pipeline.THREADS_ENV, "3")
    assert worker_count() == 3
    monkeypatch.setenv(pipeline.THREADS_ENV, "zero")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.setenv(pipeline.THREADS_ENV, "-2")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.delenv(pipeline.THREADS_ENV)
    assert worker_count() >= 1


def test_run_results_independent_of_threads(tmp_path):
    run_pipeline(_tiny_cfg(tmp_path / "a", threads=1))
    run_pipeline(_tiny_cfg(tmp_path / "b", threads=4))
    _assert_runs_match(tmp_path / "a", tmp_path / "b")


# ----------------------------------------------------------------- manifest


def test_manifest_round_trip(tmp_path):
    manifest = DatasetManifest(
        config={"seed": 1, "n": 2},
        records=[{"label": 0, "image_files": ["x.pgm"]}, {"label": 1, "image_files": []}],
    )
    path = tmp_path / "m.jsonl"
    manifest.write_jsonl(path)
    back = DatasetManifest.read_jsonl(path)
    assert back.config == manifest.config
    assert back.records == manifest.records


def test_manifest_rejects_bad_files(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(DataError, match="empty"):
        DatasetManifest.read_jsonl(empty)
    headerless = tmp_path / "bad.jsonl"
    headerless.write_text('{"label": 0}\n')
    with pytest.raises(DataError, match="run header"):
        DatasetManifest.read_jsonl(headerless)


# ------------------------------------------------------------------- config


def test_config_hash_ignores_environment():
    a = _tiny_cfg("/tmp/a", threads=1)
    b = _tiny_cfg("/tmp/elsewhere", threads=8)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != _tiny_cfg("/tmp/a", seed=78).config_hash()
    resolved = a.resolved()
    assert "out_dir" not in resolved and "threads" not in resolved


def test_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(seed=None, out_dir="/tmp/x")
    with pytest.raises(ConfigError):
        PipelineConfig(seed=2**64, out_dir="/tmp/x")
    with pytest.raises(ConfigError):
        PipelineConfig(seed=1, out_dir="")
    with pytest.raises(ConfigError):
        PipelineConfig(seed=1, out_dir="/tmp/x", n=0)
    with pytest.raises(ConfigError, match="images_per_id"):
        PipelineConfig(
            seed=1,
            out_dir="/tmp/x",
            perturb=PerturbSpec(images_per_id=3),
            attrop_targets=((60.0, 2), (85.0, 2)),
        )
    with pytest.raises(ConfigError):
        PipelineConfig(seed=1, out_dir="/tmp/x", attrop_targets=((-5.0, 1),))
    cfg = PipelineConfig(seed=1, out_dir="/tmp/x", n=3)
    assert cfg.planned_images == 3 * cfg.perturb.images_per_id

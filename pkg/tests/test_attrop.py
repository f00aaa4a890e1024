import json
import math

import numpy as np
import pytest

from idforge.attrop import (
    AttrOpConfig,
    Evaluator,
    attrop_adjust,
    attrop_loss,
    finite_difference_gradient,
)
from idforge.errors import BudgetError, ConfigError, NumericError
from idforge.genbridge import make_surrogate_evaluators, make_toy_generator
from idforge.numkit import RngState, cosine_similarity


def _const_evaluators(embedding, quality, pose):
    return (
        Evaluator(kind="identity", value=lambda img: embedding),
        Evaluator(kind="quality", value=lambda img: quality),
        Evaluator(kind="pose", value=lambda img: pose),
    )


# ------------------------------------------------------------------ loss


def test_loss_frozen_example():
    """Hand computation: embedding [1,0] vs id [1,1] -> 1 - 1/sqrt(2);
    quality 20 vs target 27 -> 7; pose -50 vs target 60 -> |60-50| = 10."""
    evaluators = _const_evaluators(np.array([1.0, 0.0]), 20.0, -50.0)
    cfg = AttrOpConfig(target_quality=27.0, target_pose=60.0)
    total, terms = attrop_loss(None, np.array([1.0, 1.0]), evaluators, cfg)
    assert terms["id"] == pytest.approx(1.0 - 1.0 / math.sqrt(2), abs=1e-12)
    assert terms["quality"] == 7.0
    assert terms["pose"] == 10.0
    assert total == pytest.approx(18.0 - 1.0 / math.sqrt(2), abs=1e-12)


def test_loss_quality_sign_vs_hinge():
    evaluators = _const_evaluators(np.array([1.0, 0.0]), 30.0, 60.0)
    vid = np.array([1.0, 0.0])
    signed = AttrOpConfig(target_quality=27.0, target_pose=60.0)
    _, terms = attrop_loss(None, vid, evaluators, signed)
    assert terms["quality"] == -3.0  # overshoot counts against, signed
    hinged = AttrOpConfig(target_quality=27.0, target_pose=60.0, hinge_quality=True)
    _, terms = attrop_loss(None, vid, evaluators, hinged)
    assert terms["quality"] == 0.0


def test_loss_pose_uses_absolute_pose():
    # |P - |p||: pose -60 hits a +60 target exactly
    evaluators = _const_evaluators(np.array([1.0, 0.0]), 27.0, -60.0)
    _, terms = attrop_loss(
        None, np.array([1.0, 0.0]), evaluators, AttrOpConfig(target_pose=60.0)
    )
    assert terms["pose"] == 0.0


def test_loss_rejects_bad_evaluator_sets():
    ev = _const_evaluators(np.array([1.0, 0.0]), 20.0, 0.0)
    with pytest.raises(ConfigError):
        attrop_loss(None, np.ones(2), ev[:2], AttrOpConfig())  # pose missing
    with pytest.raises(ConfigError):
        attrop_loss(None, np.ones(2), ev + (ev[0],), AttrOpConfig())  # dup identity


def test_loss_non_finite_raises():
    ev = _const_evaluators(np.array([1.0, 0.0]), math.nan, 0.0)
    with pytest.raises(NumericError):
        attrop_loss(None, np.ones(2), ev, AttrOpConfig())


# ------------------------------------------------- finite differences


def test_fd_gradient_exact_on_quadratic():
    v = np.array([1.0, -2.0, 3.0])
    grad = finite_difference_gradient(lambda x: float(x @ x), v, 1e-3)
    np.testing.assert_allclose(grad, 2 * v, rtol=1e-9)


# ------------------------------------------------------ toy integration


@pytest.fixture(scope="module")
def toy_setup():
    toy = make_toy_generator(height=12, width=12, dim=64, beta=2.0)
    evaluators = make_surrogate_evaluators(toy)
    return toy, evaluators


def _smooth_probe(toy, evaluators, cfg, seed):
    """Random unit vector kept only if the loss is smooth in an fd_step
    neighborhood: pre-clamp pixels clear of {0,1}, pose clear of its
    kinks at 0 and +-P."""
    ev = {e.kind: e for e in evaluators}
    gen = RngState(seed).generator()
    for _ in range(200):
        v = gen.standard_normal(toy.dim)
        v /= np.linalg.norm(v)
        pre = 0.5 + toy.beta * (toy.W @ v)
        if pre.min() < 0.02 or pre.max() > 0.98:
            continue
        pose = ev["pose"].value(toy.generate(v))
        if abs(pose) < 1.0 or abs(abs(pose) - cfg.target_pose) < 1.0:
            continue
        return v
    raise AssertionError("no smooth probe found; loosen the screen")


def test_analytic_gradient_matches_fd(toy_setup):
    toy, evaluators = toy_setup
    cfg = AttrOpConfig(grad_mode="analytic", target_pose=60.0)
    from idforge.attrop import _analytic_gradient, _evaluator_map

    evs = _evaluator_map(evaluators)
    vid = _smooth_probe(toy, evaluators, cfg, 1000)
    for seed in range(5):
        v = _smooth_probe(toy, evaluators, cfg, seed)
        analytic = _analytic_gradient(v, vid, toy, evs, cfg)
        fd = finite_difference_gradient(
            lambda x: attrop_loss(toy.generate(x), vid, evaluators, cfg)[0],
            v,
            cfg.fd_step,
        )
        rel = np.linalg.norm(analytic - fd) / np.linalg.norm(fd)
        assert rel < 1e-4


def test_adjust_zero_iterations_is_bitwise_noop(toy_setup):
    toy, evaluators = toy_setup
    gen = RngState(8).generator()
    vid = gen.standard_normal(toy.dim)
    vim = gen.standard_normal(toy.dim)
    out, trace = attrop_adjust(vid, vim, toy, evaluators, AttrOpConfig(iterations=0))
    np.testing.assert_array_equal(out, vim)
    assert len(trace) == 1
    assert trace.records[0]["iteration"] == 0


def test_adjust_trace_shape_and_dump(toy_setup, tmp_path):
    toy, evaluators = toy_setup
    gen = RngState(9).generator()
    vid = gen.standard_normal(toy.dim)
    vim = vid + 0.1 * gen.standard_normal(toy.dim)
    cfg = AttrOpConfig(iterations=4, target_pose=30.0)
    out, trace = attrop_adjust(vid, vim, toy, evaluators, cfg)
    assert len(trace) == 5  # T + 1: start plus one per iteration
    assert [r["iteration"] for r in trace.records] == [0, 1, 2, 3, 4]
    for record in trace.records:
        assert set(record) == {"iteration", "total", "id", "quality", "pose", "vector_sha256"}

    path = tmp_path / "trace.jsonl"
    trace.dump_jsonl(path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 5
    assert json.loads(lines[0])["iteration"] == 0


def test_adjust_step_is_clipped(toy_setup):
    toy, evaluators = toy_setup
    gen = RngState(10).generator()
    vid = gen.standard_normal(toy.dim)
    vim = vid + 0.05 * gen.standard_normal(toy.dim)
    cfg = AttrOpConfig(iterations=1, step_size=0.05, grad_clip=1.0, target_pose=85.0)
    out, _ = attrop_adjust(vid, vim, toy, evaluators, cfg)
    # one step of at most step_size * grad_clip
    assert np.linalg.norm(out - np.asarray(vim)) <= 0.05 + 1e-12


def test_adjust_deterministic(toy_setup):
    toy, evaluators = toy_setup
    gen = RngState(11).generator()
    vid = gen.standard_normal(toy.dim)
    vim = vid + 0.1 * gen.standard_normal(toy.dim)
    cfg = AttrOpConfig(iterations=6, target_pose=45.0)
    a, _ = attrop_adjust(vid, vim, toy, evaluators, cfg)
    b, _ = attrop_adjust(vid, vim, toy, evaluators, cfg)
    np.testing.assert_array_equal(a, b)


def test_fd_mode_budget_boundary(toy_setup):
    toy, evaluators = toy_setup
    gen = RngState(12).generator()
    vid = gen.standard_normal(toy.dim)
    vim = vid + 0.1 * gen.standard_normal(toy.dim)
    T = 2
    exact_budget = 2 * toy.dim * T
    ok_cfg = AttrOpConfig(
        iterations=T, grad_mode="finite-difference", fd_budget=exact_budget
    )
    attrop_adjust(vid, vim, toy, evaluators, ok_cfg)  # must fit exactly

    tight = AttrOpConfig(
        iterations=T, grad_mode="finite-difference", fd_budget=exact_budget - 1
    )
    with pytest.raises(BudgetError):
        attrop_adjust(vid, vim, toy, evaluators, tight)


def test_fd_and_analytic_modes_agree_loosely(toy_setup):
    """Both modes walk the same loss surface; after a few small steps
    they stay close (not bitwise: the gradients differ at 1e-6)."""
    toy, evaluators = toy_setup
    cfg_a = AttrOpConfig(iterations=3, target_pose=40.0, grad_mode="analytic")
    cfg_f = AttrOpConfig(iterations=3, target_pose=40.0, grad_mode="finite-difference")
    vid = _smooth_probe(toy, evaluators, cfg_a, 500)
    vim = _smooth_probe(toy, evaluators, cfg_a, 501)
    out_a, _ = attrop_adjust(vid, vim, toy, evaluators, cfg_a)
    out_f, _ = attrop_adjust(vid, vim, toy, evaluators, cfg_f)
    assert np.linalg.norm(out_a - out_f) < 1e-3


def test_adjust_converges_to_pose_target(toy_setup):
    """Descent must swing a near-frontal start to |pose| ~ 60 within 20
    clipped steps while keeping identity. The angular speed is
    step_size * grad_clip / ||v|| per iteration, so the trials run at
    unit norm (the angular budget is ~2.9 deg/iter there)."""
    toy, evaluators = toy_setup
    ev = {e.kind: e for e in evaluators}
    cfg = AttrOpConfig(iterations=20, target_pose=60.0)
    hits = 0
    for seed in range(10):
        gen = RngState(700 + seed).generator()
        vid = gen.standard_normal(toy.dim)
        vid /= np.linalg.norm(vid)
        vim = vid + 0.1 * gen.standard_normal(toy.dim)
        vim /= np.linalg.norm(vim)
        out, _ = attrop_adjust(vid, vim, toy, evaluators, cfg)
        pose = ev["pose"].value(toy.generate(out))
        if abs(abs(pose) - 60.0) < 5.0 and cosine_similarity(out, vid) >= 0.5:
            hits += 1
    assert hits == 10


def test_backtracking_runs_full_iterations(toy_setup):
    toy, evaluators = toy_setup
    gen = RngState(13).generator()
    vid = gen.standard_normal(toy.dim)
    vim = vid + 0.1 * gen.standard_normal(toy.dim)
    cfg = AttrOpConfig(iterations=5, target_pose=30.0, backtrack=True, max_halvings=3)
    out, trace = attrop_adjust(vid, vim, toy, evaluators, cfg)
    assert len(trace) == 6
    assert trace.records[-1]["total"] <= trace.records[0]["total"]


def test_config_validation():
    with pytest.raises(ConfigError):
        AttrOpConfig(iterations=-1)
    with pytest.raises(ConfigError):
        AttrOpConfig(step_size=0.0)
    with pytest.raises(ConfigError):
        AttrOpConfig(grad_mode="symbolic")
    with pytest.raises(ConfigError):
        Evaluator(kind="identity", value=lambda i: 0.0, differentiable=True)

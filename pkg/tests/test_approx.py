import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ulab
from ulab.approx import (
    cg_inverse_hvp,
    cg_solve,
    fisher_noise,
    forget_gradient_sum,
    lissa_inverse_hvp,
    lissa_solve,
    newton_step,
)
from ulab._util import mix_seed
from ulab.errors import DivergenceError, NumericalError

from oracles import dense_hessian_logistic, per_sample_grad_logistic


# ---------------------------------------------------------------------------
# solver primitives


def test_newton_step_solves_diagonal_quadratic():
    rng = np.random.default_rng(3)
    f = rng.uniform(0.5, 4.0, size=12)
    target = rng.normal(size=12)
    theta = rng.normal(size=12)
    g = f * (theta - target)  # gradient of 0.5 (x-t)^T diag(f) (x-t)
    moved, info = newton_step(theta, g, f, damping=1e-12)
    assert np.allclose(moved, target, atol=1e-9)
    assert info["clip_applied"] is False
    assert info["step_norm"] == pytest.approx(np.linalg.norm(theta - target))


def test_newton_step_clipping():
    theta = np.zeros(4)
    g = np.full(4, 10.0)
    moved, info = newton_step(theta, g, np.ones(4), damping=0.0, clip_norm=0.5)
    assert info["clip_applied"] is True
    assert np.linalg.norm(theta - moved) == pytest.approx(0.5)


def test_fisher_noise_deterministic_and_scaled():
    f = np.array([0.0, 3.0, 15.0])
    a = fisher_noise(f, damping=1.0, sigma=0.7, seed=5)
    assert np.array_equal(a, fisher_noise(f, damping=1.0, sigma=0.7, seed=5))
    assert not np.array_equal(a, fisher_noise(f, damping=1.0, sigma=0.7, seed=6))
    draws = np.array(
        [fisher_noise(f, damping=1.0, sigma=0.7, seed=s) for s in range(4000)]
    )
    want = 0.7 * (f + 1.0) ** -0.25
    assert np.allclose(draws.std(axis=0), want, rtol=0.06)
    assert np.allclose(draws.mean(axis=0), 0.0, atol=0.05)


def test_lissa_reference_diagonal():
    H = np.diag([2.0, 4.0])

    def apply_hvp(r):
        return H @ r

    got = lissa_solve(apply_hvp, np.ones(2), depth=400, scale=10.0, damping=0.0)
    assert np.allclose(got, [0.5, 0.25], atol=1e-3)


def test_lissa_identity_returns_v():
    v = np.array([1.0, -2.0, 3.0])
    got = lissa_solve(lambda r: r, v, depth=200, scale=5.0, damping=0.0)
    assert np.allclose(got, v, atol=1e-6)


def test_lissa_divergence_names_step():
    H = np.diag([100.0, 100.0])
    with pytest.raises(DivergenceError) as exc:
        lissa_solve(lambda r: H @ r, np.ones(2), depth=50, scale=1.0, damping=0.0)
    assert exc.value.step == 6  # five consecutive increment growths
    assert "lissa_scale" in str(exc.value)


def test_lissa_healthy_run_not_flagged():
    # iterate norm grows toward the fixed point; increments must not trip
    got = lissa_solve(lambda r: r, np.ones(3), depth=100, scale=10.0, damping=0.0)
    assert np.allclose(got, np.ones(3), atol=1e-4)


def test_cg_zero_rhs():
    assert not cg_solve(lambda r: r, np.zeros(5), tol=1e-8, max_iter=10).any()


def test_cg_identity_one_iteration():
    calls = []

    def op(r):
        calls.append(1)
        return r

    v = np.array([2.0, -1.0, 0.5])
    got = cg_solve(op, v, tol=1e-10, max_iter=50)
    assert np.allclose(got, v, atol=1e-12)
    assert len(calls) == 1


@given(st.integers(0, 10**6))
@settings(max_examples=15, deadline=None)
def test_cg_matches_dense_solve(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    A = rng.normal(size=(n, n))
    H = A @ A.T + 0.5 * np.eye(n)
    v = rng.normal(size=n)
    got = cg_solve(lambda r: H @ r, v, tol=1e-12, max_iter=200)
    assert np.allclose(got, np.linalg.solve(H, v), atol=1e-7)


def test_cg_max_iter_warns_returns_best():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(40, 40))
    H = A @ A.T + 1e-3 * np.eye(40)
    v = rng.normal(size=40)
    with pytest.warns(RuntimeWarning, match="max_iter"):
        got = cg_solve(lambda r: H @ r, v, tol=1e-14, max_iter=3)
    assert np.all(np.isfinite(got))
    # still an improvement over the zero start
    assert np.linalg.norm(H @ got - v) < np.linalg.norm(v)


def test_solvers_agree_with_dense_inverse(six_sample_fixture):
    m, d, cfg = six_sample_fixture
    H = dense_hessian_logistic(d.features, d.labels, 2, m.theta, ridge=cfg.ridge)
    damping = 1e-3
    rng = np.random.default_rng(0)
    icfg = ulab.InfluenceConfig(
        solver="cg", damping=damping, ridge=cfg.ridge, cg_tol=1e-12,
        lissa_depth=4000, lissa_scale=25.0, seed=0,
    )
    for _ in range(10):
        v = rng.normal(size=m.arch.parameter_count)
        want = np.linalg.solve(H + damping * np.eye(len(v)), v)
        got_cg = cg_inverse_hvp(m, d, v, icfg)
        got_li = lissa_inverse_hvp(m, d, v, icfg)
        denom = max(np.linalg.norm(want), 1.0)
        assert np.linalg.norm(got_cg - want) / denom <= 1e-3
        assert np.linalg.norm(got_li - want) / denom <= 1e-3
        assert np.linalg.norm(got_cg - got_li) / denom <= 1e-3


# ---------------------------------------------------------------------------
# fisher unlearning


def fisher_cfg(**kw):
    base = dict(sigma=0.1, damping=0.01, mode="newton_plus_noise", seed=3)
    base.update(kw)
    return ulab.FisherConfig(**base)


def test_fisher_noise_only_sigma_zero_is_identity(trained4):
    m, d, _ = trained4
    out = ulab.fisher_unlearn(m, d, fisher_cfg(sigma=0.0, mode="noise_only"))
    assert np.array_equal(out.theta, m.theta)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_fisher_noise_only_identity_any_seed(seed):
    d = ulab.generate_blobs(3, 8, 4, spread=0.4, seed=19)
    arch = ulab.Architecture("logistic", 4, 3)
    m = ulab.train_gold(d, arch, ulab.TrainConfig(epochs=3, seed=2))
    out = ulab.fisher_unlearn(m, d, fisher_cfg(sigma=0.0, mode="noise_only", seed=seed))
    assert np.array_equal(out.theta, m.theta)


def test_fisher_sigma_zero_newton_matches_manual(trained4):
    m, d, _ = trained4
    cfg = fisher_cfg(sigma=0.0, clip_norm=None)
    out = ulab.fisher_unlearn(m, d, cfg)
    fdiag = ulab.fisher_diag(m, d, mode="sampled", seed=cfg.seed)
    want = m.theta - ulab.grad(m, d) / (fdiag + cfg.damping)
    assert np.array_equal(out.theta, want)


def test_fisher_noise_only_adds_exact_noise(trained4):
    m, d, _ = trained4
    cfg = fisher_cfg(sigma=0.5, mode="noise_only")
    out = ulab.fisher_unlearn(m, d, cfg)
    fdiag = ulab.fisher_diag(m, d, mode="sampled", seed=cfg.seed)
    want = m.theta + fisher_noise(fdiag, cfg.damping, 0.5, cfg.seed)
    assert np.array_equal(out.theta, want)


def test_fisher_seeded_determinism(trained4):
    m, d, _ = trained4
    a = ulab.fisher_unlearn(m, d, fisher_cfg(seed=9))
    b = ulab.fisher_unlearn(m, d, fisher_cfg(seed=9))
    c = ulab.fisher_unlearn(m, d, fisher_cfg(seed=10))
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, c.theta)


def test_fisher_empty_remaining_set_rejected(trained4):
    m, d, _ = trained4
    empty = ulab.remove_by_ids(d, d.ids)
    with pytest.raises(ValueError, match="nonempty"):
        ulab.fisher_unlearn(m, empty, fisher_cfg())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_update_is_named(trained4):
    m, d, _ = trained4
    poisoned = ulab.Dataset(
        [ulab.make_sample(np.full(6, np.inf), 0)] + list(d.samples[:5]), 4, 6
    )
    with pytest.raises(NumericalError, match="index"):
        ulab.fisher_unlearn(m, poisoned, fisher_cfg())


# ---------------------------------------------------------------------------
# influence unlearning


def inf_cfg(**kw):
    base = dict(solver="cg", damping=1e-3, cg_tol=1e-12, clip_norm=None, seed=1)
    base.update(kw)
    return ulab.InfluenceConfig(**base)


def test_influence_matches_dense_oracle_both_signs(six_sample_fixture):
    m, d, cfg = six_sample_fixture
    drop = [d.ids[0], d.ids[4]]
    d_r = ulab.remove_by_ids(d, drop)
    H = dense_hessian_logistic(d_r.features, d_r.labels, 2, m.theta, ridge=cfg.ridge)
    G = per_sample_grad_logistic(d.features, d.labels, 2, m.theta, ridge=cfg.ridge)
    keep = [0, 4]
    v = G[keep].sum(axis=0)
    damping = 1e-3
    x = np.linalg.solve(H + damping * np.eye(len(v)), v)
    got_paper = ulab.influence_update(
        m, d, drop, inf_cfg(ridge=cfg.ridge, sign="as_paper")
    )
    got_classic = ulab.influence_update(
        m, d, drop, inf_cfg(ridge=cfg.ridge, sign="classical")
    )
    assert np.allclose(got_paper.theta, m.theta - x, atol=1e-8)
    assert np.allclose(got_classic.theta, m.theta + x / len(d), atol=1e-8)


def test_classical_sign_moves_toward_retrain(six_sample_fixture):
    m, d, cfg = six_sample_fixture
    drop = [d.ids[2]]
    d_r = ulab.remove_by_ids(d, drop)
    retrained = ulab.train(ulab.init(m.arch), d_r, cfg)
    updated = ulab.influence_update(
        m, d, drop, inf_cfg(ridge=cfg.ridge, sign="classical")
    )
    before = np.linalg.norm(m.theta - retrained.theta)
    after = np.linalg.norm(updated.theta - retrained.theta)
    assert after < before


def test_forget_gradient_sum_matches_per_sample_oracle(six_sample_fixture):
    m, d, cfg = six_sample_fixture
    G = per_sample_grad_logistic(d.features, d.labels, 2, m.theta, ridge=cfg.ridge)
    for batch in (1, 2, 6, 100):
        got = forget_gradient_sum(m, d, batch_f=batch, ridge=cfg.ridge)
        assert np.allclose(got, G.sum(axis=0), atol=1e-10)


def test_influence_empty_forget_set_is_identity(trained4):
    m, d, _ = trained4
    out = ulab.influence_update(m, d, [], inf_cfg())
    assert np.array_equal(out.theta, m.theta)


def test_influence_membership_checked(trained4):
    m, d, _ = trained4
    from ulab.errors import MembershipError

    with pytest.raises(MembershipError):
        ulab.influence_update(m, d, [0xBADC0FFEE], inf_cfg())


def test_influence_cross_solver_agreement(blobs4):
    # ridge keeps the Hessian well conditioned so both solvers can finish
    arch = ulab.Architecture("logistic", 6, 4)
    m = ulab.train_gold(blobs4, arch, ulab.TrainConfig(epochs=6, seed=7, ridge=0.05))
    drop = blobs4.ids[:4]
    shared = dict(sign="classical", ridge=0.05, damping=0.05)
    a = ulab.influence_update(m, blobs4, drop, inf_cfg(**shared))
    b = ulab.influence_update(
        m,
        blobs4,
        drop,
        inf_cfg(solver="lissa", lissa_depth=4000, lissa_scale=30.0, **shared),
    )
    scale = max(np.linalg.norm(a.theta - m.theta), 1e-12)
    assert np.linalg.norm(a.theta - b.theta) / scale <= 1e-3


def test_influence_additivity_small_fractions():
    d = ulab.generate_blobs(4, 50, 6, spread=0.35, seed=23)
    arch = ulab.Architecture("logistic", 6, 4)
    m = ulab.train_gold(d, arch, ulab.TrainConfig(epochs=12, seed=4, ridge=0.01))
    drop = [d.ids[7], d.ids[113]]
    cfg = inf_cfg(ridge=0.01, sign="classical")
    joint = ulab.influence_update(m, d, drop, cfg)
    first = ulab.influence_update(m, d, drop[:1], cfg)
    d1 = ulab.remove_by_ids(d, drop[:1])
    second = ulab.influence_update(first, d1, drop[1:], cfg)
    move = np.linalg.norm(joint.theta - m.theta)
    assert np.linalg.norm(joint.theta - second.theta) <= 0.05 * move


def test_sequential_unlearn_log_and_chunking(tmp_path, blobs4):
    arch = ulab.Architecture("logistic", 6, 4)
    m = ulab.train_gold(blobs4, arch, ulab.TrainConfig(epochs=6, seed=7))
    ids = blobs4.ids[:25]
    log = tmp_path / "steps.jsonl"
    out = ulab.sequential_unlearn(
        m, blobs4, ids, "influence", inf_cfg(sign="classical"), minibatch_size=5,
        log_path=log, eval_data=blobs4,
    )
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert len(lines) == 5
    assert [x["minibatch"] for x in lines] == [0, 1, 2, 3, 4]
    for x in lines:
        assert x["method"] == "influence"
        assert x["step_norm"] >= 0.0
        assert 0.0 <= x["accuracy"] <= 1.0
    assert out.theta.shape == m.theta.shape


def test_sequential_single_chunk_equals_one_shot(blobs4):
    arch = ulab.Architecture("logistic", 6, 4)
    m = ulab.train_gold(blobs4, arch, ulab.TrainConfig(epochs=6, seed=7))
    ids = blobs4.ids[:6]
    cfg = inf_cfg(sign="classical")
    seq = ulab.sequential_unlearn(m, blobs4, ids, "influence", cfg, minibatch_size=6)
    one = ulab.influence_update(
        m, blobs4, ids, dataclasses.replace(cfg, seed=mix_seed(cfg.seed, "seq", 0))
    )
    assert np.array_equal(seq.theta, one.theta)


def test_sequential_fisher_path(tmp_path, blobs4):
    arch = ulab.Architecture("logistic", 6, 4)
    m = ulab.train_gold(blobs4, arch, ulab.TrainConfig(epochs=6, seed=7))
    ids = blobs4.ids[:4]
    log = tmp_path / "f.jsonl"
    out = ulab.sequential_unlearn(
        m, blobs4, ids, "fisher", fisher_cfg(sigma=0.01), minibatch_size=2,
        log_path=log,
    )
    lines = log.read_text().splitlines()
    assert len(lines) == 2
    assert not np.array_equal(out.theta, m.theta)


def test_sequential_validates_args(blobs4):
    arch = ulab.Architecture("logistic", 6, 4)
    m = ulab.train_gold(blobs4, arch, ulab.TrainConfig(epochs=2, seed=7))
    with pytest.raises(ValueError, match="minibatch"):
        ulab.sequential_unlearn(m, blobs4, [], "fisher", fisher_cfg(), 0)
    with pytest.raises(ValueError, match="method"):
        ulab.sequential_unlearn(m, blobs4, [], "gradient_ascent", fisher_cfg(), 1)


def test_config_validation():
    with pytest.raises(ValueError):
        ulab.FisherConfig(sigma=-0.1)
    with pytest.raises(ValueError):
        ulab.FisherConfig(damping=0.0)
    with pytest.raises(ValueError):
        ulab.FisherConfig(mode="both")
    with pytest.raises(ValueError):
        ulab.InfluenceConfig(solver="dense")
    with pytest.raises(ValueError):
        ulab.InfluenceConfig(sign="negated")
    with pytest.raises(ValueError):
        ulab.InfluenceConfig(lissa_depth=0)

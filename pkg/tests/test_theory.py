import math

import numpy as np
import pytest

from gorl.agents import TD3BC, Actor, Batch, Critic, make_actor, make_adapter
from gorl.guidance import GuidingNet, guiding_grad_average, meta_gradient_explicit, meta_gradient_fd, virtual_step
from gorl.numeric import AdamState, MlpParams, Rng
from gorl.theory import (
    Theorem2Config,
    TheoryError,
    _heavy_tail_scale,
    claimed_bound,
    corrected_bound,
    draw_elements,
    fd_gradient,
    loglog_fit,
    rel_error,
    verify_gradients,
    verify_theorem1,
    verify_theorem2,
    verify_theorem2_on_policy,
)


def test_rel_error_floor():
    assert rel_error(np.array([1.0, 0.0]), np.array([1.0, 1e-9])) == pytest.approx(1e-3)
    assert rel_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)  # scaled by the larger magnitude


def test_fd_gradient_quadratic():
    g = fd_gradient(lambda x: float(x @ x), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-9)


def test_verify_gradients_small():
    report = verify_gradients(instances=3, seed=11)
    assert report.passed, report.errors


def scalar_problem(ag):
    actor = Actor(MlpParams([np.array([[0.4]])], [np.zeros(1)], "relu", "identity"), 1)
    q = MlpParams([np.array([[0.0, 1.0]])], [np.array([1.0])])
    z = AdamState.zeros_like(q)
    critic = Critic(q, q, q, q, z, z)
    guide = GuidingNet(MlpParams([np.array([[0.7]]), np.array([[1.3]])], [np.array([-0.2]), np.array([0.1])],
                                 "sigmoid", "sigmoid"))
    b = Batch(np.array([[1.5]]), np.array([[-0.3]]), np.array([[1.5]]), np.zeros(1), np.zeros(1))
    terms = TD3BC(lam=0.0).terms(actor, critic, b)
    return actor, guide, terms


def hand_meta_gradient(alpha_d, sg, ag):
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    theta, s, a, w1, b1, w2, b2 = 0.4, 1.5, -0.3, 0.7, -0.2, 1.3, 0.1
    x = (theta * s - a) ** 2
    g_con = 2 * (theta * s - a) * np.array([s, 1.0])
    h = sig(w1 * x + b1)
    B = sig(w2 * h + b2)
    theta_hat = np.array([theta, 0.0]) - alpha_d * B * g_con
    C = (2 * (theta_hat @ [sg, 1.0] - ag) * np.array([sg, 1.0])) @ g_con
    dB = B * (1 - B) * np.array([w2 * h * (1 - h) * x, w2 * h * (1 - h), h, 1.0])
    return -alpha_d * C * dB


def test_scalar_instance_both_paths_match_hand_expansion():
    actor, guide, terms = scalar_problem(0.2)
    gs, ga = np.array([[0.8]]), np.array([[0.2]])
    v = virtual_step(actor, terms, guide, 0.3)
    explicit = meta_gradient_explicit(guide, v, guiding_grad_average(v.actor, TD3BC(), gs, ga), 0.3)
    fd = meta_gradient_fd(guide, actor, terms, TD3BC(), gs, ga, 0.3)
    hand = hand_meta_gradient(0.3, 0.8, 0.2)
    np.testing.assert_allclose(explicit, hand, rtol=0, atol=1e-12)
    np.testing.assert_allclose(fd, hand, rtol=0, atol=1e-8)


def test_zero_guiding_gradient_both_paths_zero():
    actor, guide, terms = scalar_problem(0.2)
    v = virtual_step(actor, terms, guide, 0.3)
    gs = np.array([[0.8], [-1.1]])
    ga = v.actor.act(gs)  # the look-ahead policy imitates the guide data exactly
    explicit = meta_gradient_explicit(guide, v, guiding_grad_average(v.actor, TD3BC(), gs, ga), 0.3)
    fd = meta_gradient_fd(guide, actor, terms, TD3BC(), gs, ga, 0.3)
    assert np.all(explicit == 0)
    assert np.max(np.abs(fd)) < 1e-9


def test_theorem1_small_run():
    report = verify_theorem1(trials=12, seed=3)
    assert report.passed, report.failures
    assert {r["adapter"] for r in report.rows} == {"cql", "iql", "sacbc", "td3bc"}
    assert report.min_cosine > 0.9999 and report.max_rel_error < 1e-3


def test_theorem1_rejects_zero_trials():
    with pytest.raises(TheoryError):
        verify_theorem1(trials=0)


def test_bound_plug_in():
    assert claimed_bound(1, 1.0, 1.0, 100) == pytest.approx(0.01)
    assert corrected_bound(32, 1.0, 1.6, 10) == pytest.approx(32 * claimed_bound(32, 1.0, 1.6, 10))


def test_config_validation():
    for kw in ({"delta": 0.0}, {"trials": 50}, {"distribution": "cauchy"}, {"ns": ()}):
        with pytest.raises(TheoryError):
            Theorem2Config(**kw)


@pytest.mark.parametrize("dist", ["gaussian", "uniform", "heavy_tail"])
def test_element_variance(dist):
    x = draw_elements(Rng(0), dist, 0.25, 400_000)
    assert abs(x.mean()) < 3e-3
    assert x.var() == pytest.approx(0.25, rel=0.02)


def test_heavy_tail_scale_matches_sampling():
    raw = np.clip(Rng(1).gen.standard_t(3, size=2_000_000), -4.0, 4.0)
    assert _heavy_tail_scale() == pytest.approx(raw.std(), rel=5e-3)


def test_quadrupling_n_quarters_mean_squared_gap():
    rep = verify_theorem2(Theorem2Config(2, 3, 1.0, "gaussian", (25, 100), 4000, None, 5))
    m25, m100 = rep.cells[0].mean_sq_gap, rep.cells[-1].mean_sq_gap
    assert m25 / m100 == pytest.approx(4.0, rel=0.2)


@pytest.mark.parametrize("dist", ["gaussian", "uniform", "heavy_tail"])
def test_scalar_cells_obey_bound_and_rate(dist):
    rep = verify_theorem2(Theorem2Config(1, 1, 1.0, dist, (10, 100, 1000), 2000, None, 2))
    assert rep.bound_ok and rep.rate_ok


def test_claimed_bound_fails_in_high_dimension():
    # E||gap||_1 ~ d sqrt(2 delta / (pi n)) = 2.55 > eps = 1.6 for d = 32, n = 100
    rep = verify_theorem2(Theorem2Config(4, 8, 1.0, "gaussian", (10, 100, 1000), 1000, None, 0))
    bad = {(c.n, c.eps) for c in rep.failing_cells()}
    assert (100, 1.6) in bad
    assert all(c.ok_corrected for c in rep.cells)
    assert rep.rate_ok


def test_loglog_fit_exact_power_law():
    slope, r2 = loglog_fit([10, 100, 1000], [3.0, 0.3, 0.03])
    assert slope == pytest.approx(-1.0, abs=1e-12) and r2 == pytest.approx(1.0, abs=1e-12)


def test_csv_report_columns():
    rep = verify_theorem2(Theorem2Config(1, 1, 1.0, "gaussian", (10, 100), 200, None, 0))
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("d1,d2,delta,n,eps,p_hat")
    assert len(lines) == 1 + 4


@pytest.fixture(scope="module")
def expert_pool():
    from gorl.envs import default_spec, generate_dataset, make_policy

    spec = default_spec()
    data = generate_dataset(spec, make_policy(spec, "expert"), 5, Rng(0))
    return data.states[:400], data.actions[:400]


def test_on_policy_concentration(expert_pool):
    states, actions = expert_pool
    actor = make_actor(4, 2, [8], Rng(1))
    rep = verify_theorem2_on_policy(actor, make_adapter("td3bc"), states, actions, (10, 50, 200), 300, Rng(2))
    assert rep.monotone
    assert -1.3 <= rep.slope <= -0.7


def test_on_policy_full_pool_has_zero_gap(expert_pool):
    states, actions = expert_pool
    actor = make_actor(4, 2, [8], Rng(1))
    rep = verify_theorem2_on_policy(actor, make_adapter("td3bc"), states[:50], actions[:50], (50,), 5, Rng(0))
    assert rep.mean_sq_gap[0] < 1e-28


def test_on_policy_degenerate_pool():
    states = np.tile([[0.2, -0.1, 0.0, 0.3]], (40, 1))
    actions = np.tile([[0.5, -0.5]], (40, 1))
    actor = make_actor(4, 2, [8], Rng(1))
    rep = verify_theorem2_on_policy(actor, make_adapter("td3bc"), states, actions, (5, 20), 20, Rng(0),
                                    eps=(1e-6,))
    assert max(rep.mean_sq_gap) < 1e-28  # rounding only
    assert all(c.p_hat == 0.0 for c in rep.cells)


def test_on_policy_pool_too_small(expert_pool):
    states, actions = expert_pool
    with pytest.raises(TheoryError, match="too small"):
        verify_theorem2_on_policy(make_actor(4, 2, [8], Rng(1)), make_adapter("td3bc"), states[:100],
                                  actions[:100], (10, 60), 5, Rng(0))

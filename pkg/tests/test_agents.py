from dataclasses import replace

import numpy as np
import pytest

from gorl.agents import (
    CQL,
    IQL,
    SACBC,
    TD3BC,
    Actor,
    AdapterError,
    Batch,
    bellman_update,
    check_degrees,
    cql_critic_update,
    cql_penalty,
    cql_sample_actions,
    critic_update_td3,
    data_log_prob,
    expectile_loss_grad,
    gaussian_head,
    iql_value_update,
    make_actor,
    make_adapter,
    make_critic,
    policy_grad,
    q_value,
    squashed_sample,
)
from gorl.numeric import AdamState, MlpParams, Rng, adam_step, init_mlp, mlp_backward, mlp_forward, polyak

DS, DA = 4, 2


def batch(n=8, seed=0, dones=0.0):
    rng = Rng(seed)
    return Batch(rng.normal(size=(n, DS)), rng.uniform(-0.9, 0.9, size=(n, DA)), rng.normal(size=(n, DS)),
                 -rng.uniform(size=n), np.full(n, dones))


def setup(stochastic=False, seed=0, value=False, hidden=(8,)):
    rng = Rng(seed)
    return make_actor(DS, DA, list(hidden), rng, stochastic), make_critic(DS, DA, list(hidden), rng, value)


def constant_net(in_dim, values):
    """Zero-weight net whose output is the constant ``values``."""
    out = np.asarray(values, dtype=np.float64)
    return MlpParams([np.zeros((out.size, in_dim))], [out.copy()])


def linear_q(coef):
    """Q(s, a) = coef . a (ignores the state)."""
    return MlpParams([np.concatenate([np.zeros(DS), coef])[None, :]], [np.zeros(1)])


def same_critic(a, b):
    return all(x.flat().tobytes() == y.flat().tobytes() for x, y in ((a.q1, b.q1), (a.q2, b.q2)))


# --------------------------------------------------------------------------- critic updates


def test_myopic_target_is_reward():
    actor, critic = setup()
    b = batch()
    got, _ = critic_update_td3(critic, actor, b, 0.0, 5e-3, 0.2, 0.5, 3e-4, Rng(1))
    ref, _ = bellman_update(critic, b, b.rewards, 3e-4, 5e-3)
    assert same_critic(got, ref)


def test_terminal_target_is_reward():
    actor, critic = setup()
    b = batch(dones=1.0)
    got, _ = critic_update_td3(critic, actor, b, 0.99, 5e-3, 0.2, 0.5, 3e-4, Rng(1))
    ref, _ = bellman_update(critic, b, b.rewards, 3e-4, 5e-3)
    assert same_critic(got, ref)


def test_self_loop_fixed_point():
    gamma, r = 0.9, -1.0
    s = np.array([[0.3, -0.2, 0.1, 0.0]])
    a = np.array([[0.25, -0.5]])
    target_actor = Actor(MlpParams([np.zeros((DA, DS))], [np.arctanh(a[0])], "relu", "tanh"), DA)
    _, critic = setup(hidden=(16,))
    b = Batch(s, a, s, np.array([r]), np.zeros(1))
    for _ in range(3000):
        critic, _ = critic_update_td3(critic, target_actor, b, gamma, 0.05, 0.0, 0.0, 1e-2, Rng(0))
    q = q_value(critic.q1, s, a)[0]
    assert q == pytest.approx(r / (1 - gamma), rel=1e-2)


def test_nonfinite_targets_fatal():
    _, critic = setup()
    b = batch()
    with pytest.raises(Exception, match="non-finite"):
        bellman_update(critic, b, np.full(len(b), np.nan), 1e-3, 5e-3)


def test_expectile_zero_residual_zero_grad():
    _, g = expectile_loss_grad(np.zeros(5), 0.7)
    assert np.all(g == 0)


def _fit_expectile(quantile, targets, steps=3000):
    """Fit V on a constant state against Q(s, a) = a0 with a0 in ``targets``."""
    n = len(targets)
    acts = np.zeros((n, DA))
    acts[:, 0] = targets
    b = Batch(np.ones((n, DS)), acts, np.ones((n, DS)), np.zeros(n), np.zeros(n))
    _, critic = setup(value=True)
    q = linear_q(np.array([1.0, 0.0]))
    critic = replace(critic, q1_target=q, q2_target=q)
    for _ in range(steps):
        critic, _ = iql_value_update(critic, b, quantile, 1e-2)
    return mlp_forward(critic.v, np.ones((1, DS)))[0][0, 0]


def test_expectile_half_is_mean():
    targets = np.array([0.0, 0.5, 2.0, -1.0])
    assert _fit_expectile(0.5, targets) == pytest.approx(targets.mean(), abs=1e-3)


def test_two_point_expectile():
    # minimize 0.9 (1 - v)^2 + 0.1 v^2 over v  ->  v = 0.9
    assert _fit_expectile(0.9, np.array([0.0, 1.0, 0.0, 1.0])) == pytest.approx(0.9, abs=1e-3)


def test_expectile_quantile_bounds():
    _, critic = setup(value=True)
    with pytest.raises(AdapterError):
        iql_value_update(critic, batch(), 1.0, 1e-3)


def test_cql_penalty_two_action_arithmetic():
    net = linear_q(np.array([1.0, 0.0]))
    states = np.zeros((1, DS))
    data = np.array([[0.5, 0.0]])
    sampled = np.array([[[0.0, 0.0], [1.0, 0.0]]])
    pen, _ = cql_penalty(net, states, data, sampled, 1.0)
    assert pen[0] == pytest.approx(np.log(np.exp(0.0) + np.exp(1.0)) - 0.5, abs=1e-15)


def test_cql_zero_weight_is_plain_bellman():
    actor, critic = setup(stochastic=True)
    b = batch()
    got, _ = cql_critic_update(critic, actor, b, 0.0, 10, Rng(5), 0.99, 5e-3, 3e-4)
    rng = Rng(5)
    eps = rng.normal(size=(len(b), DA))
    out, _ = mlp_forward(actor.net, b.next_states)
    mu, log_std, _ = gaussian_head(actor, out)
    a_next = np.tanh(mu + np.exp(log_std) * eps)
    q_next = np.minimum(q_value(critic.q1_target, b.next_states, a_next), q_value(critic.q2_target, b.next_states, a_next))
    ref, _ = bellman_update(critic, b, b.rewards + 0.99 * q_next, 3e-4, 5e-3)
    assert same_critic(got, ref)


def test_cql_conservatism_probe():
    actor, critic = setup(stochastic=True, hidden=(32,))
    b = batch(n=64, seed=3)
    rng = Rng(2)
    for _ in range(400):
        critic, _ = cql_critic_update(critic, actor, b, 5.0, 10, rng, 0.99, 5e-3, 1e-3)
    rand = rng.uniform(-1, 1, size=(64, DA))
    assert q_value(critic.q1, b.states, rand).mean() <= q_value(critic.q1, b.states, b.actions).mean()


def test_cql_sampled_action_layout():
    actor, _ = setup(stochastic=True)
    acts = cql_sample_actions(actor, np.zeros((3, DS)), 10, Rng(0))
    assert acts.shape == (3, 10, DA)
    assert np.all(np.abs(acts) <= 1.0)


# --------------------------------------------------------------------------- adapters


def separate_grads(actor, terms):
    g_imp, _ = mlp_backward(actor.net, terms.cache, terms.grad_imp / len(terms.loss_imp))
    g_con, _ = mlp_backward(actor.net, terms.cache, terms.grad_con / len(terms.loss_imp))
    return g_imp.flat(), g_con.flat()


@pytest.mark.parametrize("name", ["td3bc", "sacbc", "iql", "cql"])
def test_gradient_decomposes(name):
    adapter = make_adapter(name)
    actor, critic = setup(adapter.stochastic, value=name == "iql")
    b = batch()
    terms = adapter.terms(actor, critic, b, adapter.noise(Rng(1), len(b), DA))
    d = Rng(2).uniform(size=len(b))
    _, g = policy_grad(actor, terms, d)
    imp, _ = mlp_backward(actor.net, terms.cache, terms.grad_imp / len(b))
    con, _ = mlp_backward(actor.net, terms.cache, d[:, None] * terms.grad_con / len(b))
    np.testing.assert_allclose(g.flat(), imp.flat() + con.flat(), rtol=0, atol=1e-13)


def test_td3bc_zero_degrees_is_pure_improvement():
    actor, critic = setup()
    terms = TD3BC().terms(actor, critic, batch())
    _, g = policy_grad(actor, terms, np.zeros(8))
    imp, _ = separate_grads(actor, terms)
    np.testing.assert_array_equal(g.flat(), imp)


def test_td3bc_bc_limit():
    actor, critic = setup()
    b = batch()
    terms = TD3BC(lam=0.0).terms(actor, critic, b)
    _, g = policy_grad(actor, terms, np.ones(len(b)))
    out, cache = mlp_forward(actor.net, b.states)
    ref, _ = mlp_backward(actor.net, cache, 2 * (out - b.actions) / len(b))
    np.testing.assert_allclose(g.flat(), ref.flat(), rtol=0, atol=1e-14)


@pytest.mark.parametrize("bad", [np.full(8, -0.1), np.full(8, 1.5), np.full(8, np.nan), np.ones(7)])
def test_degree_bounds(bad):
    with pytest.raises(AdapterError):
        check_degrees(bad, 8)


def test_sacbc_deterministic_limit():
    rng = Rng(4)
    hidden = init_mlp([DS, 8], rng, "relu")
    mean_w, mean_b = rng.normal(size=(DA, 8), scale=0.3), rng.normal(size=DA, scale=0.1)
    stoch = MlpParams([hidden.weights[0], np.vstack([mean_w, np.zeros((DA, 8))])],
                      [hidden.biases[0], np.concatenate([mean_b, np.full(DA, -5.0)])], "relu", "identity")
    det = MlpParams([hidden.weights[0], mean_w], [hidden.biases[0], mean_b], "relu", "tanh")
    _, critic = setup()
    critic = replace(critic, q2=critic.q1)
    b = batch()
    eps = Rng(5).normal(size=(len(b), DA))
    sac = SACBC(alpha=0.0).terms(Actor(stoch, DA, True), critic, b, eps)
    td3 = TD3BC().terms(Actor(det, DA), critic, b)
    d = np.full(len(b), 0.5)
    assert sac.loss(d) == pytest.approx(td3.loss(d), rel=1e-2)


def test_sacbc_entropy_pushes_log_std_up():
    # narrow Gaussian; for wide ones the tanh correction favors shrinking
    actor, critic = setup(stochastic=True)
    actor.net.weights[-1][DA:] = 0.0
    actor.net.biases[-1][DA:] = -2.0
    b = batch(n=4000)
    terms = SACBC(alpha=100.0).terms(actor, critic, b, Rng(1).normal(size=(len(b), DA)))
    out_grad = terms.combined_output_grad(np.zeros(len(b)))
    assert np.all(out_grad[:, DA:].mean(axis=0) < 0)  # descent raises log-std


def test_iql_zero_betas_zero_grad():
    actor, critic = setup(stochastic=True, value=True)
    terms = IQL().terms(actor, critic, batch(), Rng(0).normal(size=(8, DA)))
    _, g = policy_grad(actor, terms, np.zeros(8))
    assert np.all(g.flat() == 0)


def test_iql_equal_values_is_log_likelihood():
    actor, critic = setup(stochastic=True, value=True)
    zero_q = constant_net(DS + DA, [0.0])
    critic = replace(critic, q1_target=zero_q, q2_target=zero_q, v=constant_net(DS, [0.0]))
    b = batch()
    terms = IQL().terms(actor, critic, b, Rng(0).normal(size=(8, DA)))
    out, _ = mlp_forward(actor.net, b.states)
    mu, log_std, _ = gaussian_head(actor, out)
    logp, _, _ = data_log_prob(mu, log_std, b.actions)
    np.testing.assert_allclose(terms.loss_con, -logp, rtol=0, atol=1e-13)


def test_iql_dropout_mask_layout():
    adapter = IQL(dropout=0.5)
    noise = adapter.noise(Rng(0), 6, DA, DS)
    assert noise.shape == (6, DA + DS)
    assert set(np.unique(noise[:, DA:])) <= {0.0, 2.0}


def test_cql_degree_limits():
    actor, critic = setup(stochastic=True)
    b = batch()
    eps = Rng(0).normal(size=(8, DA))
    terms = CQL(alpha=1.0).terms(actor, critic, b, eps)
    out, _ = mlp_forward(actor.net, b.states)
    mu, log_std, _ = gaussian_head(actor, out)
    a = np.tanh(mu + np.exp(log_std) * eps)
    q = np.minimum(q_value(critic.q1, b.states, a), q_value(critic.q2, b.states, a))
    _, logp = squashed_sample(mu, log_std, eps)
    assert terms.loss(np.zeros(8)) == pytest.approx(np.mean(logp), abs=1e-13)
    assert terms.loss(np.ones(8)) == pytest.approx(np.mean(logp - q), abs=1e-13)
    _, g0 = policy_grad(actor, terms, np.zeros(8))
    imp, _ = separate_grads(actor, terms)
    np.testing.assert_array_equal(g0.flat(), imp)


def test_unknown_adapter():
    with pytest.raises(AdapterError, match="unknown"):
        make_adapter("bcq")


def test_bc_sanity_converges():
    rng = Rng(0)
    K = np.array([[0.8, 0.0, 0.5, 0.0], [0.0, 0.8, 0.0, 0.5]])
    states = rng.uniform(-1, 1, size=(64, DS))
    b = Batch(states, np.clip(-states @ K.T, -1, 1), states, np.zeros(64), np.zeros(64))
    actor, critic = setup(hidden=(32, 32))
    opt = AdamState.zeros_like(actor.net)
    adapter = TD3BC(lam=0.0)
    mse = np.inf
    for step in range(5000):
        terms = adapter.terms(actor, critic, b)
        _, g = policy_grad(actor, terms, np.ones(64))
        net, opt = adam_step(actor.net, g, opt, 1e-3)
        actor = replace(actor, net=net)
        mse = float(np.mean(np.sum((actor.act(states) - b.actions) ** 2, axis=1)))
        if mse < 1e-3:
            break
    assert mse < 1e-3


def test_polyak_target_tracks_live():
    _, critic = setup()
    b = batch()
    new, _ = bellman_update(critic, b, b.rewards, 1e-2, 0.25)
    np.testing.assert_allclose(new.q1_target.flat(), polyak(critic.q1_target, new.q1, 0.25).flat())

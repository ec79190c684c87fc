"""Actors, twin critics, critic updates and the four constraint adapters.

Every adapter splits the per-sample actor loss into

    loss_k = improvement_k + degree_k * constraint_k

and reports, for each sample, the gradient of both parts with respect to the
actor network's raw output. The degree-weighted actor gradient, per-sample
constraint gradients and the guiding-net meta-update are all assembled from
these two matrices with a single reverse pass through the actor.

Sampling noise is passed in explicitly so that every loss is a deterministic
function of the parameters (finite-difference checks freeze it).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numeric import (
    AdamState,
    MlpCache,
    MlpGrad,
    MlpParams,
    NumericError,
    Rng,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
    polyak,
)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ATANH_CLIP = 1.0 - 1e-4
SQUASH_EPS = 1e-6
EXP_ADV_MAX = 10.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class AdapterError(ValueError):
    pass


# --------------------------------------------------------------------------- actor


@dataclass
class Actor:
    net: MlpParams
    action_dim: int
    stochastic: bool = False
    max_action: float = 1.0

    def act(self, states: np.ndarray) -> np.ndarray:
        """Deterministic action (tanh of the mean for Gaussian actors)."""
        out, _ = mlp_forward(self.net, np.atleast_2d(states))
        if self.stochastic:
            return self.max_action * np.tanh(out[:, : self.action_dim])
        return self.max_action * out


def make_actor(state_dim: int, action_dim: int, hidden: list[int], rng: Rng, stochastic: bool = False) -> Actor:
    if stochastic:
        net = init_mlp([state_dim, *hidden, 2 * action_dim], rng, "relu", "identity")
    else:
        net = init_mlp([state_dim, *hidden, action_dim], rng, "relu", "tanh")
    return Actor(net, action_dim, stochastic)


def gaussian_head(actor: Actor, out: np.ndarray):
    da = actor.action_dim
    mu = out[:, :da]
    raw = out[:, da:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    mask = ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(np.float64)
    return mu, log_std, mask


def squashed_sample(mu, log_std, eps):
    """Reparameterized tanh-Gaussian sample and its log-density."""
    u = mu + np.exp(log_std) * eps
    a = np.tanh(u)
    logp = np.sum(-0.5 * eps**2 - log_std - HALF_LOG_2PI - np.log(1.0 - a**2 + SQUASH_EPS), axis=1)
    return a, logp


def squashed_sample_grad(actor, a, log_std, mask, eps, d_action, d_logp):
    """Map dL/d(action) (n, da) and dL/d(logp) (n,) to dL/d(raw actor output)."""
    one_m = 1.0 - a**2
    d_u = d_action * one_m + d_logp[:, None] * (2.0 * a * one_m / (one_m + SQUASH_EPS))
    d_mu = d_u
    d_ls = (d_u * np.exp(log_std) * eps - d_logp[:, None]) * mask
    return np.concatenate([d_mu, d_ls], axis=1)


def data_log_prob(mu, log_std, actions):
    """log pi(a|s) of given (bounded) actions under the tanh-Gaussian, plus d/dmu and d/dlog_std."""
    a = np.clip(actions, -ATANH_CLIP, ATANH_CLIP)
    u = np.arctanh(a)
    z = (u - mu) * np.exp(-log_std)
    logp = np.sum(-0.5 * z**2 - log_std - HALF_LOG_2PI - np.log(1.0 - a**2 + SQUASH_EPS), axis=1)
    d_mu = z * np.exp(-log_std)
    d_ls = z**2 - 1.0
    return logp, d_mu, d_ls


# --------------------------------------------------------------------------- critic


@dataclass
class Critic:
    q1: MlpParams
    q2: MlpParams
    q1_target: MlpParams
    q2_target: MlpParams
    q1_opt: AdamState
    q2_opt: AdamState
    v: MlpParams | None = None
    v_opt: AdamState | None = None


def make_critic(state_dim: int, action_dim: int, hidden: list[int], rng: Rng, with_value: bool = False) -> Critic:
    q1 = init_mlp([state_dim + action_dim, *hidden, 1], rng)
    q2 = init_mlp([state_dim + action_dim, *hidden, 1], rng)
    v = init_mlp([state_dim, *hidden, 1], rng) if with_value else None
    return Critic(
        q1, q2, q1.copy(), q2.copy(), AdamState.zeros_like(q1), AdamState.zeros_like(q2),
        v, AdamState.zeros_like(v) if v is not None else None,
    )


def q_value(net: MlpParams, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(net, np.concatenate([s, a], axis=1))
    return out[:, 0]


def q_action_grad(net: MlpParams, s: np.ndarray, a: np.ndarray, weight: np.ndarray | None = None):
    """Q(s, a) and dQ/da per row (optionally row-weighted)."""
    x = np.concatenate([s, a], axis=1)
    out, cache = mlp_forward(net, x)
    w = np.ones((x.shape[0], 1)) if weight is None else weight[:, None]
    _, gin = mlp_backward(net, cache, w)
    return out[:, 0], gin[:, s.shape[1]:]


def min_q_action_grad(critic: Critic, s: np.ndarray, a: np.ndarray):
    q1, g1 = q_action_grad(critic.q1, s, a)
    q2, g2 = q_action_grad(critic.q2, s, a)
    pick1 = q1 <= q2
    return np.where(pick1, q1, q2), np.where(pick1[:, None], g1, g2)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    @classmethod
    def from_dataset(cls, data, idx: np.ndarray) -> "Batch":
        return cls(data.states[idx], data.actions[idx], data.next_states[idx], data.rewards[idx], data.dones[idx])

    def __len__(self) -> int:
        return self.states.shape[0]


def _regress(net, opt, x, y, lr, extra: MlpGrad | None = None):
    out, cache = mlp_forward(net, x)
    err = out[:, 0] - y
    grad, _ = mlp_backward(net, cache, (2.0 / len(y)) * err[:, None])
    if extra is not None:
        grad = grad + extra
    net, opt = adam_step(net, grad, opt, lr)
    return net, opt, float(np.mean(err**2))


def _check_targets(y: np.ndarray) -> None:
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite Bellman targets")


def bellman_update(critic: Critic, batch: Batch, y: np.ndarray, lr: float, tau: float,
                   extra1: MlpGrad | None = None, extra2: MlpGrad | None = None) -> tuple[Critic, float]:
    """Regress both Q nets on ``y`` (plus optional extra gradients), then Polyak the targets."""
    _check_targets(y)
    x = np.concatenate([batch.states, batch.actions], axis=1)
    q1, o1, l1 = _regress(critic.q1, critic.q1_opt, x, y, lr, extra1)
    q2, o2, l2 = _regress(critic.q2, critic.q2_opt, x, y, lr, extra2)
    return replace(
        critic, q1=q1, q2=q2, q1_opt=o1, q2_opt=o2,
        q1_target=polyak(critic.q1_target, q1, tau), q2_target=polyak(critic.q2_target, q2, tau),
    ), l1 + l2


def critic_update_td3(critic: Critic, actor_target: Actor, batch: Batch, gamma: float, tau: float,
                      policy_noise: float, noise_clip: float, lr: float, rng: Rng) -> tuple[Critic, float]:
    """Clipped double-Q TD3 backup with target policy smoothing."""
    if len(batch) == 0:
        raise AdapterError("empty batch")
    a_next = actor_target.act(batch.next_states)
    noise = np.clip(rng.normal(size=a_next.shape) * policy_noise, -noise_clip, noise_clip)
    a_next = np.clip(a_next + noise, -actor_target.max_action, actor_target.max_action)
    q_next = np.minimum(q_value(critic.q1_target, batch.next_states, a_next),
                        q_value(critic.q2_target, batch.next_states, a_next))
    y = batch.rewards + gamma * (1.0 - batch.dones) * q_next
    return bellman_update(critic, batch, y, lr, tau)


def _policy_sample(actor: Actor, states: np.ndarray, eps: np.ndarray):
    out, _ = mlp_forward(actor.net, states)
    mu, log_std, _ = gaussian_head(actor, out)
    a, logp = squashed_sample(mu, log_std, eps)
    return actor.max_action * a, logp


def critic_update_sac(critic: Critic, actor: Actor, batch: Batch, gamma: float, tau: float,
                      alpha: float, lr: float, rng: Rng) -> tuple[Critic, float]:
    """Soft double-Q backup: y = r + gamma (1-d) (min Q'(s', a') - alpha log pi(a'|s'))."""
    eps = rng.normal(size=(len(batch), actor.action_dim))
    a_next, logp = _policy_sample(actor, batch.next_states, eps)
    q_next = np.minimum(q_value(critic.q1_target, batch.next_states, a_next),
                        q_value(critic.q2_target, batch.next_states, a_next))
    y = batch.rewards + gamma * (1.0 - batch.dones) * (q_next - alpha * logp)
    return bellman_update(critic, batch, y, lr, tau)


def expectile_loss_grad(u: np.ndarray, quantile: float):
    """Asymmetric squared loss |q - 1{u<0}| u^2 (mean) and its gradient w.r.t. u."""
    w = np.where(u < 0.0, 1.0 - quantile, quantile)
    return float(np.mean(w * u**2)), 2.0 * w * u / len(u)


def iql_value_update(critic: Critic, batch: Batch, quantile: float, lr: float) -> tuple[Critic, float]:
    """Expectile regression of V(s) onto min of the target Q nets at dataset actions."""
    if not 0.0 < quantile < 1.0:
        raise AdapterError("quantile must lie in (0, 1)")
    if critic.v is None:
        raise AdapterError("critic has no value network")
    q = np.minimum(q_value(critic.q1_target, batch.states, batch.actions),
                   q_value(critic.q2_target, batch.states, batch.actions))
    out, cache = mlp_forward(critic.v, batch.states)
    # u = Q - V, so dL/dV = -dL/du
    loss, du = expectile_loss_grad(q - out[:, 0], quantile)
    grad, _ = mlp_backward(critic.v, cache, -du[:, None])
    v, opt = adam_step(critic.v, grad, critic.v_opt, lr)
    return replace(critic, v=v, v_opt=opt), loss


def iql_q_update(critic: Critic, batch: Batch, gamma: float, tau: float, lr: float) -> tuple[Critic, float]:
    v_next, _ = mlp_forward(critic.v, batch.next_states)
    y = batch.rewards + gamma * (1.0 - batch.dones) * v_next[:, 0]
    return bellman_update(critic, batch, y, lr, tau)


def cql_penalty(net: MlpParams, states: np.ndarray, data_actions: np.ndarray, sampled: np.ndarray, weight: float):
    """Per-sample logsumexp_j Q(s, a_j) - Q(s, a_data) and its weighted mean-gradient.

    ``sampled`` has shape (n, m, da).
    """
    n, m, da = sampled.shape
    s_rep = np.repeat(states, m, axis=0)
    x_s = np.concatenate([s_rep, sampled.reshape(n * m, da)], axis=1)
    q_s, cache_s = mlp_forward(net, x_s)
    q_s = q_s[:, 0].reshape(n, m)
    top = q_s.max(axis=1, keepdims=True)
    ex = np.exp(q_s - top)
    lse = top[:, 0] + np.log(ex.sum(axis=1))
    soft = ex / ex.sum(axis=1, keepdims=True)
    x_d = np.concatenate([states, data_actions], axis=1)
    q_d, cache_d = mlp_forward(net, x_d)
    penalty = lse - q_d[:, 0]
    g_s, _ = mlp_backward(net, cache_s, (weight / n) * soft.reshape(n * m, 1))
    g_d, _ = mlp_backward(net, cache_d, np.full((n, 1), -weight / n))
    return penalty, g_s + g_d


def cql_sample_actions(actor: Actor, states: np.ndarray, n_sampled_actions: int, rng: Rng) -> np.ndarray:
    """Half uniform over the action box, half from the current policy."""
    if n_sampled_actions < 2:
        raise AdapterError("need at least 2 sampled actions")
    n, da = states.shape[0], actor.action_dim
    n_unif = n_sampled_actions // 2
    n_pol = n_sampled_actions - n_unif
    unif = rng.uniform(-actor.max_action, actor.max_action, size=(n, n_unif, da))
    eps = rng.normal(size=(n * n_pol, da))
    pol, _ = _policy_sample(actor, np.repeat(states, n_pol, axis=0), eps)
    return np.concatenate([unif, pol.reshape(n, n_pol, da)], axis=1)


def cql_critic_update(critic: Critic, actor: Actor, batch: Batch, min_q_weight: float, n_sampled_actions: int,
                      rng: Rng, gamma: float, tau: float, lr: float) -> tuple[Critic, float]:
    """Bellman regression plus the conservative logsumexp penalty (weight ``min_q_weight``)."""
    eps = rng.normal(size=(len(batch), actor.action_dim))
    a_next, _ = _policy_sample(actor, batch.next_states, eps)
    q_next = np.minimum(q_value(critic.q1_target, batch.next_states, a_next),
                        q_value(critic.q2_target, batch.next_states, a_next))
    y = batch.rewards + gamma * (1.0 - batch.dones) * q_next
    sampled = cql_sample_actions(actor, batch.states, n_sampled_actions, rng)
    if min_q_weight == 0.0:
        return bellman_update(critic, batch, y, lr, tau)
    _, e1 = cql_penalty(critic.q1, batch.states, batch.actions, sampled, min_q_weight)
    _, e2 = cql_penalty(critic.q2, batch.states, batch.actions, sampled, min_q_weight)
    return bellman_update(critic, batch, y, lr, tau, e1, e2)


# --------------------------------------------------------------------------- adapters


@dataclass
class PolicyTerms:
    """Per-sample split of the actor loss, evaluated at the current actor parameters."""

    loss_imp: np.ndarray  # (n,)
    loss_con: np.ndarray  # (n,)
    grad_imp: np.ndarray  # (n, d_out) d loss_imp / d raw actor output
    grad_con: np.ndarray  # (n, d_out)
    guide_input: np.ndarray  # (n,) what the guiding net sees for each sample
    cache: MlpCache
    q_scale: float | None = None  # detached mean|Q| normalizer, where used

    def combined_output_grad(self, degrees: np.ndarray) -> np.ndarray:
        return (self.grad_imp + degrees[:, None] * self.grad_con) / len(degrees)

    def loss(self, degrees: np.ndarray) -> float:
        return float(np.mean(self.loss_imp + degrees * self.loss_con))


def check_degrees(degrees: np.ndarray, n: int, upper: float | None = 1.0) -> np.ndarray:
    d = np.asarray(degrees, dtype=np.float64).reshape(-1)
    if d.shape != (n,):
        raise AdapterError(f"expected {n} degrees, got {d.shape}")
    if not np.all(np.isfinite(d)) or np.any(d < 0.0) or (upper is not None and np.any(d > upper)):
        raise AdapterError("degrees must be finite and lie in [0, 1]")
    return d


def policy_grad(actor: Actor, terms: PolicyTerms, degrees: np.ndarray) -> tuple[float, MlpGrad]:
    grad, _ = mlp_backward(actor.net, terms.cache, terms.combined_output_grad(degrees))
    return terms.loss(degrees), grad


def constraint_grads(actor: Actor, terms: PolicyTerms) -> np.ndarray:
    """(n, P) matrix whose row k is d constraint_k / d theta."""
    grad, _ = mlp_backward(actor.net, terms.cache, terms.grad_con, per_sample=True)
    return grad.batch_flat()


class ConstraintAdapter:
    """Base class; subclasses define the loss split and the behavior-cloning guide loss."""

    name = "base"
    stochastic = False

    def noise(self, rng: Rng, n: int, action_dim: int, state_dim: int | None = None) -> np.ndarray | None:
        return rng.normal(size=(n, action_dim)) if self.stochastic else None

    def terms(self, actor: Actor, critic: Critic, batch: Batch, noise: np.ndarray | None = None,
              q_scale: float | None = None) -> PolicyTerms:
        raise NotImplementedError

    def guide_loss(self, actor: Actor, states: np.ndarray, actions: np.ndarray,
                   noise: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, MlpCache]:
        """Per-sample behavior-cloning loss on guiding data, its output-gradient and the cache."""
        raise NotImplementedError

    def constants(self) -> dict:
        return {}


class TD3BC(ConstraintAdapter):
    """-lambda_hat Q(s, pi(s)) + degree * ||pi(s) - a||^2 with lambda_hat = lambda / mean|Q|."""

    name = "td3bc"

    def __init__(self, lam: float = 2.5):
        if lam < 0:
            raise AdapterError("lambda must be >= 0")
        self.lam = lam

    def constants(self) -> dict:
        return {"lam": self.lam}

    def terms(self, actor, critic, batch, noise=None, q_scale=None):
        out, cache = mlp_forward(actor.net, batch.states)
        pi = actor.max_action * out
        q, dq_da = q_action_grad(critic.q1, batch.states, pi)
        q_scale = float(np.mean(np.abs(q))) if q_scale is None else q_scale
        lam_hat = self.lam / q_scale
        diff = pi - batch.actions
        return PolicyTerms(
            loss_imp=-lam_hat * q,
            loss_con=np.sum(diff**2, axis=1),
            grad_imp=-lam_hat * dq_da * actor.max_action,
            grad_con=2.0 * diff * actor.max_action,
            guide_input=np.sum(diff**2, axis=1),
            cache=cache,
            q_scale=q_scale,
        )

    def guide_loss(self, actor, states, actions, noise=None):
        out, cache = mlp_forward(actor.net, states)
        diff = actor.max_action * out - actions
        return np.sum(diff**2, axis=1), 2.0 * diff * actor.max_action, cache


class SACBC(ConstraintAdapter):
    """-lambda_hat Q(s, a~) + alpha log pi(a~|s) + degree * ||a~ - a||^2, a~ reparameterized."""

    name = "sacbc"
    stochastic = True

    def __init__(self, lam: float = 2.5, alpha: float = 0.2):
        if lam < 0 or alpha < 0:
            raise AdapterError("lambda and alpha must be >= 0")
        self.lam = lam
        self.alpha = alpha

    def constants(self) -> dict:
        return {"lam": self.lam, "alpha": self.alpha}

    def terms(self, actor, critic, batch, noise=None, q_scale=None):
        if noise is None:
            raise AdapterError("SAC+BC needs reparameterization noise")
        out, cache = mlp_forward(actor.net, batch.states)
        mu, log_std, mask = gaussian_head(actor, out)
        a, logp = squashed_sample(mu, log_std, noise)
        act = actor.max_action * a
        q, dq_da = min_q_action_grad(critic, batch.states, act)
        q_scale = float(np.mean(np.abs(q))) if q_scale is None else q_scale
        lam_hat = self.lam / q_scale
        diff = act - batch.actions
        n = len(batch)
        grad_imp = squashed_sample_grad(actor, a, log_std, mask, noise,
                                        -lam_hat * dq_da * actor.max_action, np.full(n, self.alpha))
        grad_con = squashed_sample_grad(actor, a, log_std, mask, noise,
                                        2.0 * diff * actor.max_action, np.zeros(n))
        return PolicyTerms(
            loss_imp=-lam_hat * q + self.alpha * logp,
            loss_con=np.sum(diff**2, axis=1),
            grad_imp=grad_imp,
            grad_con=grad_con,
            guide_input=np.sum(diff**2, axis=1),
            cache=cache,
            q_scale=q_scale,
        )

    def guide_loss(self, actor, states, actions, noise=None):
        if noise is None:
            raise AdapterError("SAC+BC guide loss needs frozen noise")
        out, cache = mlp_forward(actor.net, states)
        mu, log_std, mask = gaussian_head(actor, out)
        a, _ = squashed_sample(mu, log_std, noise)
        diff = actor.max_action * a - actions
        g = squashed_sample_grad(actor, a, log_std, mask, noise, 2.0 * diff * actor.max_action,
                                 np.zeros(len(states)))
        return np.sum(diff**2, axis=1), g, cache


def _nll_grad(actor, out, actions):
    mu, log_std, mask = gaussian_head(actor, out)
    logp, d_mu, d_ls = data_log_prob(mu, log_std, actions / actor.max_action)
    return logp, np.concatenate([d_mu, d_ls * mask], axis=1), mu, log_std


class IQL(ConstraintAdapter):
    """-beta_k exp(min(temp (Q_target(s,a) - V(s)), 10)) log pi(a|s).

    The per-sample beta is the degree; the guiding net reads log pi(a~|s) of
    a freshly sampled action.
    """

    name = "iql"
    stochastic = True

    def __init__(self, temperature: float = 3.0, quantile: float = 0.7, dropout: float = 0.0):
        if temperature < 0 or not 0.0 < quantile < 1.0 or not 0.0 <= dropout < 1.0:
            raise AdapterError("need temperature >= 0, quantile in (0,1), dropout in [0,1)")
        self.temperature = temperature
        self.quantile = quantile
        self.dropout = dropout

    def constants(self) -> dict:
        return {"temperature": self.temperature, "quantile": self.quantile, "dropout": self.dropout}

    def advantage_weight(self, critic: Critic, batch: Batch) -> np.ndarray:
        q = np.minimum(q_value(critic.q1_target, batch.states, batch.actions),
                       q_value(critic.q2_target, batch.states, batch.actions))
        v, _ = mlp_forward(critic.v, batch.states)
        w = np.exp(np.minimum(self.temperature * (q - v[:, 0]), EXP_ADV_MAX))
        if not np.all(np.isfinite(w)):
            raise NumericError("non-finite advantage weight")
        return w

    def noise(self, rng: Rng, n: int, action_dim: int, state_dim: int | None = None) -> np.ndarray:
        """Gaussian noise (n, da), followed by an input-dropout mask (n, ds) when dropout > 0."""
        eps = rng.normal(size=(n, action_dim))
        if self.dropout == 0.0 or state_dim is None:
            return eps
        keep = (rng.uniform(size=(n, state_dim)) >= self.dropout) / (1.0 - self.dropout)
        return np.concatenate([eps, keep], axis=1)

    def terms(self, actor, critic, batch, noise=None, q_scale=None):
        if noise is None:
            raise AdapterError("IQL needs noise for the guiding-net input")
        states = batch.states
        if noise.shape[1] > actor.action_dim:
            states = states * noise[:, actor.action_dim:]
            noise = noise[:, : actor.action_dim]
        out, cache = mlp_forward(actor.net, states)
        logp, dlogp, mu, log_std = _nll_grad(actor, out, batch.actions)
        w = self.advantage_weight(critic, batch)
        _, logp_sample = squashed_sample(mu, log_std, noise)
        n = len(batch)
        return PolicyTerms(
            loss_imp=np.zeros(n),
            loss_con=-w * logp,
            grad_imp=np.zeros_like(out),
            grad_con=-w[:, None] * dlogp,
            guide_input=logp_sample,
            cache=cache,
        )

    def guide_loss(self, actor, states, actions, noise=None):
        out, cache = mlp_forward(actor.net, states)
        logp, dlogp, _, _ = _nll_grad(actor, out, actions)
        return -logp, -dlogp, cache


class CQL(ConstraintAdapter):
    """-degree_k Q(s, a~) + alpha log pi(a~|s); the guiding net reads Q(s, a_data)."""

    name = "cql"
    stochastic = True

    def __init__(self, min_q_weight: float = 5.0, alpha: float = 1.0, n_sampled_actions: int = 10):
        if min_q_weight < 0 or alpha < 0 or n_sampled_actions < 2:
            raise AdapterError("need min_q_weight >= 0, alpha >= 0, n_sampled_actions >= 2")
        self.min_q_weight = min_q_weight
        self.alpha = alpha
        self.n_sampled_actions = n_sampled_actions

    def constants(self) -> dict:
        return {"min_q_weight": self.min_q_weight, "alpha": self.alpha, "n_sampled_actions": self.n_sampled_actions}

    def terms(self, actor, critic, batch, noise=None, q_scale=None):
        if noise is None:
            raise AdapterError("CQL needs reparameterization noise")
        out, cache = mlp_forward(actor.net, batch.states)
        mu, log_std, mask = gaussian_head(actor, out)
        a, logp = squashed_sample(mu, log_std, noise)
        act = actor.max_action * a
        q, dq_da = min_q_action_grad(critic, batch.states, act)
        q_data = np.minimum(q_value(critic.q1, batch.states, batch.actions),
                            q_value(critic.q2, batch.states, batch.actions))
        n = len(batch)
        grad_imp = squashed_sample_grad(actor, a, log_std, mask, noise, np.zeros_like(act), np.full(n, self.alpha))
        grad_con = squashed_sample_grad(actor, a, log_std, mask, noise, -dq_da * actor.max_action, np.zeros(n))
        return PolicyTerms(
            loss_imp=self.alpha * logp,
            loss_con=-q,
            grad_imp=grad_imp,
            grad_con=grad_con,
            guide_input=q_data,
            cache=cache,
        )

    def guide_loss(self, actor, states, actions, noise=None):
        out, cache = mlp_forward(actor.net, states)
        logp, dlogp, _, _ = _nll_grad(actor, out, actions)
        return -logp, -dlogp, cache


ADAPTERS = {"td3bc": TD3BC, "sacbc": SACBC, "iql": IQL, "cql": CQL}


def make_adapter(name: str, **constants) -> ConstraintAdapter:
    try:
        cls = ADAPTERS[name]
    except KeyError:
        raise AdapterError(f"unknown base algorithm {name!r}; choose from {sorted(ADAPTERS)}") from None
    return cls(**constants)

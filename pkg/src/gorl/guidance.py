"""The guiding network B_w and its meta-update.

B_w maps one scalar per sample (a constraint loss, a log-likelihood or a
Q value, depending on the adapter) to a constraint degree in (0, 1).

One guided iteration is:

1. ``virtual_step``: a plain SGD look-ahead
   ``theta_hat = theta - alpha_D * mean_k[g_imp_k + B_w(x_k) g_con_k]``.
2. ``guiding_grad_average``: mean behavior-cloning gradient on the guiding
   batch, evaluated at ``theta_hat``.
3. ``meta_update_explicit``: ``w += (alpha_D alpha_G / n_D) sum_k C_k dB_w(x_k)/dw``
   with ``C_k = <guiding average, g_con_k>``.

Step 3 is the exact chain rule of ``-alpha_G dL_guide(theta_hat(w))/dw``
because the degrees enter ``theta_hat`` linearly and every other quantity is
evaluated at ``theta``. ``meta_update_fd_oracle`` recomputes that derivative
by central differences over ``w`` and exists only for verification.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .agents import Actor, Batch, ConstraintAdapter, Critic, PolicyTerms, constraint_grads, policy_grad
from .numeric import MlpParams, NumericError, Rng, init_mlp, mlp_backward, mlp_forward, sgd_step

FD_PARAM_CAP = 2000


class GuidanceError(ValueError):
    pass


@dataclass
class GuidingNet:
    net: MlpParams
    log_input: bool = False

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise GuidanceError("non-finite guiding-net input")
        # signed log1p so Q-valued inputs (which may be negative) stay defined
        return np.sign(x) * np.log1p(np.abs(x)) if self.log_input else x

    def degrees(self, x: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.net, self.transform(x)[:, None])
        return out[:, 0]

    def weighted_jacobian(self, x: np.ndarray, coef: np.ndarray):
        """sum_k coef_k * dB_w(x_k)/dw as an MlpGrad."""
        _, cache = mlp_forward(self.net, self.transform(x)[:, None])
        grad, _ = mlp_backward(self.net, cache, np.asarray(coef, dtype=np.float64)[:, None])
        return grad


def make_guiding_net(rng: Rng, hidden: int = 100, init_scale: float = 0.05, log_input: bool = False) -> GuidingNet:
    return GuidingNet(init_mlp([1, hidden, 1], rng, "sigmoid", "sigmoid", scale=init_scale), log_input)


def _exact_logit(c: float) -> float:
    """An output bias b with sigmoid(b) == c bit-for-bit."""
    if c == 0.0:
        return -800.0
    if c == 1.0:
        return 800.0
    b = float(np.log(c) - np.log1p(-c))
    probe = np.empty(1)
    for _ in range(64):
        probe[0] = b
        got = mlp_forward(MlpParams([np.zeros((1, 1))], [probe.copy()], "relu", "sigmoid"), np.zeros(1))[0][0]
        if got == c:
            return b
        b = float(np.nextafter(b, np.inf if got < c else -np.inf))
    raise GuidanceError(f"no float64 bias gives a sigmoid output of exactly {c!r}")


def constant_guide(c: float, hidden: int = 100) -> GuidingNet:
    """Guide whose output is exactly ``c`` for every input (zero output weights)."""
    if not 0.0 <= c <= 1.0:
        raise GuidanceError("constant degree must lie in [0, 1]")
    net = MlpParams(
        [np.zeros((hidden, 1)), np.zeros((1, hidden))],
        [np.zeros(hidden), np.array([_exact_logit(c)])],
        "sigmoid",
        "sigmoid",
    )
    return GuidingNet(net)


def constraint_degree(guide: GuidingNet, value: float) -> float:
    return float(guide.degrees(np.array([value]))[0])


@dataclass
class VirtualPolicy:
    actor: Actor  # holds theta_hat
    degrees: np.ndarray
    guide_inputs: np.ndarray
    constraint_grads: np.ndarray  # (n_D, P), rows at theta


def virtual_step(actor: Actor, terms: PolicyTerms, guide: GuidingNet, alpha_d: float) -> VirtualPolicy:
    """One SGD look-ahead with degrees from ``guide`` (inputs evaluated at theta)."""
    n = len(terms.guide_input)
    if n < 1:
        raise GuidanceError("virtual step needs a nonempty batch")
    degrees = guide.degrees(terms.guide_input)
    _, grad = policy_grad(actor, terms, degrees)
    theta_hat = sgd_step(actor.net, grad, alpha_d)
    return VirtualPolicy(replace(actor, net=theta_hat), degrees, terms.guide_input.copy(), constraint_grads(actor, terms))


def guiding_grad_average(actor: Actor, adapter: ConstraintAdapter, states: np.ndarray, actions: np.ndarray,
                         noise: np.ndarray | None = None) -> np.ndarray:
    """Mean per-sample behavior-cloning gradient on the guiding batch, flattened."""
    if states.shape[0] < 1:
        raise GuidanceError("guiding batch must be nonempty")
    _, out_grad, cache = adapter.guide_loss(actor, states, actions, noise)
    grad, _ = mlp_backward(actor.net, cache, out_grad / states.shape[0])
    g = grad.flat()
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite guiding gradient average")
    return g


def alignment(virtual: VirtualPolicy, guiding_grad: np.ndarray) -> np.ndarray:
    """C_k = <guiding gradient average, constraint gradient of sample k>."""
    if guiding_grad.shape != (virtual.constraint_grads.shape[1],):
        raise GuidanceError("guiding gradient does not match the actor parameter count")
    return virtual.constraint_grads @ guiding_grad


def meta_gradient_explicit(guide: GuidingNet, virtual: VirtualPolicy, guiding_grad: np.ndarray,
                           alpha_d: float) -> np.ndarray:
    """dL_guide(theta_hat(w))/dw, flattened, via the chain-rule identity."""
    c = alignment(virtual, guiding_grad)
    n = len(c)
    return guide.weighted_jacobian(virtual.guide_inputs, c).flat() * (-alpha_d / n)


def meta_update_explicit(guide: GuidingNet, virtual: VirtualPolicy, guiding_grad: np.ndarray,
                         alpha_d: float, alpha_g: float) -> GuidingNet:
    c = alignment(virtual, guiding_grad)
    grad = guide.weighted_jacobian(virtual.guide_inputs, c)
    # ascent along sum_k C_k dB_k/dw
    return replace(guide, net=sgd_step(guide.net, grad, -alpha_d * alpha_g / len(c)))


def guide_objective(w: np.ndarray, guide: GuidingNet, actor: Actor, terms: PolicyTerms, adapter: ConstraintAdapter,
                    guiding_states: np.ndarray, guiding_actions: np.ndarray, alpha_d: float,
                    guide_noise: np.ndarray | None = None) -> float:
    """L_guide(theta_hat(w)) for a flat guiding-net parameter vector ``w``."""
    g = replace(guide, net=guide.net.with_flat(w))
    v = virtual_step(actor, terms, g, alpha_d)
    loss, _, _ = adapter.guide_loss(v.actor, guiding_states, guiding_actions, guide_noise)
    return float(np.mean(loss))


def meta_gradient_fd(guide: GuidingNet, actor: Actor, terms: PolicyTerms, adapter: ConstraintAdapter,
                     guiding_states: np.ndarray, guiding_actions: np.ndarray, alpha_d: float,
                     guide_noise: np.ndarray | None = None, h: float = 1e-5) -> np.ndarray:
    """Central-difference dL_guide(theta_hat(w))/dw over every guiding-net parameter."""
    w0 = guide.net.flat()
    if w0.size > FD_PARAM_CAP:
        raise GuidanceError(f"finite-difference oracle limited to {FD_PARAM_CAP} guide parameters, got {w0.size}")
    grad = np.empty_like(w0)
    for i in range(w0.size):
        wp, wm = w0.copy(), w0.copy()
        wp[i] += h
        wm[i] -= h
        fp = guide_objective(wp, guide, actor, terms, adapter, guiding_states, guiding_actions, alpha_d, guide_noise)
        fm = guide_objective(wm, guide, actor, terms, adapter, guiding_states, guiding_actions, alpha_d, guide_noise)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def meta_update_fd_oracle(guide: GuidingNet, actor: Actor, adapter: ConstraintAdapter, critic: Critic, batch: Batch,
                          guiding_states: np.ndarray, guiding_actions: np.ndarray, alpha_d: float, alpha_g: float,
                          noise: np.ndarray | None = None, guide_noise: np.ndarray | None = None,
                          h: float = 1e-5) -> GuidingNet:
    """Bilevel update ``w - alpha_G dL_guide/dw`` with the derivative taken numerically."""
    terms = adapter.terms(actor, critic, batch, noise)
    grad = meta_gradient_fd(guide, actor, terms, adapter, guiding_states, guiding_actions, alpha_d, guide_noise, h)
    return replace(guide, net=guide.net.with_flat(guide.net.flat() - alpha_g * grad))

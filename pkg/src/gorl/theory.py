"""Numerical checks of the meta-gradient identity and the guiding-average concentration bound.

* ``verify_gradients``: every hand-written gradient against central differences.
* ``verify_theorem1``: the explicit meta-update against a finite-difference
  bilevel derivative on random small instances.
* ``verify_theorem2``: Monte Carlo estimate of ``P(||mean of n gradients - mean||_1 >= eps)``
  against the claimed bound ``d1 d2 delta / (eps^2 n)``, plus the 1/n decay
  of the mean squared L1 gap.
* ``verify_theorem2_on_policy``: the same decay measured on real per-sample
  behavior-cloning gradients of an actor over an expert pool.

Each Monte Carlo cell also reports ``(d1 d2)^2 delta / (eps^2 n)``, which is
what Markov's inequality plus ``||x||_1^2 <= d ||x||_2^2`` actually gives for
a d-element gap (see ``corrected_bound``).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .agents import (
    ADAPTERS,
    Batch,
    cql_penalty,
    expectile_loss_grad,
    make_actor,
    make_adapter,
    make_critic,
    policy_grad,
    q_value,
)
from .guidance import (
    guiding_grad_average,
    make_guiding_net,
    meta_gradient_explicit,
    meta_gradient_fd,
    virtual_step,
)
from .numeric import Rng, init_mlp, mlp_backward, mlp_forward

DISTRIBUTIONS = ("gaussian", "uniform", "heavy_tail")
HEAVY_TAIL_DF = 3
HEAVY_TAIL_CLIP = 4.0
MC_CHUNK_ELEMENTS = 4_000_000


class TheoryError(ValueError):
    pass


# --------------------------------------------------------------------------- gradient checks


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over components of |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def fd_gradient(f, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(x0)
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def _random_batch(rng: Rng, n: int, ds: int, da: int) -> Batch:
    return Batch(
        rng.normal(size=(n, ds)),
        rng.uniform(-0.9, 0.9, size=(n, da)),
        rng.normal(size=(n, ds)),
        rng.normal(size=n),
        (rng.uniform(size=n) < 0.2).astype(np.float64),
    )


@dataclass
class GradientReport:
    errors: dict[str, float] = field(default_factory=dict)  # check name -> worst rel error
    worst_seed: dict[str, int] = field(default_factory=dict)
    threshold: float = 1e-4

    def record(self, name: str, err: float, seed: int) -> None:
        if err > self.errors.get(name, -1.0):
            self.errors[name] = err
            self.worst_seed[name] = seed

    @property
    def passed(self) -> bool:
        return all(e < self.threshold for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


KINK_MARGIN = 1e-3


def _jitter(net: MlpParams, rng: Rng) -> MlpParams:
    """Nonzero biases, so relu pre-activations are not exactly zero by construction."""
    return net.with_flat(net.flat() + 0.1 * rng.normal(size=net.flat().size))


def _kink_margin(net: MlpParams, x: np.ndarray) -> float:
    """Distance of the nearest relu pre-activation from its kink (inf for smooth nets)."""
    if net.hidden_activation != "relu":
        return math.inf
    return min((float(np.abs(z).min()) for z in mlp_forward(net, x)[1].pre[:-1]), default=math.inf)


def _check_plain_mlp(rng: Rng, seed: int, report: GradientReport) -> None:
    acts = ("relu", "sigmoid", "tanh")
    dims = [int(rng.integers(7)) + 1 for _ in range(int(rng.integers(3)) + 2)]
    net = init_mlp(dims, rng, acts[int(rng.integers(3))], ("identity", "sigmoid", "tanh")[int(rng.integers(3))])
    net = _jitter(net, rng)
    x = rng.normal(size=(3, dims[0]))
    while _kink_margin(net, x) < KINK_MARGIN:
        x = rng.normal(size=(3, dims[0]))
    r = rng.normal(size=(3, dims[-1]))
    out, cache = mlp_forward(net, x)
    grad, gin = mlp_backward(net, cache, r)
    f = lambda w: float(np.sum(mlp_forward(net.with_flat(w), x)[0] * r))
    report.record("mlp_params", rel_error(grad.flat(), fd_gradient(f, net.flat())), seed)
    fx = lambda v: float(np.sum(mlp_forward(net, v.reshape(x.shape))[0] * r))
    report.record("mlp_inputs", rel_error(gin.ravel(), fd_gradient(fx, x.ravel())), seed)


def _check_critics(rng: Rng, seed: int, report: GradientReport) -> None:
    ds, da, n = 3, 2, 5
    hidden = [int(rng.integers(6)) + 2]
    critic = make_critic(ds, da, hidden, rng, with_value=True)
    critic = replace(critic, q1=_jitter(critic.q1, rng), q2=_jitter(critic.q2, rng), v=_jitter(critic.v, rng))
    while True:
        # FD is only meaningful away from relu kinks and the expectile's curvature jump at u = 0
        b = _random_batch(rng, n, ds, da)
        sampled = rng.uniform(-1, 1, size=(n, 4, da))
        x = np.concatenate([b.states, b.actions], axis=1)
        xs = np.concatenate([np.repeat(b.states, 4, axis=0), sampled.reshape(-1, da)], axis=1)
        u = q_value(critic.q2, b.states, b.actions) - mlp_forward(critic.v, b.states)[0][:, 0]
        if min(_kink_margin(critic.q1, x), _kink_margin(critic.q1, xs), _kink_margin(critic.v, b.states),
               float(np.abs(u).min())) >= KINK_MARGIN:
            break
    y = rng.normal(size=n)
    out, cache = mlp_forward(critic.q1, x)
    grad, _ = mlp_backward(critic.q1, cache, (2.0 / n) * (out[:, 0] - y)[:, None])
    f = lambda w: float(np.mean((mlp_forward(critic.q1.with_flat(w), x)[0][:, 0] - y) ** 2))
    report.record("critic_bellman", rel_error(grad.flat(), fd_gradient(f, critic.q1.flat())), seed)

    q = q_value(critic.q2, b.states, b.actions)
    vout, vcache = mlp_forward(critic.v, b.states)
    _, du = expectile_loss_grad(q - vout[:, 0], 0.7)
    vgrad, _ = mlp_backward(critic.v, vcache, -du[:, None])
    fv = lambda w: expectile_loss_grad(q - mlp_forward(critic.v.with_flat(w), b.states)[0][:, 0], 0.7)[0]
    report.record("value_expectile", rel_error(vgrad.flat(), fd_gradient(fv, critic.v.flat())), seed)

    _, pgrad = cql_penalty(critic.q1, b.states, b.actions, sampled, 1.7)
    fp = lambda w: 1.7 * float(np.mean(cql_penalty(critic.q1.with_flat(w), b.states, b.actions, sampled, 1.7)[0]))
    report.record("cql_penalty", rel_error(pgrad.flat(), fd_gradient(fp, critic.q1.flat())), seed)


def _check_guide(rng: Rng, seed: int, report: GradientReport) -> None:
    guide = make_guiding_net(rng, hidden=int(rng.integers(8)) + 1, init_scale=1.0)
    x = rng.normal(size=4) * 3.0
    coef = rng.normal(size=4)
    g = guide.weighted_jacobian(x, coef).flat()
    f = lambda w: float(np.sum(replace(guide, net=guide.net.with_flat(w)).degrees(x) * coef))
    report.record("guide", rel_error(g, fd_gradient(f, guide.net.flat())), seed)


def _smooth_fd(f, x0: np.ndarray) -> np.ndarray | None:
    """Central differences, or None when two step sizes disagree (the stencil straddles a kink)."""
    g = fd_gradient(f, x0)
    return g if rel_error(g, fd_gradient(f, x0, h=1e-6)) < 1e-5 else None


def _check_adapter(name: str, rng: Rng, seed: int, report: GradientReport, attempts: int = 20) -> None:
    ds, da, n = 3, 2, 5
    adapter = make_adapter(name)
    for _ in range(attempts):
        actor = make_actor(ds, da, [int(rng.integers(7)) + 2], rng, stochastic=adapter.stochastic)
        actor = replace(actor, net=_jitter(actor.net, rng))
        critic = make_critic(ds, da, [int(rng.integers(6)) + 2], rng, with_value=True)
        critic = replace(critic, q1=_jitter(critic.q1, rng), q2=_jitter(critic.q2, rng), v=_jitter(critic.v, rng))
        b = _random_batch(rng, n, ds, da)
        noise = adapter.noise(rng, n, da)
        degrees = rng.uniform(size=n)
        terms = adapter.terms(actor, critic, b, noise)
        gs, ga = rng.normal(size=(3, ds)), rng.uniform(-0.9, 0.9, size=(3, da))
        gnoise = adapter.noise(rng, 3, da)

        def f(w):
            a2 = replace(actor, net=actor.net.with_flat(w))
            return adapter.terms(a2, critic, b, noise, q_scale=terms.q_scale).loss(degrees)

        def fg(w):
            return float(np.mean(adapter.guide_loss(replace(actor, net=actor.net.with_flat(w)), gs, ga, gnoise)[0]))

        fd, fdg = _smooth_fd(f, actor.net.flat()), _smooth_fd(fg, actor.net.flat())
        if fd is not None and fdg is not None:
            break
    else:
        raise TheoryError(f"no kink-free {name} instance in {attempts} draws (seed {seed})")
    _, grad = policy_grad(actor, terms, degrees)
    report.record(f"adapter_{name}", rel_error(grad.flat(), fd), seed)
    report.record(f"guide_loss_{name}", rel_error(guiding_grad_average(actor, adapter, gs, ga, gnoise), fdg), seed)


def verify_gradients(instances: int = 50, seed: int = 0, threshold: float = 1e-4) -> GradientReport:
    report = GradientReport(threshold=threshold)
    for i in range(instances):
        s = seed * 100_003 + i
        rng = Rng(s)
        _check_plain_mlp(rng, s, report)
        _check_critics(rng, s, report)
        _check_guide(rng, s, report)
        for name in ADAPTERS:
            _check_adapter(name, rng, s, report)
    return report


# --------------------------------------------------------------------------- theorem 1


@dataclass
class Theorem1Report:
    max_rel_error: float
    min_cosine: float
    failures: list[int]
    rows: list[dict]

    @property
    def passed(self) -> bool:
        return not self.failures


def theorem1_instance(seed: int):
    """Explicit and finite-difference meta-gradients of one random instance."""
    rng = Rng(seed)
    names = sorted(ADAPTERS)
    name = names[seed % len(names)]
    adapter = make_adapter(name)
    ds, da = 3, 2
    n_layers = int(rng.integers(2)) + 1
    hidden = [int(rng.integers(11)) + 2 for _ in range(n_layers)]
    actor = make_actor(ds, da, hidden, rng, stochastic=adapter.stochastic)
    critic = make_critic(ds, da, [8], rng, with_value=True)
    guide = make_guiding_net(rng, hidden=int(rng.integers(8)) + 1, init_scale=1.0)
    n_d = int(rng.integers(8)) + 1
    n_g = int(rng.integers(4)) + 1
    batch = _random_batch(rng, n_d, ds, da)
    noise = adapter.noise(rng, n_d, da)
    gs, ga = rng.normal(size=(n_g, ds)), rng.uniform(-0.9, 0.9, size=(n_g, da))
    gnoise = adapter.noise(rng, n_g, da)
    alpha_d = float(rng.uniform(0.01, 0.2))
    terms = adapter.terms(actor, critic, batch, noise)
    v = virtual_step(actor, terms, guide, alpha_d)
    gavg = guiding_grad_average(v.actor, adapter, gs, ga, gnoise)
    explicit = meta_gradient_explicit(guide, v, gavg, alpha_d)
    fd = meta_gradient_fd(guide, actor, terms, adapter, gs, ga, alpha_d, gnoise)
    return name, explicit, fd


def verify_theorem1(trials: int = 100, seed: int = 0, min_cos: float = 0.9999, max_rel: float = 1e-3) -> Theorem1Report:
    if trials < 1:
        raise TheoryError("trials must be >= 1")
    rows, failures = [], []
    worst_rel, worst_cos = 0.0, 1.0
    for i in range(trials):
        s = seed * 1_000_003 + i
        name, ex, fd = theorem1_instance(s)
        nrm = np.linalg.norm(fd)
        rel = float(np.linalg.norm(ex - fd) / nrm) if nrm > 0 else float(np.linalg.norm(ex))
        cos = float(ex @ fd / (np.linalg.norm(ex) * nrm)) if nrm > 0 and np.linalg.norm(ex) > 0 else 1.0
        rows.append({"seed": s, "adapter": name, "rel_error": rel, "cosine": cos})
        worst_rel, worst_cos = max(worst_rel, rel), min(worst_cos, cos)
        if not (cos > min_cos and rel < max_rel):
            failures.append(s)
    return Theorem1Report(worst_rel, worst_cos, failures, rows)


# --------------------------------------------------------------------------- theorem 2


@dataclass
class Theorem2Config:
    d1: int = 1
    d2: int = 1
    delta: float = 1.0
    distribution: str = "gaussian"
    ns: tuple[int, ...] = (10, 100, 1000)
    trials: int = 10_000
    eps: tuple[float, ...] | None = None  # default: (0.05, 0.2) * d1 * d2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.delta <= 0:
            raise TheoryError("delta must be > 0")
        if self.trials < 100:
            raise TheoryError("trials must be >= 100")
        if self.distribution not in DISTRIBUTIONS:
            raise TheoryError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.d1 < 1 or self.d2 < 1 or not self.ns or min(self.ns) < 1:
            raise TheoryError("dimensions and n values must be >= 1")

    @property
    def eps_values(self) -> tuple[float, ...]:
        d = self.d1 * self.d2
        return tuple(self.eps) if self.eps is not None else (0.05 * d, 0.2 * d)


def claimed_bound(d: int, delta: float, eps: float, n: int) -> float:
    return d * delta / (eps**2 * n)


def corrected_bound(d: int, delta: float, eps: float, n: int) -> float:
    """Markov on ||gap||_1^2 with E||gap||_1^2 <= d E||gap||_2^2 <= d^2 delta / n."""
    return d * d * delta / (eps**2 * n)


@dataclass
class BoundCell:
    d1: int
    d2: int
    delta: float
    n: int
    eps: float
    p_hat: float
    stderr: float
    bound: float
    corrected: float
    mean_sq_gap: float

    @property
    def ok(self) -> bool:
        return self.p_hat <= self.bound + 3.0 * self.stderr

    @property
    def ok_corrected(self) -> bool:
        return self.p_hat <= self.corrected + 3.0 * self.stderr


@dataclass
class BoundReport:
    cells: list[BoundCell]
    slope: float
    r2: float
    slope_range: tuple[float, float] = (-1.2, -0.8)
    min_r2: float = 0.99

    @property
    def rate_ok(self) -> bool:
        return self.slope_range[0] <= self.slope <= self.slope_range[1] and self.r2 > self.min_r2

    @property
    def bound_ok(self) -> bool:
        return all(c.ok for c in self.cells)

    @property
    def passed(self) -> bool:
        return self.rate_ok and self.bound_ok

    def failing_cells(self) -> list[BoundCell]:
        return [c for c in self.cells if not c.ok]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["d1", "d2", "delta", "n", "eps", "p_hat", "stderr", "bound", "ok", "corrected_bound",
                    "ok_corrected", "mean_sq_gap"])
        for c in self.cells:
            w.writerow([c.d1, c.d2, repr(c.delta), c.n, repr(c.eps), repr(c.p_hat), repr(c.stderr), repr(c.bound),
                        int(c.ok), repr(c.corrected), int(c.ok_corrected), repr(c.mean_sq_gap)])
        return buf.getvalue()


def _heavy_tail_scale() -> float:
    """Standard deviation of a t(3) variable clipped to +-HEAVY_TAIL_CLIP."""
    nu, c = HEAVY_TAIL_DF, HEAVY_TAIL_CLIP
    x = np.linspace(0.0, c, 200_001)
    dens = math.gamma((nu + 1) / 2) / (math.sqrt(nu * math.pi) * math.gamma(nu / 2)) * (1 + x**2 / nu) ** (-(nu + 1) / 2)
    inner = np.trapezoid(x**2 * dens, x) * 2.0
    tail_mass = 1.0 - np.trapezoid(dens, x) * 2.0
    return math.sqrt(inner + c * c * tail_mass)


def draw_elements(rng: Rng, distribution: str, delta: float, size) -> np.ndarray:
    """Zero-mean i.i.d. elements with variance delta (at most delta for the clipped heavy tail)."""
    sd = math.sqrt(delta)
    if distribution == "gaussian":
        return rng.normal(size=size, scale=sd)
    if distribution == "uniform":
        half = math.sqrt(3.0 * delta)
        return rng.uniform(-half, half, size=size)
    raw = np.clip(rng.gen.standard_t(HEAVY_TAIL_DF, size=size), -HEAVY_TAIL_CLIP, HEAVY_TAIL_CLIP)
    return raw * (sd / _heavy_tail_scale())


def _gap_norms(rng: Rng, cfg: Theorem2Config, n: int) -> np.ndarray:
    """L1 norm of (mean of n draws - 0) for every trial."""
    d = cfg.d1 * cfg.d2
    per_trial = n * d
    chunk = max(1, MC_CHUNK_ELEMENTS // per_trial)
    out = np.empty(cfg.trials)
    for start in range(0, cfg.trials, chunk):
        k = min(chunk, cfg.trials - start)
        x = draw_elements(rng, cfg.distribution, cfg.delta, (k, n, d))
        out[start:start + k] = np.abs(x.mean(axis=1)).sum(axis=1)
    return out


def loglog_fit(ns, values) -> tuple[float, float]:
    """Slope and R^2 of log(values) against log(ns)."""
    x, y = np.log(np.asarray(ns, dtype=np.float64)), np.log(np.asarray(values, dtype=np.float64))
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2


def verify_theorem2(cfg: Theorem2Config) -> BoundReport:
    rng = Rng(cfg.seed)
    d = cfg.d1 * cfg.d2
    cells, msq = [], []
    for n in cfg.ns:
        gaps = _gap_norms(rng.split(), cfg, n)
        m = float(np.mean(gaps**2))
        msq.append(m)
        for eps in cfg.eps_values:
            p = float(np.mean(gaps >= eps))
            cells.append(BoundCell(cfg.d1, cfg.d2, cfg.delta, n, eps, p, math.sqrt(p * (1 - p) / cfg.trials),
                                   claimed_bound(d, cfg.delta, eps, n), corrected_bound(d, cfg.delta, eps, n), m))
    if len(cfg.ns) >= 2 and all(v > 0 for v in msq):
        slope, r2 = loglog_fit(cfg.ns, msq)
    else:
        slope, r2 = float("nan"), float("nan")
    return BoundReport(cells, slope, r2)


ACCEPTANCE_GRID = [(d1, d2, delta) for (d1, d2) in ((1, 1), (4, 8)) for delta in (0.25, 1.0)]


def verify_theorem2_grid(grid=ACCEPTANCE_GRID, trials: int = 10_000, seed: int = 0,
                         distribution: str = "gaussian", ns=(10, 100, 1000)) -> list[BoundReport]:
    return [
        verify_theorem2(Theorem2Config(d1, d2, delta, distribution, tuple(ns), trials, None, seed * 7919 + i))
        for i, (d1, d2, delta) in enumerate(grid)
    ]


@dataclass
class OnPolicyReport:
    ns: list[int]
    mean_sq_gap: list[float]
    slope: float
    r2: float
    delta_hat: float
    n_params: int
    cells: list[BoundCell]

    @property
    def monotone(self) -> bool:
        return all(b <= a for a, b in zip(self.mean_sq_gap, self.mean_sq_gap[1:]))


def per_sample_guide_grads(actor, adapter, states, actions, noise=None) -> np.ndarray:
    """(N, P) per-sample behavior-cloning gradients."""
    _, out_grad, cache = adapter.guide_loss(actor, states, actions, noise)
    grad, _ = mlp_backward(actor.net, cache, out_grad, per_sample=True)
    return grad.batch_flat()


def verify_theorem2_on_policy(actor, adapter, pool_states: np.ndarray, pool_actions: np.ndarray, ns, trials: int,
                              rng: Rng, eps: tuple[float, ...] = (), noise=None) -> OnPolicyReport:
    """Subsample the pool without replacement; gap is measured against the full-pool mean."""
    pool = pool_states.shape[0]
    ns = sorted(int(n) for n in ns)
    if pool < 2 * ns[-1] and ns[-1] != pool:
        raise TheoryError(f"pool of {pool} too small for n up to {ns[-1]} (need >= {2 * ns[-1]})")
    if trials < 1:
        raise TheoryError("trials must be >= 1")
    grads = per_sample_guide_grads(actor, adapter, pool_states, pool_actions, noise)
    full = grads.mean(axis=0)
    delta_hat = float(grads.var(axis=0).max())
    p = grads.shape[1]
    msq, cells = [], []
    for n in ns:
        gaps = np.empty(trials)
        for t in range(trials):
            idx = rng.choice(pool, n, replace=False)
            gaps[t] = np.abs(grads[idx].mean(axis=0) - full).sum()
        msq.append(float(np.mean(gaps**2)))
        for e in eps:
            ph = float(np.mean(gaps >= e))
            cells.append(BoundCell(1, p, delta_hat, n, e, ph, math.sqrt(ph * (1 - ph) / trials),
                                   claimed_bound(p, delta_hat, e, n), corrected_bound(p, delta_hat, e, n), msq[-1]))
    usable = [(n, m) for n, m in zip(ns, msq) if m > 0 and n < pool]
    slope, r2 = loglog_fit(*zip(*usable)) if len(usable) >= 2 else (float("nan"), float("nan"))
    return OnPolicyReport(ns, msq, slope, r2, delta_hat, p, cells)

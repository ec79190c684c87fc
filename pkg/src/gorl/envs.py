"""Toy 2-D point-mass control task with a discounted LQR expert.

State is ``(x, y, vx, vy)``, action is a 2-D force clipped to [-1, 1].
Reward is the negative quadratic cost ``-(s'Qc s + a'Rc a)`` on the current
state and the executed (clipped) action.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numeric import Rng

BEHAVIOR_KINDS = ("random", "medium", "expert")


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    A: np.ndarray
    B: np.ndarray
    Qc: np.ndarray
    Rc: np.ndarray
    horizon: int = 100
    action_bound: float = 1.0
    init_pos_range: float = 1.0
    name: str = "pointmass"

    def __post_init__(self) -> None:
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.Qc.shape != (n, n) or self.Rc.shape != (m, m):
            raise EnvError("inconsistent dynamics / cost shapes")
        if not np.allclose(self.Qc, self.Qc.T) or np.linalg.eigvalsh(self.Qc).min() < -1e-12:
            raise EnvError("Qc must be symmetric PSD")
        if not np.allclose(self.Rc, self.Rc.T) or np.linalg.eigvalsh(self.Rc).min() <= 0:
            raise EnvError("Rc must be symmetric PD")
        if self.horizon < 1:
            raise EnvError("horizon must be >= 1")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "Qc": self.Qc.tolist(),
            "Rc": self.Rc.tolist(),
            "horizon": self.horizon,
            "action_bound": self.action_bound,
            "init_pos_range": self.init_pos_range,
        }

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_spec(dt: float = 0.1, horizon: int = 100) -> EnvSpec:
    A = np.array(
        [[1, 0, dt, 0], [0, 1, 0, dt], [0, 0, 0.95, 0], [0, 0, 0, 0.95]],
        dtype=np.float64,
    )
    B = np.array([[0, 0], [0, 0], [dt, 0], [0, dt]], dtype=np.float64)
    return EnvSpec(A, B, np.diag([1.0, 1.0, 0.1, 0.1]), 0.1 * np.eye(2), horizon=horizon, name="pointmass")


def reset(spec: EnvSpec, rng: Rng, n: int) -> np.ndarray:
    """Initial states: positions uniform in the box, zero velocity."""
    s = np.zeros((n, spec.state_dim))
    half = spec.state_dim // 2
    s[:, :half] = rng.uniform(-spec.init_pos_range, spec.init_pos_range, size=(n, half))
    return s


def step_cost(spec: EnvSpec, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.einsum("...i,ij,...j->...", s, spec.Qc, s) + np.einsum("...i,ij,...j->...", a, spec.Rc, a)


def env_step(spec: EnvSpec, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Advance one (or a batch of) states. Returns ``(s_next, reward, executed_action)``.

    ``done`` is a horizon property, so the caller tracks it.
    """
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise EnvError("non-finite state")
    a = np.clip(np.asarray(a, dtype=np.float64), -spec.action_bound, spec.action_bound)
    s_next = s @ spec.A.T + a @ spec.B.T
    return s_next, -step_cost(spec, s, a), a


def solve_lqr(spec: EnvSpec, gamma: float = 0.99, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Gain ``K`` (u = -K s) of the discounted infinite-horizon LQR.

    Fixed-point iteration on the discounted Riccati map, stopped when
    successive P differ by less than ``tol`` in max-norm.
    """
    A, B, Q, R = spec.A, spec.B, spec.Qc, spec.Rc
    P = Q.copy()
    for _ in range(max_iter):
        BtPA = B.T @ P @ A
        S = R + gamma * B.T @ P @ B
        P_new = Q + gamma * A.T @ P @ A - gamma**2 * BtPA.T @ np.linalg.solve(S, BtPA)
        if np.max(np.abs(P_new - P)) < tol:
            P = P_new
            break
        P = P_new
    else:
        raise EnvError(f"Riccati iteration did not converge in {max_iter} iterations")
    K = gamma * np.linalg.solve(R + gamma * B.T @ P @ B, B.T @ P @ A)
    return K


def spectral_radius(M: np.ndarray, squarings: int = 12) -> float:
    """Power-iteration estimate rho(M) = lim ||M^k||^(1/k), via repeated squaring."""
    X = np.asarray(M, dtype=np.float64)
    log_scale = 0.0  # X_true = X * exp(log_scale)
    k = 1
    for _ in range(squarings):
        nrm = np.linalg.norm(X, 2)
        if nrm == 0.0:
            return 0.0
        X = X / nrm
        log_scale += np.log(nrm)
        X = X @ X
        log_scale *= 2.0
        k *= 2
    nrm = np.linalg.norm(X, 2)
    if nrm == 0.0:
        return 0.0
    return float(np.exp((log_scale + np.log(nrm)) / k))


@dataclass
class BehaviorPolicy:
    kind: str
    K: np.ndarray | None = None
    noise: float = 0.3

    def __post_init__(self) -> None:
        if self.kind not in BEHAVIOR_KINDS:
            raise EnvError(f"unknown behavior kind {self.kind!r}")
        if self.kind != "random" and self.K is None:
            raise EnvError(f"{self.kind} policy needs an LQR gain")

    def act(self, s: np.ndarray, rng: Rng, bound: float = 1.0) -> np.ndarray:
        if self.kind == "random":
            return rng.uniform(-bound, bound, size=(s.shape[0], 2 if self.K is None else self.K.shape[0]))
        a = -s @ self.K.T
        if self.kind == "medium":
            a = a + rng.normal(size=a.shape, scale=self.noise)
        return np.clip(a, -bound, bound)


def make_policy(spec: EnvSpec, kind: str, gamma: float = 0.99, noise: float = 0.3) -> BehaviorPolicy:
    K = None if kind == "random" else solve_lqr(spec, gamma)
    return BehaviorPolicy(kind, K, noise)


@dataclass
class Rollouts:
    states: np.ndarray  # (E, T, ds)
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray  # (E, T)

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


def rollout(spec: EnvSpec, act: Callable[[np.ndarray], np.ndarray], episodes: int, rng: Rng) -> Rollouts:
    """Run ``episodes`` episodes in lockstep; ``act`` maps (E, ds) -> (E, da)."""
    s = reset(spec, rng, episodes)
    S, A, S2, R = [], [], [], []
    for _ in range(spec.horizon):
        s_next, r, a = env_step(spec, s, act(s))
        S.append(s)
        A.append(a)
        S2.append(s_next)
        R.append(r)
        s = s_next
    return Rollouts(
        np.stack(S, axis=1), np.stack(A, axis=1), np.stack(S2, axis=1), np.stack(R, axis=1)
    )


_ORDER_CHECKED: dict[str, bool] = {}


def check_return_ordering(spec: EnvSpec, gamma: float = 0.99, episodes: int = 50, seed: int = 12345) -> None:
    """Fail loudly if the expert does not beat the random policy on ``spec``."""
    key = f"{spec.spec_hash()}:{gamma}"
    if _ORDER_CHECKED.get(key):
        return
    means = {}
    for kind in ("random", "expert"):
        pol = make_policy(spec, kind, gamma)
        rng = Rng(seed)
        means[kind] = rollout(spec, lambda s, p=pol, r=rng: p.act(s, r, spec.action_bound), episodes, rng).returns.mean()
    if not means["expert"] > means["random"]:
        raise EnvError(f"expert return {means['expert']:.3f} does not exceed random return {means['random']:.3f}")
    _ORDER_CHECKED[key] = True


def generate_dataset(
    spec: EnvSpec,
    policy: BehaviorPolicy,
    episodes: int,
    rng: Rng,
    seed: int | None = None,
    gamma: float = 0.99,
):
    """Roll out ``policy`` and pack the transitions as an OfflineDataset."""
    from .datasets import OfflineDataset

    if episodes < 1:
        raise EnvError("episodes must be >= 1")
    check_return_ordering(spec, gamma)
    ro = rollout(spec, lambda s: policy.act(s, rng, spec.action_bound), episodes, rng)
    E, T = ro.rewards.shape
    dones = np.zeros((E, T))
    dones[:, -1] = 1.0
    meta = {
        "env": spec.name,
        "env_hash": spec.spec_hash(),
        "segments": [
            {
                "kind": policy.kind,
                "start": 0,
                "length": E * T,
                "seed": seed,
                "episode_starts": [e * T for e in range(E)],
                "mean_return": float(ro.returns.mean()),
            }
        ],
    }
    return OfflineDataset(
        ro.states.reshape(E * T, -1),
        ro.actions.reshape(E * T, -1),
        ro.next_states.reshape(E * T, -1),
        ro.rewards.reshape(E * T),
        dones.reshape(E * T),
        meta,
    )


def evaluate_policy(
    spec: EnvSpec,
    policy_fn: Callable[[np.ndarray], np.ndarray],
    episodes: int,
    rng: Rng,
) -> float:
    """Mean undiscounted return of a deterministic state-feedback policy."""
    if episodes < 1:
        raise EnvError("episodes must be >= 1")
    return float(rollout(spec, policy_fn, episodes, rng).returns.mean())

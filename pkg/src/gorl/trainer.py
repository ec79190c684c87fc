"""Training loop: critic update, optional guided meta-update, real policy update.

Modes:

* ``gorl``: degrees come from the guiding net, which is meta-updated on every
  guided iteration (a policy-update iteration with ``t % guide_freq == 0``)
  before the real policy step, so the real step always sees the fresh ``w``.
* ``baseline``: every degree is 1 (the unmodified base algorithm).
* ``fixed_weight``: every degree is ``fixed_weight``.
* ``mixed_baseline``: baseline trained on ``mix(D, G)``.

All randomness is drawn from independent child streams of ``Rng(seed)``
(init, batch, noise, guide), and evaluation episodes use a generator derived
only from ``(seed, eval index)``, so runs in different modes see the same
evaluation start states.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .agents import (
    Actor,
    Batch,
    Critic,
    check_degrees,
    cql_critic_update,
    critic_update_sac,
    critic_update_td3,
    iql_q_update,
    iql_value_update,
    make_actor,
    make_adapter,
    make_critic,
    policy_grad,
)
from .datasets import BUCKETS, OfflineDataset, compute_norm_stats, mix, normalize, sample_batch
from .envs import EnvSpec, default_spec, evaluate_policy
from .guidance import GuidingNet, guiding_grad_average, make_guiding_net, meta_update_explicit, virtual_step
from .numeric import AdamState, Rng, adam_step, polyak, splitmix64

MODES = ("gorl", "baseline", "fixed_weight", "mixed_baseline")
ALGO_DEFAULTS = {
    # actor lr, policy update frequency, guide update frequency
    "td3bc": (3e-4, 2, 500),
    "sacbc": (3e-4, 2, 500),
    "iql": (3e-4, 1, 200),
    "cql": (1e-4, 1, 200),
}
BUCKET_NAMES = {v: k for k, v in BUCKETS.items()}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class TrainConfig:
    base_algorithm: str = "td3bc"
    mode: str = "gorl"
    fixed_weight: float = 1.0
    seed: int = 0
    total_steps: int = 20_000
    eval_interval: int = 1_000
    eval_episodes: int = 10
    final_evals: int = 10
    log_interval: int | None = None
    actor_hidden: list[int] = field(default_factory=lambda: [256, 256])
    critic_hidden: list[int] = field(default_factory=lambda: [256, 256])
    actor_lr: float | None = None
    critic_lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 5e-3
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_freq: int | None = None
    batch_size: int = 256
    guide_lr: float = 1e-5
    guide_batch_size: int = 20
    guide_set_size: int = 200
    guide_freq: int | None = None
    guide_hidden: int = 100
    guide_init_scale: float = 0.05
    guide_log_input: bool = False
    lam: float = 2.5
    sac_alpha: float = 0.2
    iql_temperature: float = 3.0
    iql_quantile: float = 0.7
    iql_dropout: float = 0.0
    cql_min_q_weight: float = 5.0
    cql_alpha: float = 1.0
    cql_n_sampled_actions: int = 10
    normalize_states: bool = True
    log_wallclock: bool = False

    def resolved(self) -> "TrainConfig":
        """Copy with algorithm-dependent defaults filled in."""
        lr, pf, gf = ALGO_DEFAULTS.get(self.base_algorithm, ALGO_DEFAULTS["td3bc"])
        return replace(
            self,
            actor_lr=lr if self.actor_lr is None else self.actor_lr,
            policy_freq=pf if self.policy_freq is None else self.policy_freq,
            guide_freq=gf if self.guide_freq is None else self.guide_freq,
            log_interval=self.eval_interval if self.log_interval is None else self.log_interval,
            actor_hidden=list(self.actor_hidden),
            critic_hidden=list(self.critic_hidden),
        )

    def errors(self) -> list[str]:
        c = self.resolved()
        errs = []
        if c.base_algorithm not in ALGO_DEFAULTS:
            errs.append(f"base_algorithm must be one of {sorted(ALGO_DEFAULTS)}")
        if c.mode not in MODES:
            errs.append(f"mode must be one of {list(MODES)}")
        if not 0.0 <= c.fixed_weight <= 1.0:
            errs.append("fixed_weight must lie in [0, 1]")
        for name in ("actor_lr", "critic_lr"):
            if not getattr(c, name) > 0:
                errs.append(f"{name} must be positive")
        if c.guide_lr < 0:
            errs.append("guide_lr must be >= 0")
        for name in ("total_steps", "eval_interval", "eval_episodes", "final_evals", "log_interval",
                     "policy_freq", "batch_size", "guide_batch_size", "guide_set_size", "guide_freq",
                     "guide_hidden", "cql_n_sampled_actions"):
            v = getattr(c, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                errs.append(f"{name} must be an integer >= 1")
        if isinstance(c.guide_batch_size, int) and isinstance(c.guide_set_size, int) \
                and c.guide_batch_size > c.guide_set_size:
            errs.append("guide_batch_size must not exceed guide_set_size")
        if not (0.0 <= c.gamma <= 1.0):
            errs.append("gamma must lie in [0, 1]")
        if not (0.0 <= c.tau <= 1.0):
            errs.append("tau must lie in [0, 1]")
        for name in ("actor_hidden", "critic_hidden"):
            v = getattr(c, name)
            if not isinstance(v, list) or not v or not all(isinstance(h, int) and h >= 1 for h in v):
                errs.append(f"{name} must be a nonempty list of positive integers")
        if not 0.0 < c.iql_quantile < 1.0:
            errs.append("iql_quantile must lie in (0, 1)")
        if not 0.0 <= c.iql_dropout < 1.0:
            errs.append("iql_dropout must lie in [0, 1)")
        for name in ("lam", "sac_alpha", "iql_temperature", "cql_min_q_weight", "cql_alpha",
                     "policy_noise", "noise_clip", "guide_init_scale"):
            if getattr(c, name) < 0:
                errs.append(f"{name} must be >= 0")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.errors()
        if errs:
            raise ConfigError(errs)
        return self.resolved()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError([f"unknown key {k!r}" for k in unknown])
        return cls(**raw)

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved().to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def adapter(self):
        c = self
        consts = {
            "td3bc": {"lam": c.lam},
            "sacbc": {"lam": c.lam, "alpha": c.sac_alpha},
            "iql": {"temperature": c.iql_temperature, "quantile": c.iql_quantile, "dropout": c.iql_dropout},
            "cql": {"min_q_weight": c.cql_min_q_weight, "alpha": c.cql_alpha,
                    "n_sampled_actions": c.cql_n_sampled_actions},
        }[c.base_algorithm]
        return make_adapter(c.base_algorithm, **consts)


@dataclass
class RunLog:
    """Append-only event rows ``(step, event, bucket, value)`` plus a summary."""

    rows: list[tuple[int, str, str, float]] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, step: int, event: str, value: float, bucket: str = "") -> None:
        if self.rows and step < self.rows[-1][0]:
            raise ValueError("log steps must be nondecreasing")
        self.rows.append((int(step), event, bucket, float(value)))

    def series(self, event: str, bucket: str = "") -> tuple[np.ndarray, np.ndarray]:
        pts = [(s, v) for s, e, b, v in self.rows if e == event and b == bucket]
        if not pts:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        s, v = zip(*pts)
        return np.asarray(s), np.asarray(v)

    def buckets(self, event: str) -> list[str]:
        return sorted({b for _, e, b, _ in self.rows if e == event and b})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "event", "bucket", "value"])
        for s, e, b, v in self.rows:
            w.writerow([s, e, b, repr(v)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RunLog":
        log = cls()
        for row in csv.DictReader(io.StringIO(text)):
            log.rows.append((int(row["step"]), row["event"], row["bucket"], float(row["value"])))
        return log

    def save(self, directory: str | Path, stem: str) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = d / f"{stem}.csv", d / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.summary, sort_keys=True, indent=2) + "\n")
        return csv_path, json_path


@dataclass
class TrainResult:
    actor: Actor
    critic: Critic
    guide: GuidingNet | None
    log: RunLog
    norm: object | None


def eval_rng(seed: int, index: int) -> Rng:
    """Evaluation stream for (seed, eval index), independent of mode and config."""
    state, a = splitmix64((seed * 0x9E3779B97F4A7C15 + 0xD1B54A32D192ED03) & (2**64 - 1))
    _, b = splitmix64(state ^ (index + 1))
    return Rng(int(a ^ b) & (2**63 - 1))


GuideProbe = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


def train(config: TrainConfig, data: OfflineDataset, guide_data: OfflineDataset | None = None,
          spec: EnvSpec | None = None, refs=None, probe: GuideProbe | None = None,
          initial_guide: GuidingNet | None = None) -> TrainResult:
    """Run one training job.

    ``refs`` (a ScoreRefs) turns evaluation returns into normalized scores.
    ``probe(t, degrees_before, degrees_after, degrees_used)`` is called on
    every guided iteration. ``initial_guide`` replaces the random guiding-net
    initialization (e.g. with a constant guide).
    """
    cfg = config.validate()
    spec = spec or default_spec()
    needs_g = cfg.mode in ("gorl", "mixed_baseline")
    if needs_g and (guide_data is None or len(guide_data) == 0):
        raise ConfigError([f"mode {cfg.mode!r} needs a nonempty guiding set"])
    if cfg.mode == "gorl" and cfg.guide_batch_size > len(guide_data):
        raise ConfigError([f"guide_batch_size {cfg.guide_batch_size} exceeds guiding set size {len(guide_data)}"])
    if cfg.batch_size > len(data):
        raise ConfigError([f"batch_size {cfg.batch_size} exceeds dataset size {len(data)}"])

    norm = compute_norm_stats(data) if cfg.normalize_states else None
    train_data = mix(data, guide_data) if cfg.mode == "mixed_baseline" else data
    if norm is not None:
        train_data = normalize(train_data, norm)
        gdata = normalize(guide_data, norm) if guide_data is not None else None
    else:
        gdata = guide_data

    root = Rng(cfg.seed)
    init_rng, batch_rng, noise_rng, guide_rng = root.split(), root.split(), root.split(), root.split()
    adapter = cfg.adapter()
    ds, da = train_data.state_dim, train_data.action_dim
    actor = make_actor(ds, da, cfg.actor_hidden, init_rng, stochastic=adapter.stochastic)
    critic = make_critic(ds, da, cfg.critic_hidden, init_rng, with_value=cfg.base_algorithm == "iql")
    guide_init = make_guiding_net(init_rng, cfg.guide_hidden, cfg.guide_init_scale, cfg.guide_log_input)
    guide = initial_guide if initial_guide is not None else guide_init
    actor_target = Actor(actor.net.copy(), actor.action_dim, actor.stochastic)
    actor_opt = AdamState.zeros_like(actor.net)

    buckets = train_data.buckets()
    bucket_ids = sorted(set(int(b) for b in np.unique(buckets)))
    log = RunLog()
    acc = _Accumulator(bucket_ids)
    evals: list[float] = []
    raw_evals: list[float] = []
    t_wall = time.perf_counter()

    for t in range(cfg.total_steps):
        idx = sample_batch(len(train_data), batch_rng, cfg.batch_size)
        batch = Batch.from_dataset(train_data, idx)

        algo = cfg.base_algorithm
        if algo == "td3bc":
            critic, closs = critic_update_td3(critic, actor_target, batch, cfg.gamma, cfg.tau, cfg.policy_noise,
                                              cfg.noise_clip, cfg.critic_lr, noise_rng)
        elif algo == "sacbc":
            critic, closs = critic_update_sac(critic, actor, batch, cfg.gamma, cfg.tau, cfg.sac_alpha,
                                              cfg.critic_lr, noise_rng)
        elif algo == "iql":
            critic, _ = iql_value_update(critic, batch, cfg.iql_quantile, cfg.critic_lr)
            critic, closs = iql_q_update(critic, batch, cfg.gamma, cfg.tau, cfg.critic_lr)
        else:
            critic, closs = cql_critic_update(critic, actor, batch, cfg.cql_min_q_weight, cfg.cql_n_sampled_actions,
                                              noise_rng, cfg.gamma, cfg.tau, cfg.critic_lr)
        acc.critic_loss.append(closs)

        if t % cfg.policy_freq == 0:
            noise = adapter.noise(noise_rng, len(batch), da, ds)
            terms = adapter.terms(actor, critic, batch, noise)
            if cfg.mode == "gorl":
                guided = t % cfg.guide_freq == 0
                if guided:
                    before = guide.degrees(terms.guide_input)
                    virtual = virtual_step(actor, terms, guide, cfg.actor_lr)
                    gidx = guide_rng.choice(len(gdata), cfg.guide_batch_size, replace=False)
                    gnoise = adapter.noise(guide_rng, cfg.guide_batch_size, da) if adapter.stochastic else None
                    gavg = guiding_grad_average(virtual.actor, adapter, gdata.states[gidx], gdata.actions[gidx],
                                                gnoise)
                    guide = meta_update_explicit(guide, virtual, gavg, cfg.actor_lr, cfg.guide_lr)
                degrees = guide.degrees(terms.guide_input)
                if guided:
                    log.add(t, "degree_shift", float(np.max(np.abs(degrees - before))))
                    if probe is not None:
                        probe(t, before, guide.degrees(terms.guide_input), degrees)
            elif cfg.mode == "fixed_weight":
                degrees = np.full(len(batch), cfg.fixed_weight)
            else:
                degrees = np.ones(len(batch))
            degrees = check_degrees(degrees, len(batch))
            aloss, grad = policy_grad(actor, terms, degrees)
            net, actor_opt = adam_step(actor.net, grad, actor_opt, cfg.actor_lr)
            actor = replace(actor, net=net)
            if algo == "td3bc":
                actor_target = replace(actor_target, net=polyak(actor_target.net, actor.net, cfg.tau))
            acc.add_policy(aloss, degrees, terms.loss_con, buckets[idx])

        step = t + 1
        if step % cfg.log_interval == 0:
            acc.flush(log, step)
        if step % cfg.eval_interval == 0:
            k = step // cfg.eval_interval - 1
            act = _policy_fn(actor, norm)
            raw = evaluate_policy(spec, act, cfg.eval_episodes, eval_rng(cfg.seed, k))
            raw_evals.append(raw)
            log.add(step, "eval_return", raw)
            if refs is not None:
                score = refs.normalized_score(raw)
                evals.append(score)
                log.add(step, "eval_score", score)
        if cfg.log_wallclock and step % 1000 == 0:
            now = time.perf_counter()
            log.add(step, "wallclock_per_1k", (now - t_wall) * 1000.0 / 1000)
            t_wall = now

    final = evals if refs is not None else raw_evals
    tail = final[-cfg.final_evals:]
    log.summary = {
        "seed": cfg.seed,
        "mode": cfg.mode,
        "base_algorithm": cfg.base_algorithm,
        "fixed_weight": cfg.fixed_weight if cfg.mode == "fixed_weight" else None,
        "config": cfg.to_dict(),
        "config_hash": config.config_hash(),
        "final_score": float(np.mean(tail)) if tail else None,
        "final_scores": [float(x) for x in tail],
        "final_returns": [float(x) for x in raw_evals[-cfg.final_evals:]],
        "normalized": refs is not None,
        "dataset_size": len(train_data),
        "guide_size": len(guide_data) if guide_data is not None else 0,
    }
    if cfg.mode == "gorl":
        log.summary["final_degrees"] = dataset_degrees(actor, critic, guide, adapter, train_data, Rng(cfg.seed))
    return TrainResult(actor, critic, guide if cfg.mode == "gorl" else None, log, norm)


def _policy_fn(actor: Actor, norm):
    if norm is None:
        return actor.act
    return lambda s: actor.act(norm.apply(s))


def dataset_degrees(actor: Actor, critic: Critic, guide: GuidingNet, adapter, data: OfflineDataset, rng: Rng,
                    chunk: int = 4096) -> dict:
    """Mean guiding-net degree per quality bucket over every transition of ``data``."""
    buckets = data.buckets()
    out = {}
    degs = np.empty(len(data))
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        batch = Batch.from_dataset(data, idx)
        noise = adapter.noise(rng, len(idx), data.action_dim)
        degs[idx] = guide.degrees(adapter.terms(actor, critic, batch, noise).guide_input)
    for b in sorted(set(int(x) for x in np.unique(buckets))):
        out[BUCKET_NAMES.get(b, "unknown")] = float(degs[buckets == b].mean())
    return out


class _Accumulator:
    def __init__(self, bucket_ids: list[int]):
        self.bucket_ids = bucket_ids
        self.reset()

    def reset(self) -> None:
        self.critic_loss: list[float] = []
        self.actor_loss: list[float] = []
        self.deg = {b: 0.0 for b in self.bucket_ids}
        self.inten = {b: 0.0 for b in self.bucket_ids}
        self.count = {b: 0 for b in self.bucket_ids}

    def add_policy(self, loss: float, degrees: np.ndarray, loss_con: np.ndarray, buckets: np.ndarray) -> None:
        self.actor_loss.append(loss)
        for b in self.bucket_ids:
            m = buckets == b
            k = int(m.sum())
            if k:
                self.deg[b] += float(degrees[m].sum())
                self.inten[b] += float((degrees[m] * loss_con[m]).sum())
                self.count[b] += k

    def flush(self, log: RunLog, step: int) -> None:
        if self.critic_loss:
            log.add(step, "critic_loss", float(np.mean(self.critic_loss)))
        if self.actor_loss:
            log.add(step, "actor_loss", float(np.mean(self.actor_loss)))
        for b in self.bucket_ids:
            if self.count[b]:
                name = BUCKET_NAMES.get(b, "unknown")
                log.add(step, "degree", self.deg[b] / self.count[b], name)
                log.add(step, "intensity", self.inten[b] / self.count[b], name)
        self.reset()


def minmax(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a flat curve maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    span = v.max() - v.min()
    if span == 0.0:
        return np.zeros_like(v)
    return (v - v.min()) / span


def constraint_intensity_report(log: RunLog) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-bucket ``(steps, normalized mean degree * constraint loss)`` curves."""
    names = log.buckets("intensity")
    if not names:
        warnings.warn("run log has no bucket-tagged intensity rows; skipping intensity report")
        return {}
    out = {}
    for name in names:
        steps, vals = log.series("intensity", name)
        if len(steps) < 2:
            warnings.warn(f"bucket {name!r} has fewer than 2 intervals; skipping")
            continue
        out[name] = (steps, minmax(vals))
    return out

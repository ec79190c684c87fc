"""Normalized scores, the Student-t CDF and the paired t-test."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .envs import EnvSpec, make_policy, rollout
from .numeric import Rng

LENTZ_TOL = 1e-14
LENTZ_MAX_ITER = 300
LENTZ_TINY = 1e-300
REF_EPISODES = 100
REF_SEED = 2024


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreRefs:
    random_ref: float
    expert_ref: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.random_ref) and math.isfinite(self.expert_ref)):
            raise StatsError("reference returns must be finite")
        if not self.expert_ref > self.random_ref:
            raise StatsError("expert reference must exceed random reference")

    def normalized_score(self, raw):
        """100 (raw - random) / (expert - random); a float for scalar input, an array otherwise."""
        score = 100.0 * (np.asarray(raw, dtype=np.float64) - self.random_ref) / (self.expert_ref - self.random_ref)
        return float(score) if score.ndim == 0 else score


def normalized_score(raw, refs: ScoreRefs):
    return refs.normalized_score(raw)


def compute_refs(spec: EnvSpec, gamma: float = 0.99, episodes: int = REF_EPISODES, seed: int = REF_SEED) -> ScoreRefs:
    """Mean returns of the random and LQR-expert policies on a fixed evaluation seed."""
    means = {}
    for kind in ("random", "expert"):
        pol = make_policy(spec, kind, gamma)
        rng = Rng(seed)
        means[kind] = float(rollout(spec, lambda s: pol.act(s, rng, spec.action_bound), episodes, rng).returns.mean())
    return ScoreRefs(means["random"], means["expert"])


def load_or_compute_refs(spec: EnvSpec, sidecar: str | Path, gamma: float = 0.99) -> ScoreRefs:
    """Refs cached in a JSON sidecar keyed by the environment hash."""
    path = Path(sidecar)
    cache = json.loads(path.read_text()) if path.exists() else {}
    key = f"{spec.spec_hash()}:{gamma}"
    if key in cache:
        return ScoreRefs(**cache[key])
    refs = compute_refs(spec, gamma)
    cache[key] = asdict(refs)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cache, sort_keys=True, indent=2) + "\n")
    return refs


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = LENTZ_TINY if abs(d) < LENTZ_TINY else d
    d = 1.0 / d
    h = d
    for m in range(1, LENTZ_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = LENTZ_TINY if abs(d) < LENTZ_TINY else d
        c = 1.0 + aa / c
        c = LENTZ_TINY if abs(c) < LENTZ_TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = LENTZ_TINY if abs(d) < LENTZ_TINY else d
        c = 1.0 + aa / c
        c = LENTZ_TINY if abs(c) < LENTZ_TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < LENTZ_TOL:
            return h
    raise StatsError(f"incomplete beta continued fraction did not converge for a={a}, b={b}, x={x}")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise StatsError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise StatsError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    # use the fraction on whichever side converges quickly
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_cdf(x: float, df: float) -> float:
    """Student-t CDF: 1 - I_{df/(df+x^2)}(df/2, 1/2)/2 for x >= 0, mirrored for x < 0."""
    if not df >= 1:
        raise StatsError("degrees of freedom must be >= 1")
    if math.isnan(x):
        raise StatsError("x is NaN")
    if math.isinf(x):
        return 1.0 if x > 0 else 0.0
    tail = 0.5 * betainc_reg(0.5 * df, 0.5, df / (df + x * x))
    return 1.0 - tail if x >= 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p_value: float
    significant: bool
    mean_diff: float


def paired_t_test(xs, ys, alpha: float = 0.05) -> TTestResult:
    """Two-sided paired t-test on d = ys - xs."""
    x = np.asarray(xs, dtype=np.float64).reshape(-1)
    y = np.asarray(ys, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise StatsError(f"length mismatch: {x.size} vs {y.size}")
    n = x.size
    if n < 2:
        raise StatsError("need at least 2 pairs")
    d = y - x
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, n - 1, 1.0, False, 0.0)
        return TTestResult(math.copysign(math.inf, mean), n - 1, 0.0, True, mean)
    t = mean / (sd / math.sqrt(n))
    p = min(1.0, 2.0 * t_cdf(-abs(t), n - 1))
    return TTestResult(t, n - 1, p, p < alpha, mean)


def one_sided_worse_p(baseline, candidate) -> float:
    """p-value for H1: candidate scores are lower than baseline (paired)."""
    r = paired_t_test(baseline, candidate)
    if math.isinf(r.t):
        return 0.0 if r.t < 0 else 1.0
    return t_cdf(r.t, r.df)


RESULT_COLUMNS = ("dataset", "mode", "seed", "score", "p_value", "significant")


def results_table(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([
            r.get("dataset", ""), r.get("mode", ""), r.get("seed", ""),
            repr(float(r["score"])) if r.get("score") is not None else "",
            repr(float(r["p_value"])) if r.get("p_value") is not None else "",
            "" if r.get("significant") is None else int(bool(r["significant"])),
        ])
    return buf.getvalue()

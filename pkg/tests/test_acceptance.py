"""Acceptance checks. Each test records one pass/fail line shown in the terminal summary.

The desk-scale training experiments share one session cache so the
baseline runs of one check are reused by the next.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

from gorl.cli import main
from gorl.datasets import mix, sample_tuples
from gorl.envs import default_spec, generate_dataset, make_policy
from gorl.guidance import constant_guide
from gorl.numeric import Rng
from gorl.stats import compute_refs, one_sided_worse_p, paired_t_test, t_cdf
from gorl.theory import ACCEPTANCE_GRID, verify_gradients, verify_theorem1, verify_theorem2_grid
from gorl.trainer import TrainConfig, train

SEEDS = range(5)
DESK = dict(total_steps=3000, eval_interval=150, eval_episodes=10, final_evals=10, actor_hidden=[64, 64],
            critic_hidden=[64, 64])
# Meta step size per adapter; the guide losses differ in scale by orders of magnitude.
GUIDE = {"td3bc": dict(guide_lr=1e3, guide_freq=2), "sacbc": dict(guide_lr=1e3, guide_freq=2), "iql": {}, "cql": {}}
FIXED_WEIGHTS = (0.0, 0.1, 0.5, 1.0)


def record(lines, n, ok, detail):
    lines[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(lines[n])
    assert ok, lines[n]


class DeskRuns:
    """Lazily trained runs keyed by (dataset, algorithm, mode, weight, seed)."""

    def __init__(self):
        self.spec = default_spec()
        self.refs = compute_refs(self.spec)
        s = self.spec
        expert = generate_dataset(s, make_policy(s, "expert"), 50, Rng(2), seed=2)
        self.guide = sample_tuples(expert, 200, Rng(3))
        self.data = {
            "medium": generate_dataset(s, make_policy(s, "medium"), 500, Rng(1), seed=1),
            "mixed": mix(mix(generate_dataset(s, make_policy(s, "random"), 167, Rng(11), seed=11),
                             generate_dataset(s, make_policy(s, "medium"), 167, Rng(12), seed=12)),
                         generate_dataset(s, make_policy(s, "expert"), 167, Rng(13), seed=13)),
        }
        self.cache = {}
        self.seconds = {}

    def run(self, dataset, algo, mode, seed, weight=1.0):
        key = (dataset, algo, mode, weight, seed)
        if key not in self.cache:
            extra = GUIDE[algo] if mode == "gorl" else {}
            cfg = TrainConfig(**DESK, base_algorithm=algo, mode=mode, fixed_weight=weight, seed=seed, **extra)
            t0 = time.perf_counter()
            self.cache[key] = train(cfg, self.data[dataset], self.guide, self.spec, self.refs).log.summary
            self.seconds[key] = time.perf_counter() - t0
        return self.cache[key]

    def scores(self, dataset, algo, mode, weight=1.0):
        return np.concatenate([self.run(dataset, algo, mode, s, weight)["final_scores"] for s in SEEDS])

    def elapsed(self, pred):
        return sum(v for k, v in self.seconds.items() if pred(k))


@pytest.fixture(scope="session")
def desk():
    return DeskRuns()


def test_c01_gradient_fidelity(criterion_lines):
    t0 = time.perf_counter()
    rep = verify_gradients(instances=50, seed=0)
    dt = time.perf_counter() - t0
    ok = rep.max_error < 1e-4 and dt < 30
    record(criterion_lines, 1, ok, f"max rel err {rep.max_error:.2e} over {len(rep.errors)} checks, {dt:.1f} s")


def test_c02_meta_update_identity(criterion_lines):
    t0 = time.perf_counter()
    rep = verify_theorem1(trials=100, seed=0)
    dt = time.perf_counter() - t0
    ok = rep.min_cosine > 0.9999 and rep.max_rel_error < 1e-3 and len(rep.rows) == 100 and dt < 120
    record(criterion_lines, 2, ok,
           f"min cosine {rep.min_cosine:.10f}, max rel L2 err {rep.max_rel_error:.2e}, {dt:.1f} s")


def test_c03_concentration_bound(criterion_lines):
    t0 = time.perf_counter()
    reports = verify_theorem2_grid(ACCEPTANCE_GRID, trials=10_000, seed=0, distribution="gaussian")
    dt = time.perf_counter() - t0
    bad = [(d1, d2, delta, c.n, c.eps) for (d1, d2, delta), r in zip(ACCEPTANCE_GRID, reports)
           for c in r.failing_cells()]
    rates = all(r.rate_ok for r in reports)
    corrected = all(c.ok_corrected for r in reports for c in r.cells)
    slopes = ", ".join(f"{r.slope:.3f}" for r in reports)
    ok = not bad and rates and dt < 300
    record(criterion_lines, 3, ok,
           f"bound violated in {len(bad)} cells {bad}; slopes [{slopes}] R^2 min "
           f"{min(r.r2 for r in reports):.4f}; d1*d2-scaled bound holds everywhere: {corrected}; {dt:.1f} s")


def test_c04_guided_improvement(desk, criterion_lines):
    parts, ok = [], True
    base = desk.scores("medium", "td3bc", "baseline")
    gorl = desk.scores("medium", "td3bc", "gorl")
    r = paired_t_test(base, gorl)
    improved = r.significant and r.mean_diff > 0
    ok &= improved
    parts.append(f"td3bc diff {r.mean_diff:+.4f} p {r.p_value:.3g}")
    for algo in ("sacbc", "iql", "cql"):
        p_worse = one_sided_worse_p(desk.scores("medium", algo, "baseline"), desk.scores("medium", algo, "gorl"))
        ok &= p_worse >= 0.05
        parts.append(f"{algo} p(worse) {p_worse:.3g}")
    dt = desk.elapsed(lambda k: k[0] == "medium" and k[2] in ("baseline", "gorl"))
    ok &= dt < 1800
    record(criterion_lines, 4, ok, "; ".join(parts) + f"; {dt:.0f} s")


def test_c05_fixed_vs_adaptive(desk, criterion_lines):
    fixed = {w: float(np.mean(desk.scores("mixed", "td3bc", "fixed_weight", w))) for w in FIXED_WEIGHTS}
    adaptive = float(np.mean(desk.scores("mixed", "td3bc", "gorl")))
    best = max(fixed.values())
    dt = desk.elapsed(lambda k: k[0] == "mixed")
    ok = adaptive >= best - 5.0 and dt < 2400
    table = ", ".join(f"{w:g}: {s:.2f}" for w, s in fixed.items())
    record(criterion_lines, 5, ok, f"adaptive {adaptive:.2f} vs fixed {{{table}}}; {dt:.0f} s")


def test_c06_intensity_ordering(desk, criterion_lines):
    wins = []
    for s in SEEDS:
        deg = desk.run("mixed", "td3bc", "gorl", s)["final_degrees"]
        wins.append(deg["expert"] > deg["random"])
    ok = sum(wins) >= 4
    record(criterion_lines, 6, ok, f"expert bucket above random bucket in {sum(wins)}/5 seeds")


def test_c07_mixing_harm(desk, criterion_lines):
    base = desk.scores("medium", "td3bc", "baseline")
    mixed = desk.scores("medium", "td3bc", "mixed_baseline")
    gorl = desk.scores("medium", "td3bc", "gorl")
    rm, rg = paired_t_test(base, mixed), paired_t_test(base, gorl)
    mixing_no_gain = not (rm.significant and rm.mean_diff > 0)
    guided_gain = rg.significant and rg.mean_diff > 0
    ok = mixing_no_gain and guided_gain
    record(criterion_lines, 7, ok, f"mixed baseline diff {rm.mean_diff:+.4f} p {rm.p_value:.3g}; "
                                   f"guided diff {rg.mean_diff:+.4f} p {rg.p_value:.3g}")


def _t_density(x, df):
    log_c = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_c - (df + 1) / 2 * math.log1p(x * x / df))


def test_c08_statistics(criterion_lines):
    xs = np.linspace(-50, 50, 2001)
    cdf_err = max(abs(t_cdf(x, 1) - (0.5 + math.atan(x) / math.pi)) for x in xs)
    rng = np.random.default_rng(2024)
    p_err = 0.0
    for i in range(20):
        n = 5 + 3 * i
        a = rng.normal(size=n)
        b = a + rng.normal(loc=0.3 * (i % 4), size=n)
        d = b - a
        t = d.mean() / (d.std(ddof=1) / math.sqrt(n))
        tail, _ = integrate.quad(_t_density, abs(t), np.inf, args=(n - 1,), epsabs=1e-13, epsrel=1e-12, limit=200)
        p_err = max(p_err, abs(paired_t_test(a, b).p_value - 2.0 * tail))
    ok = cdf_err < 1e-10 and p_err < 1e-6
    record(criterion_lines, 8, ok, f"Cauchy cdf err {cdf_err:.2e}; quadrature p err {p_err:.2e}")


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c09_determinism(tmp_path, criterion_lines):
    trees = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        root.mkdir()
        codes = [
            main(["gen-data", "--quality", "medium", "--episodes", "5", "--seed", "4", "--out",
                  str(root / "d.npz"), "--csv", str(root / "d.csv")]),
            main(["gen-data", "--quality", "expert", "--episodes", "3", "--seed", "5", "--tuples", "60",
                  "--out", str(root / "g.npz")]),
        ]
        cfg = {"dataset": "d.npz", "guide": "g.npz", "total_steps": 80, "eval_interval": 40, "eval_episodes": 2,
               "final_evals": 2, "actor_hidden": [8], "critic_hidden": [8], "batch_size": 16, "guide_freq": 4,
               "guide_hidden": 8, "modes": ["baseline", "gorl", "fixed_weight"], "fixed_weights": [0.5],
               "seeds": [0, 1], "out_dir": "runs"}
        (root / "exp.json").write_text(json.dumps(cfg))
        codes.append(main(["sweep", "--config", str(root / "exp.json")]))
        codes.append(main(["report", "--runs", str(root / "runs"), "--out", str(root / "again")]))
        codes.append(main(["verify", "--theorem", "2", "--grid", "scalar", "--trials", "1000",
                           "--out", str(root / "t2.csv")]))
        assert codes == [0] * 5
        trees.append(_tree(root))
    kinds = sorted({name.rsplit(".", 1)[-1] for name in trees[0]})
    ok = trees[0] == trees[1]
    record(criterion_lines, 9, ok, f"{len(trees[0])} files ({', '.join(kinds)}) byte-identical across repeats")


def test_c10_fixed_weight_code_path(desk, criterion_lines):
    cfg = TrainConfig(base_algorithm="td3bc", total_steps=600, eval_interval=200, eval_episodes=3, final_evals=2,
                      actor_hidden=[32, 32], critic_hidden=[32, 32], guide_freq=2, seed=7)
    same = []
    for c in (0.0, 0.3, 0.5, 0.7, 1.0):
        a = train(replace(cfg, mode="fixed_weight", fixed_weight=c), desk.data["medium"], desk.guide, desk.spec,
                  desk.refs)
        b = train(replace(cfg, mode="gorl", guide_lr=0.0), desk.data["medium"], desk.guide, desk.spec, desk.refs,
                  initial_guide=constant_guide(c))
        same.append(a.actor.net.flat().tobytes() == b.actor.net.flat().tobytes()
                    and a.critic.q1.flat().tobytes() == b.critic.q1.flat().tobytes()
                    and a.log.summary["final_scores"] == b.log.summary["final_scores"])
    record(criterion_lines, 10, all(same), f"bitwise equal for c in {{0, 0.3, 0.5, 0.7, 1}}: {same}")

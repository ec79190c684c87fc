"""Command-line entry point: ``gorl {gen-data,train,sweep,verify,report}``.

Exit codes: 0 success, 1 verification or experiment failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import types
import typing
from dataclasses import fields
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .datasets import DatasetError, export_csv, load, sample_tuples, save
from .envs import BEHAVIOR_KINDS, default_spec, generate_dataset, make_policy
from .numeric import Rng
from .stats import load_or_compute_refs, paired_t_test, results_table
from .theory import ACCEPTANCE_GRID, verify_gradients, verify_theorem1, verify_theorem2_grid
from .trainer import ConfigError, RunLog, TrainConfig, constraint_intensity_report, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SEED_ENV = "GORL_SEED"
DEFAULT_FIXED_WEIGHTS = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]

# Experiment-level keys accepted next to the TrainConfig fields.
EXPERIMENT_KEYS = {
    "dataset": str,
    "guide": str,
    "expert_pool": str,
    "dataset_name": str,
    "out_dir": str,
    "refs_cache": str,
    "modes": list,
    "fixed_weights": list,
    "expert_sizes": list,
    "seeds": list,
}


class UsageError(Exception):
    """Configuration or usage problem; maps to exit code 2."""

    def __init__(self, errors: list[str] | str):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


def env_seed(default: int = 0) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


# --------------------------------------------------------------------------- config


def _type_ok(value, annotation) -> bool:
    origin = typing.get_origin(annotation)
    if annotation is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation is bool:
        return isinstance(value, bool)
    if annotation is str:
        return isinstance(value, str)
    if origin is list or annotation is list:
        return isinstance(value, list)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, a) for a in typing.get_args(annotation) if a is not type(None)) or value is None
    return True


def load_experiment(path: str | Path) -> tuple[TrainConfig, dict]:
    """Parse and validate an experiment JSON; every problem is reported at once."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {str(p)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    hints = typing.get_type_hints(TrainConfig)
    train_keys = {f.name for f in fields(TrainConfig)}
    errors = []
    for k in sorted(raw):
        if k not in train_keys and k not in EXPERIMENT_KEYS:
            errors.append(f"unknown key {k!r}")
        elif k in train_keys and not _type_ok(raw[k], hints[k]):
            errors.append(f"key {k!r} has the wrong type ({type(raw[k]).__name__})")
        elif k in EXPERIMENT_KEYS and not isinstance(raw[k], EXPERIMENT_KEYS[k]):
            errors.append(f"key {k!r} must be a {EXPERIMENT_KEYS[k].__name__}")
    if "dataset" not in raw:
        errors.append("missing required key 'dataset'")
    train_raw = {k: v for k, v in raw.items() if k in train_keys}
    if "seed" not in train_raw:
        train_raw["seed"] = env_seed(0)
    cfg = None
    if not errors:
        cfg = TrainConfig(**train_raw)
        errors += cfg.errors()
    exp = {k: v for k, v in raw.items() if k in EXPERIMENT_KEYS}
    base = p.parent
    for key in ("dataset", "guide", "expert_pool"):
        if key in exp:
            f = (base / exp[key]) if not Path(exp[key]).is_absolute() else Path(exp[key])
            exp[key] = f
            if not f.exists():
                errors.append(f"{key} file {str(f)!r} does not exist")
    for m in exp.get("modes", []):
        if m not in ("gorl", "baseline", "fixed_weight", "mixed_baseline"):
            errors.append(f"unknown mode {m!r} in 'modes'")
    for w in exp.get("fixed_weights", []):
        if not isinstance(w, (int, float)) or isinstance(w, bool) or not 0.0 <= w <= 1.0:
            errors.append(f"fixed weight {w!r} outside [0, 1]")
    for s in exp.get("seeds", []):
        if not isinstance(s, int) or isinstance(s, bool):
            errors.append(f"seed {s!r} is not an integer")
    for n in exp.get("expert_sizes", []):
        if not isinstance(n, int) or isinstance(n, bool) or n < 1:
            errors.append(f"expert size {n!r} must be a positive integer")
    if exp.get("expert_sizes") and "expert_pool" not in exp:
        errors.append("'expert_sizes' needs an 'expert_pool' dataset")
    needs_guide = (cfg is not None and cfg.mode in ("gorl", "mixed_baseline")) or any(
        m in ("gorl", "mixed_baseline") for m in exp.get("modes", []))
    if needs_guide and "guide" not in exp and not exp.get("expert_sizes"):
        errors.append("modes gorl / mixed_baseline need a 'guide' dataset")
    if errors:
        raise UsageError(errors)
    exp["out_dir"] = base / exp["out_dir"] if "out_dir" in exp else base / "runs"
    exp.setdefault("refs_cache", str(exp["out_dir"] / "score_refs.json"))
    exp.setdefault("dataset_name", exp["dataset"].stem)
    return cfg, exp


def _load_data(path: Path):
    try:
        data = load(path)
    except (OSError, DatasetError) as exc:
        raise UsageError(f"cannot read dataset {str(path)!r}: {exc}") from None
    spec = default_spec()
    h = data.meta.get("env_hash")
    if h is not None and h != spec.spec_hash():
        raise UsageError(f"dataset {str(path)!r} was generated for a different environment")
    return data


def run_label(cfg: TrainConfig, guide_size: int | None = None) -> str:
    label = cfg.mode
    if cfg.mode == "fixed_weight":
        label += f"_{cfg.fixed_weight:g}"
    if guide_size is not None:
        label += f"_g{guide_size}"
    return label


def run_stem(cfg: TrainConfig, guide_size: int | None = None) -> str:
    return f"{cfg.base_algorithm}_{run_label(cfg, guide_size)}_seed{cfg.seed}"


def run_cell(cell: dict) -> str:
    """Train one (config, seed) cell and write its CSV and JSON. Returns the stem."""
    cfg = TrainConfig.from_dict(cell["config"])
    data = _load_data(Path(cell["dataset"]))
    guide = None
    if cell.get("guide"):
        guide = _load_data(Path(cell["guide"]))
    if cell.get("guide_size"):
        pool = _load_data(Path(cell["expert_pool"]))
        if cell["guide_size"] > len(pool):
            raise UsageError(f"expert pool has {len(pool)} transitions, fewer than {cell['guide_size']}")
        guide = sample_tuples(pool, cell["guide_size"], Rng(cfg.seed * 7919 + cell["guide_size"]))
    spec = default_spec()
    refs = load_or_compute_refs(spec, cell["refs_cache"], cfg.gamma)
    result = train(cfg, data, guide, spec, refs)
    result.log.summary["label"] = run_label(cfg, cell.get("guide_size"))
    result.log.summary["dataset"] = cell["dataset_name"]
    stem = run_stem(cfg, cell.get("guide_size"))
    result.log.save(cell["out_dir"], stem)
    return stem


def _cell(cfg: TrainConfig, exp: dict, guide_size: int | None = None) -> dict:
    return {
        "config": cfg.to_dict(),
        "dataset": str(exp["dataset"]),
        "guide": str(exp["guide"]) if "guide" in exp and guide_size is None else None,
        "expert_pool": str(exp["expert_pool"]) if "expert_pool" in exp else None,
        "guide_size": guide_size,
        "dataset_name": exp["dataset_name"],
        "refs_cache": str(exp["refs_cache"]),
        "out_dir": str(exp["out_dir"]),
    }


def sweep_cells(cfg: TrainConfig, exp: dict) -> list[dict]:
    from dataclasses import replace

    seeds = exp.get("seeds") or [cfg.seed]
    modes = exp.get("modes") or [cfg.mode]
    weights = exp.get("fixed_weights") or DEFAULT_FIXED_WEIGHTS
    sizes = exp.get("expert_sizes") or []
    cells = []
    for seed in seeds:
        for mode in modes:
            if sizes and mode in ("gorl", "mixed_baseline"):
                for n in sizes:
                    cells.append(_cell(replace(cfg, seed=seed, mode=mode), exp, n))
            elif mode == "fixed_weight":
                for w in weights:
                    cells.append(_cell(replace(cfg, seed=seed, mode=mode, fixed_weight=float(w)), exp))
            else:
                cells.append(_cell(replace(cfg, seed=seed, mode=mode), exp))
    return cells


# --------------------------------------------------------------------------- report


def load_runs(runs_dir: Path) -> list[tuple[dict, RunLog]]:
    out = []
    for js in sorted(runs_dir.glob("*.json")):
        summary = json.loads(js.read_text())
        if "final_scores" not in summary:
            continue
        csv_path = js.with_suffix(".csv")
        log = RunLog.from_csv(csv_path.read_text()) if csv_path.exists() else RunLog()
        log.summary = summary
        out.append((summary, log))
    return out


def _label(summary: dict) -> str:
    return summary.get("label") or summary.get("mode", "run")


def ttest_rows(runs: list[tuple[dict, RunLog]], reference: str = "baseline") -> list[dict]:
    """Paired test of every label against ``reference`` on matching (seed, eval index)."""
    by_label: dict[str, dict[int, list[float]]] = {}
    for s, _ in runs:
        by_label.setdefault(_label(s), {})[s["seed"]] = s["final_scores"]
    rows = []
    ref = by_label.get(reference)
    for label in sorted(by_label):
        if ref is None or label == reference:
            continue
        seeds = sorted(set(ref) & set(by_label[label]))
        xs, ys = [], []
        for seed in seeds:
            k = min(len(ref[seed]), len(by_label[label][seed]))
            xs += ref[seed][:k]
            ys += by_label[label][seed][:k]
        if len(xs) < 2:
            continue
        r = paired_t_test(xs, ys)
        rows.append({"mode": label, "reference": reference, "pairs": len(xs), "mean_diff": r.mean_diff,
                     "t": r.t, "df": r.df, "p_value": r.p_value, "significant": r.significant})
    return rows


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_ttest_csv(rows: list[dict], path: Path) -> None:
    cols = ["mode", "reference", "pairs", "mean_diff", "t", "df", "p_value", "significant"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(_fmt(int(r[c]) if c == "significant" else r[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n")


PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"]


def svg_lines(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str, ylabel: str,
              width: int = 640, height: int = 400) -> str:
    """Minimal deterministic SVG line plot."""
    left, right, top, bottom = 60, 150, 30, 40
    pw, ph = width - left - right, height - top - bottom
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
           f'<text x="14" y="{top + ph / 2:.1f}" font-size="12" transform="rotate(-90 14 {top + ph / 2:.1f})" '
           f'text-anchor="middle">{ylabel}</text>',
           f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle" font-size="12">step</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys)]
    if not pts:
        out.append(f'<text x="{left + pw / 2:.1f}" y="{top + ph / 2:.1f}" text-anchor="middle" '
                   f'font-size="12">no data</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"
    xmin, xmax = min(p[0] for p in pts), max(p[0] for p in pts)
    ymin, ymax = min(p[1] for p in pts), max(p[1] for p in pts)
    xspan = (xmax - xmin) or 1.0
    yspan = (ymax - ymin) or 1.0
    sx = lambda x: left + (x - xmin) / xspan * pw
    sy = lambda y: top + ph - (y - ymin) / yspan * ph
    for v, anchor_y in ((ymin, top + ph), (ymax, top)):
        out.append(f'<text x="{left - 4}" y="{anchor_y + 4:.1f}" text-anchor="end" font-size="10">{v:.4g}</text>')
    for v, anchor_x in ((xmin, left), (xmax, left + pw)):
        out.append(f'<text x="{anchor_x:.1f}" y="{top + ph + 14}" text-anchor="middle" font-size="10">{v:.6g}</text>')
    for i, (name, (xs, ys)) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly}" font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _mean_curves(curves: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    k = min(len(c[0]) for c in curves)
    return curves[0][0][:k], np.mean([c[1][:k] for c in curves], axis=0)


def write_report(runs_dir: Path, out_dir: Path) -> dict:
    runs = load_runs(runs_dir)
    if not runs:
        raise FileNotFoundError(f"no run summaries in {str(runs_dir)!r}")
    out_dir.mkdir(parents=True, exist_ok=True)
    tests = ttest_rows(runs)
    p_by_label = {r["mode"]: r for r in tests}
    rows = []
    for s, _ in sorted(runs, key=lambda r: (r[0].get("dataset", ""), _label(r[0]), r[0]["seed"])):
        t = p_by_label.get(_label(s))
        rows.append({"dataset": s.get("dataset", ""), "mode": _label(s), "seed": s["seed"],
                     "score": s.get("final_score"), "p_value": t["p_value"] if t else None,
                     "significant": t["significant"] if t else None})
    (out_dir / "aggregate.csv").write_text(results_table(rows))
    write_ttest_csv(tests, out_dir / "ttest.csv")

    score_curves: dict[str, list] = {}
    inten_curves: dict[str, list] = {}
    for s, log in runs:
        event = "eval_score" if s.get("normalized") else "eval_return"
        steps, vals = log.series(event)
        if len(steps):
            score_curves.setdefault(_label(s), []).append((steps, vals))
        if s.get("mode") == "gorl":
            import warnings

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                for bucket, curve in constraint_intensity_report(log).items():
                    inten_curves.setdefault(bucket, []).append(curve)
    score = {k: _mean_curves(v) for k, v in score_curves.items()}
    inten = {k: _mean_curves(v) for k, v in inten_curves.items()}
    (out_dir / "score.svg").write_text(svg_lines(score, "Evaluation score", "score"))
    (out_dir / "intensity.svg").write_text(svg_lines(inten, "Relative constraint intensity (guided runs)",
                                                     "normalized intensity"))
    return {"runs": len(runs), "tests": tests}


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    spec = default_spec()
    seed = args.seed if args.seed is not None else env_seed(0)
    rng = Rng(seed)
    data = generate_dataset(spec, make_policy(spec, args.quality), args.episodes, rng.split(), seed=seed)
    mean_ret = data.meta["segments"][0]["mean_return"]
    if args.tuples is not None:
        if args.tuples > len(data):
            raise UsageError(f"--tuples {args.tuples} exceeds the {len(data)} generated transitions")
        data = sample_tuples(data, args.tuples, rng.split(), contiguous=args.contiguous)
    data.meta["name"] = Path(args.out).stem
    try:
        save(data, args.out)
        if args.csv:
            export_csv(data, args.csv)
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"wrote {len(data)} transitions ({args.quality}, seed {seed}, "
          f"mean episode return {mean_ret:.4f}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, exp = load_experiment(args.config)
    if args.out:
        exp["out_dir"] = Path(args.out)
    stem = run_cell(_cell(cfg, exp))
    summary = json.loads((Path(exp["out_dir"]) / f"{stem}.json").read_text())
    print(f"{stem}: final score {summary['final_score']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, exp = load_experiment(args.config)
    if args.out:
        exp["out_dir"] = Path(args.out)
    cells = sweep_cells(cfg, exp)
    out_dir = Path(exp["out_dir"])
    todo = []
    for c in cells:
        stem = run_stem(TrainConfig.from_dict(c["config"]), c["guide_size"])
        if (out_dir / f"{stem}.json").exists() and not args.force:
            print(f"skip {stem} (done)")
        else:
            todo.append(c)
    # make sure the refs sidecar exists before workers race to create it
    load_or_compute_refs(default_spec(), exp["refs_cache"], cfg.gamma)
    if args.jobs > 1 and len(todo) > 1:
        with get_context("fork").Pool(args.jobs) as pool:
            for stem in pool.imap(run_cell, todo):
                print(f"done {stem}")
    else:
        for c in todo:
            print(f"done {run_cell(c)}")
    info = write_report(out_dir, out_dir / "report")
    for t in info["tests"]:
        print(f"{t['mode']} vs {t['reference']}: mean diff {t['mean_diff']:+.4f}, p = {t['p_value']:.4g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else env_seed(0)
    out = Path(args.out) if args.out else None
    if args.theorem == "1":
        rep = verify_theorem1(args.trials or 100, seed)
        lines = ["seed,adapter,rel_error,cosine"] + [
            f"{r['seed']},{r['adapter']},{r['rel_error']!r},{r['cosine']!r}" for r in rep.rows]
        text = "\n".join(lines) + "\n"
        print(f"theorem 1: {len(rep.rows)} instances, max rel err {rep.max_rel_error:.3e}, "
              f"min cosine {rep.min_cosine:.12f}")
        if rep.failures:
            print(f"FAILED instance seeds: {rep.failures}")
        ok = rep.passed
    elif args.theorem == "2":
        grid = ACCEPTANCE_GRID if args.grid == "acceptance" else [(1, 1, 0.25), (1, 1, 1.0)]
        reports = verify_theorem2_grid(grid, args.trials or 10_000, seed, args.distribution)
        text = "".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(reports))
        ok = True
        for (d1, d2, delta), r in zip(grid, reports):
            status = "ok" if r.passed else "FAILED"
            print(f"theorem 2 [{d1}x{d2}, delta={delta}]: slope {r.slope:.4f}, R^2 {r.r2:.5f}, {status}")
            for c in r.failing_cells():
                print(f"  bound violated: n={c.n}, eps={c.eps:g}: P_hat={c.p_hat:.4f} > bound {c.bound:.4f} "
                      f"(+3 stderr {3 * c.stderr:.4f}); corrected bound {c.corrected:.4f}")
            ok = ok and r.passed
    else:
        rep = verify_gradients(args.trials or 50, seed)
        text = "check,max_rel_error,worst_seed\n" + "".join(
            f"{k},{v!r},{rep.worst_seed[k]}\n" for k, v in sorted(rep.errors.items()))
        print(f"gradients: max rel err {rep.max_error:.3e} over {len(rep.errors)} checks")
        for k, v in sorted(rep.errors.items()):
            if v >= rep.threshold:
                print(f"FAILED {k}: rel err {v:.3e} (seed {rep.worst_seed[k]})")
        ok = rep.passed
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_report(args) -> int:
    try:
        info = write_report(Path(args.runs), Path(args.out))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"report over {info['runs']} runs written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gorl", description="Guided offline RL on toy control tasks.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an offline dataset")
    g.add_argument("--env", choices=["default"], default="default")
    g.add_argument("--quality", choices=BEHAVIOR_KINDS, required=True)
    g.add_argument("--episodes", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--tuples", type=_positive_int, default=None, help="keep this many transitions")
    g.add_argument("--contiguous", action="store_true", help="take the tuples as one contiguous run")
    g.add_argument("--out", required=True)
    g.add_argument("--csv", default=None, help="also export as CSV")
    g.set_defaults(func=cmd_gen_data)

    for name, fn in (("train", cmd_train), ("sweep", cmd_sweep)):
        t = sub.add_parser(name, help=f"{name} from a JSON experiment config")
        t.add_argument("--config", required=True)
        t.add_argument("--out", default=None, help="override the config's out_dir")
        if name == "sweep":
            t.add_argument("--jobs", type=_positive_int, default=1)
            t.add_argument("--force", action="store_true", help="rerun cells that already have a summary")
        t.set_defaults(func=fn)

    v = sub.add_parser("verify", help="run a verification suite")
    v.add_argument("--theorem", choices=["1", "2", "gradients"], required=True)
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--trials", type=_positive_int, default=None)
    v.add_argument("--grid", choices=["acceptance", "scalar"], default="acceptance")
    v.add_argument("--distribution", choices=["gaussian", "uniform", "heavy_tail"], default="gaussian")
    v.add_argument("--out", default=None, help="CSV report path")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="aggregate run summaries into tables and plots")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

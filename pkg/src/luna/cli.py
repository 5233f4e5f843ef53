"""Command-line entry point: one subcommand per experiment, JSON config in, CSV/JSON out.

Exit codes: 0 success, 1 failed check or runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np

from luna import bench, checks, concentration
from luna.features import FAMILIES, LunaConfig, LunaParams
from luna.training import classify, convert, kernel_fit
from luna.training.model import ATTENTION_KINDS, ModelConfig, TinyTransformer
from luna.training.tasks import TASK_KINDS, SyntheticTask

log = logging.getLogger("luna")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
DEFAULT_OUT = "luna_runs"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- schemas


def _int(default=None, minimum=None):
    s: dict = {"type": "integer"}
    if default is not None:
        s["default"] = default
    if minimum is not None:
        s["minimum"] = minimum
    return s


def _num(default=None, minimum=None):
    s: dict = {"type": "number"}
    if default is not None:
        s["default"] = default
    if minimum is not None:
        s["minimum"] = minimum
    return s


def _enum(values, default=None):
    s: dict = {"enum": list(values)}
    if default is not None:
        s["default"] = default
    return s


def _bool(default):
    return {"type": "boolean", "default": default}


def _list(items, default=None, min_items=0):
    s: dict = {"type": "array", "items": items, "minItems": min_items}
    if default is not None:
        s["default"] = default
    return s


def _obj(props: dict, required=(), default=None):
    s = {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}
    if default is not None:
        s["default"] = default
    return s


GLOBAL = {
    "seed": _int(0, 0),
    "output_dir": {"type": "string"},
    "log_level": _enum(["DEBUG", "INFO", "WARNING", "ERROR"], "INFO"),
}

TASK = _obj(
    {
        "kind": _enum(TASK_KINDS),
        "n": _int(None, 2),
        "n_classes": _int(None, 2),
        "n_keys": _int(32, 1),
        "margin": _int(4, 1),
        "shuffle_labels": _bool(False),
    },
    required=("kind", "n", "n_classes"),
)

MODEL = _obj(
    {
        "d_model": _int(32, 1),
        "heads": _int(2, 1),
        "d_ff": _int(64, 1),
        "layers": _int(1, 1),
        "D": _int(64, 1),
        "luna_m": _int(8, 1),
        "luna_L": _int(8, 1),
        "luna_hidden": _int(32, 1),
        "luna_activation": _enum(["relu", "sigmoid", "tanh"], "relu"),
        "luna_shared": _bool(True),
        "luna_envelope": _enum(["none", "scalar_mlp", "vector_mlp"], "none"),
        "luna_ch_rms": _bool(False),
        "bank_L": _int(4, 1),
        "attn_residual": _bool(True),
    },
    default={},
)

STUDENT = _obj({k: v for k, v in MODEL["properties"].items() if k.startswith("luna_")}, default={})

SCHEMAS: dict[str, dict] = {
    "gramcheck": _obj(
        {
            "families": _list(_enum(FAMILIES)),
            "points": _int(64, 2),
            "seeds": _int(10, 1),
            "d": _int(8, 1),
            "D": _int(64, 8),
            "rel_tol": _num(1e-10, 0),
            "corrupt": _bool(False),
        },
        required=("families",),
    ),
    "gradcheck": _obj(
        {"configs": _int(None, 1), "step": _num(1e-5, 0), "tol": _num(1e-4, 0)},
        required=("configs",),
    ),
    "equiv": _obj(
        {"families": _list(_enum(FAMILIES)), "configs": _int(50, 1), "tol": _num(1e-10, 0)},
        required=("families",),
    ),
    "mc": _obj(
        {
            "family": _enum(concentration.MC_FAMILIES),
            "d": _int(4, 1),
            "n_pairs": _int(10, 1),
            "m_schedule": _list(_int(minimum=1), [16 * 2**i for i in range(9)], 2),
            "trials": _int(200, 20),
            "regime": _enum(concentration.REGIMES, "bounded"),
            "eps_percentiles": _list(_num(minimum=0), [30.0, 50.0, 70.0, 90.0], 1),
            "eps_grid": {"type": ["array", "null"], "items": _num(minimum=0), "default": None},
            "L": _int(4, 1),
            "hidden": _int(16, 1),
            "ref_factor": _int(64, 1),
            "truncation_radii": _list(_num(minimum=0), [1.0, 2.0, 4.0, 8.0]),
            "truncation_samples": _int(20000, 100),
        },
        required=("family",),
    ),
    "fitkernel": _obj(
        {
            "target": _enum(kernel_fit.TARGETS),
            "d": _int(4, 1),
            "m": _int(8, 1),
            "L": _int(8, 1),
            "hidden": _int(64, 1),
            "activation": _enum(["relu", "sigmoid", "tanh"], "relu"),
            "shared": _bool(False),
            "seeds": _int(5, 1),
            "steps": _int(1000, 1),
            "lr": _num(3e-3, 0),
            "batch": _int(256, 1),
            "low": _num(-1.0),
            "high": _num(1.0),
            "grid_points": _int(5, 2),
            "eval_every": _int(100, 1),
            "trainable": {"type": ["array", "null"], "items": {"type": "string"}, "default": None},
        },
        required=("target",),
    ),
    "train": _obj(
        {
            "task": TASK,
            "model": MODEL,
            "variants": _list(_enum(ATTENTION_KINDS), ["luna", "rff"], 1),
            "seeds": _int(5, 1),
            "steps": _int(2000, 1),
            "lr": _num(2e-3, 0),
            "batch": _int(32, 1),
            "weight_decay": _num(0.0, 0),
            "warmup": _int(50, 0),
            "eval_size": _int(512, 1),
            "curve_every": _int(25, 1),
            "on_degenerate": _enum(["raise", "skip"], "skip"),
            "max_skip_frac": _num(1.0, 0),
        },
        required=("task",),
    ),
    "convert": _obj(
        {
            "task": TASK,
            "model": MODEL,
            "student": STUDENT,
            "seeds": _int(5, 1),
            "teacher_steps": _int(300, 1),
            "teacher_lr": _num(3e-3, 0),
            "stage1_steps": _int(50, 0),
            "stage2_steps": _int(150, 0),
            "stage1_lr": _num(1e-2, 0),
            "stage2_lr": _num(1e-3, 0),
            "batch": _int(32, 1),
            "distill_loss": _enum(["attn_kl", "attn_mse"], "attn_kl"),
            "eval_size": _int(2048, 1),
            "arms": _list(_enum(convert.ARMS), list(convert.ARMS), 1),
        },
        required=("task",),
    ),
    "bench": _obj(
        {
            "ns": _list(_int(minimum=1), None, 2),
            "variants": _list(_enum(bench.BENCH_VARIANTS), list(bench.BENCH_VARIANTS), 1),
            "d": _int(64, 1),
            "d_v": _int(64, 1),
            "D": _int(64, 8),
            "repetitions": _int(5, 5),
            "warmup": _int(2, 2),
            "max_quadratic_n": _int(8192, 1),
        },
        required=("ns",),
    ),
}
for _s in SCHEMAS.values():
    _s["properties"].update(GLOBAL)


def schema(command: str) -> dict:
    return copy.deepcopy(SCHEMAS[command])


def _fill_defaults(sch: dict, doc: dict) -> dict:
    out = dict(doc)
    for key, sub in sch.get("properties", {}).items():
        if key not in out and "default" in sub:
            out[key] = copy.deepcopy(sub["default"])
        if sub.get("type") == "object" and isinstance(out.get(key), dict):
            out[key] = _fill_defaults(sub, out[key])
    return out


def resolve_config(command: str, doc: dict, overrides: dict) -> dict:
    """Validate ``doc`` against the command schema, then apply CLI overrides and defaults."""
    sch = SCHEMAS[command]
    merged = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        jsonschema.validate(merged, sch)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{command} config invalid at {where}: {exc.message}") from None
    return _fill_defaults(sch, merged)


def config_hash(resolved: dict) -> str:
    body = {k: v for k, v in resolved.items() if k not in ("output_dir", "log_level")}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]


# ---------------------------------------------------------------- output helpers


def _g(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_g(x) for x in row])
    path.write_text(buf.getvalue())


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(type(x))


def _finite(x: float) -> float | None:
    return x if math.isfinite(x) else None


def _parallel(fn: Callable, args: list, jobs: int) -> list:
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as pool:
        return list(pool.map(fn, *zip(*args)))


# ---------------------------------------------------------------- commands


def cmd_gramcheck(cfg: dict, run: Path, opts) -> int:
    if not cfg["families"]:
        log.warning("empty family list: nothing to check")
    cases = checks.gram_cases(
        cfg["families"], cfg["points"], cfg["seeds"], cfg["d"], cfg["D"], cfg["seed"], cfg["corrupt"]
    )
    tol = cfg["rel_tol"]
    write_csv(
        run / "gram.csv",
        ["family", "seed", "min_eig", "max_eig", "passed"],
        [(c.family, c.seed, c.min_eig, c.max_eig, c.passed(tol)) for c in cases],
    )
    failed = sorted({c.family for c in cases if not c.passed(tol)})
    for fam in cfg["families"]:
        mine = [c for c in cases if c.family == fam]
        print(f"{fam}: min eig {min(c.min_eig for c in mine):.3e}, max eig {max(c.max_eig for c in mine):.3e}")
    if failed:
        print(f"FAIL: negative eigenvalues beyond tolerance for {', '.join(failed)}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_gradcheck(cfg: dict, run: Path, opts) -> int:
    cases = checks.grad_cases(cfg["configs"], cfg["seed"], cfg["step"], cfg["tol"])
    rows = []
    for c in cases:
        for b in c.report.blocks:
            rows.append((c.index, c.loss, json.dumps(c.variant, sort_keys=True), b.name, b.max_rel_err, b.checked,
                         b.skipped_kinks, b.max_rel_err <= cfg["tol"]))
        print(f"case {c.index} ({c.loss}, {c.variant}): {'PASS' if c.report.passed else 'FAIL'}")
    write_csv(run / "gradcheck.csv",
              ["case", "loss", "variant", "block", "max_rel_err", "checked", "skipped_kinks", "passed"], rows)
    return EXIT_OK if all(c.report.passed for c in cases) else EXIT_FAIL


def cmd_equiv(cfg: dict, run: Path, opts) -> int:
    if not cfg["families"]:
        log.warning("empty family list: nothing to check")
    cases = checks.equivalence_cases(cfg["configs"], cfg["seed"], cfg["families"])
    tol = cfg["tol"]
    write_csv(
        run / "equiv.csv",
        ["case", "family", "n", "d", "D", "d_v", "linear_vs_oracle", "batch_vs_stream", "redraws", "passed"],
        [(c.index, c.family, c.n, c.d, c.D, c.d_v, c.linear_vs_oracle, c.batch_vs_stream, c.redraws, c.passed(tol))
         for c in cases],
    )
    worst = max((max(c.linear_vs_oracle, c.batch_vs_stream) for c in cases), default=0.0)
    print(f"{len(cases)} cases, worst max-abs difference {worst:.3e} (tol {tol:.1e})")
    return EXIT_OK if all(c.passed(tol) for c in cases) else EXIT_FAIL


def cmd_mc(cfg: dict, run: Path, opts) -> int:
    keys = [f for f in concentration.McSweepConfig.__dataclass_fields__]
    mc_cfg = concentration.McSweepConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.items()
                                            if k in keys})
    report = concentration.mc_error_sweep(mc_cfg, jobs=opts.jobs)
    trunc = None
    if cfg["truncation_radii"]:
        fmap = concentration.SampledFeatureMap(mc_cfg)
        trunc = concentration.truncation_check(fmap, cfg["truncation_radii"], cfg["truncation_samples"])
    concentration.write_report(report, run, trunc)
    print(f"rms slope {report.rms_slope:.3f} (R^2 {report.rms_r2:.3f})")
    for t in report.tail_fits:
        print(f"eps {t.eps:.4g}: {t.status}, slope {t.slope:.4g}, R^2 {t.r2:.3f}")
    return EXIT_OK


def _fit_one(cfg: dict, seed: int) -> kernel_fit.FitReport:
    lc = LunaConfig(d=cfg["d"], m=cfg["m"], L=cfg["L"], hidden=cfg["hidden"], activation=cfg["activation"],
                    shared=cfg["shared"])
    fc = kernel_fit.FitConfig(
        steps=cfg["steps"], lr=cfg["lr"], batch=cfg["batch"], low=cfg["low"], high=cfg["high"],
        grid_points=cfg["grid_points"], eval_every=cfg["eval_every"],
        trainable=tuple(cfg["trainable"]) if cfg["trainable"] else None,
    )
    return kernel_fit.fit_kernel_to_target(LunaParams.init(seed, lc), cfg["target"], fc, seed)


def cmd_fitkernel(cfg: dict, run: Path, opts) -> int:
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]
    reports = _parallel(_fit_one, [(cfg, s) for s in seeds], opts.jobs)
    write_csv(run / "fitkernel.csv", ["seed", "step", "heldout_mse"],
              [(s, step, mse) for s, r in zip(seeds, reports) for step, mse in r.heldout])
    write_csv(run / "fitkernel_train.csv", ["seed", "step", "train_mse"],
              [(s, step, mse) for s, r in zip(seeds, reports) for step, mse in r.curve])
    ratios = [r.ratio for r in reports]
    write_json(run / "fitkernel_summary.json", {
        "seeds": seeds,
        "initial_mse": [r.initial_mse for r in reports],
        "final_mse": [r.final_mse for r in reports],
        "sup_error": [r.sup_error for r in reports],
        "ratio": ratios,
        "median_ratio": float(np.median(ratios)),
    })
    print(f"median held-out MSE ratio final/initial: {np.median(ratios):.4g}")
    return EXIT_OK


def _task(doc: dict) -> SyntheticTask:
    return SyntheticTask(**doc)


def _model_config(task: SyntheticTask, model: dict, attention: str) -> ModelConfig:
    return ModelConfig(vocab=task.vocab, n_classes=task.n_classes, attention=attention, **model)


def _train_one(cfg: dict, variant: str, seed: int) -> classify.ClassifierReport:
    task = _task(cfg["task"])
    model = TinyTransformer.init(seed, _model_config(task, cfg["model"], variant))
    tc = classify.TrainConfig(
        steps=cfg["steps"], batch=cfg["batch"], lr=cfg["lr"], weight_decay=cfg["weight_decay"], warmup=cfg["warmup"],
        eval_size=cfg["eval_size"], curve_every=cfg["curve_every"], on_degenerate=cfg["on_degenerate"],
        max_skip_frac=cfg["max_skip_frac"],
    )
    return classify.train_classifier(task, model, tc, seed)


def cmd_train(cfg: dict, run: Path, opts) -> int:
    task = _task(cfg["task"])
    variants = cfg["variants"]
    models = {v: TinyTransformer.init(0, _model_config(task, cfg["model"], v)) for v in variants}
    for v in variants[1:]:
        classify.matched_compute(models[variants[0]], models[v])
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]
    jobs = [(cfg, v, s) for v in variants for s in seeds]
    reports = _parallel(_train_one, jobs, opts.jobs)
    write_csv(run / "train.csv",
              ["variant", "seed", "train_acc", "test_acc", "final_loss", "skipped_steps", "degenerate_eval"],
              [(r.attention, r.seed, r.train_acc, r.test_acc, r.final_loss, r.skipped_steps, r.degenerate_eval)
               for r in reports])
    write_csv(run / "train_curves.csv", ["variant", "seed", "step", "loss"],
              [(r.attention, r.seed, step, loss) for r in reports for step, loss in r.curve])
    summary = {}
    for v in variants:
        acc = np.array([r.test_acc for r in reports if r.attention == v])
        se = float(acc.std(ddof=1) / math.sqrt(len(acc))) if len(acc) > 1 else 0.0
        summary[v] = {
            "test_acc": acc.tolist(),
            "mean": float(acc.mean()),
            "se": se,
            "params": models[v].param_counts(),
            "wall_time": [r.wall_time for r in reports if r.attention == v],
        }
        print(f"{v}: test accuracy {acc.mean():.4f} +/- {se:.4f} over {len(acc)} seeds")
    write_json(run / "train_summary.json", summary)
    return EXIT_OK


def _convert_one(cfg: dict, seed: int):
    task = _task(cfg["task"])
    teacher_cfg = classify.TrainConfig(steps=cfg["teacher_steps"], lr=cfg["teacher_lr"], batch=cfg["batch"],
                                       eval_size=cfg["eval_size"])
    cc = convert.ConvertConfig(
        stage1_steps=cfg["stage1_steps"], stage2_steps=cfg["stage2_steps"], stage1_lr=cfg["stage1_lr"],
        stage2_lr=cfg["stage2_lr"], batch=cfg["batch"], distill_loss=cfg["distill_loss"], eval_size=cfg["eval_size"],
    )
    return convert.conversion_run(task, _model_config(task, cfg["model"], "softmax"), teacher_cfg, cc, seed,
                                  cfg["student"], tuple(cfg["arms"]))


def cmd_convert(cfg: dict, run: Path, opts) -> int:
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]
    results = _parallel(_convert_one, [(cfg, s) for s in seeds], opts.jobs)
    cols = ["seed", "arm", "teacher_acc", "zero_step_acc", "student_acc", "recovery", "stage1_steps", "stage2_steps",
            "distill_initial", "distill_final"]
    rows = []
    for _, reps in results:
        for r in reps:
            d = r.row()
            d["arm"] = "two_stage" if r.two_stage else "stage2_only"
            rows.append([d[c] if d[c] is not None else "" for c in cols])
    write_csv(run / "convert.csv", cols, rows)
    summary = {}
    for arm in cfg["arms"]:
        rec = [r.recovery for _, reps in results for r in reps if (r.two_stage == (arm == "two_stage"))]
        summary[arm] = {"recovery": rec, "median_recovery": float(np.median(rec))}
        print(f"{arm}: median recovery {np.median(rec):.4f}")
    summary["wall_time"] = [r.wall_time for _, reps in results for r in reps]
    write_json(run / "convert_summary.json", summary)
    return EXIT_OK


def cmd_bench(cfg: dict, run: Path, opts) -> int:
    plan = bench.BenchPlan(
        ns=tuple(cfg["ns"]), d=cfg["d"], d_v=cfg["d_v"], D=cfg["D"], variants=tuple(cfg["variants"]),
        repetitions=cfg["repetitions"], warmup=cfg["warmup"], max_quadratic_n=cfg["max_quadratic_n"], seed=cfg["seed"],
    )
    report = bench.run_bench(plan)
    bench.write_report(report, run)
    for v, fit in report.slopes.items():
        print(f"{v}: log-log slope {fit.slope:.3f} (R^2 {fit.r2:.3f})")
    return EXIT_OK


COMMANDS: dict[str, Callable[[dict, Path, argparse.Namespace], int]] = {
    "gramcheck": cmd_gramcheck,
    "gradcheck": cmd_gradcheck,
    "equiv": cmd_equiv,
    "mc": cmd_mc,
    "fitkernel": cmd_fitkernel,
    "train": cmd_train,
    "convert": cmd_convert,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="luna", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="base seed (overrides the config)")
        p.add_argument("--out", type=Path, help=f"output root (default: $LUNA_OUT or ./{DEFAULT_OUT})")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for independent seeds")
        p.add_argument("--max-quadratic-n", type=int, dest="max_quadratic_n", help="cap on n for softmax in bench")
        p.add_argument("--print-schema", action="store_true", help="print the config schema and exit")
    return parser


def _load(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return doc


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        opts = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if opts.print_schema:
        print(json.dumps(schema(opts.command), indent=2))
        return EXIT_OK
    if opts.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    overrides = {"seed": opts.seed}
    if opts.command == "bench":
        overrides["max_quadratic_n"] = opts.max_quadratic_n
    elif opts.max_quadratic_n is not None:
        print("error: --max-quadratic-n only applies to bench", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve_config(opts.command, _load(opts.config), overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=cfg["log_level"], format="%(levelname)s %(name)s: %(message)s")
    root = opts.out or Path(cfg.get("output_dir") or os.environ.get("LUNA_OUT") or DEFAULT_OUT)
    cfg["output_dir"] = str(root)
    run = root / f"{opts.command}-{config_hash(cfg)}"
    run.mkdir(parents=True, exist_ok=True)
    write_json(run / "config.resolved.json", cfg)
    log.info("writing to %s", run)
    try:
        code = COMMANDS[opts.command](cfg, run, opts)
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"outputs: {run}")
    return code


if __name__ == "__main__":
    sys.exit(main())

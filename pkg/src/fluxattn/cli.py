"""Command-line pipeline: gen -> label -> fit -> train -> decode -> compare.

Every command writes its outputs plus a ``manifest.json`` (config, git
describe, seed, sha256 of every input) into ``--out``. Simulated runs are
byte-reproducible from the manifest.
"""
import argparse
import csv
import hashlib
import json
import subprocess
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .budget import LABEL_BLKS, fit_slope
from .errors import FluxError
from .pipeline import (
    evaluate_strategy,
    group_payload,
    iter_layer_steps,
    label_workload,
    measure,
    oracle_props,
    planners,
    plans_from_props,
    predicted_props,
)
from .predictor import (
    LabelDataset,
    TrainConfig,
    evaluate,
    load_labels,
    load_model,
    MeanPredictor,
    save_labels,
    save_model,
    split_by_sample,
    train,
)
from .scheduler import default_workers, enqueue_batch, run, run_baseline, task_from_plan
from .selector import dump_plans
from .workload import WorkloadSpec, export_trace, generate, import_trace

MANIFEST_VERSION = 1


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def write_manifest(out, command, args, inputs, outputs):
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "package_version": __version__,
        "command": command,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()},
        "seed": getattr(args, "seed", None),
        "git": git_describe(),
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": sorted(str(Path(p).name) for p in outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(path, what):
    if not Path(path).exists():
        raise FluxError("missing-input", f"{what} not found: {path}")
    return Path(path)


def _read_manifest(directory, command):
    path = _require(Path(directory) / "manifest.json", f"{command} manifest")
    m = json.loads(path.read_text())
    if m.get("manifest_version") != MANIFEST_VERSION:
        raise FluxError("version-mismatch", f"{path}: manifest version {m.get('manifest_version')}")
    if m.get("command") != command:
        raise FluxError("version-mismatch", f"{path} was written by '{m.get('command')}', expected '{command}'")
    return m


def _load_spec(args):
    spec = WorkloadSpec()
    if args.spec:
        spec = WorkloadSpec.from_json(_require(args.spec, "workload spec").read_text())
    if args.seed is not None:
        spec = WorkloadSpec(**{**asdict(spec), "seed": args.seed})
    return spec


def _traces(directory):
    _read_manifest(directory, "gen")
    paths = sorted(Path(directory).glob("trace_*.fxt"))
    if not paths:
        raise FluxError("missing-input", f"no traces in {directory}")
    return paths


def _write_csv(path, rows):
    rows = list(rows)
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# -- commands -----------------------------------------------------------------------

def cmd_gen(args):
    spec = _load_spec(args)
    args.seed = spec.seed
    out = args.out
    paths = []
    for i in range(args.samples):
        s = WorkloadSpec(**{**asdict(spec), "seed": spec.seed + i})
        w = generate(s)
        p = out / f"trace_{i:03d}.fxt"
        export_trace(w, p)
        paths.append(p)
        meta = {"spec": asdict(s), "archetypes": w.archetypes,
                "needles": [[l, h, n] for (l, h), n in sorted(w.needles.items())]}
        (out / f"trace_{i:03d}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        paths.append(out / f"trace_{i:03d}.json")
    write_manifest(out, "gen", args, [args.spec] if args.spec else [], paths)


def cmd_label(args):
    traces = _traces(args.input)
    parts, records = [], []
    for i, p in enumerate(traces):
        ds, recs = label_workload(import_trace(p), sample=i, tau=args.tau)
        parts.append(ds)
        records.extend(recs)
    ds = LabelDataset.concat(parts)
    save_labels(ds, args.out / "labels.fxl")
    _write_csv(args.out / "budgets.csv", records)
    write_manifest(args.out, "label", args, traces, [args.out / "labels.fxl", args.out / "budgets.csv"])


def cmd_fit(args):
    _read_manifest(args.input, "label")
    path = _require(Path(args.input) / "budgets.csv", "budget table")
    rows = list(csv.DictReader(open(path)))
    blks = [b for b in LABEL_BLKS if b > 1]
    out_rows = []
    for r in rows:
        b = [float(r[f"bgt_{x}"]) for x in blks]
        intercept, slope = fit_slope(blks, b)
        resid = np.asarray(b) - (intercept + slope * np.log2(blks))
        out_rows.append({"sample": r["sample"], "layer": r["layer"], "head": r["head"], "step": r["step"],
                         "streaming": r["streaming"], "slope": slope, "intercept": intercept,
                         "rms_residual": float(np.sqrt(np.mean(resid ** 2)))})
    _write_csv(args.out / "fit.csv", out_rows)
    slopes = np.array([r["slope"] for r in out_rows])
    retrieval = np.array([r["streaming"] != "True" for r in out_rows])
    summary = {
        "rows": len(out_rows),
        "retrieval_rows": int(retrieval.sum()),
        "frac_nonnegative_slope_retrieval": float(np.mean(slopes[retrieval] >= 0)) if retrieval.any() else None,
        "median_slope_retrieval": float(np.median(slopes[retrieval])) if retrieval.any() else None,
    }
    (args.out / "fit.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out, "fit", args, [path], [args.out / "fit.csv", args.out / "fit.json"])


def cmd_train(args):
    _read_manifest(args.input, "label")
    path = _require(Path(args.input) / "labels.fxl", "label file")
    ds = load_labels(path)
    args.seed = args.seed or 0
    cfg = TrainConfig(**{f.name: getattr(args, f.name) for f in fields(TrainConfig)})
    model = train(ds, cfg)
    save_model(model, args.out / "model.fxp")
    _write_csv(args.out / "history.csv", [{"step": s, "train_loss": a, "val_loss": b} for s, a, b in model.history])
    train_set, val = split_by_sample(ds, cfg.val_fraction, cfg.seed)
    metrics = {"n_params": model.n_params(), "train_rows": len(train_set), "val_rows": len(val)}
    if len(val):
        metrics["model"] = evaluate(model, val.X, val.Y)
        metrics["mean_baseline"] = evaluate(MeanPredictor(train_set.Y), val.X, val.Y)
    (args.out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out, "train", args, [path],
                   [args.out / "model.fxp", args.out / "history.csv", args.out / "metrics.json"])


def _model_path(args):
    if args.source != "predictor":
        return None
    if args.model is None:
        raise FluxError("missing-input", "--source predictor needs --model")
    d = Path(args.model)
    if d.is_dir():
        _read_manifest(d, "train")
        d = d / "model.fxp"
    return _require(d, "model file")


def cmd_decode(args):
    traces = _traces(args.input)
    model_path = _model_path(args)
    model = load_model(model_path) if model_path else None
    workers = default_workers()
    dev_rows, sched_rows = [], []
    plans_fh = open(args.out / "plans.jsonl", "w")
    trace_rows = []
    for ls in iter_layer_steps([import_trace(p) for p in traces], args.tau, with_features=model is not None):
        props = predicted_props(ls, model) if model else oracle_props(ls, args.tau)
        plans = plans_from_props(ls, props)
        dump_plans(plans, plans_fh, seq=ls.seq, layer=ls.layer, step=ls.step)
        for (dev, budget), (h, p) in zip(measure(ls, plans), enumerate(props)):
            dev_rows.append({"seq": ls.seq, "layer": ls.layer, "step": ls.step, "head": h,
                             "streaming": p.streaming, "budget": budget, "deviation": dev})
        tasks = [task_from_plan(p, ls.caches[0].dim, run=group_payload(ls, p) if args.mode == "exec" else None)
                 for p in plans if not p.streaming_group]
        q = enqueue_batch(tasks)
        rep = run(q, workers, args.mode) if args.policy == "priority" else run_baseline(q, workers, args.policy)
        for row in rep.trace:
            trace_rows.append({"seq": ls.seq, "layer": ls.layer, "step": ls.step, "group": row[0],
                               "worker": row[1], "start": row[2], "end": row[3]})
        sched_rows.append({"seq": ls.seq, "layer": ls.layer, "step": ls.step, "tasks": len(tasks),
                           "makespan": rep.makespan,
                           **{f"idle_{w.name}": w.idle_ratio for w in rep.workers}})
    plans_fh.close()
    _write_csv(args.out / "deviations.csv", dev_rows)
    _write_csv(args.out / "schedule.csv", sched_rows)
    _write_csv(args.out / "trace.csv", trace_rows)
    devs = np.array([r["deviation"] for r in dev_rows])
    summary = {
        "heads": int(devs.size),
        "frac_within_tau": float(np.mean(devs <= args.tau)),
        "delta": float(np.mean(devs > args.tau)),
        "mean_budget": float(np.mean([r["budget"] for r in dev_rows])),
        "tasks": int(sum(r["tasks"] for r in sched_rows)),
        "makespan": float(sum(r["makespan"] for r in sched_rows)),
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    outs = ["plans.jsonl", "deviations.csv", "schedule.csv", "trace.csv", "summary.json"]
    write_manifest(args.out, "decode", args, traces + ([model_path] if model_path else []),
                   [args.out / o for o in outs])


def cmd_compare(args):
    traces = _traces(args.input)
    model_path = _model_path(args) if args.model else None
    model = load_model(model_path) if model_path else None
    workloads = [import_trace(p) for p in traces]
    fixed = [(b, g) for b in args.blk for g in args.budget]
    rows = []
    for tau in args.tau_sweep or [args.tau]:
        layer_steps = list(iter_layer_steps(workloads, tau, with_features=model is not None))
        for name, planner in planners(tau, model, fixed).items():
            res = evaluate_strategy(name, layer_steps, planner, policy=args.policy)
            rows.append({"tau": tau, "policy": args.policy, **res.summary(tau)})
    _write_csv(args.out / "compare.csv", rows)
    (args.out / "compare.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out, "compare", args, traces + ([model_path] if model_path else []),
                   [args.out / "compare.csv", args.out / "compare.json"])


# -- argument parsing -------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fluxattn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_input=True):
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        if needs_input:
            sp.add_argument("--input", type=Path, required=True, help="upstream artifact directory")
        return sp

    g = common(sub.add_parser("gen", help="generate synthetic decode traces"), needs_input=False)
    g.add_argument("--spec", type=Path, help="WorkloadSpec JSON (defaults if omitted)")
    g.add_argument("--samples", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    lb = common(sub.add_parser("label", help="oracle budgets and features for every head"))
    lb.add_argument("--tau", type=float, default=0.10)
    lb.set_defaults(func=cmd_label)

    f = common(sub.add_parser("fit", help="refit budget-vs-granularity lines from a label run"))
    f.set_defaults(func=cmd_fit)

    t = common(sub.add_parser("train", help="train the head-property predictor"))
    for fld in fields(TrainConfig):
        if fld.name == "seed":
            continue
        t.add_argument(f"--{fld.name.replace('_', '-')}", dest=fld.name, type=type(fld.default), default=fld.default)
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (("decode", cmd_decode, "plan, schedule and measure decode steps"),
                               ("compare", cmd_compare, "compare strategies on the same traces")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--tau", type=float, default=0.10)
        sp.add_argument("--policy", choices=("priority", "no_parallel", "uniform", "length"), default="priority")
        sp.add_argument("--model", type=Path, help="train output directory or model file")
        sp.set_defaults(func=fn)
        if name == "decode":
            sp.add_argument("--source", choices=("oracle", "predictor"), default="oracle")
            sp.add_argument("--mode", choices=("sim", "exec"), default="sim")
        else:
            sp.add_argument("--source", choices=("oracle", "predictor"), default="predictor")
            sp.add_argument("--blk", type=int, nargs="+", default=[16, 32], help="fixed-baseline granularities")
            sp.add_argument("--budget", type=float, nargs="+", default=[0.05, 0.02], help="fixed-baseline budgets")
            sp.add_argument("--tau-sweep", type=float, nargs="+", help="repeat the comparison at each tau")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        args.func(args)
    except FluxError as exc:
        print(f"fluxattn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

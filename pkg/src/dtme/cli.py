"""Command-line front end: ``dtme gen-data | train | analyze | report``.

Exit codes: 0 success, 2 usage or validation problem, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .analyzer import ConflictReport
from .config import RunConfig, load_dataset_spec, load_run_config, process_env
from .errors import ContractError, NumericError, ShapeError, ValidationError
from .expansion import STRATEGIES, ExpansionPlan
from .io import file_sha256
from .multitask import Dataset, MetricTable, generate, load_dataset, save_dataset
from .runs import (assemble_report, check_run_dir, conflicts_jsonl, copy_file, hash_line, load_checkpoint,
                   locked_output, losses_csv, read_conflict_fractions, run_entry, save_checkpoint,
                   validate_report)
from .trainer import (RunRecord, build_model, collect_token_gradients, model_config_for, train_dtme,
                      train_joint, train_pcgrad, train_single_task)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MODES = ("joint", "st", "dtme", "pcgrad")


def _err(msg: str) -> None:
    print(f"dtme: error: {msg}", file=sys.stderr)


def _warn(msg: str) -> None:
    print(f"dtme: warning: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = load_dataset_spec(args.spec, env=process_env())
    if args.seed is not None:
        spec = type(spec).from_dict({**spec.to_dict(), "seed": args.seed})
    ds = generate(spec)
    with locked_output(Path(args.out), args.force) as out:
        h = save_dataset(out / "dataset.bin", ds)
    print(h)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _overrides(args) -> dict:
    mech = None
    if args.mechanisms is not None:
        from .config import _mechanisms
        try:
            mech = _mechanisms(args.mechanisms)
        except ValueError as exc:
            raise ValidationError(f"--mechanisms: {exc}") from None
    return {"seed": args.seed, "r": args.r, "beta": args.beta, "tokens_per_task": args.tokens_per_task,
            "timing": args.timing, "strategy": args.strategy, "steps": args.steps, "mechanisms": mech}


def _st_baselines(cfg: RunConfig, ds: Dataset, tasks: Sequence[int]):
    models, records = [], []
    for i in tasks:
        model = build_model(model_config_for(ds, tasks=[i], **cfg.model_kwargs()), cfg.get("seed"))
        records.append(train_single_task(model, ds, i, cfg.train_config()))
        models.append(model)
    return models, records


def _baselines_from_dir(path: Path, ds: Dataset) -> List[float]:
    f = path / "metrics.csv"
    if not f.is_file():
        raise ValidationError(f"baseline run {path} has no metrics.csv")
    table = MetricTable.from_csv(f.read_text())
    by_task = {r.task: r.model for r in table.rows}
    missing = [t.id for t in ds.tasks if t.id not in by_task]
    if missing:
        raise ValidationError(f"baseline run {path} lacks tasks {missing}")
    return [by_task[t.id] for t in ds.tasks]


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, env=process_env()).with_overrides(**_overrides(args))
    if args.mode not in MODES:
        raise ValidationError(f"invalid mode {args.mode!r}")
    ds = load_dataset(cfg.dataset_path)
    mode, seed = args.mode, cfg.get("seed")
    config_hash = cfg.hash(mode if args.task is None else f"{mode}:{args.task}")
    tcfg = cfg.train_config()
    K = len(ds.tasks)
    if args.task is not None and not 1 <= args.task <= K:
        raise ValidationError(f"--task must lie in 1..{K}")

    with locked_output(Path(args.out), args.force) as out:
        for stale in out.iterdir():
            if stale.name != ".lock" and stale.is_file():
                stale.unlink()
        (out / "config.txt").write_text(hash_line(config_hash) + cfg.to_text(mode))
        copy_file(cfg.dataset_path, out / "dataset.bin")

        plan = ExpansionPlan.empty(cfg.get("depth"), beta=cfg.get("beta"),
                                   tokens_per_task=cfg.get("tokens_per_task"),
                                   strategy=cfg.get("strategy"), seed=seed)
        if mode == "st":
            tasks = [args.task] if args.task is not None else [t.id for t in ds.tasks]
            models, records = _st_baselines(cfg, ds, tasks)
            specs = [ds.tasks[i - 1] for i in tasks]
            metrics = [r.metrics[0] for r in records]
            baselines = metrics
            plans = [plan] * len(models)
            overhead = 0.0
            snapshots = []
        else:
            if cfg.baselines_path is not None:
                baselines = _baselines_from_dir(cfg.baselines_path, ds)
            else:
                baselines = [r.metrics[0] for r in _st_baselines(cfg, ds, [t.id for t in ds.tasks])[1]]
            model = build_model(model_config_for(ds, **cfg.model_kwargs()), seed)
            if mode == "joint":
                rec = train_joint(model, ds, tcfg)
            elif mode == "pcgrad":
                rec = train_pcgrad(model, ds, tcfg)
            else:
                rec = train_dtme(model, ds, tcfg, cfg.dtme_settings())
                plan = rec.plan
                plan.seed = seed
            models, records, plans = [model], [rec], [plan]
            specs, tasks, metrics = list(ds.tasks), [t.id for t in ds.tasks], rec.metrics
            overhead = rec.overhead
            snapshots = rec.snapshots

        table = MetricTable.from_values(metrics, baselines, [s.lower_is_better for s in specs],
                                        [s.metric for s in specs])
        save_checkpoint(out / "checkpoint.bin", models, plans, seed, config_hash,
                        [r.tasks for r in records])
        (out / "plan.txt").write_text(hash_line(config_hash) + plans[0].to_text())
        (out / "losses.csv").write_text(losses_csv(records, config_hash))
        (out / "conflicts.jsonl").write_text(conflicts_jsonl(snapshots, config_hash))
        (out / "metrics.csv").write_text(hash_line(config_hash) + table.to_csv())
        v = cfg.v
        settings = {"strategy": v["strategy"], "beta": v["beta"], "timing": v["timing"],
                    "tokens_per_task": v["tokens_per_task"], "mechanisms": list(v["mechanisms"]), "r": v["r"]}
        final = [float(np.mean(r.losses[-10:, 0])) for r in records] if mode == "st" else \
            [float(x) for x in np.mean(records[0].losses[-10:], axis=0)]
        fractions = [(s.step, *s.fractions(), [int(c) for c in s.param_histogram]) for s in snapshots]
        entry = run_entry(str(out), mode, seed, config_hash, table, overhead, settings,
                          plans[0] if mode == "dtme" else None, fractions, final)
        report = assemble_report([entry])
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"mode={mode} seed={seed} delta_m={entry['delta_m']:.3f} overhead={overhead:.4f}% "
          f"config_hash={config_hash}")
    for row in table.rows:
        print(f"  task {row.task} {row.metric}: model={row.model:.4f} baseline={row.baseline:.4f}")
    if mode == "dtme":
        print("  plan: " + " ".join(f"{d}:{a}" for d, a in plans[0].actions.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _parse_r_list(text: str) -> List[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"--r must be a number or comma list, got {text!r}") from None
    if not values or any(not (np.isfinite(v) and v > 0) for v in values):
        raise ValidationError("--r values must be positive")
    return values


def cmd_analyze(args) -> int:
    rs = _parse_r_list(args.r)
    header, models = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    model = models[0]
    if model.config.num_tasks < 2:
        raise ValidationError("conflict analysis needs a multi-task checkpoint (K >= 2)")
    if model.config.num_tasks != len(ds.tasks):
        raise ValidationError(f"checkpoint has {model.config.num_tasks} tasks, dataset has {len(ds.tasks)}")
    if (model.config.tokens, model.config.in_dim) != ds.X.shape[1:]:
        raise ShapeError(f"checkpoint expects samples of shape {(model.config.tokens, model.config.in_dim)}, "
                         f"dataset has {ds.X.shape[1:]}")
    n = len(ds) if args.samples is None else min(args.samples, len(ds))
    if n <= 0:
        raise ValidationError("dataset is empty")
    tg = collect_token_gradients(model, ds.X[:n], [y[:n] for y in ds.Y], ds.tasks)
    text = []
    print(f"{'r':>8} {'layer':>5} {'m':>3} {'range_mass':>10} {'range_score':>11} {'null_score':>10}")
    for r in rs:
        bases = tg.bases(r)
        rep = ConflictReport(r, model.config.num_tasks, tg.conflicts(bases), bases)
        for rec in rep.records():
            print(f"{r:>8g} {rec['layer']:>5} {rec['m']:>3} {rec['range_mass']:>10.4f} "
                  f"{rec['range_score']:>11.4f} {rec['null_score']:>10.4f}")
        text.append(rep.dumps())
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ValidationError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(text))
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _entry_from_dir(path: Path) -> dict:
    rep = json.loads((path / "report.json").read_text())
    entry = dict(rep["runs"][0])
    table = MetricTable.from_csv((path / "metrics.csv").read_text())
    conflicts = path / "conflicts.jsonl"
    fractions = read_conflict_fractions(conflicts.read_text()) if conflicts.is_file() else []
    plan = None
    if entry["plan"] is not None and (path / "plan.txt").is_file():
        plan = ExpansionPlan.from_text((path / "plan.txt").read_text())
    return run_entry(str(path), entry["mode"], entry["seed"], entry["config_hash"], table,
                     entry["overhead_percent"], entry["settings"], plan, fractions, entry["final_losses"])


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cmd_report(args) -> int:
    entries, skipped, histories = [], [], {}
    for run in args.runs:
        path = Path(run)
        reason = "not a directory" if not path.is_dir() else check_run_dir(path)
        if reason is None:
            try:
                entries.append(_entry_from_dir(path))
                c = path / "conflicts.jsonl"
                histories[str(path)] = read_conflict_fractions(c.read_text()) if c.is_file() else []
                continue
            except (ValidationError, KeyError, ValueError, IndexError) as exc:
                reason = f"unreadable ({exc})"
        _warn(f"skipping {path}: {reason}")
        skipped.append({"path": str(path), "reason": reason})
    if not entries:
        raise ValidationError("no complete run directories given")
    report = assemble_report(entries, skipped)
    with locked_output(Path(args.out), args.force) as out:
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        hdr = ["mode", "strategy", "mechanisms", "seed", "delta_m"]
        timing = [[e["mode"], e["settings"]["strategy"], "+".join(e["settings"]["mechanisms"]),
                   e["settings"]["timing"], e["seed"], e["delta_m"]] for e in entries if e["mode"] == "dtme"]
        beta = [[e["mode"], e["settings"]["strategy"], "+".join(e["settings"]["mechanisms"]),
                 e["settings"]["beta"], e["seed"], e["delta_m"]] for e in entries if e["mode"] == "dtme"]
        (out / "timing_sweep.csv").write_text(_csv(sorted(timing, key=str), hdr[:3] + ["timing"] + hdr[3:]))
        (out / "beta_sweep.csv").write_text(_csv(sorted(beta, key=str), hdr[:3] + ["beta"] + hdr[3:]))
        hist_rows, series_rows = [], []
        for run, hist in histories.items():
            for step, rf, nf, counts in hist:
                series_rows.append([run, step, rf, nf])
                edges = np.linspace(-1.0, 1.0, len(counts) + 1)
                hist_rows += [[run, step, b, edges[b], edges[b + 1], c] for b, c in enumerate(counts)]
        (out / "cosine_histograms.csv").write_text(
            _csv(hist_rows, ["run", "step", "bin", "low", "high", "count"]))
        (out / "conflict_series.csv").write_text(
            _csv(series_rows, ["run", "step", "range_fraction", "null_fraction"]))
    for g in report["groups"]:
        print(f"{g['key']:<48} seeds={g['seeds']} delta_m_mean={g['delta_m_mean']:.3f}")
    for c in report["comparisons"]:
        print(f"seed {c['seed']}: {c['run']} gain vs joint = {c['gain']:+.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtme", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dtme {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-task dataset")
    g.add_argument("--spec", required=True, help="dataset spec file (key = value)")
    g.add_argument("--out", required=True, help="output directory (receives dataset.bin)")
    g.add_argument("--seed", type=int, help="override the spec seed")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one run into a run directory")
    t.add_argument("--mode", required=True, choices=MODES)
    t.add_argument("--config", required=True, help="run config file (key = value)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--task", type=int, help="single task id for --mode st (default: every task)")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--r", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--tokens-per-task", type=int, dest="tokens_per_task")
    t.add_argument("--timing", type=float)
    t.add_argument("--strategy", choices=STRATEGIES)
    t.add_argument("--mechanisms", help="TM, TE, TM+TE or none")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="token-space conflict analysis of a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--r", default="100", help="variance ratio, or a comma list for a sweep")
    a.add_argument("--samples", type=int, help="analyse only the first n training samples")
    a.add_argument("--out", required=True, help="conflict report (JSON lines)")
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="aggregate run directories into report.json and plot CSVs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ContractError, ShapeError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except NumericError as exc:
        _err(str(exc))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

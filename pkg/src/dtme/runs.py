"""
Run directories and their artifacts.

Layout of a run directory::

    config.txt       effective run config (key = value) plus mode and config_hash
    dataset.bin      copy of the dataset the run trained on
    plan.txt         expansion plan (all layers "none" unless mode is dtme)
    checkpoint.bin   parameters, model configs and plans (binary container)
    losses.csv       step,task,loss
    conflicts.jsonl  one conflict snapshot per line
    metrics.csv      task,metric,model,baseline,lower_is_better
    report.json      single-run report (validated against the shipped schema)

Every text artifact starts with ``# config_hash: <hash>`` (JSON artifacts carry
a ``config_hash`` field) so mixed-up files are detected.
"""

from __future__ import annotations

import csv
import io
import json
import os
import shutil
from contextlib import contextmanager
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from .errors import ValidationError
from .expansion import ExpansionPlan, apply_plan
from .io import read_container, write_container
from .model import ModelConfig, MultiTaskTransformer
from .multitask import MetricTable, delta_m
from .trainer import RunRecord, Snapshot

CHECKPOINT_MAGIC = b"DTMECKPT"
CHECKPOINT_VERSION = 1
REPORT_SCHEMA_VERSION = 1
ARTIFACTS = ("config.txt", "dataset.bin", "plan.txt", "checkpoint.bin", "losses.csv",
             "conflicts.jsonl", "metrics.csv", "report.json")
LOCK_NAME = ".lock"


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, models: Sequence[MultiTaskTransformer], plans: Sequence[ExpansionPlan],
                    seed: int, config_hash: str, tasks: Sequence[Sequence[int]],
                    extra: Optional[dict] = None) -> None:
    """One or more models (several for single-task runs) in one container."""
    arrays: Dict[str, np.ndarray] = {}
    entries = []
    for k, (model, plan, ts) in enumerate(zip(models, plans, tasks)):
        entries.append({"config": model.config.to_dict(), "plan": plan.to_text(), "tasks": list(ts),
                        "params": list(model.params)})
        for name, t in model.params.items():
            arrays[f"{k}/{name}"] = t.data
    header = {"version": CHECKPOINT_VERSION, "seed": seed, "config_hash": config_hash, "models": entries,
              **(extra or {})}
    write_container(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path) -> Tuple[dict, List[MultiTaskTransformer]]:
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {header.get('version')}")
    models = []
    for k, entry in enumerate(header["models"]):
        model = MultiTaskTransformer(ModelConfig.from_dict(entry["config"]))
        plan = ExpansionPlan.from_text(entry["plan"])
        apply_plan(model, plan)
        state = {name: arrays[f"{k}/{name}"] for name in entry["params"]}
        model.load_state_dict(state)
        models.append(model)
    return header, models


# ---------------------------------------------------------------------------
# Text artifacts
# ---------------------------------------------------------------------------

def hash_line(config_hash: str) -> str:
    return f"# config_hash: {config_hash}\n"


def read_hash_line(text: str) -> Optional[str]:
    first = text.splitlines()[0] if text else ""
    if first.startswith("# config_hash:"):
        return first.split(":", 1)[1].strip()
    return None


def losses_csv(records: Sequence[RunRecord], config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(hash_line(config_hash))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "task", "loss"])
    for rec in records:
        for step in range(rec.losses.shape[0]):
            for col, task in enumerate(rec.tasks):
                w.writerow([step, task, repr(float(rec.losses[step, col]))])
    return buf.getvalue()


def conflicts_jsonl(snapshots: Sequence[Snapshot], config_hash: str) -> str:
    return "".join(json.dumps({"config_hash": config_hash, **s.to_dict()}, sort_keys=True) + "\n"
                   for s in snapshots)


def read_conflict_fractions(text: str) -> List[Tuple[int, float, float, List[int]]]:
    out = []
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append((rec["step"], rec["range_fraction"], rec["null_fraction"], rec["param_histogram"]))
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def report_schema() -> dict:
    return json.loads(resources.files("dtme").joinpath("schemas/report.schema.json").read_text())


def validate_report(report: dict) -> None:
    try:
        jsonschema.validate(report, report_schema())
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"report does not match schema: {exc.message}") from None


def reduction(first: float, last: float) -> float:
    return 100.0 * (first - last) / first if first else 0.0


def metric_rows(table: MetricTable) -> List[dict]:
    return [{"task": r.task, "metric": r.metric, "model": r.model, "baseline": r.baseline,
             "lower_is_better": r.lower_is_better} for r in table.rows]


def run_entry(path: str, mode: str, seed: int, config_hash: str, table: MetricTable,
              overhead: float, settings: dict, plan: Optional[ExpansionPlan],
              fractions: Sequence[Tuple[int, float, float, List[int]]], final_losses: Sequence[float]) -> dict:
    red = None
    if len(fractions) >= 2:
        (_, r0, n0, _), (_, r1, n1, _) = fractions[0], fractions[-1]
        red = {"range": reduction(r0, r1), "null": reduction(n0, n1)}
    return {
        "path": path, "mode": mode, "seed": seed, "config_hash": config_hash,
        "metrics": metric_rows(table),
        "delta_m": round(delta_m(table), 3),
        "overhead_percent": overhead,
        "conflict_reduction": red,
        "settings": settings,
        "plan": None if plan is None else [{"layer": d, "action": a} for d, a in plan.actions.items()],
        "final_losses": [float(v) for v in final_losses],
    }


def group_key(entry: dict) -> str:
    s = entry["settings"]
    if entry["mode"] != "dtme":
        return entry["mode"]
    return (f"dtme/{s['strategy']}/{'+'.join(s['mechanisms']) or 'none'}"
            f"/beta={s['beta']}/timing={s['timing']}/t={s['tokens_per_task']}")


def assemble_report(entries: Sequence[dict], skipped: Sequence[dict] = ()) -> dict:
    groups: Dict[str, List[dict]] = {}
    for e in entries:
        groups.setdefault(group_key(e), []).append(e)
    group_rows = []
    for key in sorted(groups):
        es = sorted(groups[key], key=lambda e: (e["seed"], e["path"]))
        dms = [e["delta_m"] for e in es]
        group_rows.append({"key": key, "mode": es[0]["mode"], "seeds": [e["seed"] for e in es],
                           "delta_m": dms, "delta_m_mean": round(float(np.mean(dms)), 3),
                           "overhead_percent_mean": float(np.mean([e["overhead_percent"] for e in es]))})
    joint = {}
    for e in entries:
        if e["mode"] == "joint":
            joint.setdefault(e["seed"], e)
    comparisons = []
    for e in sorted(entries, key=lambda e: (e["seed"], e["path"])):
        base = joint.get(e["seed"])
        if base is None or e is base or e["mode"] in ("joint", "st"):
            continue
        comparisons.append({"seed": e["seed"], "run": e["path"], "baseline_run": base["path"],
                            "delta_m": e["delta_m"], "baseline_delta_m": base["delta_m"],
                            "gain": round(e["delta_m"] - base["delta_m"], 3)})
    report = {"schema_version": REPORT_SCHEMA_VERSION, "runs": list(entries), "groups": group_rows,
              "comparisons": comparisons, "skipped": list(skipped)}
    validate_report(report)
    return report


# ---------------------------------------------------------------------------
# Run directory handling
# ---------------------------------------------------------------------------

@contextmanager
def locked_output(out: Path, force: bool) -> Iterator[Path]:
    """Create (or, with force, reuse) an output directory and hold its lock file."""
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise ValidationError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(f"{out} is locked by another invocation (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        existing = [p for p in out.iterdir() if p.name != LOCK_NAME]
        if existing and not force:
            raise ValidationError(f"{out} is not empty; pass --force to overwrite")
        yield out
    finally:
        lock.unlink(missing_ok=True)


def copy_file(src: Path, dst: Path) -> None:
    if Path(src).resolve() != Path(dst).resolve():
        shutil.copyfile(src, dst)


def check_run_dir(path: Path) -> Optional[str]:
    """None if complete and hash-consistent, else a reason to skip it."""
    missing = [a for a in ("config.txt", "metrics.csv", "report.json") if not (path / a).is_file()]
    if missing:
        return f"missing {', '.join(missing)}"
    cfg_hash = read_hash_line((path / "config.txt").read_text())
    for name in ("metrics.csv", "losses.csv"):
        f = path / name
        if f.is_file() and read_hash_line(f.read_text()) != cfg_hash:
            return f"{name} config hash does not match config.txt"
    try:
        rep = json.loads((path / "report.json").read_text())
    except json.JSONDecodeError:
        return "report.json is not valid JSON"
    if any(r.get("config_hash") != cfg_hash for r in rep.get("runs", [])):
        return "report.json config hash does not match config.txt"
    return None

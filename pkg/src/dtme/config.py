"""
Schemas for the two flat text files the CLI reads: dataset specs and run
configs. Both use ``key = value`` lines (see ``dtme.io``); every field, its
type and default is listed below and in the README.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .errors import ValidationError
from .expansion import STRATEGIES
from .io import Field, choice, format_kv, list_of, parse_kv, text_sha256
from .model import TE_ATTENTION_MODES, ModelConfig
from .multitask import LOSS_KINDS, SyntheticDatasetSpec, TaskSpec
from .trainer import OPTIMIZERS, DTMESettings, TrainConfig

CONFIG_VERSION = 1


def _task_list(text: str) -> Tuple[Tuple[str, int], ...]:
    """``cross-entropy:4, l1:4`` -> ((loss, out_dim), ...)."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        loss, sep, dim = item.partition(":")
        if not sep or loss not in LOSS_KINDS:
            raise ValueError(f"task entry {item!r} must look like <loss>:<out_dim> with loss in {LOSS_KINDS}")
        out.append((loss, int(dim)))
    if not out:
        raise ValueError("at least one task is required")
    return tuple(out)


def _mechanisms(text: str) -> Tuple[str, ...]:
    items = tuple(x.strip().upper() for x in text.replace("+", ",").split(",") if x.strip())
    if any(x not in ("TM", "TE", "NONE") for x in items):
        raise ValueError("mechanisms must be TM, TE, TM+TE or none")
    return tuple(x for x in items if x != "NONE")


def _positive_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise ValueError("must be positive")
    return v


DATASET_FIELDS = (
    Field("version", int, CONFIG_VERSION),
    Field("seed", int, 0, "generator seed"),
    Field("n", int, 256, "training samples"),
    Field("n_test", int, 256, "held-out samples"),
    Field("grid", int, 8, "token grid side; N = grid^2"),
    Field("in_dim", int, 24, "input channels per token"),
    Field("latent", int, 24, "latent factors per token"),
    Field("features", int, 8, "latent directions each task reads"),
    Field("kappa", float, 1.0, "conflict knob in [0, 1]"),
    Field("noise", float, 0.05, "input noise std"),
    Field("smooth", lambda s: s.lower() in ("1", "true", "yes", "on"), True, "3x3 spatial smoothing"),
    Field("tasks", _task_list, (("cross-entropy", 4), ("l1", 4), ("l1", 4)), "loss:out_dim list"),
)

RUN_FIELDS = (
    Field("version", int, CONFIG_VERSION),
    Field("dataset", str, None, "path to dataset.bin (relative to the config file)"),
    Field("baselines", str, "", "optional st run directory providing baseline metrics"),
    # model
    Field("depth", int, 6), Field("hidden", int, 32), Field("heads", int, 2),
    Field("mlp_ratio", int, 4), Field("te_attention", choice(*TE_ATTENTION_MODES), "additive"),
    # optimisation
    Field("steps", int, 300), Field("batch_size", int, 8),
    Field("optimizer", choice(*OPTIMIZERS), "adam"), Field("lr", float, 1e-3),
    Field("beta1", float, 0.9), Field("beta2", float, 0.999), Field("weight_decay", float, 1e-6),
    Field("poly_power", float, 0.9), Field("seed", int, 0),
    Field("monitor_every", int, 100), Field("monitor_samples", int, 16), Field("measure_samples", int, 0),
    # expansion
    Field("timing", float, 0.05), Field("r", _positive_float, 100.0), Field("beta", float, 0.5),
    Field("tokens_per_task", int, 6), Field("strategy", choice(*STRATEGIES), "standard"),
    Field("mechanisms", _mechanisms, ("TM", "TE")),
)


def dataset_spec_from_values(v: Mapping[str, Any]) -> SyntheticDatasetSpec:
    tasks = tuple(TaskSpec(i + 1, loss, dim) for i, (loss, dim) in enumerate(v["tasks"]))
    return SyntheticDatasetSpec(seed=v["seed"], n=v["n"], n_test=v["n_test"], grid=v["grid"],
                                in_dim=v["in_dim"], latent=v["latent"], features=v["features"],
                                kappa=v["kappa"], noise=v["noise"], smooth=v["smooth"], tasks=tasks)


def load_dataset_spec(path, env: Optional[Mapping[str, str]] = None) -> SyntheticDatasetSpec:
    text = _read(path)
    values = parse_kv(text, DATASET_FIELDS, str(path), env=env)
    _check_version(values, path)
    try:
        return dataset_spec_from_values(values)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    values: Tuple[Tuple[str, Any], ...]
    base_dir: str = "."

    @property
    def v(self) -> Dict[str, Any]:
        return dict(self.values)

    def get(self, key: str):
        return self.v[key]

    @property
    def dataset_path(self) -> Path:
        p = Path(self.get("dataset"))
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def baselines_path(self) -> Optional[Path]:
        b = self.get("baselines")
        if not b:
            return None
        p = Path(b)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def train_config(self) -> TrainConfig:
        v = self.v
        return TrainConfig(steps=v["steps"], batch_size=v["batch_size"], optimizer=v["optimizer"], lr=v["lr"],
                           beta1=v["beta1"], beta2=v["beta2"], weight_decay=v["weight_decay"],
                           poly_power=v["poly_power"], seed=v["seed"], timing=v["timing"],
                           monitor_every=v["monitor_every"], monitor_samples=v["monitor_samples"],
                           measure_samples=v["measure_samples"])

    def dtme_settings(self) -> DTMESettings:
        v = self.v
        return DTMESettings(r=v["r"], beta=v["beta"], tokens_per_task=v["tokens_per_task"],
                            strategy=v["strategy"], mechanisms=v["mechanisms"])

    def model_kwargs(self) -> Dict[str, Any]:
        v = self.v
        return {"depth": v["depth"], "hidden": v["hidden"], "heads": v["heads"], "mlp_ratio": v["mlp_ratio"],
                "te_attention": v["te_attention"]}

    def with_overrides(self, **kw) -> "RunConfig":
        v = self.v
        for k, val in kw.items():
            if val is not None:
                if k not in v:
                    raise ValidationError(f"unknown config field {k!r}")
                v[k] = val
        return RunConfig(tuple(v.items()), self.base_dir)

    def to_text(self, mode: str) -> str:
        """Canonical text; the config hash is taken over this (mode included)."""
        body = format_kv({"mode": mode, **self.v})
        return body

    def hash(self, mode: str) -> str:
        return text_sha256(self.to_text(mode))


def load_run_config(path, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    text = _read(path)
    values = parse_kv(text, RUN_FIELDS, str(path), env=env)
    _check_version(values, path)
    cfg = RunConfig(tuple(values.items()), str(Path(path).parent))
    # surface range errors with the file name
    try:
        cfg.train_config()
        cfg.dtme_settings()
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return cfg


def _read(path) -> str:
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise ValidationError(f"{path}: file not found") from None
    except UnicodeDecodeError:
        raise ValidationError(f"{path}: not a UTF-8 text file") from None


def _check_version(values: Mapping[str, Any], path) -> None:
    if values["version"] != CONFIG_VERSION:
        raise ValidationError(f"{path}: unsupported version {values['version']} (expected {CONFIG_VERSION})")


def process_env() -> Dict[str, str]:
    return {k: v for k, v in os.environ.items() if k.startswith("DTME_")}

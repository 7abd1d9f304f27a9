"""Flat ``key=value`` run configuration with a typed key registry.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Every problem in a file is collected and reported together, each with its
line number, instead of stopping at the first one.
"""
from __future__ import annotations

import difflib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .metric_ensemble import MetricKind
from .simgen import SimParams
from .trainer import TrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: Any
    doc: str
    check: Callable[[Any], str | None] | None = None


def _at_least(lo):
    return lambda v: None if v >= lo else f"must be ≥ {lo}"


def _positive(v):
    return None if v > 0 else "must be > 0"


def _unit_open(v):
    return None if 0 < v < 1 else "must be in (0, 1)"


def _fraction(v):
    return None if 0 <= v < 1 else "must be in [0, 1)"


def _metric(v):
    kinds = [k.value for k in MetricKind]
    return None if v in kinds else f"must be one of {', '.join(kinds)}"


_SIM = SimParams()
_TRAIN = TrainConfig()

REGISTRY: dict[str, Key] = {k.name: k for k in [
    Key("seed", int, 1, "master seed; every component seed is derived from it"),
    # simulator
    Key("n_users", int, _SIM.n_users, "simulated users", _at_least(1)),
    Key("n_items", int, _SIM.n_items, "simulated items", _at_least(8)),
    Key("clicks_per_day", int, _SIM.clicks_per_day, "clicks on an ordinary day", _at_least(1)),
    Key("dp_traffic", float, _SIM.dp_traffic, "click multiplier on promotion days", _positive),
    Key("base_cvr", float, _SIM.base_cvr, "target mean conversion rate", _unit_open),
    Key("occasion_boost", float, _SIM.occasion_boost, "scale of occasion-specific effects", _at_least(0)),
    Key("drift_rate", float, _SIM.drift_rate, "trend rotation per week (radians)", _at_least(0)),
    Key("drift_scale", float, _SIM.drift_scale, "trend magnitude (logit units)", _at_least(0)),
    Key("affinity_scale", float, _SIM.affinity_scale, "weight of user-item affinity", _at_least(0)),
    Key("n_days", int, _SIM.n_days, "calendar length", _at_least(2)),
    Key("train_days", int, _SIM.train_days, "days in the training window D", _at_least(1)),
    Key("recent_days", int, _SIM.recent_days, "days in the recent window D_r", _at_least(1)),
    Key("promo_period", int, _SIM.promo_period, "days between promotion starts (0 = none)", _at_least(0)),
    Key("promo_offset", int, _SIM.promo_offset, "day of the first promotion", _at_least(0)),
    Key("promo_length", int, _SIM.promo_length, "days per promotion", _at_least(1)),
    Key("bp_window", int, _SIM.bp_window, "days tagged before-promotion", _at_least(0)),
    Key("ap_window", int, _SIM.ap_window, "days tagged after-promotion", _at_least(0)),
    # features
    Key("seq_len", int, 30, "behavior sequence length t", _at_least(1)),
    Key("support_cap", int, 50_000, "max samples per support set", _at_least(1)),
    # training
    Key("batch_size", int, _TRAIN.batch_size, "mini-batch size", _at_least(1)),
    Key("learning_rate", float, _TRAIN.learning_rate, "Adagrad learning rate", _positive),
    Key("epochs_base", int, _TRAIN.epochs_base, "stage-1 epochs", _at_least(0)),
    Key("epochs_meta", int, _TRAIN.epochs_meta, "stage-2 epochs", _at_least(0)),
    Key("epochs_finetune", int, _TRAIN.epochs_finetune, "BASE-F epochs", _at_least(0)),
    Key("finetune_lr_scale", float, _TRAIN.finetune_lr_scale, "BASE-F learning-rate multiplier", _positive),
    Key("patience", int, _TRAIN.patience, "early-stopping patience (epochs)", _at_least(1)),
    Key("val_fraction", float, _TRAIN.val_fraction, "held-out share for early stopping", _fraction),
    Key("metric_kind", str, _TRAIN.metric_kind, "distance metric for stage 2", _metric),
    Key("calibrate_epn", bool, _TRAIN.calibrate_epn, "start the EPN bias at the prior log-odds"),
]}

TRAIN_KEYS = ("batch_size", "learning_rate", "epochs_base", "epochs_meta", "epochs_finetune",
              "finetune_lr_scale", "patience", "val_fraction", "metric_kind", "calibrate_epn")
SIM_KEYS = ("n_users", "n_items", "clicks_per_day", "dp_traffic", "base_cvr", "occasion_boost",
            "drift_rate", "drift_scale", "affinity_scale", "n_days", "train_days", "recent_days",
            "promo_period", "promo_offset", "promo_length", "bp_window", "ap_window")


class ConfigError(ValueError):
    """All problems found in one configuration, as ``(line_no, message)`` pairs."""

    def __init__(self, problems: list[tuple[int, str]], source: str = "<config>"):
        self.problems = problems
        self.source = source
        body = "\n".join(f"  {source}:{ln}: {msg}" if ln else f"  {source}: {msg}" for ln, msg in problems)
        super().__init__(f"{len(problems)} configuration error(s):\n{body}")


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v.default for k, v in REGISTRY.items()})
    source: str = ""

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def train_config(self, **overrides) -> TrainConfig:
        kw = {k: self.values[k] for k in TRAIN_KEYS}
        kw["seed"] = self.values["seed"]
        kw.update(overrides)
        return TrainConfig(**kw)

    def sim_params(self) -> SimParams:
        return SimParams(seed=self.values["seed"], **{k: self.values[k] for k in SIM_KEYS})

    def with_overrides(self, **overrides) -> "RunConfig":
        problems = []
        values = dict(self.values)
        for key, raw in overrides.items():
            if raw is None:
                continue
            value, err = _coerce(key, raw)
            if err:
                problems.append((0, err))
            else:
                values[key] = value
        if problems:
            raise ConfigError(problems, "command line")
        return RunConfig(values, self.source)

    def render(self) -> str:
        return "".join(f"{k}={_render(self.values[k])}\n" for k in sorted(self.values))


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, raw) -> tuple[Any, str | None]:
    spec = REGISTRY[key]
    try:
        if spec.type is bool:
            if isinstance(raw, bool):
                value = raw
            elif str(raw).strip().lower() in ("1", "true", "yes", "on"):
                value = True
            elif str(raw).strip().lower() in ("0", "false", "no", "off"):
                value = False
            else:
                return None, f"{key}: expected a boolean, got {raw!r}"
        elif spec.type is int:
            if isinstance(raw, float) and not raw.is_integer():
                return None, f"{key}: expected an integer, got {raw!r}"
            value = int(str(raw).strip()) if not isinstance(raw, (int, float)) else int(raw)
        elif spec.type is float:
            value = float(raw)
        else:
            value = str(raw).strip()
    except ValueError:
        return None, f"{key}: expected {spec.type.__name__}, got {raw!r}"
    if spec.check is not None:
        err = spec.check(value)
        if err:
            return None, f"{key} {err}"
    return value, None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse config text; raises :class:`ConfigError` listing every bad line."""
    values = {k: v.default for k, v in REGISTRY.items()}
    problems: list[tuple[int, str]] = []
    seen: dict[str, int] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            problems.append((line_no, f"expected key=value, got {body!r}"))
            continue
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in REGISTRY:
            close = difflib.get_close_matches(key, REGISTRY, n=1, cutoff=0.6)
            hint = f"; did you mean '{close[0]}'?" if close else ""
            problems.append((line_no, f"unknown key '{key}'{hint}"))
            continue
        if key in seen:
            problems.append((line_no, f"duplicate key '{key}' (first set on line {seen[key]})"))
            continue
        seen[key] = line_no
        value, err = _coerce(key, raw)
        if err:
            problems.append((line_no, err))
        else:
            values[key] = value
    if not problems:
        problems = [(seen.get("train_days", 0), msg) for msg in _cross_checks(values)]
    if problems:
        raise ConfigError(problems, source)
    return RunConfig(values, source)


def _cross_checks(values: dict[str, Any]) -> list[str]:
    out = []
    if not values["recent_days"] <= values["train_days"] < values["n_days"]:
        out.append("need recent_days ≤ train_days < n_days")
    return out


def validate_config(path: str | Path | None) -> RunConfig:
    """Load and check a config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([(0, f"cannot read config: {exc.strerror or exc}")], str(p)) from exc
    return parse_config(text, str(p))


def describe_keys() -> str:
    width = max(map(len, REGISTRY))
    return "\n".join(f"{k:<{width}}  {_render(v.default):<10} {v.doc}" for k, v in REGISTRY.items()) + "\n"

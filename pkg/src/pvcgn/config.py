"""Flat ``key = value`` configuration files, ``--set`` overrides and the run config."""

from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigError
from .graphs import Selection
from .ingest import parse_clock


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def read_kv_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = (part.strip() for part in item.split("=", 1))
        out[key] = val
    return out


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def coerce(raw: str, like):
    """Convert ``raw`` to the type of the default value ``like``."""
    if isinstance(like, bool):
        return _parse_bool(raw)
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        if like and isinstance(like[0], float):
            return _parse_floats(raw)
        return _parse_ints(raw)
    return raw


def parse_span(text: str) -> tuple[dt.date, dt.date] | None:
    """``YYYY-MM-DD..YYYY-MM-DD`` (inclusive) or empty."""
    if not text:
        return None
    try:
        a, b = text.split("..")
        first, last = dt.date.fromisoformat(a.strip()), dt.date.fromisoformat(b.strip())
    except ValueError as exc:
        raise ConfigError(f"bad date span {text!r}: expected YYYY-MM-DD..YYYY-MM-DD") from exc
    if last < first:
        raise ConfigError(f"date span {text!r} ends before it starts")
    return first, last


def parse_windows(text: str) -> tuple[tuple[int, int], ...]:
    """``HH:MM-HH:MM,...`` -> minute-of-day pairs."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            a, b = part.split("-")
            out.append((parse_clock(a.strip()), parse_clock(b.strip())))
        except ValueError as exc:
            raise ConfigError(f"bad time window {part!r}") from exc
    return tuple(out)


@dataclass(frozen=True)
class RunConfig:
    # data
    data: str = ""
    stations: str = ""
    records: str = ""
    topology: str = ""
    bin_minutes: int = 15
    service_start: str = "05:30"
    service_end: str = "23:30"
    train_span: str = ""
    val_span: str = ""
    test_span: str = ""
    split_fractions: tuple[float, ...] = (0.7, 0.15, 0.15)
    # graphs
    sim_select: str = "topk:10"
    corr_select: str = "topk:10"
    dtw_normalize: bool = True
    # model
    d: int = 256
    layers: int = 2
    n: int = 4
    m: int = 4
    graphs: str = "psc"
    use_global: bool = True
    global_recurrence: str = "fused"
    # training
    epochs: int = 200
    batch_size: int = 32
    lr0: float = 1e-3
    lr_decay: float = 0.1
    decay_epochs: tuple[int, ...] = (100, 150)
    grad_clip_norm: float = 5.0
    loss: str = "mae"
    target_train_mae: float = 0.0  # 0 disables early stopping
    scheduled_sampling: float = 0.0
    precision: str = "f64"
    seed: int = 0
    # evaluation
    ha_k: int = 2
    rush_windows: str = "07:30-09:30,17:30-19:30"
    top_fraction: float = 0.25
    mape_floor: float = 0.0
    od_mape_min: float = 10.0

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        known = {f.name: getattr(base, f.name) for f in fields(cls)}
        updates = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                updates[key] = coerce(raw, known[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        cfg = dataclasses.replace(base, **updates)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.bin_minutes <= 0:
            raise ConfigError("bin_minutes must be positive")
        start, end = parse_clock(self.service_start), parse_clock(self.service_end)
        if end <= start:
            raise ConfigError("service_end must be after service_start")
        for key in ("d", "layers", "n", "m", "epochs", "batch_size", "ha_k"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions):
            raise ConfigError("split_fractions needs three non-negative values")
        for key in ("train_span", "val_span", "test_span"):
            parse_span(getattr(self, key))
        Selection.parse(self.sim_select)
        Selection.parse(self.corr_select)
        if not self.graphs or set(self.graphs) - set("psc"):
            raise ConfigError("graphs must be a non-empty subset of 'psc'")
        if self.global_recurrence not in ("fused", "own"):
            raise ConfigError("global_recurrence must be 'fused' or 'own'")
        if self.loss not in ("mae", "mse"):
            raise ConfigError("loss must be 'mae' or 'mse'")
        if self.precision not in ("f64", "f32"):
            raise ConfigError("precision must be f64 or f32")
        if not 0 < self.top_fraction <= 1:
            raise ConfigError("top_fraction must lie in (0, 1]")
        for a, b in parse_windows(self.rush_windows):
            if not start <= a < b <= end:
                raise ConfigError("rush windows must be non-empty and inside service hours")
        if not self.lr0 > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("need lr0 > 0 and 0 < lr_decay <= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_run_config(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults <- config file <- ``--set`` overrides, validated."""
    values: dict[str, str] = {}
    if path:
        values.update(read_kv_file(path))
    values.update(parse_overrides(overrides))
    return RunConfig.from_mapping(values)

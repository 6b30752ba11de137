"""Forecast metrics per horizon, evaluation slices and the historical-average baseline."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BaselineError, ConfigError, EmptySliceError, ShapeError
from .ingest import NormStats, RidershipTensor, WindowSample, stack_windows, zscore_invert

DEFAULT_RUSH = ((7 * 60 + 30, 9 * 60 + 30), (17 * 60 + 30, 19 * 60 + 30))


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    mape: float | None  # percent; None when no entry passes the floor
    count: int
    mape_excluded: int


def metrics(pred, truth, mape_floor: float = 0.0, inclusive: bool = False) -> Metrics:
    """RMSE, MAE and MAPE (percent) in the original scale.

    MAPE averages ``|p - x| / x`` over entries with ``x > mape_floor``
    (``x >= mape_floor`` when ``inclusive``); the others only count toward
    RMSE and MAE.
    """
    p = np.asarray(pred, dtype=np.float64).ravel()
    x = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != x.shape:
        raise ShapeError(f"prediction size {p.size} differs from truth size {x.size}")
    if p.size == 0:
        raise EmptySliceError("no entries to score")
    err = p - x
    abs_err = np.abs(err)
    mae = float(np.mean(abs_err))
    # scale by the largest error so tiny or huge errors neither underflow nor overflow when squared
    scale = float(abs_err.max())
    rmse = scale * math.sqrt(float(np.mean((abs_err / scale) ** 2))) if scale > 0 else 0.0
    keep = x >= mape_floor if inclusive else x > mape_floor
    if mape_floor <= 0:
        keep &= x > 0
    n_keep = int(keep.sum())
    mape = float(np.mean(np.abs(err[keep]) / x[keep]) * 100.0) if n_keep else None
    return Metrics(rmse, mae, mape, int(p.size), int(p.size - n_keep))


@dataclass
class MetricsReport:
    method: str
    slice: str
    horizons: list[Metrics]
    slice_excluded: list[int] = field(default_factory=list)  # entries the slice removed, per horizon

    def check(self) -> None:
        """rmse >= mae >= 0 on every horizon (power-mean inequality)."""
        for h, r in enumerate(self.horizons, start=1):
            if not (r.rmse >= r.mae * (1 - 1e-12) and r.mae >= 0):
                raise AssertionError(f"{self.method}/{self.slice} horizon {h}: rmse {r.rmse} < mae {r.mae}")
            if r.mape is not None and r.mape < 0:
                raise AssertionError("negative mape")

    @property
    def label(self) -> str:
        return f"{self.method}[{self.slice}]"


def _fmt(v: float | None) -> str:
    return "N/A" if v is None else repr(float(v))


METRIC_NAMES = ("rmse", "mae", "mape")


def report_rows(reports: Sequence[MetricsReport]) -> list[list[str]]:
    """Rows of horizon x metric, one column per report."""
    if not reports:
        raise ConfigError("no reports")
    m = len(reports[0].horizons)
    if any(len(r.horizons) != m for r in reports):
        raise ShapeError("reports disagree on the number of horizons")
    rows = [["horizon", "metric", *(r.label for r in reports)]]
    for h in range(m):
        for name in METRIC_NAMES:
            rows.append([str(h + 1), name, *(_fmt(getattr(r.horizons[h], name)) for r in reports)])
    return rows


def write_report_csv(path: str | Path, reports: Sequence[MetricsReport]) -> None:
    for r in reports:
        r.check()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(report_rows(reports))


def format_table(reports: Sequence[MetricsReport], bin_minutes: int | None = None) -> str:
    rows = report_rows(reports)
    if bin_minutes:
        for row in rows[1:]:
            row[0] = f"{int(row[0]) * bin_minutes} min"
    body = [rows[0]] + [
        row[:2] + [c if c == "N/A" else (f"{float(c):.2f}%" if row[1] == "mape" else f"{float(c):.3f}") for c in row[2:]]
        for row in rows[1:]
    ]
    widths = [max(len(r[i]) for r in body) for i in range(len(body[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SliceSpec:
    kind: str = "whole"  # whole | rush_hours | top_quartile
    rush_windows: tuple[tuple[int, int], ...] = DEFAULT_RUSH
    fraction: float = 0.25

    def __post_init__(self) -> None:
        if self.kind not in ("whole", "rush_hours", "top_quartile"):
            raise ConfigError(f"unknown slice kind {self.kind!r}")
        if not 0 < self.fraction <= 1:
            raise ConfigError("slice fraction must lie in (0, 1]")
        for a, b in self.rush_windows:
            if not 0 <= a < b <= 24 * 60:
                raise ConfigError("rush windows must be non-empty clock intervals")

    @classmethod
    def from_name(cls, name: str, rush_windows=DEFAULT_RUSH, fraction: float = 0.25) -> "SliceSpec":
        kinds = {"whole": "whole", "rush": "rush_hours", "rush_hours": "rush_hours", "top25": "top_quartile", "top_quartile": "top_quartile"}
        if name not in kinds:
            raise ConfigError(f"unknown slice {name!r}; expected whole, rush or top25")
        return cls(kinds[name], tuple(rush_windows), fraction)

    @property
    def label(self) -> str:
        return {"whole": "whole", "rush_hours": "rush", "top_quartile": "top"}[self.kind]


def slice_rush_hours(
    samples: Sequence[WindowSample], tensor: RidershipTensor, m: int, windows=DEFAULT_RUSH
) -> np.ndarray:
    """Mask ``[S, m]``: target bin overlaps some half-open rush window ``[start, end)``."""
    clocks = tensor.bin_clocks()
    width = tensor.bin_minutes
    out = np.zeros((len(samples), m), dtype=bool)
    for i, s in enumerate(samples):
        for h in range(m):
            c = clocks[s.t_anchor + 1 + h]
            out[i, h] = any(c < b and c + width > a for a, b in windows)
    return out


def slice_top_quartile(train_tensor: RidershipTensor, fraction: float = 0.25) -> np.ndarray:
    """Indices of the top ``ceil(fraction * N)`` stations by train inflow+outflow (ties: smaller index)."""
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    totals = train_tensor.values.sum(axis=(0, 2))
    order = np.lexsort((np.arange(len(totals)), -totals))
    return np.sort(order[: math.ceil(fraction * len(totals))])


def evaluate(
    predictions: np.ndarray,
    samples: Sequence[WindowSample],
    stats: NormStats | None,
    spec: SliceSpec = SliceSpec(),
    tensor: RidershipTensor | None = None,
    train_tensor: RidershipTensor | None = None,
    method: str = "model",
    mape_floor: float = 0.0,
    mape_inclusive: bool = False,
) -> MetricsReport:
    """Per-horizon metrics over the entries admitted by ``spec``.

    ``predictions`` is ``[S, m, N, C]``; pass ``stats`` when they are in
    normalized space (they get inverted), ``None`` when already in counts.
    ``tensor`` supplies bin clocks for the rush slice; ``train_tensor`` the
    ranking for the top-quartile slice.
    """
    _, truth, _ = stack_windows(samples)
    pred = np.asarray(predictions, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"predictions {pred.shape} do not match targets {truth.shape}")
    if stats is not None:
        pred = zscore_invert(pred, stats)
    S, m, N, C = truth.shape
    rows = np.ones((S, m), dtype=bool)
    stations = np.arange(N)
    if spec.kind == "rush_hours":
        if tensor is None:
            raise ConfigError("rush-hour slice needs the ridership tensor for bin clocks")
        rows = slice_rush_hours(samples, tensor, m, spec.rush_windows)
    elif spec.kind == "top_quartile":
        if train_tensor is None:
            raise ConfigError("top-quartile slice needs the training tensor")
        stations = slice_top_quartile(train_tensor, spec.fraction)
    out, excluded = [], []
    for h in range(m):
        sel = rows[:, h]
        if not sel.any():
            raise EmptySliceError(f"slice {spec.label} admits no entries at horizon {h + 1}")
        p = pred[sel, h][:, stations]
        x = truth[sel, h][:, stations]
        out.append(metrics(p, x, mape_floor, mape_inclusive))
        excluded.append(S * N * C - p.size)
    report = MetricsReport(method, spec.label, out, excluded)
    report.check()
    return report


def ha_baseline(history: RidershipTensor, date: dt.date, clock_minute: int, k: int) -> np.ndarray:
    """Mean ``[N, C]`` of the bin starting at ``clock_minute`` on the ``k`` most
    recent earlier dates that share ``date``'s weekday (fewer when history is short)."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    found = []
    for day in sorted(history.days, key=lambda d: d.date, reverse=True):
        if day.date >= date or day.date.weekday() != date.weekday():
            continue
        offset, rem = divmod(clock_minute - day.first_minute, history.bin_minutes)
        if rem or not 0 <= offset < len(day):
            continue
        found.append(history.values[day.start + offset])
        if len(found) == k:
            break
    if not found:
        raise BaselineError(f"no earlier {date:%A} contains the {clock_minute // 60:02d}:{clock_minute % 60:02d} bin")
    return np.mean(found, axis=0)


def ha_predictions(tensor: RidershipTensor, samples: Sequence[WindowSample], m: int, k: int) -> np.ndarray:
    """HA forecasts ``[S, m, N, C]`` (counts) for every target bin of ``samples``."""
    dates = tensor.bin_dates()
    clocks = tensor.bin_clocks()
    cache: dict[tuple, np.ndarray] = {}
    out = np.empty((len(samples), m, tensor.N, tensor.values.shape[2]))
    for i, s in enumerate(samples):
        for h in range(m):
            t = s.t_anchor + 1 + h
            key = (dates[t], int(clocks[t]))
            if key not in cache:
                cache[key] = ha_baseline(tensor, key[0], key[1], k)
            out[i, h] = cache[key]
    return out

"""Origin-destination forecasting: length-11 OD vectors built from finished and all trips.

Each origin gets a schema of its ten most frequent destinations (from the
training records); slot 11 collects every other destination. The
*incomplete* vector of a bin counts only trips that entered during the bin
and had already exited when the bin closed, which is what a live system can
observe. The *complete* vector counts every trip that entered in the bin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .evaluation import Metrics, MetricsReport, SliceSpec, evaluate, metrics
from .ingest import (
    DatasetSplit,
    NormStats,
    RidershipTensor,
    TripTable,
    WindowSample,
    as_trip_table,
    date_seconds,
    split_by_dates,
    zscore_fit,
)
from .model import ModelConfig, forward

TOP = 10
WIDTH = TOP + 1
OD_MAPE_MIN = 10.0


@dataclass(frozen=True)
class OdSchema:
    """Per origin, the ordered destination ids occupying slots 1..10."""

    destinations: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        n = len(self.destinations)
        for i, dests in enumerate(self.destinations):
            if len(dests) > TOP or len(set(dests)) != len(dests):
                raise ConfigError(f"origin {i}: schema needs at most {TOP} distinct destinations")
            if any(not 0 <= d < n for d in dests):
                raise ConfigError(f"origin {i}: destination id out of range")

    @property
    def n(self) -> int:
        return len(self.destinations)

    def slot_table(self) -> np.ndarray:
        """``[N, N]`` slot index (0..10) for every (origin, destination)."""
        table = np.full((self.n, self.n), TOP, dtype=np.int64)
        for i, dests in enumerate(self.destinations):
            table[i, list(dests)] = np.arange(len(dests))
        return table

    def to_json(self) -> dict:
        return {"n": self.n, "slots": WIDTH, "destinations": [list(d) for d in self.destinations]}

    @classmethod
    def from_json(cls, obj: dict) -> "OdSchema":
        dests = tuple(tuple(int(x) for x in row) for row in obj["destinations"])
        if len(dests) != obj["n"]:
            raise ConfigError("schema origin count does not match n")
        return cls(dests)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path: str | Path) -> "OdSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def build_schema(train_records, n: int) -> OdSchema:
    """Top-10 destinations per origin by trip count; ties go to the smaller id."""
    trips = as_trip_table(train_records)
    counts = np.bincount(trips.entry_station * n + trips.exit_station, minlength=n * n).reshape(n, n)
    rows = []
    for i in range(n):
        order = np.lexsort((np.arange(n), -counts[i]))
        rows.append(tuple(int(j) for j in order[:TOP] if counts[i, j] > 0))
    return OdSchema(tuple(rows))


def bin_starts(grid: RidershipTensor) -> np.ndarray:
    """Start of every bin in epoch seconds, ``[T]``."""
    out = np.empty(grid.T, dtype=np.int64)
    step = 60 * grid.bin_minutes
    for day in grid.days:
        first = date_seconds(day.date) + 60 * day.first_minute
        out[day.start : day.stop] = first + step * np.arange(len(day))
    return out


def _scatter(trips: TripTable, schema: OdSchema, grid: RidershipTensor, finished_only: bool) -> np.ndarray:
    if schema.n != grid.N:
        raise ShapeError(f"schema has {schema.n} origins but the grid has {grid.N} stations")
    bins = grid.bin_of(trips.entry_time)
    keep = bins >= 0
    if finished_only:
        close = bin_starts(grid) + 60 * grid.bin_minutes
        keep &= trips.exit_time <= close[np.where(keep, bins, 0)]
    origin = trips.entry_station[keep]
    slot = schema.slot_table()[origin, trips.exit_station[keep]]
    flat = np.bincount((bins[keep] * grid.N + origin) * WIDTH + slot, minlength=grid.T * grid.N * WIDTH)
    return flat.reshape(grid.T, grid.N, WIDTH).astype(np.float64)


def build_incomplete(records, schema: OdSchema, grid: RidershipTensor) -> np.ndarray:
    """``[T, N, 11]`` counts of trips that entered in the bin and exited by its close."""
    return _scatter(as_trip_table(records), schema, grid, finished_only=True)


def build_complete(records, schema: OdSchema, grid: RidershipTensor) -> np.ndarray:
    """``[T, N, 11]`` counts of every trip by entry bin, whenever it exits."""
    return _scatter(as_trip_table(records), schema, grid, finished_only=False)


@dataclass
class OdDataset:
    schema: OdSchema
    inputs: np.ndarray  # incomplete [T, N, 11]
    targets: np.ndarray  # complete [T, N, 11]
    grid: RidershipTensor

    def split(self, train, val, test, n: int = 4, m: int = 4) -> DatasetSplit:
        return split_by_dates(self.grid, train, val, test, n, m, inputs=self.inputs, targets=self.targets)

    def fit_stats(self, train_span) -> tuple[NormStats, NormStats]:
        """Separate z-score stats for incomplete inputs and complete targets over the train span."""
        dates = self.grid.bin_dates()
        mask = np.array([train_span[0] <= d <= train_span[1] for d in dates])
        return zscore_fit(self.inputs[mask]), zscore_fit(self.targets[mask])


def build_od_dataset(records, grid: RidershipTensor, train_span) -> OdDataset:
    trips = as_trip_table(records)
    schema = build_schema(trips.between(*train_span), grid.N)
    return OdDataset(schema, build_incomplete(trips, schema, grid), build_complete(trips, schema, grid), grid)


def od_model_config(n_stations: int, **kw) -> ModelConfig:
    return ModelConfig(n_stations=n_stations, channels=WIDTH, **kw)


def od_forward(inputs, graphs, params, cfg: ModelConfig, m: int | None = None):
    """Incomplete OD history ``[(B,) n, N, 11]`` -> complete OD forecast ``[(B,) m, N, 11]``."""
    if cfg.channels != WIDTH:
        raise ConfigError(f"OD model needs channels={WIDTH}")
    return forward(inputs, graphs, params, cfg, m)


def od_metrics(pred, truth) -> Metrics:
    """RMSE/MAE over all entries; MAPE only where truth >= 10."""
    return metrics(pred, truth, OD_MAPE_MIN, inclusive=True)


def od_evaluate(predictions: np.ndarray, samples: Sequence[WindowSample], target_stats: NormStats | None, method: str = "od-model") -> MetricsReport:
    return evaluate(predictions, samples, target_stats, SliceSpec(), method=method, mape_floor=OD_MAPE_MIN, mape_inclusive=True)

"""Glue between a :class:`RunConfig` and the data, graph, model and training modules."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, parse_span, parse_windows
from .errors import ConfigError
from .evaluation import SliceSpec
from .graphs import GraphTriple, build_graph_triple, read_topology
from .ingest import (
    DatasetSplit,
    NormStats,
    RidershipTensor,
    StationIndex,
    TripTable,
    bin_ridership,
    daily_windows,
    default_spans,
    parse_records,
    split_by_dates,
    zscore_fit,
)
from .model import ModelConfig
from .train import TrainConfig

Span = tuple[dt.date, dt.date]


@dataclass
class DataBundle:
    index: StationIndex
    trips: TripTable
    pairs: list[tuple[int, int]]
    tensor: RidershipTensor


def _path(cfg: RunConfig, key: str, default_name: str) -> Path:
    explicit = getattr(cfg, key)
    if explicit:
        return Path(explicit)
    if not cfg.data:
        raise ConfigError(f"set either '{key}' or 'data' (a directory holding {default_name})")
    return Path(cfg.data) / default_name


def load_data(cfg: RunConfig) -> DataBundle:
    """Read stations, AFC records and topology, then bin every covered date."""
    index = StationIndex.read(_path(cfg, "stations", "stations.txt"))
    trips = TripTable.from_records(parse_records(_path(cfg, "records", "afc.csv"), index))
    pairs = read_topology(_path(cfg, "topology", "topology.csv"), index)
    if len(trips) == 0:
        raise ConfigError("no AFC records")
    first = dt.date(1970, 1, 1) + dt.timedelta(days=int(trips.entry_time.min() // 86400))
    last = dt.date(1970, 1, 1) + dt.timedelta(days=int(trips.entry_time.max() // 86400))
    dates = [first + dt.timedelta(days=k) for k in range((last - first).days + 1)]
    tensor = bin_ridership(trips, index, cfg.bin_minutes, daily_windows(dates, cfg.service_start, cfg.service_end))
    return DataBundle(index, trips, pairs, tensor)


def split_spans(tensor: RidershipTensor, cfg: RunConfig) -> tuple[Span, Span, Span]:
    spans = [parse_span(getattr(cfg, k)) for k in ("train_span", "val_span", "test_span")]
    if all(s is None for s in spans):
        return default_spans(tensor, cfg.split_fractions)
    if any(s is None for s in spans):
        raise ConfigError("set all of train_span, val_span and test_span, or none")
    return spans[0], spans[1], spans[2]


@dataclass
class StationData:
    split: DatasetSplit
    stats: NormStats
    spans: tuple[Span, Span, Span]
    train_tensor: RidershipTensor


def station_data(bundle: DataBundle, cfg: RunConfig) -> StationData:
    spans = split_spans(bundle.tensor, cfg)
    split = split_by_dates(bundle.tensor, *spans, n=cfg.n, m=cfg.m)
    train_tensor = bundle.tensor.select_dates(*spans[0])
    return StationData(split, zscore_fit(train_tensor.values), spans, train_tensor)


def build_graphs(bundle: DataBundle, cfg: RunConfig, cache_dir: str | Path | None = None) -> GraphTriple:
    """Graphs from the training span only, so no test information leaks into them."""
    train_span = split_spans(bundle.tensor, cfg)[0]
    return build_graph_triple(
        bundle.pairs,
        bundle.tensor.select_dates(*train_span),
        bundle.trips.between(*train_span),
        cfg.sim_select,
        cfg.corr_select,
        cache_dir=cache_dir,
    )


def model_config(cfg: RunConfig, n_stations: int, channels: int = 2) -> ModelConfig:
    return ModelConfig(
        n_stations=n_stations,
        channels=channels,
        d=cfg.d,
        layers=cfg.layers,
        horizon=cfg.m,
        graphs=cfg.graphs,
        use_global=cfg.use_global,
        global_recurrence=cfg.global_recurrence,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr0=cfg.lr0,
        lr_decay=cfg.lr_decay,
        decay_epochs=tuple(cfg.decay_epochs),
        grad_clip_norm=cfg.grad_clip_norm,
        seed=cfg.seed,
        loss=cfg.loss,
        target_train_mae=cfg.target_train_mae or None,
        scheduled_sampling=cfg.scheduled_sampling,
    )


def slice_spec(cfg: RunConfig, name: str) -> SliceSpec:
    return SliceSpec.from_name(name, parse_windows(cfg.rush_windows), cfg.top_fraction)


def span_strings(spans) -> list[str]:
    return [f"{a.isoformat()}..{b.isoformat()}" for a, b in spans]


def spans_from_strings(items) -> tuple[Span, Span, Span]:
    out = [parse_span(s) for s in items]
    if len(out) != 3 or any(s is None for s in out):
        raise ConfigError("checkpoint is missing its split spans")
    return out[0], out[1], out[2]


def samples_for(split: DatasetSplit, name: str):
    if name not in ("train", "val", "test"):
        raise ConfigError(f"unknown split {name!r}")
    samples = getattr(split, name)
    if not samples:
        raise ConfigError(f"split {name!r} has no windows")
    return samples


def stats_dict(stats: NormStats) -> dict:
    return {"mean": stats.mean, "std": stats.std}


def stats_from(obj: dict) -> NormStats:
    return NormStats(float(obj["mean"]), float(obj["std"]))

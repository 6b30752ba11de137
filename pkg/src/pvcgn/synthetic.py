"""Synthetic metro network with class-periodic demand, for tests and demos.

Stations sit on a main line with one branch and each belongs to a functional
class (residential, business, mixed, leisure). A class has its own daily
entry profile and its own destination preferences by time of day. Demand on a
given day is scaled by a random per-class shock shared by all stations of
that class, so same-day observations carry information that calendar
averages miss. Entries are Poisson, destinations multinomial, and travel time
grows with the hop distance on the track graph.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.sparse import csr_array
from scipy.sparse.csgraph import shortest_path

from .config import coerce, read_kv_file
from .errors import ConfigError
from .graphs import write_topology
from .ingest import (
    RidershipTensor,
    StationIndex,
    TripTable,
    bin_ridership,
    daily_windows,
    date_range,
    date_seconds,
    parse_clock,
)

CLASSES = ("residential", "business", "mixed", "leisure")


@dataclass(frozen=True)
class SynthProfile:
    start_date: str = "2019-01-07"  # a Monday
    bin_minutes: int = 15
    service_start: str = "05:30"
    service_end: str = "23:30"
    peak_rate: float = 100.0  # mean entries per bin at a profile value of 1
    shock_sd: float = 0.3  # log-sd of the per-(day, class) demand multiplier
    weekend_factor: float = 0.6
    scale_low: float = 0.7
    scale_high: float = 1.3
    hop_minutes: float = 3.0
    dwell_minutes: float = 2.0
    extra_minutes: float = 3.0  # mean of the exponential walking/wait time
    branch_fraction: float = 0.3

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "SynthProfile":
        base = cls()
        known = {f.name: getattr(base, f.name) for f in fields(cls)}
        updates = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown synthetic profile key {key!r}")
            try:
                updates[key] = coerce(raw, known[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        return replace(base, **updates)

    @classmethod
    def read(cls, path: str | Path) -> "SynthProfile":
        return cls.from_mapping(read_kv_file(path))


@dataclass
class SyntheticData:
    index: StationIndex
    trips: TripTable
    pairs: list[tuple[int, int]]
    tensor: RidershipTensor
    classes: np.ndarray  # class id per station
    scales: np.ndarray  # demand scale per station
    shocks: np.ndarray  # [days, classes] multiplier
    profile: SynthProfile
    seed: int
    meta: dict = field(default_factory=dict)

    def save(self, directory: str | Path) -> None:
        """Write stations.txt, topology.csv, afc.csv, ridership.rgt and synth.json."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.index.write(directory / "stations.txt")
        write_topology(directory / "topology.csv", self.pairs, self.index)
        self.trips.write_csv(directory / "afc.csv", self.index)
        self.tensor.save(directory / "ridership.rgt")
        info = {
            "seed": self.seed,
            "profile": {f.name: getattr(self.profile, f.name) for f in fields(self.profile)},
            "classes": [CLASSES[c] for c in self.classes],
            "scales": self.scales.round(6).tolist(),
            "trips": len(self.trips),
        }
        with open(directory / "synth.json", "w", encoding="utf-8") as fh:
            json.dump(info, fh, indent=1, sort_keys=True)


def line_topology(n: int, branch_fraction: float = 0.3) -> list[tuple[int, int]]:
    """Main line ``0 - 1 - ... - L-1`` with a branch leaving from its middle station."""
    if n < 2:
        raise ConfigError("need at least two stations")
    n_branch = int(round(branch_fraction * n)) if n >= 5 else 0
    main = n - n_branch
    pairs = [(i, i + 1) for i in range(main - 1)]
    if n_branch:
        prev = main // 2
        for i in range(main, n):
            pairs.append((prev, i))
            prev = i
    return pairs


def hop_distances(pairs: list[tuple[int, int]], n: int) -> np.ndarray:
    src = [a for a, b in pairs] + [b for a, b in pairs]
    dst = [b for a, b in pairs] + [a for a, b in pairs]
    adj = csr_array((np.ones(len(src)), (src, dst)), shape=(n, n))
    return shortest_path(adj, unweighted=True, directed=False)


def _bump(hours: np.ndarray, centre: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((hours - centre) / width) ** 2)


def class_profile(cls: int, hours: np.ndarray, weekend: bool) -> np.ndarray:
    """Relative entry intensity of a class over clock ``hours``."""
    if weekend:
        base = 0.35 + 0.9 * _bump(hours, 13.0 + 0.5 * cls, 3.0)
        return base * (1.6 if cls == 3 else 1.0)
    if cls == 0:  # residential: strong morning peak
        return 0.25 + 1.6 * _bump(hours, 8.0, 0.8) + 0.6 * _bump(hours, 18.5, 1.2)
    if cls == 1:  # business: strong evening peak
        return 0.25 + 0.5 * _bump(hours, 8.5, 1.0) + 1.6 * _bump(hours, 17.8, 0.9)
    if cls == 2:  # mixed: two moderate peaks and a lunch bump
        return 0.4 + 0.9 * _bump(hours, 8.3, 1.0) + 0.9 * _bump(hours, 18.2, 1.1) + 0.4 * _bump(hours, 12.5, 1.5)
    return 0.3 + 1.0 * _bump(hours, 14.5, 2.5) + 0.6 * _bump(hours, 20.5, 1.3)  # leisure


def attraction(hours: np.ndarray, weekend: bool) -> np.ndarray:
    """``[bins, origin class, destination class]`` destination preference."""
    am = _bump(hours, 8.5, 1.5)[:, None, None]
    pm = _bump(hours, 18.0, 1.5)[:, None, None]
    flat = np.ones((1, 4, 4))
    if weekend:
        pref = flat.copy()
        pref[:, :, 3] = 3.0
        return np.broadcast_to(pref, (len(hours), 4, 4)).copy()
    to_work = np.ones((1, 4, 4))
    to_work[:, :, 1] = 4.0
    to_work[:, :, 2] = 2.0
    to_home = np.ones((1, 4, 4))
    to_home[:, :, 0] = 4.0
    to_home[:, :, 3] = 2.0
    return flat + am * (to_work - 1) + pm * (to_home - 1)


def gen_synthetic(
    n_stations: int = 10,
    n_days: int = 14,
    seed: int = 0,
    profile: SynthProfile | None = None,
) -> SyntheticData:
    prof = profile or SynthProfile()
    if n_days < 1:
        raise ConfigError("need at least one day")
    rng = np.random.default_rng(seed)
    n = n_stations
    names = [f"S{i:02d}" if n <= 100 else f"S{i:03d}" for i in range(n)]
    pairs = line_topology(n, prof.branch_fraction)
    hops = hop_distances(pairs, n)
    classes = np.arange(n) % len(CLASSES)
    scales = rng.uniform(prof.scale_low, prof.scale_high, size=n)
    shocks = np.exp(prof.shock_sd * rng.standard_normal((n_days, len(CLASSES))))

    first = dt.date.fromisoformat(prof.start_date)
    dates = date_range(first, n_days)
    start_min, end_min = parse_clock(prof.service_start), parse_clock(prof.service_end)
    if (end_min - start_min) % prof.bin_minutes:
        raise ConfigError("bin_minutes must divide the service window")
    n_bins = (end_min - start_min) // prof.bin_minutes
    bin_start = start_min + prof.bin_minutes * np.arange(n_bins)
    hours = (bin_start + prof.bin_minutes / 2) / 60.0
    bin_sec = prof.bin_minutes * 60

    # destination distance decay; no trips to the origin itself
    decay = np.exp(-hops / max(n / 3, 1.0))
    np.fill_diagonal(decay, 0.0)

    parts: dict[str, list[np.ndarray]] = {"o": [], "d": [], "t": []}
    for k, day in enumerate(dates):
        weekend = day.weekday() >= 5
        prof_cls = np.stack([class_profile(c, hours, weekend) for c in range(len(CLASSES))], axis=1)
        level = prof.peak_rate * (prof.weekend_factor if weekend else 1.0)
        rate = level * prof_cls[:, classes] * scales[None, :] * shocks[k, classes][None, :]  # [bins, N]
        entries = rng.poisson(rate)
        attr = attraction(hours, weekend)  # [bins, 4, 4]
        pv = attr[:, classes][:, :, classes] * decay[None, :, :]  # [bins, N, N]
        pv /= pv.sum(axis=2, keepdims=True)
        dest_counts = rng.multinomial(entries, pv)  # [bins, N, N]
        b_idx, o_idx, d_idx = np.nonzero(dest_counts)
        reps = dest_counts[b_idx, o_idx, d_idx]
        base = date_seconds(day) + 60 * bin_start[b_idx]
        parts["o"].append(np.repeat(o_idx, reps))
        parts["d"].append(np.repeat(d_idx, reps))
        parts["t"].append(np.repeat(base, reps))
    origin = np.concatenate(parts["o"]).astype(np.int64)
    dest = np.concatenate(parts["d"]).astype(np.int64)
    entry = np.concatenate(parts["t"]).astype(np.int64) + rng.integers(0, bin_sec, size=len(origin))
    ride = prof.hop_minutes * hops[origin, dest] + prof.dwell_minutes + rng.exponential(prof.extra_minutes, len(origin))
    exit_ = entry + np.round(60 * ride).astype(np.int64)
    order = np.lexsort((dest, origin, entry))
    trips = TripTable(origin[order], dest[order], entry[order], exit_[order])

    index = StationIndex(names)
    tensor = bin_ridership(trips, index, prof.bin_minutes, daily_windows(dates, prof.service_start, prof.service_end))
    return SyntheticData(index, trips, pairs, tensor, classes, scales, shocks, prof, seed)

"""AFC transaction parsing, time binning, normalization and windowing."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DegenerateDataError, ParseError, RecordError, ShapeError

log = logging.getLogger(__name__)

EPOCH = dt.datetime(1970, 1, 1)
SECONDS_PER_DAY = 86400
RECORD_HEADER = ("passenger_id", "entry_station", "exit_station", "entry_time", "exit_time")
TENSOR_MAGIC = b"RGT1"


@dataclass(frozen=True, slots=True)
class AfcRecord:
    passenger_id: str
    entry_station: int
    exit_station: int
    entry_time: int  # seconds since 1970-01-01, naive local time
    exit_time: int


class StationIndex:
    """Fixed ordering of station names; ``lookup`` maps a name to its row."""

    def __init__(self, names: Sequence[str]) -> None:
        names = tuple(str(n) for n in names)
        if not names:
            raise ConfigError("station index must contain at least one station")
        lookup = {name: i for i, name in enumerate(names)}
        if len(lookup) != len(names):
            raise ConfigError("duplicate station names in index")
        self.names = names
        self.lookup = lookup

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> int:
        return self.lookup[name]

    def __contains__(self, name: object) -> bool:
        return name in self.lookup

    def __eq__(self, other: object) -> bool:
        return isinstance(other, StationIndex) and other.names == self.names

    def __repr__(self) -> str:
        return f"StationIndex(N={len(self)})"

    @classmethod
    def read(cls, path: str | Path) -> "StationIndex":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.names) + "\n", encoding="utf-8")


class TripTable:
    """Column-oriented batch of AFC records.

    Large synthetic corpora are kept in this form; ``list[AfcRecord]`` converts
    losslessly in both directions.
    """

    def __init__(self, entry_station, exit_station, entry_time, exit_time, passenger_ids=None) -> None:
        self.entry_station = np.asarray(entry_station, dtype=np.int64)
        self.exit_station = np.asarray(exit_station, dtype=np.int64)
        self.entry_time = np.asarray(entry_time, dtype=np.int64)
        self.exit_time = np.asarray(exit_time, dtype=np.int64)
        n = len(self.entry_station)
        if not (len(self.exit_station) == len(self.entry_time) == len(self.exit_time) == n):
            raise ShapeError("trip table columns differ in length")
        self.passenger_ids = passenger_ids

    def __len__(self) -> int:
        return len(self.entry_station)

    def passenger_id(self, k: int) -> str:
        if self.passenger_ids is None:
            return f"p{k}"
        return str(self.passenger_ids[k])

    def __iter__(self) -> Iterator[AfcRecord]:
        for k in range(len(self)):
            yield AfcRecord(
                self.passenger_id(k),
                int(self.entry_station[k]),
                int(self.exit_station[k]),
                int(self.entry_time[k]),
                int(self.exit_time[k]),
            )

    @classmethod
    def from_records(cls, records: Iterable[AfcRecord]) -> "TripTable":
        records = list(records)
        return cls(
            [r.entry_station for r in records],
            [r.exit_station for r in records],
            [r.entry_time for r in records],
            [r.exit_time for r in records],
            passenger_ids=[r.passenger_id for r in records],
        )

    def subset(self, mask: np.ndarray) -> "TripTable":
        ids = None
        if self.passenger_ids is not None:
            ids = np.asarray(self.passenger_ids, dtype=object)[mask]
        return TripTable(
            self.entry_station[mask], self.exit_station[mask], self.entry_time[mask], self.exit_time[mask], ids
        )

    def between(self, start: dt.date, stop: dt.date) -> "TripTable":
        """Trips whose entry falls on a date in ``[start, stop]``."""
        lo = date_seconds(start)
        hi = date_seconds(stop) + SECONDS_PER_DAY
        return self.subset((self.entry_time >= lo) & (self.entry_time < hi))

    def write_csv(self, path: str | Path, index: StationIndex) -> None:
        names = np.asarray(index.names, dtype=object)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(RECORD_HEADER)
            ids = (self.passenger_id(k) for k in range(len(self)))
            w.writerows(
                zip(
                    ids,
                    names[self.entry_station],
                    names[self.exit_station],
                    self.entry_time.tolist(),
                    self.exit_time.tolist(),
                )
            )


def as_trip_table(records: TripTable | Iterable[AfcRecord]) -> TripTable:
    if isinstance(records, TripTable):
        return records
    return TripTable.from_records(records)


def date_seconds(day: dt.date) -> int:
    return (day - EPOCH.date()).days * SECONDS_PER_DAY


def parse_time(text: str) -> int:
    """ISO-8601 or epoch seconds -> integer seconds since the (naive) epoch."""
    text = text.strip()
    try:
        return int(round(float(text)))
    except ValueError:
        pass
    stamp = dt.datetime.fromisoformat(text)
    if stamp.tzinfo is not None:
        stamp = stamp.replace(tzinfo=None)
    return int((stamp - EPOCH).total_seconds())


def parse_records(path: str | Path, index: StationIndex) -> list[AfcRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != RECORD_HEADER:
            raise ParseError(f"expected header {','.join(RECORD_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"expected 5 fields, got {len(row)}", line=lineno)
            pid, src, dst, t_in, t_out = (c.strip() for c in row)
            for name in (src, dst):
                if name not in index:
                    raise ParseError(f"unknown station {name!r}", line=lineno)
            try:
                entry, exit_ = parse_time(t_in), parse_time(t_out)
            except ValueError as exc:
                raise ParseError(f"bad timestamp: {exc}", line=lineno) from None
            if exit_ < entry:
                raise RecordError("exit_time precedes entry_time", line=lineno)
            records.append(AfcRecord(pid, index[src], index[dst], entry, exit_))
    return records


def parse_clock(text: str) -> int:
    """'HH:MM' -> minutes after midnight."""
    try:
        hh, mm = text.strip().split(":")
        minutes = int(hh) * 60 + int(mm)
    except ValueError:
        raise ConfigError(f"bad clock time {text!r}: expected HH:MM") from None
    if not (0 <= int(mm) < 60 and 0 <= minutes <= 24 * 60):
        raise ConfigError(f"clock time {text!r} out of range")
    return minutes


@dataclass(frozen=True)
class ServiceWindow:
    date: dt.date
    start_minute: int
    end_minute: int


def daily_windows(dates: Iterable[dt.date], start: str = "05:30", end: str = "23:30") -> list[ServiceWindow]:
    a, b = parse_clock(start), parse_clock(end)
    return [ServiceWindow(d, a, b) for d in dates]


def date_range(first: dt.date, n_days: int) -> list[dt.date]:
    return [first + dt.timedelta(days=k) for k in range(n_days)]


@dataclass(frozen=True)
class DayRange:
    date: dt.date
    start: int  # first bin index (global)
    stop: int  # one past the last bin
    first_minute: int  # clock minute at which bin ``start`` opens

    def __len__(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class BinningReport:
    dropped_entries: int = 0
    dropped_exits: int = 0


@dataclass
class RidershipTensor:
    """Inflow/outflow counts on a regular per-day time grid, shape ``[T, N, C]``."""

    values: np.ndarray
    bin_minutes: int
    days: tuple[DayRange, ...]
    report: BinningReport | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.days = tuple(self.days)
        if self.values.ndim != 3:
            raise ShapeError(f"ridership values must be [T, N, C], got {self.values.shape}")
        expected = sum(len(d) for d in self.days)
        if expected != self.values.shape[0]:
            raise ShapeError(f"day table covers {expected} bins but tensor has {self.values.shape[0]}")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def day_of_bin(self, t: int) -> DayRange:
        for day in self.days:
            if day.start <= t < day.stop:
                return day
        raise IndexError(t)

    def bin_clock(self, t: int) -> int:
        """Clock minute (after midnight) at which global bin ``t`` opens."""
        day = self.day_of_bin(t)
        return day.first_minute + (t - day.start) * self.bin_minutes

    def bin_clocks(self) -> np.ndarray:
        out = np.empty(self.T, dtype=np.int64)
        for day in self.days:
            out[day.start : day.stop] = day.first_minute + np.arange(len(day)) * self.bin_minutes
        return out

    def bin_dates(self) -> list[dt.date]:
        out: list[dt.date] = []
        for day in self.days:
            out.extend([day.date] * len(day))
        return out

    def bin_of(self, times: np.ndarray) -> np.ndarray:
        """Global bin index of each timestamp, or -1 outside the covered grid."""
        times = np.asarray(times, dtype=np.int64)
        out = np.full(times.shape, -1, dtype=np.int64)
        width = self.bin_minutes * 60
        for day in self.days:
            open_s = date_seconds(day.date) + day.first_minute * 60
            close_s = open_s + len(day) * width
            inside = (times >= open_s) & (times < close_s)
            out[inside] = day.start + (times[inside] - open_s) // width
        return out

    def select_dates(self, first: dt.date, last: dt.date) -> "RidershipTensor":
        """Sub-tensor holding the days in ``[first, last]``, re-indexed from zero."""
        chosen = [d for d in self.days if first <= d.date <= last]
        if not chosen:
            raise ConfigError(f"no days between {first} and {last}")
        return self.select_days(chosen)

    def select_days(self, chosen: Sequence[DayRange]) -> "RidershipTensor":
        parts, days, cursor = [], [], 0
        for d in chosen:
            parts.append(self.values[d.start : d.stop])
            days.append(DayRange(d.date, cursor, cursor + len(d), d.first_minute))
            cursor += len(d)
        return RidershipTensor(np.concatenate(parts, axis=0), self.bin_minutes, tuple(days))

    def save(self, path: str | Path) -> None:
        T, N, C = self.values.shape
        with open(path, "wb") as fh:
            fh.write(TENSOR_MAGIC)
            fh.write(struct.pack("<5I", T, N, C, self.bin_minutes, len(self.days)))
            for d in self.days:
                fh.write(struct.pack("<4I", d.start, d.stop, d.date.toordinal(), d.first_minute))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "RidershipTensor":
        raw = Path(path).read_bytes()
        if raw[:4] != TENSOR_MAGIC:
            raise ParseError(f"{path}: not a ridership tensor (bad magic)")
        T, N, C, bin_minutes, n_days = struct.unpack_from("<5I", raw, 4)
        offset = 4 + 20
        days = []
        for _ in range(n_days):
            start, stop, ordinal, first = struct.unpack_from("<4I", raw, offset)
            days.append(DayRange(dt.date.fromordinal(ordinal), start, stop, first))
            offset += 16
        values = np.frombuffer(raw, dtype="<f8", count=T * N * C, offset=offset).reshape(T, N, C)
        return cls(values.astype(np.float64), bin_minutes, tuple(days))


def bin_ridership(
    records: TripTable | Iterable[AfcRecord],
    index: StationIndex,
    bin_minutes: int,
    service_windows: Sequence[ServiceWindow],
) -> RidershipTensor:
    """Count entries (by entry_time) and exits (by exit_time) per station and bin.

    Records falling outside every service window are dropped; the drop counts
    are kept in ``tensor.report``.
    """
    if bin_minutes <= 0:
        raise ConfigError("bin_minutes must be positive")
    days, cursor = [], 0
    for w in sorted(service_windows, key=lambda w: w.date):
        span = w.end_minute - w.start_minute
        if span <= 0:
            raise ConfigError(f"empty service window on {w.date}")
        if span % bin_minutes:
            raise ConfigError(f"bin_minutes={bin_minutes} does not divide the {span}-minute window on {w.date}")
        if days and days[-1].date == w.date:
            raise ConfigError(f"duplicate service window for {w.date}")
        n_bins = span // bin_minutes
        days.append(DayRange(w.date, cursor, cursor + n_bins, w.start_minute))
        cursor += n_bins
    if not days:
        raise ConfigError("no service windows given")
    N = len(index)
    grid = RidershipTensor(np.zeros((cursor, N, 2)), bin_minutes, tuple(days))
    trips = as_trip_table(records)
    values = np.zeros((cursor, N, 2))
    dropped = []
    for channel, (stations, times) in enumerate(
        ((trips.entry_station, trips.entry_time), (trips.exit_station, trips.exit_time))
    ):
        bins = grid.bin_of(times)
        keep = bins >= 0
        dropped.append(int((~keep).sum()))
        flat = np.bincount(bins[keep] * N + stations[keep], minlength=cursor * N)
        values[:, :, channel] = flat.reshape(cursor, N)
    report = BinningReport(dropped_entries=dropped[0], dropped_exits=dropped[1])
    if dropped[0] or dropped[1]:
        log.info("binning dropped %d entries and %d exits outside service windows", *dropped)
    return RidershipTensor(values, bin_minutes, tuple(days), report=report)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self) -> None:
        if not (self.std > 0 and np.isfinite(self.std)):
            raise DegenerateDataError(f"std must be positive and finite, got {self.std}")


def zscore_fit(train_values: np.ndarray) -> NormStats:
    """Joint (mean, population std) over every entry of the training values."""
    x = np.asarray(train_values, dtype=np.float64).ravel()
    if x.size < 2:
        raise DegenerateDataError("need at least two values to fit normalization")
    mean = float(x.mean())
    std = float(np.sqrt(np.mean((x - mean) ** 2)))
    if std == 0.0:
        raise DegenerateDataError("training values have zero variance")
    return NormStats(mean, std)


def zscore_apply(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def zscore_invert(z: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


@dataclass(frozen=True)
class WindowSample:
    input: np.ndarray  # [n, N, C]
    target: np.ndarray  # [m, N, C]
    t_anchor: int  # global bin index of the last input step


def make_windows(
    tensor: RidershipTensor,
    n: int,
    m: int,
    inputs: np.ndarray | None = None,
    targets: np.ndarray | None = None,
) -> list[WindowSample]:
    """All stride-1 windows of ``n`` inputs and ``m`` targets inside single days.

    ``inputs``/``targets`` override the arrays windows are cut from (same time
    grid as ``tensor``); the OD pipeline uses this to pair incomplete inputs
    with complete targets.
    """
    if n < 1 or m < 1:
        raise ConfigError("window lengths n and m must be >= 1")
    src = tensor.values if inputs is None else np.asarray(inputs, dtype=np.float64)
    dst = tensor.values if targets is None else np.asarray(targets, dtype=np.float64)
    if src.shape[0] != tensor.T or dst.shape[0] != tensor.T:
        raise ShapeError("override arrays must share the tensor's time axis")
    out = []
    for day in tensor.days:
        count = len(day) - n - m + 1
        if count <= 0:
            log.warning("day %s has %d bins < n+m=%d; no windows", day.date, len(day), n + m)
            continue
        for s in range(day.start, day.start + count):
            out.append(WindowSample(src[s : s + n], dst[s + n : s + n + m], s + n - 1))
    return out


def stack_windows(samples: Sequence[WindowSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """-> (inputs [S, n, N, C], targets [S, m, N, C], anchors [S])."""
    if not samples:
        raise ShapeError("no samples to stack")
    x = np.stack([s.input for s in samples])
    y = np.stack([s.target for s in samples])
    anchors = np.array([s.t_anchor for s in samples], dtype=np.int64)
    return x, y, anchors


@dataclass
class DatasetSplit:
    train: list[WindowSample]
    val: list[WindowSample]
    test: list[WindowSample]


DateSpan = tuple[dt.date, dt.date]


def split_by_dates(
    tensor: RidershipTensor,
    train: DateSpan,
    val: DateSpan,
    test: DateSpan,
    n: int = 4,
    m: int = 4,
    inputs: np.ndarray | None = None,
    targets: np.ndarray | None = None,
) -> DatasetSplit:
    """Window each split from its own inclusive date span; spans must not overlap."""
    spans = sorted([train, val, test], key=lambda s: s[0])
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        if a1 >= b0:
            raise ConfigError(f"split date ranges overlap: {a0}..{a1} and {b0}..{b1}")
    windows = make_windows(tensor, n, m, inputs=inputs, targets=targets)
    dates = tensor.bin_dates()

    def pick(span: DateSpan) -> list[WindowSample]:
        return [w for w in windows if span[0] <= dates[w.t_anchor] <= span[1]]

    return DatasetSplit(pick(train), pick(val), pick(test))


def default_spans(tensor: RidershipTensor, fractions=(0.7, 0.15, 0.15)) -> tuple[DateSpan, DateSpan, DateSpan]:
    """Chronological train/val/test spans over the tensor's days (each >= 1 day)."""
    dates = [d.date for d in tensor.days]
    if len(dates) < 3:
        raise ConfigError("need at least three days to split train/val/test")
    n_val = max(1, int(round(fractions[1] * len(dates))))
    n_test = max(1, int(round(fractions[2] * len(dates))))
    n_train = len(dates) - n_val - n_test
    if n_train < 1:
        raise ConfigError("not enough days for a training split")
    tr = (dates[0], dates[n_train - 1])
    va = (dates[n_train], dates[n_train + n_val - 1])
    te = (dates[n_train + n_val], dates[-1])
    return tr, va, te

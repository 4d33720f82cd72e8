"""Detector CSV ingestion, detector-period extraction and synthetic series.

A detector-period combination (DPC) pairs one detector with one of the two
weekday commute periods.  Each DPC gets its own sliding-window dataset with
min-max normalisation fit on the training days only.
"""
import csv
import enum
import io
import math
import warnings
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError, ParseError

INTERVAL = timedelta(minutes=5)
SLOTS_PER_PERIOD = 72
MAX_FILL = 3
CSV_HEADER = ("timestamp", "detector_id", "speed_mph")


class DataWarning(UserWarning):
    pass


class Period(str, enum.Enum):
    AM = "AM"
    PM = "PM"

    @property
    def start(self):
        return time(4, 0) if self is Period.AM else time(14, 0)

    @property
    def end(self):
        return time(10, 0) if self is Period.AM else time(20, 0)

    def slot(self, ts):
        """Index of ``ts`` within the period, or None when outside [start, end)."""
        if not (self.start <= ts.time() < self.end):
            return None
        minutes = (ts.hour * 60 + ts.minute) - (self.start.hour * 60)
        return minutes // 5


@dataclass(frozen=True, order=True)
class SpeedRecord:
    detector_id: str
    timestamp: datetime
    speed: float


@dataclass(frozen=True, order=True)
class Dpc:
    detector_id: str
    period: Period

    def __post_init__(self):
        object.__setattr__(self, "period", Period(self.period))

    @property
    def key(self):
        return f"{self.detector_id}:{self.period.value}"


def dpcs_for(detector_ids):
    """Every DPC for the given detectors: two per detector, sorted."""
    return [Dpc(d, p) for d in sorted(set(detector_ids)) for p in Period]


@dataclass(frozen=True)
class Normalization:
    """Min-max scaling to [0, 1]; a constant series maps to 0 with unit span."""

    minimum: float
    maximum: float

    @classmethod
    def fit(cls, values):
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            raise DataError("cannot fit normalization on an empty series")
        return cls(float(values.min()), float(values.max()))

    @property
    def span(self):
        span = self.maximum - self.minimum
        return span if span > 0 else 1.0

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.minimum) / self.span

    def denormalize(self, x):
        return np.asarray(x, dtype=float) * self.span + self.minimum


@dataclass
class DpcDataset:
    """Normalised windows for one DPC.

    ``X_*`` have shape ``(n_windows, window_len)``; ``y_*`` are the 1-step
    targets in normalised scale and ``raw_test_targets`` the same test
    targets in mph.
    """

    window_len: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    raw_test_targets: np.ndarray
    normalization: Normalization
    dpc: Dpc | None = None
    train_days: list = field(default_factory=list)
    test_days: list = field(default_factory=list)

    @classmethod
    def from_series(cls, train_series, test_series, window_len, dpc=None):
        """Build a dataset from lists of contiguous raw (mph) segments."""
        norm = Normalization.fit(np.concatenate([np.asarray(s, float) for s in train_series]))
        Xtr, ytr = _windows_from_segments(train_series, window_len)
        Xte, yte = _windows_from_segments(test_series, window_len)
        return cls(
            window_len=window_len,
            X_train=norm.normalize(Xtr).reshape(-1, window_len),
            y_train=norm.normalize(ytr),
            X_test=norm.normalize(Xte).reshape(-1, window_len),
            y_test=norm.normalize(yte),
            raw_test_targets=yte,
            normalization=norm,
            dpc=dpc,
        )

    @property
    def n_train(self):
        return len(self.y_train)

    @property
    def n_test(self):
        return len(self.y_test)

    def to_dict(self):
        return {
            "dpc": None if self.dpc is None else {
                "detector_id": self.dpc.detector_id, "period": self.dpc.period.value},
            "window_len": self.window_len,
            "normalization": {"min": self.normalization.minimum,
                              "max": self.normalization.maximum},
            "train": {"inputs": self.X_train.tolist(), "targets": self.y_train.tolist()},
            "test": {"inputs": self.X_test.tolist(), "targets": self.y_test.tolist()},
            "raw_test_targets": self.raw_test_targets.tolist(),
            "train_days": [d.isoformat() for d in self.train_days],
            "test_days": [d.isoformat() for d in self.test_days],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            L = int(d["window_len"])
            dpc = d.get("dpc")
            return cls(
                window_len=L,
                X_train=np.asarray(d["train"]["inputs"], dtype=float).reshape(-1, L),
                y_train=np.asarray(d["train"]["targets"], dtype=float),
                X_test=np.asarray(d["test"]["inputs"], dtype=float).reshape(-1, L),
                y_test=np.asarray(d["test"]["targets"], dtype=float),
                raw_test_targets=np.asarray(d["raw_test_targets"], dtype=float),
                normalization=Normalization(float(d["normalization"]["min"]),
                                            float(d["normalization"]["max"])),
                dpc=None if dpc is None else Dpc(dpc["detector_id"], dpc["period"]),
                train_days=[date.fromisoformat(x) for x in d.get("train_days", [])],
                test_days=[date.fromisoformat(x) for x in d.get("test_days", [])],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed dataset document: {exc}") from exc


def _windows_from_segments(segments, L):
    X, y = [], []
    for seg in segments:
        seg = np.asarray(seg, dtype=float)
        for start in range(len(seg) - L):
            X.append(seg[start:start + L])
            y.append(seg[start + L])
    if not X:
        return np.empty((0, L)), np.empty(0)
    return np.array(X), np.array(y)


# -- CSV ---------------------------------------------------------------------

def _open_text(source):
    if isinstance(source, (str, Path)):
        return open(source, newline="", encoding="utf-8"), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"), newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def parse_csv(source):
    """Parse ``timestamp,detector_id,speed_mph`` rows.

    ``source`` may be a path, raw bytes or an open (binary or text) stream.
    Records come back sorted by detector, then time.
    """
    fh, owned = _open_text(source)
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(f"expected header {','.join(CSV_HEADER)!r}, got {','.join(header)!r}", 1)
        records = []
        seen = {}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, got {len(row)}", line)
            ts_s, det, speed_s = (c.strip() for c in row)
            try:
                ts = datetime.fromisoformat(ts_s)
            except ValueError:
                raise ParseError(f"bad timestamp {ts_s!r}", line) from None
            if ts.tzinfo is not None:
                ts = ts.replace(tzinfo=None)
            if ts.second or ts.microsecond or ts.minute % 5:
                raise ParseError(f"timestamp {ts_s!r} is not on the 5-minute grid", line)
            if not det:
                raise ParseError("empty detector_id", line)
            try:
                speed = float(speed_s)
            except ValueError:
                raise ParseError(f"bad speed {speed_s!r}", line) from None
            if not math.isfinite(speed) or speed <= 0:
                raise ParseError(f"speed must be positive and finite, got {speed_s!r}", line)
            key = (det, ts)
            if key in seen:
                raise DataError(f"line {line}: duplicate reading for detector {det!r} "
                                f"at {ts_s} (first seen on line {seen[key]})")
            seen[key] = line
            records.append(SpeedRecord(det, ts, speed))
    finally:
        if owned:
            fh.close()
    records.sort()
    return records


def write_csv(records, dest):
    """Inverse of :func:`parse_csv`.  ``dest`` is a path or a text stream."""
    own = isinstance(dest, (str, Path))
    fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.timestamp.isoformat(), r.detector_id, repr(float(r.speed))])
    finally:
        if own:
            fh.close()


def records_to_csv_bytes(records):
    buf = io.StringIO()
    write_csv(records, buf)
    return buf.getvalue().encode("utf-8")


# -- DPC extraction ------------------------------------------------------------

def period_slots(records, dpc, day):
    """The 72 raw slots of one day's period (NaN where missing)."""
    slots = np.full(SLOTS_PER_PERIOD, np.nan)
    for r in records:
        if r.detector_id != dpc.detector_id or r.timestamp.date() != day:
            continue
        i = dpc.period.slot(r.timestamp)
        if i is not None:
            slots[i] = r.speed
    return slots


def forward_fill(slots, limit=MAX_FILL):
    """Fill NaN runs of at most ``limit`` slots that follow an observed value.

    Longer runs, and runs at the start of the day, are left missing.
    """
    out = np.array(slots, dtype=float)
    n = len(out)
    i = 0
    while i < n:
        if not np.isnan(out[i]):
            i += 1
            continue
        j = i
        while j < n and np.isnan(out[j]):
            j += 1
        if i > 0 and j - i <= limit:
            out[i:j] = out[i - 1]
        i = j
    return out


def day_windows(slots, L):
    """Start indices of windows whose L inputs and target are all observed."""
    ok = ~np.isnan(slots)
    span = L + 1
    if len(slots) < span:
        return []
    # count of observed slots in each length-(L+1) span
    csum = np.concatenate([[0], np.cumsum(ok)])
    counts = csum[span:] - csum[:-span]
    return [int(s) for s in np.flatnonzero(counts == span)]


def _check_days(train_days, test_days):
    if not train_days or not test_days:
        raise DomainError("need at least one training day and one testing day")
    for d in list(train_days) + list(test_days):
        if d.weekday() >= 5:
            raise DomainError(f"{d.isoformat()} is not a weekday")
    if max(train_days) >= min(test_days):
        raise DomainError("training days must strictly precede testing days")


def extract_dpc(records, dpc, train_days, test_days, window_len=12):
    """Build the windowed dataset of one DPC from raw records.

    Gaps of up to three 5-minute intervals are forward-filled; windows that
    touch a longer gap are dropped.  Normalisation is fit on the training
    days' samples only.
    """
    train_days = sorted(train_days)
    test_days = sorted(test_days)
    _check_days(train_days, test_days)
    if window_len < 1 or window_len >= SLOTS_PER_PERIOD:
        raise DomainError(f"window_len must be in 1..{SLOTS_PER_PERIOD - 1}")
    L = window_len
    mine = [r for r in records if r.detector_id == dpc.detector_id]

    def collect(days):
        X, y, values = [], [], []
        for d in days:
            slots = forward_fill(period_slots(mine, dpc, d))
            starts = day_windows(slots, L)
            if not starts:
                warnings.warn(f"{dpc.key} {d.isoformat()}: fewer than {L + 1} usable "
                              "contiguous samples, day contributes no windows", DataWarning,
                              stacklevel=3)
            values.append(slots[~np.isnan(slots)])
            for s in starts:
                X.append(slots[s:s + L])
                y.append(slots[s + L])
        X = np.array(X).reshape(-1, L)
        return X, np.array(y, dtype=float), np.concatenate(values)

    Xtr, ytr, train_values = collect(train_days)
    if len(ytr) == 0:
        raise DataError(f"{dpc.key}: no training windows")
    Xte, yte, _ = collect(test_days)
    norm = Normalization.fit(train_values)
    return DpcDataset(
        window_len=L,
        X_train=norm.normalize(Xtr),
        y_train=norm.normalize(ytr),
        X_test=norm.normalize(Xte),
        y_test=norm.normalize(yte),
        raw_test_targets=yte,
        normalization=norm,
        dpc=dpc,
        train_days=train_days,
        test_days=test_days,
    )


def weekdays_in(records):
    return sorted({r.timestamp.date() for r in records if r.timestamp.weekday() < 5})


def split_days(records, n_train=5, n_test=3):
    """First ``n_train`` weekdays for training, the next ``n_test`` for testing."""
    days = weekdays_in(records)
    if len(days) < n_train + n_test:
        raise DataError(f"need {n_train + n_test} weekdays of data, found {len(days)}")
    return days[:n_train], days[n_train:n_train + n_test]


def extract_all(records, train_days=None, test_days=None, window_len=12):
    """Datasets for every DPC present in ``records``, keyed by :class:`Dpc`."""
    if train_days is None or test_days is None:
        train_days, test_days = split_days(records)
    return {dpc: extract_dpc(records, dpc, train_days, test_days, window_len)
            for dpc in dpcs_for(r.detector_id for r in records)}


# -- synthetic data -------------------------------------------------------------

PROFILES = ("bimodalCommute", "flat", "noisy")
SYNTH_START = date(2017, 10, 16)  # a Monday


def synthetic_days(days, start=SYNTH_START):
    out, d = [], start
    while len(out) < days:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return out


def _bump(t, center, width):
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def generate_synthetic(detectors, days, seed, profile="bimodalCommute"):
    """Deterministic 5-minute speed records for ``detectors`` over ``days`` weekdays.

    ``bimodalCommute`` gives each detector a sharp morning slowdown late in the
    AM period and a broad early slowdown in the PM period, so the two periods
    of one detector have clearly different shapes.
    """
    if profile not in PROFILES:
        raise DomainError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    if days < 8:
        raise DomainError("need at least 8 days (5 training + 3 testing)")
    if detectors < 1:
        raise DomainError("need at least one detector")
    rng = np.random.default_rng(seed)
    minutes = np.arange(0, 24 * 60, 5)
    hours = minutes / 60.0
    records = []
    for d in range(detectors):
        det_id = f"{400000 + 17 * d + 1}"
        free_flow = rng.uniform(62.0, 70.0)
        am_depth, am_center, am_width = rng.uniform(20, 32), rng.uniform(7.2, 8.2), rng.uniform(0.6, 0.85)
        pm_depth, pm_center, pm_width = rng.uniform(10, 18), rng.uniform(14.8, 15.6), rng.uniform(1.0, 1.5)
        level = 60.0
        for day in synthetic_days(days):
            if profile == "flat":
                speed = np.full(len(minutes), 60.0)
            elif profile == "noisy":
                steps = rng.normal(0.0, 1.5, len(minutes))
                walk = level + np.cumsum(steps)
                speed = np.clip(walk, 15.0, 80.0)
                level = float(speed[-1])
            else:
                a = am_depth * rng.uniform(0.9, 1.1)
                ac = am_center + rng.normal(0, 0.08)
                p = pm_depth * rng.uniform(0.9, 1.1)
                pc = pm_center + rng.normal(0, 0.1)
                base = free_flow - a * _bump(hours, ac, am_width) - p * _bump(hours, pc, pm_width)
                speed = base * (1.0 + rng.normal(0.0, 0.05, len(minutes)))
                speed = np.clip(speed, 5.0, None)
            speed = np.round(speed, 2)
            midnight = datetime.combine(day, time(0, 0))
            for m, v in zip(minutes, speed):
                records.append(SpeedRecord(det_id, midnight + timedelta(minutes=int(m)), float(v)))
    records.sort()
    return records

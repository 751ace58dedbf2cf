"""Building meter/weather ingestion, cleaning, scaling, windowing and splits.

Input files use a long layout::

    meter.csv     timestamp,building_id,value
    weather.csv   timestamp,site_id,air_temperature,dew_temperature,wind_direction,wind_speed
    metadata.csv  building_id,site_id

Node features per hour are, in order: load, day_type, outdoor_temp,
dew_point, wind_dir, wind_speed. Each is min-max scaled per building.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .numerics import ContractError

log = logging.getLogger(__name__)

FEATURES = ("load", "day_type", "outdoor_temp", "dew_point", "wind_dir", "wind_speed")
WEATHER_COLUMNS = ("air_temperature", "dew_temperature", "wind_direction", "wind_speed")
LOAD = 0
DEFAULT_MAX_GAP = 24


class IngestionError(ValueError):
    pass


class CleaningError(ValueError):
    pass


class SplitError(ContractError):
    pass


@dataclass
class BuildingSeries:
    building_id: str
    timestamps: np.ndarray  # datetime64[h]
    load: np.ndarray  # (L,)
    weather: np.ndarray  # (L, 4) in WEATHER_COLUMNS order
    calendar: np.ndarray = field(default=None)  # (L, 4) month, day, hour, day_type

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        self.load = np.asarray(self.load, dtype=float)
        self.weather = np.asarray(self.weather, dtype=float).reshape(len(self.timestamps), len(WEATHER_COLUMNS))
        if self.calendar is None:
            self.calendar = calendar_fields(self.timestamps)
        n = len(self.timestamps)
        if len(self.load) != n or len(self.calendar) != n:
            raise IngestionError(f"building {self.building_id}: per-timestamp arrays differ in length")

    def __len__(self) -> int:
        return len(self.timestamps)


def calendar_fields(timestamps: np.ndarray) -> np.ndarray:
    """month, day, hour, day_type (1 = Mon-Fri workday, 0 = weekend)."""
    idx = pd.DatetimeIndex(np.asarray(timestamps, dtype="datetime64[ns]"))
    workday = (idx.dayofweek < 5).astype(int)
    return np.column_stack([idx.month, idx.day, idx.hour, workday]).astype(int)


@dataclass
class Scaler:
    min: np.ndarray
    max: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.max == self.min

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        span = np.where(self.degenerate, 1.0, self.max - self.min)
        out = (x - self.min) / span
        return np.where(self.degenerate, 0.0, out)

    def inverse(self, x_hat: np.ndarray) -> np.ndarray:
        return np.asarray(x_hat, dtype=float) * (self.max - self.min) + self.min


def minmax_fit_transform(x) -> tuple[np.ndarray, Scaler]:
    """Column-wise min-max scaling. Constant columns map to 0 and are flagged."""
    x = np.asarray(x, dtype=float)
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise ValueError("min-max scaling needs a nonempty finite array")
    scaler = Scaler(np.min(x, axis=0), np.max(x, axis=0))
    return scaler.transform(x), scaler


@dataclass
class BuildingDataset:
    buildings: list[BuildingSeries]
    features: np.ndarray  # (L, N, d) in [0, 1]
    scalers: list[Scaler]  # one per building, covering the d features

    @property
    def building_ids(self) -> list[str]:
        return [b.building_id for b in self.buildings]

    @property
    def timestamps(self) -> np.ndarray:
        return self.buildings[0].timestamps if self.buildings else np.array([], dtype="datetime64[h]")

    @property
    def n_nodes(self) -> int:
        return self.features.shape[1]

    def load_kwh(self, normalized: np.ndarray, node: int) -> np.ndarray:
        s = self.scalers[node]
        return np.asarray(normalized) * (s.max[LOAD] - s.min[LOAD]) + s.min[LOAD]


@dataclass
class SpatioTemporalSample:
    x: np.ndarray  # (T, N, d)
    y: np.ndarray  # (M, N, 1)
    origin_index: int


# ----------------------------------------------------------------- ingestion


def _read_csv(path, required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    df = pd.read_csv(path, dtype={"building_id": str, "site_id": str}, float_precision="round_trip")
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise IngestionError(f"{path}: missing columns {missing}")
    return df


def load_bdg2(meter_csv, weather_csv, metadata_csv, building_ids: Sequence[str],
              max_gap: int = DEFAULT_MAX_GAP) -> list[BuildingSeries]:
    """Read one series per requested building, joined to its site's weather.

    Missing hours are reindexed as NaN; a run of missing hours longer than
    ``max_gap`` is rejected here, shorter runs are left for :func:`clean_series`.
    """
    meter = _read_csv(meter_csv, ("timestamp", "building_id", "value"))
    weather = _read_csv(weather_csv, ("timestamp", "site_id", *WEATHER_COLUMNS))
    meta = _read_csv(metadata_csv, ("building_id", "site_id"))
    if not building_ids:
        return []
    available = sorted(meter["building_id"].unique())
    absent = [b for b in building_ids if b not in set(available)]
    if absent:
        raise KeyError(f"buildings {absent} not in {meter_csv}; available: {available}")
    sites = dict(zip(meta["building_id"], meta["site_id"]))
    meter["timestamp"] = pd.to_datetime(meter["timestamp"])
    weather["timestamp"] = pd.to_datetime(weather["timestamp"])

    out = []
    for bid in building_ids:
        if bid not in sites:
            raise KeyError(f"building {bid} has no site in {metadata_csv}")
        m = meter.loc[meter["building_id"] == bid, ["timestamp", "value"]]
        m = m.drop_duplicates("timestamp").set_index("timestamp").sort_index()
        hours = pd.date_range(m.index[0], m.index[-1], freq="h")
        present = m.index.floor("h")
        _check_timestamp_gaps(bid, present, max_gap)
        m = m.reindex(hours)
        w = weather.loc[weather["site_id"] == sites[bid]].drop_duplicates("timestamp")
        w = w.set_index("timestamp").reindex(hours)[list(WEATHER_COLUMNS)]
        out.append(BuildingSeries(
            building_id=bid,
            timestamps=hours.values.astype("datetime64[h]"),
            load=m["value"].to_numpy(dtype=float),
            weather=w.to_numpy(dtype=float),
        ))
    return out


def _check_timestamp_gaps(bid: str, stamps: pd.DatetimeIndex, max_gap: int) -> None:
    if len(stamps) < 2:
        return
    steps = np.diff(stamps.values).astype("timedelta64[h]").astype(int)
    bad = np.flatnonzero(steps - 1 > max_gap)
    if bad.size:
        i = bad[0]
        raise IngestionError(
            f"building {bid}: {steps[i] - 1} missing hours between {stamps[i]} and {stamps[i + 1]} "
            f"(max {max_gap})")


def _nan_runs(x: np.ndarray) -> list[tuple[int, int]]:
    isnan = np.isnan(x).astype(np.int8)
    edges = np.diff(np.concatenate([[0], isnan, [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def _fill(x: np.ndarray, max_gap: int, what: str, bid: str, stamps) -> np.ndarray:
    x = np.array(x, dtype=float)
    if not np.isnan(x).any():
        return x
    n = len(x)
    for start, stop in _nan_runs(x):
        interior = start > 0 and stop < n
        if interior and stop - start > max_gap:
            raise CleaningError(
                f"building {bid}: {what} missing for {stop - start} h starting {stamps[start]} (max {max_gap})")
    ok = np.flatnonzero(~np.isnan(x))
    if ok.size == 0:
        raise CleaningError(f"building {bid}: {what} has no observed values")
    # np.interp clamps to the end values, which is the nearest-value edge fill
    return np.interp(np.arange(n), ok, x[ok])


def clean_series(s: BuildingSeries, max_gap: int = DEFAULT_MAX_GAP) -> BuildingSeries:
    """Interpolate interior gaps up to ``max_gap`` hours and edge-fill the ends."""
    if len(s) > 1 and np.any(np.diff(s.timestamps).astype(int) <= 0):
        raise CleaningError(f"building {s.building_id}: timestamps not strictly increasing")
    load = _fill(s.load, max_gap, "load", s.building_id, s.timestamps)
    weather = np.column_stack([
        _fill(s.weather[:, j], max_gap, WEATHER_COLUMNS[j], s.building_id, s.timestamps)
        for j in range(len(WEATHER_COLUMNS))
    ]) if len(s) else s.weather
    return replace(s, load=load, weather=weather, calendar=s.calendar.copy())


def build_dataset(series: Sequence[BuildingSeries], max_gap: int = DEFAULT_MAX_GAP,
                  clean: bool = True) -> BuildingDataset:
    """Clean, align on the common hour range, and scale into a feature tensor."""
    if not series:
        return BuildingDataset([], np.zeros((0, 0, len(FEATURES))), [])
    if clean:
        series = [clean_series(s, max_gap) for s in series]
    start = max(s.timestamps[0] for s in series)
    stop = min(s.timestamps[-1] for s in series)
    if stop < start:
        raise IngestionError("buildings share no common time range")
    trimmed = []
    for s in series:
        keep = (s.timestamps >= start) & (s.timestamps <= stop)
        trimmed.append(BuildingSeries(s.building_id, s.timestamps[keep], s.load[keep],
                                      s.weather[keep], s.calendar[keep]))
    columns, scalers = [], []
    for s in trimmed:
        raw = np.column_stack([s.load, s.calendar[:, 3], s.weather])
        scaled, scaler = minmax_fit_transform(raw)
        columns.append(scaled)
        scalers.append(scaler)
    return BuildingDataset(trimmed, np.stack(columns, axis=1), scalers)


# ---------------------------------------------------------------- windowing


def make_windows(ds: BuildingDataset | np.ndarray, T: int = 12, M: int = 1) -> list[SpatioTemporalSample]:
    """Stride-1 sliding windows; the target is the load channel only."""
    feats = ds.features if isinstance(ds, BuildingDataset) else np.asarray(ds)
    L = feats.shape[0]
    if L < T + M:
        log.warning("series of length %d too short for T=%d, M=%d; no windows", L, T, M)
        return []
    return [SpatioTemporalSample(feats[s:s + T], feats[s + T:s + T + M, :, LOAD:LOAD + 1], s)
            for s in range(L - T - M + 1)]


def stack_samples(samples: Sequence[SpatioTemporalSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch samples into ``X (S, T, N, d)`` and ``Y (S, M, N, 1)``."""
    return np.stack([s.x for s in samples]), np.stack([s.y for s in samples])


def split_sizes(n: int, ratios=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    # rounding first keeps e.g. 0.1 * 30 from flooring to 2
    n_train = math.floor(round(ratios[0] * n, 9))
    n_val = math.floor(round(ratios[1] * n, 9))
    return n_train, n_val, n - n_train - n_val


def split_chrono(samples: Sequence, ratios=(0.8, 0.1, 0.1)):
    n = len(samples)
    if n < 3:
        raise SplitError(f"need at least 3 samples to split, got {n}")
    origins = [s.origin_index for s in samples]
    if any(b <= a for a, b in zip(origins, origins[1:])):
        raise SplitError("samples must be ordered by origin_index")
    n_train, n_val, _ = split_sizes(n, ratios)
    samples = list(samples)
    return samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:]


# ---------------------------------------------------------------- synthetic


def synth_generate(n_clusters: int = 3, buildings_per_cluster: int = 4, L: int = 2000,
                   noise_sd: float = 0.05, seed: int = 0,
                   start: str = "2016-01-01T00") -> tuple[BuildingDataset, np.ndarray]:
    """Clustered buildings sharing a per-cluster base profile and weather.

    Each cluster is one site. Its base load mixes daily and weekly cycles with
    cluster-specific phase and amplitude plus a temperature-driven term; each
    member adds iid Gaussian noise of ``noise_sd`` to that base.
    """
    if n_clusters < 1 or buildings_per_cluster < 1:
        raise ValueError("need at least one cluster and one building per cluster")
    rng = np.random.default_rng(seed)
    stamps = np.datetime64(start, "h") + np.arange(L).astype("timedelta64[h]")
    cal = calendar_fields(stamps)
    hour = np.arange(L, dtype=float)
    day_of_year = hour / 24.0
    series, labels = [], []
    for c in range(n_clusters):
        phase = 24.0 * c / n_clusters + rng.uniform(-1.0, 1.0)
        amp_day = rng.uniform(0.3, 0.5)
        amp_week = rng.uniform(0.1, 0.2)
        temp_gain = rng.uniform(-0.3, 0.3)
        temp = (10.0 + 12.0 * np.sin(2 * np.pi * (day_of_year - 100.0 + 20 * c) / 365.0)
                + 5.0 * np.sin(2 * np.pi * (hour - 15.0) / 24.0) + rng.normal(0, 1.0, L))
        dew = temp - rng.uniform(2.0, 6.0) - np.abs(rng.normal(0, 1.0, L))
        wind_dir = np.mod(180.0 + 60.0 * c + np.cumsum(rng.normal(0, 10.0, L)), 360.0)
        wind_speed = np.abs(3.0 + np.cumsum(rng.normal(0, 0.2, L)) * 0.1 + rng.normal(0, 0.5, L))
        weather = np.column_stack([temp, dew, wind_dir, wind_speed])
        workday = cal[:, 3].astype(float)
        base = (1.5 + amp_day * np.sin(2 * np.pi * (hour - phase) / 24.0)
                + amp_week * (workday - 0.5)
                + temp_gain * (temp - 10.0) / 12.0)
        for b in range(buildings_per_cluster):
            load = base + rng.normal(0.0, noise_sd, L) if noise_sd > 0 else base.copy()
            series.append(BuildingSeries(f"c{c}_b{b}", stamps, load, weather, cal))
            labels.append(c)
    return build_dataset(series, clean=False), np.asarray(labels)


def write_bdg2(ds: BuildingDataset, out_dir, sites: Sequence[str] | None = None) -> dict[str, Path]:
    """Write a dataset in the three-file CSV layout read by :func:`load_bdg2`.

    ``sites`` gives each building's site id; buildings sharing a site must
    share weather. Defaults to one site per distinct weather block.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if sites is None:
        sites, seen = [], {}
        for b in ds.buildings:
            key = b.weather.tobytes()
            seen.setdefault(key, f"site{len(seen)}")
            sites.append(seen[key])
    stamps = [str(t).replace("T", " ") + ":00:00" for t in ds.timestamps]
    paths = {k: out_dir / f"{k}.csv" for k in ("meter", "weather", "metadata")}
    with open(paths["meter"], "w") as f:
        f.write("timestamp,building_id,value\n")
        for b in ds.buildings:
            for t, v in zip(stamps, b.load):
                f.write(f"{t},{b.building_id},{'' if np.isnan(v) else repr(float(v))}\n")
    with open(paths["weather"], "w") as f:
        f.write("timestamp,site_id," + ",".join(WEATHER_COLUMNS) + "\n")
        done = set()
        for b, site in zip(ds.buildings, sites):
            if site in done:
                continue
            done.add(site)
            for t, row in zip(stamps, b.weather):
                f.write(f"{t},{site}," + ",".join(repr(float(v)) for v in row) + "\n")
    with open(paths["metadata"], "w") as f:
        f.write("building_id,site_id\n")
        for b, site in zip(ds.buildings, sites):
            f.write(f"{b.building_id},{site}\n")
    return paths

"""Training samples: persistence-factor windows, GPH stacks and targets.

A sample at time index ``t`` of a track uses rows ``t-m .. t`` as input and
needs ``t-m-4 >= 0`` (the wind-change factor looks back 4 steps). Targets are
the displacements of the next ``tau`` positions from position ``t`` and the
``m+1`` GPH crops that follow ``t``. Every crop is centred on the storm
position at its own timestep.
"""
from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .baselines import InsufficientHistory, build_cliper_factors
from .bst import TCTrack
from .gph import CoverageError, GPHSource, crop_gph
from .tensor import read_container, write_container

log = logging.getLogger(__name__)

N_FACTORS = 6
WIND_LOOKBACK = 4
FACTOR_NAMES = ("lat", "lon", "max_wind", "dlat_6h", "dlon_6h", "dwind_24h")

# genesis-year ranges, inclusive
SPLIT_YEARS = {
    "train": (1979, 2008),
    "val": (2009, 2013),
    "test": (2014, 2018),
}


@dataclass
class FeatureWindow:
    values: np.ndarray  # (m+1, 6)
    origin_time: datetime
    normalization_stats: "ZScore | None" = None


@dataclass
class GPHSequence:
    grids: np.ndarray  # (m+1, q, q)
    center: np.ndarray  # (m+1, 2)
    resolution: float


@dataclass
class Sample:
    storm_id: str
    t_index: int
    features: FeatureWindow
    gph: GPHSequence | None
    target_track: np.ndarray  # (tau, 2)
    target_gph: np.ndarray | None  # (m+1, q, q)
    origin: np.ndarray  # (2,)
    genesis_year: int
    intensity: int
    split_tag: str = ""
    cliper: np.ndarray | None = None  # (46,) reference-model factors

    @property
    def origin_time(self) -> datetime:
        return self.features.origin_time


@dataclass
class ZScore:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, axis) -> "ZScore":
        mean = values.mean(axis=axis)
        std = values.std(axis=axis)
        std = np.where(std > 0, std, 1.0)
        return cls(np.asarray(mean, dtype=float), np.asarray(std, dtype=float))

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_dict(cls, d) -> "ZScore":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass
class NormStats:
    """Train-split statistics for features (per column), GPH (scalar) and deltas."""

    features: ZScore
    gph: ZScore
    deltas: ZScore

    @classmethod
    def fit(cls, arrays: "SampleArrays") -> "NormStats":
        gph = arrays.gph if arrays.gph is not None else np.zeros(1)
        return cls(
            features=ZScore.fit(arrays.x.reshape(-1, arrays.x.shape[-1]), axis=0),
            gph=ZScore.fit(gph.reshape(-1), axis=0),
            deltas=ZScore.fit(arrays.y.reshape(-1, 2), axis=0),
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in ("features", "gph", "deltas")}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(**{k: ZScore.from_dict(d[k]) for k in ("features", "gph", "deltas")})


@dataclass
class IngestReport:
    tracks_in: int = 0
    tracks_kept: int = 0
    samples: int = 0
    skipped_history: int = 0
    skipped_future: int = 0
    skipped_coverage: int = 0
    excluded_storms: list = field(default_factory=list)
    split_counts: Counter = field(default_factory=Counter)
    split_storms: Counter = field(default_factory=Counter)
    errors: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"tracks read: {self.tracks_in}",
            f"tracks kept (life cycle filter): {self.tracks_kept}",
            f"samples: {self.samples}",
            f"windows skipped, short history: {self.skipped_history}",
            f"windows skipped, short future: {self.skipped_future}",
            f"windows skipped, GPH coverage: {self.skipped_coverage}",
            f"storms outside split years: {len(self.excluded_storms)}",
        ]
        for split in SPLIT_YEARS:
            lines.append(f"{split}: {self.split_storms.get(split, 0)} storms, "
                         f"{self.split_counts.get(split, 0)} samples")
        lines.append(f"parse errors: {len(self.errors)}")
        lines.extend(f"  {e}" for e in self.errors)
        return "\n".join(lines) + "\n"


def build_feature_window(track: TCTrack, t: int, m: int = 4) -> FeatureWindow:
    """Persistence factors for rows ``t-m .. t`` (un-normalized)."""
    if t - m - WIND_LOOKBACK < 0:
        raise InsufficientHistory(
            f"window ending at index {t} with m={m} needs index {t - m - WIND_LOOKBACK} >= 0"
        )
    if t >= len(track):
        raise IndexError(f"index {t} outside track of length {len(track)}")
    pos = track.positions()
    wind = track.winds()
    rows = np.arange(t - m, t + 1)
    values = np.column_stack([
        pos[rows, 0],
        pos[rows, 1],
        wind[rows],
        pos[rows, 0] - pos[rows - 1, 0],
        pos[rows, 1] - pos[rows - 1, 1],
        wind[rows] - wind[rows - WIND_LOOKBACK],
    ])
    return FeatureWindow(values=values, origin_time=track.observations[t].timestamp)


def target_deltas(track: TCTrack, t: int, tau: int = 4) -> np.ndarray:
    pos = track.positions()
    if t + tau >= len(track):
        raise IndexError(f"need {tau} positions after index {t}, track has {len(track)}")
    return pos[t + 1 : t + tau + 1] - pos[t]


def window_indices(n_obs: int, m: int = 4, tau: int = 4, gph_future: bool = True) -> range:
    """Valid window-end indices for a track of ``n_obs`` observations."""
    ahead = max(tau, m + 1) if gph_future else tau
    return range(m + WIND_LOOKBACK, n_obs - ahead)


def crop_stack(source, track: TCTrack, rows, q, resolution):
    """Crops for the given track rows, each centred on that row's position."""
    obs = track.observations
    centers = np.array([(obs[r].lat, obs[r].lon) for r in rows])
    grids = np.stack([crop_gph(source, tuple(c), obs[r].timestamp, q, resolution)
                      for r, c in zip(rows, centers)])
    return grids, centers


def make_samples(
    tracks: list[TCTrack],
    source: GPHSource | None,
    m: int = 4,
    tau: int = 4,
    q: int = 51,
    resolution: float | None = None,
    report: IngestReport | None = None,
) -> list[Sample]:
    """One sample per valid window position, ordered by storm then time.

    With ``source=None`` the GPH parts are left empty (TC-only use).
    """
    report = report if report is not None else IngestReport()
    samples = []
    for track in sorted(tracks, key=lambda tr: tr.storm_id):
        n = len(track)
        ahead = max(tau, m + 1) if source is not None else tau
        for t in range(n):
            if t - m - WIND_LOOKBACK < 0:
                report.skipped_history += 1
                continue
            if t + ahead >= n:
                report.skipped_future += 1
                continue
            window = build_feature_window(track, t, m)
            gph = target_gph = None
            if source is not None:
                try:
                    grids, centers = crop_stack(source, track, range(t - m, t + 1), q, resolution)
                    future, _ = crop_stack(source, track, range(t + 1, t + m + 2), q, resolution)
                except CoverageError as exc:
                    report.skipped_coverage += 1
                    log.debug("skip %s@%d: %s", track.storm_id, t, exc)
                    continue
                res = resolution if resolution is not None else source.grid_at(track.observations[t].timestamp).resolution
                gph = GPHSequence(grids, centers, res)
                target_gph = future
            ob = track.observations[t]
            samples.append(Sample(
                storm_id=track.storm_id,
                t_index=t,
                features=window,
                gph=gph,
                target_track=target_deltas(track, t, tau),
                target_gph=target_gph,
                origin=np.array([ob.lat, ob.lon]),
                genesis_year=track.genesis_year,
                intensity=ob.intensity_category,
                cliper=build_cliper_factors(track, t),
            ))
    report.samples += len(samples)
    return samples


def split_for_year(year: int, ranges=SPLIT_YEARS) -> str | None:
    for name, (lo, hi) in ranges.items():
        if lo <= year <= hi:
            return name
    return None


def split_by_years(samples: list[Sample], ranges=SPLIT_YEARS,
                   report: IngestReport | None = None) -> dict[str, list[Sample]]:
    """Assign samples to splits by their storm's genesis year.

    Samples of storms outside every range are dropped with a warning.
    """
    out: dict[str, list[Sample]] = {name: [] for name in ranges}
    seen: dict[str, str | None] = {}
    for s in samples:
        split = split_for_year(s.genesis_year, ranges)
        if s.storm_id not in seen:
            seen[s.storm_id] = split
            if split is None:
                log.warning("storm %s (genesis %d) is outside all split years; excluded",
                            s.storm_id, s.genesis_year)
                if report is not None:
                    report.excluded_storms.append(s.storm_id)
            elif report is not None:
                report.split_storms[split] += 1
        if split is None:
            continue
        s.split_tag = split
        out[split].append(s)
        if report is not None:
            report.split_counts[split] += 1
    return out


@dataclass
class SampleArrays:
    """Samples stacked into arrays, the form the trainer consumes."""

    x: np.ndarray  # (N, m+1, 6)
    gph: np.ndarray | None  # (N, m+1, q, q)
    y: np.ndarray  # (N, tau, 2)
    tgph: np.ndarray | None  # (N, m+1, q, q)
    origin: np.ndarray  # (N, 2)
    storm_ids: list
    times: list
    intensity: np.ndarray
    split: list
    cliper: np.ndarray | None = None  # (N, 46)
    t_index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "SampleArrays":
        idx = np.asarray(idx, dtype=int)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return SampleArrays(
            self.x[idx], pick(self.gph), self.y[idx], pick(self.tgph), self.origin[idx],
            [self.storm_ids[i] for i in idx], [self.times[i] for i in idx],
            self.intensity[idx], [self.split[i] for i in idx],
            pick(self.cliper), pick(self.t_index),
        )

    def where_split(self, name: str) -> "SampleArrays":
        return self.subset([i for i, s in enumerate(self.split) if s == name])

    @property
    def truth(self) -> np.ndarray:
        return self.origin[:, None, :] + self.y


def stack_samples(samples: list[Sample]) -> SampleArrays:
    if not samples:
        raise ValueError("no samples to stack")
    has_gph = samples[0].gph is not None
    return SampleArrays(
        x=np.stack([s.features.values for s in samples]),
        gph=np.stack([s.gph.grids for s in samples]) if has_gph else None,
        y=np.stack([s.target_track for s in samples]),
        tgph=np.stack([s.target_gph for s in samples]) if has_gph else None,
        origin=np.stack([s.origin for s in samples]),
        storm_ids=[s.storm_id for s in samples],
        times=[s.origin_time for s in samples],
        intensity=np.array([s.intensity for s in samples], dtype=int),
        split=[s.split_tag for s in samples],
        cliper=np.stack([s.cliper for s in samples]) if samples[0].cliper is not None else None,
        t_index=np.array([s.t_index for s in samples], dtype=int),
    )


def data_config_hash(config: dict) -> str:
    """Stable digest of the settings that shape a dataset (window, horizon, crop)."""
    text = json.dumps(config, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_dataset(path, arrays: SampleArrays, norm: NormStats, config: dict) -> Path:
    """Write stacked samples, train-split statistics and the data config to one container."""
    out = {
        "x": arrays.x,
        "y": arrays.y,
        "origin": arrays.origin,
        "intensity": arrays.intensity,
        "storm_ids": np.array(arrays.storm_ids, dtype=str),
        "times": np.array([int(t.strftime("%Y%m%d%H")) for t in arrays.times], dtype=np.int64),
        "split": np.array(arrays.split, dtype=str),
    }
    for name in ("gph", "tgph", "cliper", "t_index"):
        value = getattr(arrays, name)
        if value is not None:
            out[name] = value
    meta = {"config": config, "data_hash": data_config_hash(config), "norm": norm.to_dict()}
    return write_container(path, out, meta)


def load_dataset(path) -> tuple[SampleArrays, NormStats, dict]:
    """Inverse of :func:`save_dataset`; returns ``(arrays, norm, meta)``."""
    data, meta = read_container(path)
    if "x" not in data or "norm" not in meta:
        raise ValueError(f"{path} is not a dataset container")
    arrays = SampleArrays(
        x=data["x"], gph=data.get("gph"), y=data["y"], tgph=data.get("tgph"),
        origin=data["origin"], storm_ids=[str(s) for s in data["storm_ids"]],
        times=[datetime.strptime(str(t), "%Y%m%d%H") for t in data["times"]],
        intensity=data["intensity"], split=[str(s) for s in data["split"]],
        cliper=data.get("cliper"), t_index=data.get("t_index"),
    )
    return arrays, NormStats.from_dict(meta["norm"]), meta

"""500 hPa geopotential-height grids: storage, sources and storm-centred crops.

Grid text format (one file per timestep)::

    YYYYMMDDHH lat0 lon0 resolution nlat [nlon]
    v v v ... (nlon values)      <- row 0, latitude lat0
    ...                          <- row nlat-1, latitude lat0 + (nlat-1)*resolution

``nlon`` defaults to ``nlat`` (a square q x q crop). Rows run south to north,
columns west to east. A directory archive holds these files plus an
``index.txt`` manifest of ``YYYYMMDDHH filename`` lines.

Converting a reanalysis archive means producing such files (or implementing
:class:`GPHSource`, which only needs ``grid_at(timestamp)``).
"""
from __future__ import annotations

import functools
import io
import os
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol

import numpy as np

INDEX_NAME = "index.txt"
TIME_FMT = "%Y%m%d%H"


class CoverageError(ValueError):
    """The requested crop window is not fully covered by the source grid."""


@dataclass(frozen=True)
class LatLonGrid:
    lat0: float
    lon0: float
    resolution: float
    values: np.ndarray  # (nlat, nlon)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def lat_max(self) -> float:
        return self.lat0 + (self.values.shape[0] - 1) * self.resolution

    @property
    def lon_max(self) -> float:
        return self.lon0 + (self.values.shape[1] - 1) * self.resolution

    def latitudes(self) -> np.ndarray:
        return self.lat0 + self.resolution * np.arange(self.values.shape[0])

    def longitudes(self) -> np.ndarray:
        return self.lon0 + self.resolution * np.arange(self.values.shape[1])


class GPHSource(Protocol):
    def grid_at(self, timestamp: datetime) -> LatLonGrid: ...


class InMemoryGPHSource:
    def __init__(self, grids: Mapping[datetime, LatLonGrid]):
        self._grids = dict(grids)

    def grid_at(self, timestamp: datetime) -> LatLonGrid:
        try:
            return self._grids[timestamp]
        except KeyError:
            raise CoverageError(f"no GPH grid for {timestamp:{TIME_FMT}}") from None

    def timestamps(self) -> list[datetime]:
        return sorted(self._grids)


class AnalyticGPHSource:
    """Evaluates ``field(lat, lon, timestamp)`` on a fixed regular domain."""

    def __init__(
        self,
        field: Callable[[np.ndarray, np.ndarray, datetime], np.ndarray],
        lat_range: tuple[float, float],
        lon_range: tuple[float, float],
        resolution: float,
        cache_size: int = 64,
    ):
        self.field = field
        self.resolution = float(resolution)
        self.lat0, self.lon0 = float(lat_range[0]), float(lon_range[0])
        nlat = int(round((lat_range[1] - lat_range[0]) / resolution)) + 1
        nlon = int(round((lon_range[1] - lon_range[0]) / resolution)) + 1
        lats = self.lat0 + resolution * np.arange(nlat)
        lons = self.lon0 + resolution * np.arange(nlon)
        self._lat2d, self._lon2d = np.meshgrid(lats, lons, indexing="ij")
        self.grid_at = functools.lru_cache(maxsize=cache_size)(self._evaluate)

    def _evaluate(self, timestamp: datetime) -> LatLonGrid:
        values = np.asarray(self.field(self._lat2d, self._lon2d, timestamp), dtype=float)
        return LatLonGrid(self.lat0, self.lon0, self.resolution, values)


class GridDirectorySource:
    """Reads a directory archive written by :func:`write_grid_archive`."""

    def __init__(self, directory: str | os.PathLike, cache_size: int = 32):
        self.directory = Path(directory)
        index = self.directory / INDEX_NAME
        if not index.exists():
            raise FileNotFoundError(f"missing GPH index manifest {index}")
        self._files: dict[datetime, str] = {}
        for line in index.read_text().splitlines():
            if line.strip():
                stamp, name = line.split()
                self._files[datetime.strptime(stamp, TIME_FMT)] = name
        self._load = functools.lru_cache(maxsize=cache_size)(self._read)

    def _read(self, timestamp: datetime) -> LatLonGrid:
        return read_grid(self.directory / self._files[timestamp])[1]

    def grid_at(self, timestamp: datetime) -> LatLonGrid:
        if timestamp not in self._files:
            raise CoverageError(f"no GPH grid for {timestamp:{TIME_FMT}} in {self.directory}")
        return self._load(timestamp)

    def timestamps(self) -> list[datetime]:
        return sorted(self._files)


def crop_gph(
    source: GPHSource,
    center: tuple[float, float],
    at: datetime,
    q: int = 51,
    resolution: float | None = None,
) -> np.ndarray:
    """Return the q x q window centred on the source cell nearest ``center``."""
    if q < 1 or q % 2 == 0:
        raise ValueError(f"crop size q must be odd and positive, got {q}")
    grid = source.grid_at(at)
    if resolution is not None and not np.isclose(resolution, grid.resolution):
        raise ValueError(
            f"source resolution {grid.resolution} deg differs from requested {resolution} deg"
        )
    lat, lon = center
    res = grid.resolution
    i = int(np.floor((lat - grid.lat0) / res + 0.5))
    j = int(np.floor((lon - grid.lon0) / res + 0.5))
    half = q // 2
    nlat, nlon = grid.shape
    if i - half < 0 or j - half < 0 or i + half >= nlat or j + half >= nlon:
        need_lat = (grid.lat0 + (i - half) * res, grid.lat0 + (i + half) * res)
        need_lon = (grid.lon0 + (j - half) * res, grid.lon0 + (j + half) * res)
        raise CoverageError(
            f"crop at ({lat:.2f}N, {lon:.2f}E) {at:{TIME_FMT}} needs "
            f"lat {need_lat[0]:.2f}..{need_lat[1]:.2f}, lon {need_lon[0]:.2f}..{need_lon[1]:.2f}; "
            f"source covers lat {grid.lat0:.2f}..{grid.lat_max:.2f}, "
            f"lon {grid.lon0:.2f}..{grid.lon_max:.2f}"
        )
    window = grid.values[i - half : i + half + 1, j - half : j + half + 1]
    return np.array(window, dtype=float)


def format_grid(timestamp: datetime, grid: LatLonGrid, fmt: str = "%.3f") -> str:
    nlat, nlon = grid.shape
    size = f"{nlat}" if nlat == nlon else f"{nlat} {nlon}"
    out = io.StringIO()
    out.write(f"{timestamp:{TIME_FMT}} {grid.lat0!r} {grid.lon0!r} {grid.resolution!r} {size}\n")
    np.savetxt(out, grid.values, fmt=fmt)
    return out.getvalue()


def parse_grid(text: str) -> tuple[datetime, LatLonGrid]:
    header, _, body = text.partition("\n")
    parts = header.split()
    if len(parts) not in (5, 6):
        raise ValueError(f"bad grid header {header!r}")
    stamp = datetime.strptime(parts[0], TIME_FMT)
    lat0, lon0, res = (float(p) for p in parts[1:4])
    nlat = int(parts[4])
    nlon = int(parts[5]) if len(parts) == 6 else nlat
    values = np.loadtxt(io.StringIO(body), dtype=float, ndmin=2)
    if values.shape != (nlat, nlon):
        raise ValueError(f"grid body has shape {values.shape}, header says ({nlat}, {nlon})")
    if not np.all(np.isfinite(values)):
        raise ValueError("grid contains non-finite values")
    return stamp, LatLonGrid(lat0, lon0, res, values)


def write_grid(path, timestamp: datetime, grid: LatLonGrid, fmt: str = "%.3f") -> None:
    Path(path).write_text(format_grid(timestamp, grid, fmt))


def read_grid(path) -> tuple[datetime, LatLonGrid]:
    return parse_grid(Path(path).read_text())


def write_grid_archive(
    directory, grids: Iterable[tuple[datetime, LatLonGrid]], fmt: str = "%.3f"
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for stamp, grid in sorted(grids, key=lambda item: item[0]):
        name = f"gph_{stamp:{TIME_FMT}}.txt"
        write_grid(directory / name, stamp, grid, fmt)
        lines.append(f"{stamp:{TIME_FMT}} {name}")
    (directory / INDEX_NAME).write_text("\n".join(lines) + ("\n" if lines else ""))
    return directory


def write_stack(path, stamps: Iterable[datetime], centers, stack: np.ndarray, resolution: float,
                fmt: str = "%.3f") -> None:
    """Export a (T, q, q) storm-centred stack (e.g. a predicted GPH sequence).

    Each slice becomes one grid block in the file format above, with lat0/lon0
    set from the crop centre.
    """
    blocks = []
    q = stack.shape[-1]
    for stamp, (clat, clon), grid in zip(stamps, centers, stack):
        half = (q // 2) * resolution
        g = LatLonGrid(float(clat) - half, float(clon) - half, resolution, np.asarray(grid))
        blocks.append(format_grid(stamp, g, fmt))
    Path(path).write_text("".join(blocks))

"""Synthetic pressure-steered storm worlds.

The 500 hPa height field is a drifting, pulsing subtropical-high ridge plus,
per storm, a few travelling Gaussian highs/lows ("eddies") that exist while
that storm is alive. Storms move with a geostrophic-style steering flow
(along height contours, clockwise round highs) plus a constant beta drift::

    dlat/dt =  k * dZ/dlon + drift_lat
    dlon/dt = -k * dZ/dlat + drift_lon

in plain degrees per hour. Gradients are closed-form, so tests can integrate
the returned :class:`SteeringLaw` independently of the generator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .bst import TCObservation, TCTrack, intensity_code_from_wind, serialize_bst
from .gph import AnalyticGPHSource, LatLonGrid, write_grid_archive

EPOCH = datetime(1979, 1, 1)
STEP_HOURS = 6.0

# Storms are stopped before leaving this box (the basin with a small margin).
BASIN = {"lat": (1.0, 48.0), "lon": (102.0, 208.0)}


@dataclass
class SynthConfig:
    n_storms: int = 40
    duration_steps: tuple = (20, 36)
    noise: float = 0.0  # white noise (gpm) on gridded heights
    track_noise: float = 0.0  # observation noise (deg) on reported positions
    years: tuple = (1979, 2018)
    resolution: float = 1.0
    domain_lat: tuple = (-20.0, 75.0)
    domain_lon: tuple = (70.0, 240.0)
    base_height: float = 5870.0
    ridge_amplitude: float = 120.0
    ridge_sigma: tuple = (10.0, 22.0)  # lat, lon (deg)
    ridge_center: tuple = (30.0, 150.0)
    ridge_wander: tuple = (4.0, 15.0)  # lat, lon excursion amplitude (deg)
    ridge_periods: tuple = (211.0, 307.0, 173.0)  # hours: lat, lon, amplitude pulsing
    eddies_per_storm: int = 3
    eddy_amplitude: tuple = (30.0, 80.0)
    eddy_sigma: tuple = (3.0, 6.0)
    eddy_speed: float = 0.08  # deg/h, max per component
    steering_gain: float = 0.03  # deg^2 / (h * gpm)
    beta_drift: tuple = (0.025, -0.015)  # deg/h (lat, lon)
    genesis_lat: tuple = (8.0, 20.0)
    genesis_lon: tuple = (128.0, 170.0)
    substeps: int = 24

    def __post_init__(self):
        self.duration_steps = tuple(self.duration_steps)
        self.years = tuple(self.years)


def hours_since_epoch(when: datetime) -> float:
    return (when - EPOCH).total_seconds() / 3600.0


@dataclass
class Eddies:
    lat: np.ndarray
    lon: np.ndarray
    vlat: np.ndarray
    vlon: np.ndarray
    amp: np.ndarray
    sigma: np.ndarray
    t0: np.ndarray  # reference hour for the drift
    start: np.ndarray
    end: np.ndarray

    @classmethod
    def empty(cls) -> "Eddies":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z, z, z, z)

    def active(self, hours: float) -> np.ndarray:
        return np.nonzero((self.start <= hours) & (hours <= self.end))[0]


@dataclass
class SteeringLaw:
    """Closed-form height field, its gradient, and the resulting storm velocity."""

    config: SynthConfig
    phases: np.ndarray  # (3,)
    eddies: Eddies = field(default_factory=Eddies.empty)

    def _ridge(self, hours):
        c = self.config
        p_lat, p_lon, p_amp = c.ridge_periods
        lat_r = c.ridge_center[0] + c.ridge_wander[0] * np.sin(2 * np.pi * hours / p_lat + self.phases[0])
        lon_r = c.ridge_center[1] + c.ridge_wander[1] * np.sin(2 * np.pi * hours / p_lon + self.phases[1])
        amp = c.ridge_amplitude * (1.0 + 0.3 * np.sin(2 * np.pi * hours / p_amp + self.phases[2]))
        return lat_r, lon_r, amp

    def _eddy_params(self, hours):
        e = self.eddies
        k = e.active(hours)
        dt = hours - e.t0[k]
        return e.lat[k] + e.vlat[k] * dt, e.lon[k] + e.vlon[k] * dt, e.amp[k], e.sigma[k]

    def height(self, lat, lon, hours: float):
        """Height (gpm) without grid noise."""
        c = self.config
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        lat_r, lon_r, amp = self._ridge(hours)
        sl, sn = c.ridge_sigma
        z = c.base_height + amp * np.exp(-0.5 * (((lat - lat_r) / sl) ** 2 + ((lon - lon_r) / sn) ** 2))
        for elat, elon, eamp, esig in zip(*self._eddy_params(hours)):
            z = z + eamp * np.exp(-0.5 * ((lat - elat) ** 2 + (lon - elon) ** 2) / esig**2)
        return z

    def gradient(self, lat, lon, hours):
        """(dZ/dlat, dZ/dlon) in gpm per degree.

        Accepts scalars or equal-shape arrays of points and times.
        """
        c = self.config
        lat, lon, hours = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lat, lon, hours)))
        lat_r, lon_r, amp = self._ridge(hours)
        sl, sn = c.ridge_sigma
        g = amp * np.exp(-0.5 * (((lat - lat_r) / sl) ** 2 + ((lon - lon_r) / sn) ** 2))
        dlat = -g * (lat - lat_r) / sl**2
        dlon = -g * (lon - lon_r) / sn**2
        e = self.eddies
        if len(e.amp):
            # only (point, eddy) pairs alive at the point's time contribute
            flat_t = hours.reshape(-1)
            pi, ei = np.nonzero((e.start <= flat_t[:, None]) & (flat_t[:, None] <= e.end))
            dt = flat_t[pi] - e.t0[ei]
            ry = lat.reshape(-1)[pi] - (e.lat[ei] + e.vlat[ei] * dt)
            rx = lon.reshape(-1)[pi] - (e.lon[ei] + e.vlon[ei] * dt)
            s2 = e.sigma[ei] ** 2
            ge = e.amp[ei] * np.exp(-0.5 * (ry**2 + rx**2) / s2)
            size = flat_t.size
            dlat = dlat - np.bincount(pi, ge * ry / s2, minlength=size).reshape(lat.shape)
            dlon = dlon - np.bincount(pi, ge * rx / s2, minlength=size).reshape(lat.shape)
        if dlat.ndim == 0:
            return float(dlat), float(dlon)
        return dlat, dlon

    def velocity(self, lat, lon, hours):
        """Storm motion (dlat/dt, dlon/dt) in degrees per hour."""
        c = self.config
        gl, gn = self.gradient(lat, lon, hours)
        return c.steering_gain * gn + c.beta_drift[0], -c.steering_gain * gl + c.beta_drift[1]

    def advance(self, lat, lon, hours, span: float = STEP_HOURS, substeps: int | None = None):
        """Classical RK4 over ``span`` hours (scalars or arrays of storms)."""
        n = substeps or self.config.substeps
        h = span / n
        y = np.stack(np.broadcast_arrays(np.asarray(lat, float), np.asarray(lon, float)))
        t = np.asarray(hours, dtype=float)
        f = lambda tt, yy: np.stack(np.broadcast_arrays(*self.velocity(yy[0], yy[1], tt)))  # noqa: E731
        for _ in range(n):
            k1 = f(t, y)
            k2 = f(t + h / 2, y + h / 2 * k1)
            k3 = f(t + h / 2, y + h / 2 * k2)
            k4 = f(t + h, y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t = t + h
        if y.ndim == 1:
            return float(y[0]), float(y[1])
        return y[0], y[1]


@dataclass
class SynthWorld:
    config: SynthConfig
    seed: int
    tracks: list[TCTrack]
    source: AnalyticGPHSource
    law: SteeringLaw
    true_positions: dict  # storm_id -> (n, 2) noise-free positions
    genesis_hours: dict  # storm_id -> hours since EPOCH


def _in_basin(lat, lon) -> bool:
    return BASIN["lat"][0] <= lat <= BASIN["lat"][1] and BASIN["lon"][0] <= lon <= BASIN["lon"][1]


def synth_world(config: SynthConfig | None = None, seed: int = 0) -> SynthWorld:
    """Generate storms, the height field they live in, and the steering law."""
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, size=3)

    span_hours = hours_since_epoch(datetime(cfg.years[1], 12, 31, 18)) - hours_since_epoch(datetime(cfg.years[0], 1, 1))
    first = hours_since_epoch(datetime(cfg.years[0], 1, 1))
    plans = []
    for k in range(cfg.n_storms):
        start = first + STEP_HOURS * rng.integers(0, int(span_hours // STEP_HOURS) - 64)
        steps = int(rng.integers(cfg.duration_steps[0], cfg.duration_steps[1] + 1))
        lat0 = rng.uniform(*cfg.genesis_lat)
        lon0 = rng.uniform(*cfg.genesis_lon)
        peak = rng.uniform(25.0, 62.0)
        ne = cfg.eddies_per_storm
        eddy = dict(
            lat=lat0 + rng.uniform(-6.0, 16.0, ne),
            lon=lon0 + rng.uniform(-22.0, 8.0, ne),
            vlat=rng.uniform(-cfg.eddy_speed, cfg.eddy_speed, ne),
            vlon=rng.uniform(-cfg.eddy_speed, cfg.eddy_speed, ne),
            amp=rng.choice([-1.0, 1.0], ne) * rng.uniform(*cfg.eddy_amplitude, ne),
            sigma=rng.uniform(*cfg.eddy_sigma, ne),
        )
        plans.append((f"S{k:04d}", start, steps, lat0, lon0, peak, eddy))

    # Eddies live from 2 days before genesis to 2 days after the planned end.
    parts = {name: [] for name in ("lat", "lon", "vlat", "vlon", "amp", "sigma", "t0", "start", "end")}
    for _, start, steps, *_rest, eddy in plans:
        ne = len(eddy["amp"])
        for name in ("lat", "lon", "vlat", "vlon", "amp", "sigma"):
            parts[name].append(eddy[name])
        parts["t0"].append(np.full(ne, start))
        parts["start"].append(np.full(ne, start - 48.0))
        parts["end"].append(np.full(ne, start + STEP_HOURS * steps + 48.0))
    eddies = Eddies(**{k: (np.concatenate(v) if v else np.zeros(0)) for k, v in parts.items()})
    law = SteeringLaw(cfg, phases, eddies)

    tracks, truth, genesis = [], {}, {}
    obs_rng = np.random.default_rng([seed, 1])
    n_plan = len(plans)
    lat = np.array([p[3] for p in plans], dtype=float)
    lon = np.array([p[4] for p in plans], dtype=float)
    starts = np.array([p[1] for p in plans], dtype=float)
    longest = max((p[2] for p in plans), default=0)
    path = np.full((max(longest, 1), n_plan, 2), np.nan)
    path[0, :, 0], path[0, :, 1] = lat, lon
    alive = np.ones(n_plan, dtype=bool)
    for k in range(1, longest):
        alive &= np.array([k < p[2] for p in plans])
        if not alive.any():
            break
        nlat, nlon = law.advance(lat[alive], lon[alive], starts[alive] + STEP_HOURS * (k - 1))
        lat[alive], lon[alive] = nlat, nlon
        inside = np.array([_in_basin(a, b) for a, b in zip(lat, lon)])
        alive &= inside
        path[k, alive, 0], path[k, alive, 1] = lat[alive], lon[alive]
    for j, (sid, start, steps, _, _, peak, _) in enumerate(plans):
        pos = path[:, j]
        pos = pos[: np.argmax(np.isnan(pos[:, 0])) if np.isnan(pos[:, 0]).any() else len(pos)]
        pos = np.array(pos)
        n = len(pos)
        phase = np.clip(np.sin(np.pi * np.arange(n) / max(steps - 1, 1)), 0.0, None) ** 1.5
        wind = np.round(12.0 + (peak - 12.0) * phase)
        observed = pos + (obs_rng.normal(0.0, cfg.track_noise, pos.shape) if cfg.track_noise > 0 else 0.0)
        observed = np.round(observed, 1)
        obs = []
        for i in range(n):
            when = EPOCH + timedelta(hours=start + STEP_HOURS * i)
            la = float(np.clip(observed[i, 0], 0.0, 50.0))
            lo = float(np.clip(observed[i, 1], 100.0, 210.0))
            w = float(wind[i])
            obs.append(TCObservation(when, intensity_code_from_wind(w), la, lo,
                                     float(round(1010.0 - 1.4 * (w - 10.0))), w, float(round(0.8 * w))))
        tracks.append(TCTrack(sid, obs, name=sid))
        truth[sid] = pos
        genesis[sid] = start

    def field_fn(lat2d, lon2d, when):
        hours = hours_since_epoch(when)
        z = law.height(lat2d, lon2d, hours)
        if cfg.noise > 0:
            z = z + np.random.default_rng([seed, 2, int(hours) + 10**7]).normal(0.0, cfg.noise, z.shape)
        return z

    source = AnalyticGPHSource(field_fn, cfg.domain_lat, cfg.domain_lon, cfg.resolution)
    tracks.sort(key=lambda t: (t.observations[0].timestamp, t.storm_id))
    return SynthWorld(cfg, seed, tracks, source, law, truth, genesis)


def write_world(world: SynthWorld, out_dir, q: int = 51) -> tuple[Path, Path]:
    """Write the world as a best-track file plus a GPH grid archive.

    Each timestep's grid covers only the active storms' bounding box with
    room for a q x q crop around every position.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bst_path = out / "tracks.bst"
    bst_path.write_text(serialize_bst(world.tracks))

    res = world.config.resolution
    margin = (q // 2 + 2) * res
    boxes: dict[datetime, list] = {}
    for track in world.tracks:
        for ob in track.observations:
            boxes.setdefault(ob.timestamp, []).append((ob.lat, ob.lon))
    lat_grid0, lon_grid0 = world.source.lat0, world.source.lon0

    def snap(v, origin, down):
        k = (v - origin) / res
        return origin + res * (np.floor(k) if down else np.ceil(k))

    grids = []
    for when, pts in sorted(boxes.items()):
        pts = np.array(pts)
        lat_lo = snap(pts[:, 0].min() - margin, lat_grid0, True)
        lat_hi = snap(pts[:, 0].max() + margin, lat_grid0, False)
        lon_lo = snap(pts[:, 1].min() - margin, lon_grid0, True)
        lon_hi = snap(pts[:, 1].max() + margin, lon_grid0, False)
        full = world.source.grid_at(when)
        i0 = int(round((lat_lo - full.lat0) / res))
        i1 = int(round((lat_hi - full.lat0) / res))
        j0 = int(round((lon_lo - full.lon0) / res))
        j1 = int(round((lon_hi - full.lon0) / res))
        i0, j0 = max(i0, 0), max(j0, 0)
        sub = full.values[i0 : i1 + 1, j0 : j1 + 1]
        grids.append((when, LatLonGrid(full.lat0 + i0 * res, full.lon0 + j0 * res, res, sub)))
    gph_dir = write_grid_archive(out / "gph", grids)
    return bst_path, gph_dir

"""Reference forecasters: constant-velocity extrapolation and CLIPER-BP.

CLIPER-BP screens a fixed table of 46 climatology/persistence factors by
Pearson correlation with the targets, keeps 20, and regresses the track
displacements on them with a one-hidden-layer network trained on squared
error. The factor table below is this package's own definition.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .bst import TCTrack
from .fusion import Forecast

# (name, kind) in vector order. kind: absolute | difference | mixed | climatology
FACTOR_TABLE = [
    ("lat", "absolute"), ("lon", "absolute"), ("wind", "absolute"), ("pressure", "absolute"),
    ("dlat_6h", "difference"), ("dlat_12h", "difference"), ("dlat_18h", "difference"), ("dlat_24h", "difference"),
    ("dlon_6h", "difference"), ("dlon_12h", "difference"), ("dlon_18h", "difference"), ("dlon_24h", "difference"),
    ("dwind_6h", "difference"), ("dwind_12h", "difference"), ("dwind_18h", "difference"), ("dwind_24h", "difference"),
    ("prev_dlat_6h", "difference"), ("prev_dlon_6h", "difference"),
    ("accel_lat", "difference"), ("accel_lon", "difference"),
    ("speed_6h", "difference"), ("speed_12h", "difference"), ("speed_24h", "difference"),
    ("heading_sin_6h", "difference"), ("heading_cos_6h", "difference"),
    ("heading_sin_24h", "difference"), ("heading_cos_24h", "difference"),
    ("doy_sin", "climatology"), ("doy_cos", "climatology"),
    ("lat_sq", "absolute"), ("lon_sq", "absolute"), ("wind_sq", "absolute"),
    ("dlat_6h_sq", "difference"), ("dlon_6h_sq", "difference"),
    ("lat_x_lon", "absolute"), ("lat_x_wind", "absolute"), ("lon_x_wind", "absolute"),
    ("lat_x_dlat_6h", "mixed"), ("lat_x_dlon_6h", "mixed"),
    ("lon_x_dlat_6h", "mixed"), ("lon_x_dlon_6h", "mixed"),
    ("wind_x_dlat_6h", "mixed"), ("wind_x_dlon_6h", "mixed"),
    ("dlat_6h_x_dlon_6h", "difference"), ("dlat_12h_x_dlon_12h", "difference"),
    ("dlat_24h_x_dlon_24h", "difference"),
]
FACTOR_NAMES = [name for name, _ in FACTOR_TABLE]
N_FACTORS = len(FACTOR_TABLE)
N_SELECTED = 20
CLIPER_LOOKBACK = 4


class InsufficientHistory(ValueError):
    pass


def extrapolate(track: TCTrack, t: int, tau: int = 4) -> Forecast:
    """Continue the last 6 h displacement at constant velocity."""
    if t < 1:
        raise InsufficientHistory(f"extrapolation needs an observation before index {t}")
    pos = track.positions()
    step = pos[t] - pos[t - 1]
    deltas = step[None, :] * np.arange(1, tau + 1)[:, None]
    return Forecast(deltas, pos[t].copy())


def extrapolate_windows(last_step: np.ndarray, tau: int = 4) -> np.ndarray:
    """Vectorized extrapolation deltas (N, tau, 2) from last displacements (N, 2)."""
    return np.asarray(last_step)[:, None, :] * np.arange(1, tau + 1)[None, :, None]


def _heading(dlat, dlon):
    r = math.hypot(dlat, dlon)
    return (dlat / r, dlon / r) if r > 0 else (0.0, 0.0)


def build_cliper_factors(track: TCTrack, t: int) -> np.ndarray:
    """The 46 factors of :data:`FACTOR_TABLE` at index ``t`` (needs 24 h history)."""
    if t - CLIPER_LOOKBACK < 0:
        raise InsufficientHistory(f"CLIPER factors need index {t - CLIPER_LOOKBACK} >= 0")
    obs = track.observations
    pos = track.positions()
    wind = track.winds()
    lat, lon = pos[t]
    w = wind[t]
    dlat = [pos[t, 0] - pos[t - k, 0] for k in (1, 2, 3, 4)]
    dlon = [pos[t, 1] - pos[t - k, 1] for k in (1, 2, 3, 4)]
    dwind = [w - wind[t - k] for k in (1, 2, 3, 4)]
    prev_dlat = pos[t - 1, 0] - pos[t - 2, 0]
    prev_dlon = pos[t - 1, 1] - pos[t - 2, 1]
    s6 = math.hypot(dlat[0], dlon[0])
    s12 = math.hypot(dlat[1], dlon[1]) / 2
    s24 = math.hypot(dlat[3], dlon[3]) / 4
    h6 = _heading(dlat[0], dlon[0])
    h24 = _heading(dlat[3], dlon[3])
    doy = obs[t].timestamp.timetuple().tm_yday + obs[t].timestamp.hour / 24.0
    ang = 2 * math.pi * doy / 365.25
    d6a, d6o = dlat[0], dlon[0]
    values = [
        lat, lon, w, obs[t].pressure,
        *dlat, *dlon, *dwind,
        prev_dlat, prev_dlon, d6a - prev_dlat, d6o - prev_dlon,
        s6, s12, s24, h6[0], h6[1], h24[0], h24[1],
        math.sin(ang), math.cos(ang),
        lat * lat, lon * lon, w * w, d6a * d6a, d6o * d6o,
        lat * lon, lat * w, lon * w,
        lat * d6a, lat * d6o, lon * d6a, lon * d6o, w * d6a, w * d6o,
        d6a * d6o, dlat[1] * dlon[1], dlat[3] * dlon[3],
    ]
    return np.array(values, dtype=float)


def factor_manifest() -> str:
    """Machine-readable factor table (JSON)."""
    return json.dumps(
        {"n_factors": N_FACTORS, "n_selected": N_SELECTED,
         "factors": [{"index": i, "name": n, "kind": k} for i, (n, k) in enumerate(FACTOR_TABLE)]},
        indent=2,
    )


def pearson_matrix(factors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Pearson r of every factor column against every target column (NaN for constant columns)."""
    X = np.asarray(factors, dtype=float)
    Y = np.asarray(targets, dtype=float).reshape(len(X), -1)
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    nx = np.sqrt((Xc**2).sum(axis=0))
    ny = np.sqrt((Yc**2).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (Xc.T @ Yc) / np.outer(nx, ny)
    r[nx == 0, :] = np.nan
    return r


@dataclass
class CliperFactorSet:
    names: list
    selected: np.ndarray
    pearson: np.ndarray  # (n_factors, n_targets)


def pearson_select(factors: np.ndarray, targets: np.ndarray, k: int = N_SELECTED) -> CliperFactorSet:
    """Pick ``k`` factors by |r|, round-robin over target components.

    Targets are visited in column order; each contributes its next best
    factor not already taken. Ties in |r| go to the lower factor index.
    Zero-variance factors are never selected.
    """
    X = np.asarray(factors, dtype=float)
    if len(X) < 3:
        raise ValueError(f"pearson_select needs at least 3 samples, got {len(X)}")
    r = pearson_matrix(X, targets)
    constant = np.isnan(r).all(axis=1)
    if constant.any():
        warnings.warn(f"excluding zero-variance factors {np.nonzero(constant)[0].tolist()}", stacklevel=2)
    usable = int((~constant).sum())
    k = min(k, usable)
    order = []
    for c in range(r.shape[1]):
        score = np.where(constant, -1.0, np.abs(np.nan_to_num(r[:, c], nan=0.0)))
        order.append(sorted(range(len(score)), key=lambda j: (-score[j], j)))
    chosen: list[int] = []
    rank = 0
    while len(chosen) < k:
        for ranked in order:
            j = ranked[rank]
            if not constant[j] and j not in chosen:
                chosen.append(j)
                if len(chosen) == k:
                    break
        rank += 1
    return CliperFactorSet(FACTOR_NAMES if X.shape[1] == N_FACTORS else [f"f{i}" for i in range(X.shape[1])],
                           np.array(chosen, dtype=int), r)


@dataclass
class BPConfig:
    hidden: int = 64
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


class CliperBP(nn.Module):
    """One-hidden-layer regressor from selected factors to (tau, 2) deltas."""

    def __init__(self, n_in: int, tau: int = 4, hidden: int = 64):
        super().__init__()
        self.tau = tau
        self.hidden = nn.Linear(n_in, hidden, dtype=torch.float64)
        self.out = nn.Linear(hidden, tau * 2, dtype=torch.float64)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.register_buffer("x_mean", torch.zeros(n_in, dtype=torch.float64))
        self.register_buffer("x_std", torch.ones(n_in, dtype=torch.float64))
        self.register_buffer("y_mean", torch.zeros(tau * 2, dtype=torch.float64))
        self.register_buffer("y_std", torch.ones(tau * 2, dtype=torch.float64))
        self.register_buffer("selected", torch.zeros(0, dtype=torch.long))
        self.history: list[float] = []

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.out(torch.tanh(self.hidden(z)))

    def predict(self, factors: np.ndarray) -> np.ndarray:
        """Deltas (N, tau, 2) in degrees from the full factor matrix."""
        X = torch.as_tensor(np.asarray(factors, dtype=float))
        if len(self.selected):
            X = X[:, self.selected]
        with torch.no_grad():
            z = self((X - self.x_mean) / self.x_std)
            y = z * self.y_std + self.y_mean
        return y.numpy().reshape(-1, self.tau, 2)


def cliper_bp_fit(factors: np.ndarray, targets: np.ndarray, config: BPConfig | None = None,
                  selection: CliperFactorSet | None = None, tau: int | None = None) -> CliperBP:
    """Fit CLIPER-BP on squared error in normalized units.

    ``targets`` is (N, tau, 2). Pass ``selection`` to restrict inputs to the
    chosen factor columns; with zero epochs the model predicts the target mean.
    """
    cfg = config or BPConfig()
    Y = np.asarray(targets, dtype=float)
    tau = tau or Y.shape[1]
    Y = Y.reshape(len(Y), -1)
    X = np.asarray(factors, dtype=float)
    cols = None if selection is None else selection.selected
    if cols is not None:
        X = X[:, cols]
    model = CliperBP(X.shape[1], tau, cfg.hidden)
    torch.manual_seed(cfg.seed)
    model.hidden.reset_parameters()
    if cols is not None:
        model.selected = torch.as_tensor(cols, dtype=torch.long)
    xm, xs = X.mean(0), X.std(0)
    ym, ys = Y.mean(0), Y.std(0)
    model.x_mean.copy_(torch.as_tensor(xm))
    model.x_std.copy_(torch.as_tensor(np.where(xs > 0, xs, 1.0)))
    model.y_mean.copy_(torch.as_tensor(ym))
    model.y_std.copy_(torch.as_tensor(np.where(ys > 0, ys, 1.0)))
    Xz = (torch.as_tensor(X) - model.x_mean) / model.x_std
    Yz = (torch.as_tensor(Y) - model.y_mean) / model.y_std
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(Xz))
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start : start + cfg.batch_size])
            opt.zero_grad()
            loss = ((model(Xz[idx]) - Yz[idx]) ** 2).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError("CLIPER-BP training diverged (non-finite loss)")
            loss.backward()
            opt.step()
        with torch.no_grad():
            model.history.append(float(((model(Xz) - Yz) ** 2).mean()))
    return model


def cliper_bp_predict(model: CliperBP, factors: np.ndarray, origin: np.ndarray) -> Forecast:
    return Forecast(model.predict(factors), np.asarray(origin, dtype=float))

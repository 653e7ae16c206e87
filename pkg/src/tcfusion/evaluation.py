"""Distance errors, skill scores and forecast report tables."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .bst import INTENSITY_LABELS, intensity_label

EARTH_RADIUS_KM = 6371.0
FLAT_KM_PER_DEG = 110.0
DEFAULT_HORIZONS = (6, 12, 18, 24)


def haversine_km(lat1, lon1, lat2, lon2, radius: float = EARTH_RADIUS_KM):
    """Great-circle distance in km between points given in degrees (broadcasts)."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2.0 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def mde(pred, truth):
    """Distance (km) between predicted and true (lat, lon) points, last axis = 2."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    return haversine_km(pred[..., 0], pred[..., 1], truth[..., 0], truth[..., 1])


def flat_distance_km(pred, truth):
    """Diagnostic planar approximation sqrt(dlat^2 + dlon^2) * 110 km."""
    d = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
    return np.hypot(d[..., 0], d[..., 1]) * FLAT_KM_PER_DEG


def skill_score(e_a: float, e_b: float) -> float | None:
    """Percent error reduction of ``e_b`` relative to reference ``e_a``.

    Returns ``None`` (not applicable) when the reference error is zero.
    """
    if e_a <= 0:
        return None
    return (e_a - e_b) / e_a * 100.0


@dataclass
class EvalReport:
    horizons: tuple
    mde: dict  # method -> list of per-horizon MDE (km)
    counts: dict  # method -> number of forecasts
    reference: str | None = None

    def skill(self, method: str) -> list:
        if self.reference is None or self.reference not in self.mde:
            return []
        ref = self.mde[self.reference]
        return [skill_score(a, b) for a, b in zip(ref, self.mde[method])]

    def to_tsv(self) -> str:
        """Methods x horizons table; skill columns when a reference is set."""
        head = ["method", "n"] + [f"{h}h" for h in self.horizons]
        lines = []
        if self.reference:
            head += [f"skill_{h}h" for h in self.horizons]
            lines.append(f"# reference={self.reference}")
        lines.append("\t".join(head))
        for method, values in self.mde.items():
            row = [method, str(self.counts[method])] + [f"{v:.2f}" for v in values]
            if self.reference:
                row += ["n/a" if s is None else f"{s:.2f}" for s in self.skill(method)]
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "EvalReport":
        lines = text.strip().splitlines()
        reference = None
        if lines[0].startswith("# reference="):
            reference = lines.pop(0).split("=", 1)[1]
        head = lines[0].split("\t")
        horizons = tuple(int(h[:-1]) for h in head[2:] if not h.startswith("skill"))
        mde_, counts = {}, {}
        k = len(horizons)
        for line in lines[1:]:
            parts = line.split("\t")
            mde_[parts[0]] = [float(v) for v in parts[2 : 2 + k]]
            counts[parts[0]] = int(parts[1])
        return cls(horizons, mde_, counts, reference)

    def to_text(self) -> str:
        width = max(12, *(len(m) for m in self.mde)) if self.mde else 12
        out = io.StringIO()
        out.write(f"{'Method':<{width}}  " + "  ".join(f"{h:>7}h" for h in self.horizons) + "\n")
        for method, values in self.mde.items():
            out.write(f"{method:<{width}}  " + "  ".join(f"{v:8.2f}" for v in values) + "\n")
        if self.reference:
            out.write(f"\nskill score vs {self.reference} (%)\n")
            for method in self.mde:
                if method == self.reference:
                    continue
                cells = ["     n/a" if s is None else f"{s:8.2f}" for s in self.skill(method)]
                out.write(f"{method:<{width}}  " + "  ".join(cells) + "\n")
        return out.getvalue()


def horizon_errors(pred_abs, truth_abs) -> np.ndarray:
    """(N, tau) distance errors in km."""
    return mde(pred_abs, truth_abs)


def aggregate_report(forecasts: dict, truths, horizons=DEFAULT_HORIZONS,
                     reference: str | None = None) -> EvalReport:
    """Per-horizon mean distance error for each named forecast set.

    ``forecasts`` maps method name -> (N, tau, 2) absolute positions, aligned
    with ``truths`` (N, tau, 2). Raises ``ValueError`` on empty input.
    """
    truths = np.asarray(truths, dtype=float)
    if truths.size == 0 or not forecasts:
        raise ValueError("nothing to evaluate")
    table, counts = {}, {}
    for name, pred in forecasts.items():
        err = horizon_errors(pred, truths)
        table[name] = [float(v) for v in err.mean(axis=0)[: len(horizons)]]
        counts[name] = int(err.shape[0])
    return EvalReport(tuple(horizons), table, counts, reference)


@dataclass
class CaseRow:
    init_time: datetime
    intensity: int
    errors: list


@dataclass
class CaseTable:
    storm_id: str
    horizons: tuple
    rows: list = field(default_factory=list)

    def average(self) -> list:
        if not self.rows:
            return []
        return [float(v) for v in np.mean([r.errors for r in self.rows], axis=0)]

    def to_tsv(self) -> str:
        head = ["MMDDHH", "INT"] + [f"{h}h" for h in self.horizons]
        lines = [f"# {self.storm_id}", "\t".join(head)]
        for r in self.rows:
            lines.append("\t".join([r.init_time.strftime("%m%d%H"), intensity_label(r.intensity)]
                                   + [f"{e:.2f}" for e in r.errors]))
        lines.append("\t".join(["AVG", ""] + [f"{e:.2f}" for e in self.average()]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str, year: int = 2000) -> "CaseTable":
        """Inverse of :meth:`to_tsv`; MMDDHH carries no year, so ``year`` supplies it."""
        lines = text.strip().splitlines()
        storm_id = lines[0][2:]
        head = lines[1].split("\t")
        table = cls(storm_id, tuple(int(h[:-1]) for h in head[2:]))
        codes = {label: code for code, label in INTENSITY_LABELS.items()}
        for line in lines[2:]:
            parts = line.split("\t")
            if parts[0] == "AVG":
                continue
            when = datetime.strptime(f"{year}{parts[0]}", "%Y%m%d%H")
            table.rows.append(CaseRow(when, codes.get(parts[1], 0), [float(v) for v in parts[2:]]))
        return table

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"{self.storm_id}\n")
        out.write(f"{'MMDDHH':<8}{'INT':<9}" + "".join(f"{str(h) + 'h':>9}" for h in self.horizons) + "\n")
        for r in self.rows:
            out.write(f"{r.init_time:%m%d%H}  {intensity_label(r.intensity):<9}"
                      + "".join(f"{e:9.2f}" for e in r.errors) + "\n")
        out.write(f"{'AVG':<17}" + "".join(f"{e:9.2f}" for e in self.average()) + "\n")
        return out.getvalue()


def case_report(storm_id: str, init_times, intensities, pred_abs, truth_abs,
                horizons=DEFAULT_HORIZONS) -> CaseTable:
    """Per-initial-time errors for one storm with an AVG row."""
    err = horizon_errors(pred_abs, truth_abs)
    table = CaseTable(storm_id, tuple(horizons))
    for when, code, row in zip(init_times, intensities, err):
        table.rows.append(CaseRow(when, int(code), [float(v) for v in row]))
    return table


def column_average(values) -> float:
    """Arithmetic mean of one table column."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty column")
    return float(values.mean())


def track_polylines(storm_id: str, times, truth, forecasts: dict | None = None,
                    step_hours: int = 6) -> str:
    """Tab-separated ``storm, init, lead_h, lat, lon, source`` rows for plotting.

    Truth rows have lead 0. ``forecasts`` maps a source name to a list of
    ``(init_time, points)`` pairs, ``points`` being (tau, 2) positions.
    """
    lines = ["storm\tinit\tlead_h\tlat\tlon\tsource"]
    for when, (lat, lon) in zip(times, truth):
        lines.append(f"{storm_id}\t{when:%Y%m%d%H}\t0\t{lat:.4f}\t{lon:.4f}\ttruth")
    for name, items in (forecasts or {}).items():
        for init, points in items:
            for k, (lat, lon) in enumerate(points, start=1):
                lines.append(f"{storm_id}\t{init:%Y%m%d%H}\t{k * step_hours}\t{lat:.4f}\t{lon:.4f}\t{name}")
    return "\n".join(lines) + "\n"

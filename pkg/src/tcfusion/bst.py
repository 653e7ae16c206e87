"""CMA best-track (BST) reading and writing.

Layout handled here::

    66666 0001   5 0001 0001 0 6 NAME                  20000601
    1953061506 0 125 1116 1000 10 15
    1953061512 0 132 1117 1000 10 15

Each storm starts with a header line whose first token is ``66666``. Records
are ``YYYYMMDDHH I LAT LON PRES WND [OWD]`` with LAT/LON in tenths of a
degree. Longitudes are degrees east, continuous across the basin (100-210).
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterable, TextIO

HEADER_TAG = "66666"
STEP = timedelta(hours=6)
SYNOPTIC_HOURS = (0, 6, 12, 18)

# CMA intensity code -> label used in case-study tables.
INTENSITY_LABELS = {
    0: "-",  # weaker than TD or unknown
    1: "TD",
    2: "TS",
    3: "STS",
    4: "TY",
    5: "STY",
    6: "SuperTY",
    9: "ET",
}

# Lower wind bounds (m/s) of the CMA scale, used to derive a code from wind.
_WIND_CLASSES = ((51.0, 6), (41.5, 5), (32.7, 4), (24.5, 3), (17.2, 2), (10.8, 1))


def intensity_label(code: int) -> str:
    return INTENSITY_LABELS.get(int(code), "-")


def intensity_code_from_wind(wind: float) -> int:
    for lower, code in _WIND_CLASSES:
        if wind >= lower:
            return code
    return 0


@dataclass(frozen=True)
class TCObservation:
    timestamp: datetime
    intensity_category: int
    lat: float
    lon: float
    pressure: float
    max_wind: float
    avg_wind: float | None = None

    def validate(self) -> None:
        if not 0.0 <= self.lat <= 50.0:
            raise ValueError(f"latitude {self.lat} outside 0..50N")
        if not 100.0 <= self.lon <= 210.0:
            raise ValueError(f"longitude {self.lon} outside 100..210E")
        if self.timestamp.hour not in SYNOPTIC_HOURS or self.timestamp.minute:
            raise ValueError(f"timestamp {self.timestamp:%Y%m%d%H} is not a 6-hourly synoptic time")
        if not self.pressure > 0:
            raise ValueError(f"pressure {self.pressure} must be positive")
        if not self.max_wind >= 0:
            raise ValueError(f"max wind {self.max_wind} must be non-negative")


@dataclass
class TCTrack:
    storm_id: str
    observations: list[TCObservation]
    name: str = ""

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def genesis_year(self) -> int:
        return self.observations[0].timestamp.year

    @property
    def times(self) -> list[datetime]:
        return [ob.timestamp for ob in self.observations]

    def positions(self):
        import numpy as np

        return np.array([(ob.lat, ob.lon) for ob in self.observations], dtype=float)

    def winds(self):
        import numpy as np

        return np.array([ob.max_wind for ob in self.observations], dtype=float)

    def lifetime_hours(self) -> float:
        if not self.observations:
            return 0.0
        span = self.observations[-1].timestamp - self.observations[0].timestamp
        return span.total_seconds() / 3600.0

    def is_regular(self) -> bool:
        obs = self.observations
        return all(b.timestamp - a.timestamp == STEP for a, b in zip(obs, obs[1:]))


@dataclass(frozen=True)
class ParseIssue:
    line_no: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line_no}: {self.message}"


@dataclass
class ParsedBST:
    tracks: list[TCTrack] = field(default_factory=list)
    issues: list[ParseIssue] = field(default_factory=list)
    skipped_records: int = 0


def _parse_time(token: str) -> datetime:
    if len(token) != 10 or not token.isdigit():
        raise ValueError(f"bad timestamp {token!r}, expected YYYYMMDDHH")
    return datetime.strptime(token, "%Y%m%d%H")


def parse_record(line: str, validate: bool = True) -> TCObservation:
    """Parse one record line into an observation (raises ``ValueError``)."""
    parts = line.split()
    if len(parts) not in (6, 7):
        raise ValueError(f"expected 6 or 7 fields, got {len(parts)}")
    when = _parse_time(parts[0])
    try:
        code = int(parts[1])
        lat = int(parts[2]) / 10.0
        lon = int(parts[3]) / 10.0
        pres = float(parts[4])
        wnd = float(parts[5])
        owd = float(parts[6]) if len(parts) == 7 else None
    except ValueError as exc:
        raise ValueError(f"unparseable numeric field: {exc}") from None
    ob = TCObservation(when, code, lat, lon, pres, wnd, owd)
    if validate:
        ob.validate()
    return ob


def _header_id(tokens: list[str]) -> tuple[str, str]:
    intl = tokens[1] if len(tokens) > 1 else "0000"
    serial = tokens[3] if len(tokens) > 3 else "0000"
    name = tokens[7] if len(tokens) > 7 else ""
    if name == "(nameless)":
        name = ""
    return (intl if intl != "0000" else "", serial), name


def _split_regular(storm_id: str, name: str, obs: list[TCObservation]) -> list[TCTrack]:
    """Break a record list at gaps so every piece has an exact 6 h cadence."""
    pieces: list[list[TCObservation]] = []
    for ob in obs:
        if pieces and ob.timestamp - pieces[-1][-1].timestamp == STEP:
            pieces[-1].append(ob)
        else:
            pieces.append([ob])
    if len(pieces) == 1:
        return [TCTrack(storm_id, pieces[0], name)]
    return [TCTrack(f"{storm_id}_{k}", piece, name) for k, piece in enumerate(pieces)]


def parse_bst(stream: TextIO | Iterable[str]) -> ParsedBST:
    """Parse a CMA best-track stream.

    Bad lines are recorded as :class:`ParseIssue` (with 1-based line numbers)
    and parsing continues. Records that do not advance time within a storm
    are rejected. Records off the 00/06/12/18 UTC cycle are dropped and
    counted in ``skipped_records``; a storm with a gap is split into
    regular pieces suffixed ``_0``, ``_1``...
    """
    result = ParsedBST()
    current: list[TCObservation] | None = None
    ident = ("", "")
    name = ""
    header_line = 0

    def close():
        if current:
            intl, serial = ident
            sid = intl or f"{current[0].timestamp.year}-{serial}"
            result.tracks.extend(_split_regular(sid, name, current))

    for line_no, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == HEADER_TAG:
            close()
            current = []
            ident, name = _header_id(tokens)
            header_line = line_no
            continue
        if current is None:
            result.issues.append(ParseIssue(line_no, "record before any storm header"))
            continue
        try:
            ob = parse_record(line, validate=False)
            if ob.timestamp.hour not in SYNOPTIC_HOURS:
                result.skipped_records += 1
                continue
            ob.validate()
        except ValueError as exc:
            result.issues.append(ParseIssue(line_no, str(exc)))
            continue
        if current and ob.timestamp <= current[-1].timestamp:
            result.issues.append(
                ParseIssue(
                    line_no,
                    f"non-monotone timestamp {ob.timestamp:%Y%m%d%H} in storm "
                    f"starting at line {header_line}; record rejected",
                )
            )
            continue
        current.append(ob)
    close()
    return result


def format_record(ob: TCObservation) -> str:
    fields = [
        ob.timestamp.strftime("%Y%m%d%H"),
        str(int(ob.intensity_category)),
        str(int(round(ob.lat * 10))),
        str(int(round(ob.lon * 10))),
        _num(ob.pressure),
        _num(ob.max_wind),
    ]
    if ob.avg_wind is not None and not math.isnan(ob.avg_wind):
        fields.append(_num(ob.avg_wind))
    return " ".join(fields)


def _num(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def serialize_bst(tracks: Iterable[TCTrack]) -> str:
    """Write tracks back out in the layout :func:`parse_bst` reads."""
    out = io.StringIO()
    for serial, track in enumerate(tracks, start=1):
        first = track.observations[0].timestamp if track.observations else None
        date = first.strftime("%Y%m%d") if first else "00000000"
        name = track.name or "(nameless)"
        out.write(
            f"{HEADER_TAG} {track.storm_id} {len(track):>3} {serial:04d} "
            f"{track.storm_id} 0 6 {name} {date}\n"
        )
        for ob in track.observations:
            out.write(format_record(ob) + "\n")
    return out.getvalue()


def filter_tracks(tracks: Iterable[TCTrack], min_hours: float = 96.0) -> list[TCTrack]:
    """Keep storms whose life cycle is longer than ``min_hours`` (default: 4 days)."""
    return [t for t in tracks if t.lifetime_hours() >= min_hours]


def read_bst(path) -> ParsedBST:
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_bst(fh)

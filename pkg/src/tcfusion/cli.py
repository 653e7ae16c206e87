"""Command-line entry point: ingest, synth, train, evaluate, predict, report.

Every command writes ``manifest.json`` next to its outputs. Exit codes:
0 success, 1 computation failure, 2 input error. Settings resolve as
defaults < ``--config`` file < flags. ``TCFUSION_DATA`` names the default
directory for input files that are not given explicitly.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np
import torch

from . import baselines
from .bst import filter_tracks, read_bst
from .evaluation import DEFAULT_HORIZONS, CaseTable, EvalReport, aggregate_report, case_report, track_polylines
from .fusion import Forecast
from .gph import CoverageError, GridDirectorySource
from .samples import (
    IngestReport, NormStats, Sample, build_feature_window, load_dataset, make_samples,
    crop_stack, save_dataset, split_by_years, stack_samples,
)
from .synth import SynthConfig, synth_world, write_world
from .tensor import file_digest
from .training import Checkpoint, TrainConfig, TrainingDiverged, parse_config_text, predict_deltas, train_all

log = logging.getLogger("tcfusion")

DATA_ENV = "TCFUSION_DATA"


class InputError(Exception):
    """Bad or missing user input (exit code 2)."""


@dataclasses.dataclass
class DataConfig:
    m: int = 4
    tau: int = 4
    q: int = 51
    resolution: float = 0.0  # 0 = native grid resolution
    min_hours: float = 96.0


def _coerce(default, raw: str):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(type(default[0])(v) for v in raw.split(","))
    return raw


def split_settings(values: dict) -> tuple[dict, dict, dict]:
    """Route config keys to data, train and ``synth_``-prefixed synthetic-world settings."""
    data_keys = {f.name for f in dataclasses.fields(DataConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    synth_defaults = SynthConfig()
    data, train, synth = {}, {}, {}
    for key, raw in values.items():
        if key in data_keys:
            data[key] = _coerce(getattr(DataConfig(), key), raw) if isinstance(raw, str) else raw
        elif key in train_keys:
            train[key] = raw
        elif key.startswith("synth_") and hasattr(synth_defaults, key[6:]):
            name = key[6:]
            synth[name] = _coerce(getattr(synth_defaults, name), raw) if isinstance(raw, str) else raw
        else:
            raise InputError(f"unknown config key {key!r}")
    return data, train, synth


def _parse_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        return parse_config_text(p.read_text())
    except ValueError as exc:
        raise InputError(f"{p}: {exc}") from exc


def _default_path(given, name: str) -> Path:
    if given is not None:
        return Path(given)
    base = os.environ.get(DATA_ENV)
    if base is None:
        raise InputError(f"no {name} given and {DATA_ENV} is not set")
    return Path(base) / name


def _require(path: Path, kind: str = "file") -> Path:
    ok = path.is_dir() if kind == "dir" else path.is_file()
    if not ok:
        raise InputError(f"{kind} not found: {path}")
    return path


def _horizons(text: str | None, tau: int) -> tuple:
    if not text:
        return tuple(h for h in DEFAULT_HORIZONS if h <= 6 * tau)
    try:
        hs = tuple(int(h) for h in text.split(","))
    except ValueError as exc:
        raise InputError(f"--horizons expects comma-separated hours, got {text!r}") from exc
    bad = [h for h in hs if h % 6 or not 6 <= h <= 6 * tau]
    if bad:
        raise InputError(f"horizons {bad} are not 6-hourly leads within {6 * tau} h")
    return hs


class Run:
    """Collects what goes into a command's manifest."""

    def __init__(self, command: str, out: Path, seed: int | None):
        self.command = command
        self.out = out
        self.seed = seed
        self.config: dict = {}
        self.inputs: dict = {}
        self.outputs: list = []
        self.start = time.perf_counter()

    def input(self, path: Path) -> Path:
        path = Path(path)
        if path.is_dir():
            for f in sorted(path.rglob("*")):
                if f.is_file():
                    self.inputs[str(f)] = file_digest(f)
        else:
            self.inputs[str(path)] = file_digest(path)
        return path

    def output(self, path: Path) -> Path:
        self.outputs.append(str(path))
        return path

    def write_manifest(self) -> Path:
        manifest = {
            "command": self.command, "config": self.config, "seed": self.seed,
            "inputs": self.inputs, "outputs": self.outputs,
            "wall_time_s": round(time.perf_counter() - self.start, 3),
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        return path


# -- commands ------------------------------------------------------------------


def cmd_ingest(args, run: Run) -> None:
    data_cfg, _, _ = split_settings(_parse_config(args.config))
    cfg = DataConfig(**data_cfg)
    bst_path = run.input(_require(_default_path(args.bst, "tracks.bst")))
    gph_dir = None
    if not args.no_gph:
        gph_dir = run.input(_require(_default_path(args.gph, "gph"), "dir"))
    run.config = {"data": dataclasses.asdict(cfg), "gph": gph_dir is not None}

    parsed = read_bst(bst_path)
    report = IngestReport(tracks_in=len(parsed.tracks),
                          errors=[f"line {i.line_no}: {i.message}" for i in parsed.issues])
    tracks = filter_tracks(parsed.tracks, cfg.min_hours)
    report.tracks_kept = len(tracks)
    source = GridDirectorySource(gph_dir) if gph_dir is not None else None
    samples = make_samples(tracks, source, cfg.m, cfg.tau, cfg.q, cfg.resolution or None, report)
    splits = split_by_years(samples, report=report)
    run.output(args.out / "ingest_report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    if not splits["train"]:
        log.warning("no training samples; dataset not written")
        return
    arrays = stack_samples([s for part in splits.values() for s in part])
    norm = NormStats.fit(arrays.where_split("train"))
    meta_cfg = {**dataclasses.asdict(cfg), "gph": gph_dir is not None}
    save_dataset(run.output(args.out / "dataset.npz"), arrays, norm, meta_cfg)


def cmd_synth(args, run: Run) -> None:
    data_cfg, _, synth_cfg = split_settings(_parse_config(args.config))
    cfg = SynthConfig(**synth_cfg)
    q = DataConfig(**data_cfg).q
    seed = 0 if args.seed is None else args.seed
    run.seed = seed
    run.config = {"synth": dataclasses.asdict(cfg), "q": q}
    world = synth_world(cfg, seed)
    bst_path, gph_dir = write_world(world, args.out, q)
    run.output(bst_path)
    run.output(gph_dir)
    print(f"wrote {len(world.tracks)} storms to {bst_path} and grids to {gph_dir}")


def _train_config(args) -> TrainConfig:
    _, train_cfg, _ = split_settings(_parse_config(args.config))
    if getattr(args, "seed", None) is not None:
        train_cfg["seed"] = args.seed
    if getattr(args, "ablation", None):
        train_cfg["ablation"] = args.ablation
    try:
        return TrainConfig.from_mapping(train_cfg)
    except (KeyError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def _load_dataset(path: Path):
    try:
        return load_dataset(path)
    except (ValueError, KeyError, OSError) as exc:
        raise InputError(f"{path}: cannot read dataset ({exc})") from exc


def _load_checkpoint(path: Path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except (ValueError, KeyError, OSError) as exc:
        raise InputError(f"{path}: cannot read checkpoint ({exc})") from exc


def _check_match(ckpt: Checkpoint, meta: dict, ckpt_path, data_path) -> None:
    if ckpt.data_hash != meta["data_hash"]:
        raise InputError(
            f"checkpoint {ckpt_path} was trained on data config {ckpt.data_hash} but {data_path} "
            f"has {meta['data_hash']}; re-ingest with matching m/tau/q/resolution or retrain"
        )


def cmd_train(args, run: Run) -> None:
    config = _train_config(args)
    data_path = run.input(_require(_default_path(args.data, "dataset.npz")))
    arrays, norm, meta = _load_dataset(data_path)
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    run.seed = config.seed
    run.config = {"train": config.to_dict(), "stages": list(stages), "data_hash": meta["data_hash"]}
    checkpoint = None
    if args.checkpoint is not None:
        checkpoint = _load_checkpoint(run.input(_require(Path(args.checkpoint))))
        _check_match(checkpoint, meta, args.checkpoint, data_path)
    train, val = arrays.where_split("train"), arrays.where_split("val")
    if len(train) == 0:
        raise InputError(f"{data_path} has no training samples")
    metrics = run.output(args.out / "metrics.tsv")
    metrics.unlink(missing_ok=True)
    torch.manual_seed(config.seed)
    try:
        ckpt = train_all(train, val if len(val) else None, config, norm, meta["data_hash"], stages,
                         checkpoint, metrics)
    except TrainingDiverged as exc:
        exc.checkpoint.save(run.output(args.out / "checkpoint.npz"))
        raise
    ckpt.save(run.output(args.out / "checkpoint.npz"))
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"stage {ckpt.stage}: {len(ckpt.history)} epoch records, last {last}")


def _extrapolation(arrays) -> np.ndarray:
    return baselines.extrapolate_windows(arrays.x[:, -1, 3:5], arrays.y.shape[1])


def _cliper(train, target, seed: int) -> np.ndarray:
    if train.cliper is None or target.cliper is None:
        raise InputError("dataset lacks CLIPER factors; re-ingest")
    selection = baselines.pearson_select(train.cliper, train.y.reshape(len(train), -1))
    model = baselines.cliper_bp_fit(train.cliper, train.y, baselines.BPConfig(seed=seed), selection)
    return model.predict(target.cliper)


def cmd_evaluate(args, run: Run) -> None:
    ckpt_path = run.input(_require(Path(args.checkpoint)))
    data_path = run.input(_require(_default_path(args.data, "dataset.npz")))
    ckpt = _load_checkpoint(ckpt_path)
    arrays, norm, meta = _load_dataset(data_path)
    _check_match(ckpt, meta, ckpt_path, data_path)
    target = arrays.where_split(args.split)
    if len(target) == 0:
        raise InputError(f"{data_path} has no {args.split} samples")
    tau = target.y.shape[1]
    horizons = _horizons(args.horizons, tau)
    seed = ckpt.train_config["seed"] if args.seed is None else args.seed
    run.seed = seed
    bases = args.baseline or []
    run.config = {"split": args.split, "horizons": list(horizons), "baselines": bases,
                  "checkpoint_config_hash": ckpt.config_hash}

    cols = [h // 6 - 1 for h in horizons]
    model_name = "fusion" if ckpt.train_config["ablation"] == "none" else ckpt.train_config["ablation"]
    deltas = {model_name: predict_deltas(ckpt.build_model(), target, ckpt.norm)}
    if "cliper" in bases:
        deltas["cliper"] = _cliper(arrays.where_split("train"), target, seed)
    if "extrapolation" in bases:
        deltas["extrapolation"] = _extrapolation(target)
    reference = "cliper" if "cliper" in bases else ("extrapolation" if bases else None)
    absolute = {k: target.origin[:, None, :] + v for k, v in deltas.items()}
    report = aggregate_report({k: v[:, cols] for k, v in absolute.items()}, target.truth[:, cols],
                              horizons, reference)
    run.output(args.out / "report.tsv").write_text(report.to_tsv())

    case_lines, track_lines = [], []
    pred = absolute[model_name]
    for storm in dict.fromkeys(target.storm_ids):
        idx = [i for i, s in enumerate(target.storm_ids) if s == storm]
        table = case_report(storm, [target.times[i] for i in idx], target.intensity[idx],
                            pred[idx][:, cols], target.truth[idx][:, cols], horizons)
        case_lines.append(table.to_tsv())
        track_lines.append(track_polylines(
            storm, [target.times[i] for i in idx], target.origin[idx],
            {k: [(target.times[i], v[i]) for i in idx] for k, v in absolute.items()}))
    run.output(args.out / "cases.tsv").write_text("\n".join(case_lines))
    run.output(args.out / "tracks.tsv").write_text(
        track_lines[0] + "".join(t.split("\n", 1)[1] for t in track_lines[1:]))
    print(report.to_text(), end="")


def cmd_predict(args, run: Run) -> None:
    ckpt_path = run.input(_require(Path(args.checkpoint)))
    bst_path = run.input(_require(_default_path(args.bst, "tracks.bst")))
    ckpt = _load_checkpoint(ckpt_path)
    mcfg = ckpt.model_config
    m, tau = mcfg["time_steps"] - 1, mcfg["tau"]
    run.config = {"storm": args.storm, "time": args.time, "checkpoint_config_hash": ckpt.config_hash}
    tracks = {t.storm_id: t for t in read_bst(bst_path).tracks}
    if args.storm not in tracks:
        raise InputError(f"storm {args.storm!r} not in {bst_path}")
    track = tracks[args.storm]
    try:
        when = datetime.strptime(args.time, "%Y%m%d%H")
        t = track.times.index(when)
    except ValueError as exc:
        raise InputError(f"time {args.time!r} is not an observation of storm {args.storm}") from exc
    try:
        window = build_feature_window(track, t, m)
    except baselines.InsufficientHistory as exc:
        raise InputError(str(exc)) from exc
    gph = None
    if mcfg["use_gph"]:
        gph_dir = run.input(_require(_default_path(args.gph, "gph"), "dir"))
        try:
            gph, _ = crop_stack(GridDirectorySource(gph_dir), track, range(t - m, t + 1), mcfg["q"], None)
        except CoverageError as exc:
            raise InputError(str(exc)) from exc
    ob = track.observations[t]
    arrays = stack_samples([Sample(track.storm_id, t, window, None, np.zeros((tau, 2)), None,
                                   np.array([ob.lat, ob.lon]), track.genesis_year, ob.intensity_category)])
    arrays.gph = None if gph is None else gph[None]
    deltas = predict_deltas(ckpt.build_model(), arrays, ckpt.norm)[0]
    forecast = Forecast(deltas, arrays.origin[0])
    text = forecast.to_text()
    run.output(args.out / "forecast.tsv").write_text(text)
    print(text, end="")


def cmd_report(args, run: Run) -> None:
    eval_dir = _require(Path(args.eval), "dir")
    report_path = run.input(_require(eval_dir / "report.tsv"))
    report = EvalReport.from_tsv(report_path.read_text())
    parts = ["Mean distance error (km) by lead time\n", report.to_text()]
    cases_path = eval_dir / "cases.tsv"
    if cases_path.is_file():
        run.input(cases_path)
        for block in cases_path.read_text().split("\n\n"):
            if block.strip():
                parts.append("\n" + CaseTable.from_tsv(block).to_text())
    text = "".join(parts)
    run.output(args.out / "report.txt").write_text(text)
    print(text, end="")


COMMANDS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "train": cmd_train,
    "evaluate": cmd_evaluate, "predict": cmd_predict, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--config", help="key = value settings file")
        if seed:
            p.add_argument("--seed", type=int, help="root seed (overrides config)")
        return p

    p = common(sub.add_parser("ingest", help="parse best tracks + grids into a dataset"), seed=False)
    p.add_argument("--bst", help="best-track file")
    p.add_argument("--gph", help="grid archive directory (with index.txt)")
    p.add_argument("--no-gph", action="store_true", help="build a TC-features-only dataset")

    common(sub.add_parser("synth", help="generate a synthetic pressure-steered world"))

    p = common(sub.add_parser("train", help="run training stages"))
    p.add_argument("--data", help="dataset.npz from ingest")
    p.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--ablation", choices=["tc_only", "pressure_only", "no_gph_decoder"])
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = common(sub.add_parser("evaluate", help="score a checkpoint against baselines"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset.npz from ingest")
    p.add_argument("--baseline", action="append", choices=["extrapolation", "cliper"])
    p.add_argument("--horizons", help="comma-separated lead hours, e.g. 6,12,18,24")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])

    p = common(sub.add_parser("predict", help="forecast one storm from one initial time"), seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bst", help="best-track file holding the storm")
    p.add_argument("--gph", help="grid archive directory")
    p.add_argument("--storm", required=True)
    p.add_argument("--time", required=True, help="initial time YYYYMMDDHH")

    p = common(sub.add_parser("report", help="format evaluation outputs as text tables"), seed=False)
    p.add_argument("--eval", required=True, help="directory written by evaluate")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    run = Run(args.command, args.out, getattr(args, "seed", None))
    try:
        COMMANDS[args.command](args, run)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, FloatingPointError, RuntimeError) as exc:
        print(f"error: computation failed: {exc}", file=sys.stderr)
        return 1
    finally:
        run.write_manifest()
    return 0


if __name__ == "__main__":
    sys.exit(main())

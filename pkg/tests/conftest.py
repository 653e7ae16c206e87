from datetime import datetime

import numpy as np
import pytest
import torch

# Five records of a 1953 storm in the CMA best-track layout.
STORM_1953_RECORDS = """\
1953061506 0 125 1116 1000 10 15
1953061512 0 132 1117 1000 10 15
1953061518 0 142 1117 1000 10 15
1953061600 0 150 1117 1000 10 20
1953061606 0 159 1112 999 10 20
"""
STORM_1953_BST = "66666 0000   5 0001 0000 0 6 (nameless) 19530615\n" + STORM_1953_RECORDS

# Fifteen per-storm 24 h MDE values (km) from a case-study table and the
# average that table states for them.
CASE_STUDY_24H = [194.56, 75.08, 147.31, 92.46, 68.26, 66.31, 83.58, 20.56,
                  62.20, 129.74, 94.28, 86.24, 50.70, 52.50, 108.31]
CASE_STUDY_AVG_24H = 82.43


def straight_track(n, start_year=2000, dlat=0.5, dlon=-0.8, wind_step=1.0, storm_id="A"):
    """Constant-velocity track with a linear wind trend."""
    from tcfusion.bst import STEP, TCObservation, TCTrack

    t0 = datetime(start_year, 8, 1)
    obs = [TCObservation(t0 + k * STEP, 2, 10.0 + dlat * k, 150.0 + dlon * k, 990.0, 20.0 + wind_step * k)
           for k in range(n)]
    return TCTrack(storm_id, obs)


@pytest.fixture
def storm1953_text():
    return STORM_1953_BST


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# Synthetic pressure-steered world used by the fusion-benefit checks. The
# seeds and sizes below are the documented configuration for that criterion.
ORACLE_WORLD_SEED = 7
ORACLE_STORMS = 120
ORACLE_Q = 25
ORACLE_TRAIN = dict(epochs_stage1=10, epochs_stage2=10, epochs_stage3=20, dtype="float32",
                    hidden_size=64, d_gph=64, seed=0)


@pytest.fixture(scope="session")
def oracle_run():
    from tcfusion.baselines import extrapolate_windows
    from tcfusion.samples import NormStats, make_samples, split_by_years, stack_samples
    from tcfusion.synth import SynthConfig, synth_world
    from tcfusion.training import TrainConfig, predict_deltas, train_all

    world = synth_world(SynthConfig(n_storms=ORACLE_STORMS), seed=ORACLE_WORLD_SEED)
    samples = make_samples(world.tracks, world.source, q=ORACLE_Q)
    split_by_years(samples)
    arrays = stack_samples(samples)
    train, val, test = (arrays.where_split(k) for k in ("train", "val", "test"))
    norm = NormStats.fit(train)
    preds = {"extrapolation": extrapolate_windows(test.x[:, -1, 3:5], test.y.shape[1])}
    checkpoints = {}
    for name, ablation in (("fusion", "none"), ("tc_only", "tc_only")):
        ckpt = train_all(train, val, TrainConfig(ablation=ablation, **ORACLE_TRAIN), norm)
        checkpoints[name] = ckpt
        preds[name] = predict_deltas(ckpt.build_model(), test, norm)
    return dict(world=world, train=train, val=val, test=test, norm=norm,
                checkpoints=checkpoints, deltas=preds)


@pytest.fixture(scope="session")
def tiny_arrays():
    """32 windows with 13x13 GPH stacks from a five-storm synthetic world."""
    from tcfusion.samples import make_samples, stack_samples
    from tcfusion.synth import SynthConfig, synth_world

    world = synth_world(SynthConfig(n_storms=5, duration_steps=(20, 24)), seed=3)
    arrays = stack_samples(make_samples(world.tracks, world.source, q=13))
    return arrays.subset(np.arange(32))


PIPELINE_CONFIG = """\
# small end-to-end run
synth_n_storms = 30
q = 13
epochs_stage1 = 2
epochs_stage2 = 2
epochs_stage3 = 2
hidden_size = 16
d_gph = 16
fc_size = 16
"""


def run_pipeline(root, seed=0):
    """synth -> ingest -> train -> evaluate -> report through the CLI; returns the eval dir."""
    from pathlib import Path

    from tcfusion.cli import main

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.cfg"
    cfg.write_text(PIPELINE_CONFIG)
    c = ["--config", str(cfg)]
    steps = [
        ["synth", "--out", str(root / "synth"), "--seed", str(seed), *c],
        ["ingest", "--bst", str(root / "synth" / "tracks.bst"), "--gph", str(root / "synth" / "gph"),
         "--out", str(root / "data"), *c],
        ["train", "--data", str(root / "data" / "dataset.npz"), "--out", str(root / "train"), "--seed", str(seed), *c],
        ["evaluate", "--checkpoint", str(root / "train" / "checkpoint.npz"), "--data", str(root / "data" / "dataset.npz"),
         "--baseline", "extrapolation", "--baseline", "cliper", "--out", str(root / "eval"), "--seed", str(seed), *c],
        ["report", "--eval", str(root / "eval"), "--out", str(root / "eval")],
    ]
    for argv in steps:
        code = main(argv)
        assert code == 0, f"{argv[0]} exited with {code}"
    return root / "eval"


# -- acceptance verdict lines ---------------------------------------------------

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record ``PASS/FAIL criterion N`` for the terminal summary, then assert."""
    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
        request.config.stash.setdefault(_VERDICTS, []).append((number, line))
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)

import dataclasses
import json
import warnings

import numpy as np
import pytest

from tcfusion.baselines import (
    FACTOR_NAMES, FACTOR_TABLE, N_FACTORS, N_SELECTED, BPConfig, InsufficientHistory, build_cliper_factors,
    cliper_bp_fit, cliper_bp_predict, extrapolate, extrapolate_windows, factor_manifest, pearson_matrix,
    pearson_select,
)
from tcfusion.bst import TCTrack
from tcfusion.evaluation import mde
from tcfusion.samples import make_samples, split_by_years, stack_samples
from tcfusion.synth import SynthConfig, synth_world
from conftest import straight_track


@pytest.mark.parametrize("dlat,dlon", [(0.5, -0.8), (0.0, 1.3), (-0.7, 0.0), (0.0, 0.0)])
def test_extrapolation_exact_on_constant_velocity(dlat, dlon):
    track = straight_track(12, dlat=dlat, dlon=dlon)
    pos = track.positions()
    for t in range(1, 8):
        fc = extrapolate(track, t, tau=4)
        assert mde(fc.absolute, pos[t + 1 : t + 5]).max() < 1e-6


def test_extrapolation_needs_one_prior_step():
    with pytest.raises(InsufficientHistory):
        extrapolate(straight_track(5), 0)


def test_window_extrapolation_matches_track_version():
    track = straight_track(10, dlat=0.3, dlon=0.4)
    pos = track.positions()
    vec = extrapolate_windows((pos[5] - pos[4])[None], 4)[0]
    np.testing.assert_array_equal(vec, extrapolate(track, 5).deltas)


def test_factor_table_layout():
    assert N_FACTORS == 46 and len(FACTOR_NAMES) == len(set(FACTOR_NAMES)) == 46
    assert {k for _, k in FACTOR_TABLE} <= {"absolute", "difference", "mixed", "climatology"}
    manifest = json.loads(factor_manifest())
    assert manifest["n_factors"] == 46 and manifest["n_selected"] == N_SELECTED
    assert [f["name"] for f in manifest["factors"]] == FACTOR_NAMES


def test_factor_vector_values():
    track = straight_track(10, dlat=0.5, dlon=-0.8, wind_step=1.0)
    f = dict(zip(FACTOR_NAMES, build_cliper_factors(track, 6)))
    assert f["lat"] == pytest.approx(13.0) and f["lon"] == pytest.approx(145.2)
    assert len(build_cliper_factors(track, 6)) == 46
    with pytest.raises(InsufficientHistory):
        build_cliper_factors(track, 3)


def test_stationary_storm_has_zero_difference_factors():
    track = straight_track(10, dlat=0.0, dlon=0.0, wind_step=0.0)
    values = build_cliper_factors(track, 6)
    for (name, kind), v in zip(FACTOR_TABLE, values):
        if kind == "difference":
            assert v == 0.0, name


def test_difference_factors_translation_invariant():
    a = straight_track(10, dlat=0.4, dlon=0.6)
    b = TCTrack("B", [dataclasses.replace(ob, lat=ob.lat + 3.0, lon=ob.lon + 7.0) for ob in a.observations])
    fa, fb = build_cliper_factors(a, 6), build_cliper_factors(b, 6)
    for (name, kind), x, y in zip(FACTOR_TABLE, fa, fb):
        if kind == "difference":
            assert x == pytest.approx(y, abs=1e-12), name


def test_pearson_matrix_against_numpy():
    rng = np.random.default_rng(3)
    X, Y = rng.normal(size=(50, 5)), rng.normal(size=(50, 2))
    ref = np.corrcoef(np.hstack([X, Y]).T)[:5, 5:]
    np.testing.assert_allclose(pearson_matrix(X, Y), ref, atol=1e-12)


def test_pearson_round_robin_and_ties():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(40, 2))
    noise = rng.normal(size=40)
    X = np.column_stack([
        noise,                      # 0: weak
        y[:, 1],                    # 1: best for target 1
        y[:, 0],                    # 2: best for target 0
        y[:, 0] + 0.5 * noise,      # 3: second for target 0
        y[:, 0],                    # 4: ties with 2
    ])
    sel = pearson_select(X, y, k=3)
    assert sel.selected.tolist() == [2, 1, 4]


def test_zero_variance_factor_excluded_with_warning():
    rng = np.random.default_rng(1)
    y = rng.normal(size=(30, 2))
    X = np.column_stack([np.ones(30), y[:, 0], rng.normal(size=30)])
    with pytest.warns(UserWarning, match="zero-variance"):
        sel = pearson_select(X, y, k=3)
    assert 0 not in sel.selected and len(sel.selected) == 2


def test_pearson_select_needs_samples():
    with pytest.raises(ValueError):
        pearson_select(np.zeros((2, 3)), np.zeros((2, 2)))


def test_bp_zero_epochs_predicts_target_mean():
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(20, 4)), rng.normal(size=(20, 3, 2))
    model = cliper_bp_fit(X, Y, BPConfig(epochs=0))
    np.testing.assert_allclose(model.predict(X), np.broadcast_to(Y.mean(0), Y.shape), atol=1e-12)


def test_bp_learns_linear_relation():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(256, 3))
    Y = (X @ rng.normal(size=(3, 8)) * 0.3).reshape(-1, 4, 2)
    model = cliper_bp_fit(X, Y, BPConfig(epochs=400, lr=3e-3, seed=1))
    assert model.history[-1] < 1e-3
    assert model.history[-1] < model.history[0]


def test_bp_deterministic_and_forecast_origin():
    rng = np.random.default_rng(6)
    X, Y = rng.normal(size=(64, 4)), rng.normal(size=(64, 4, 2))
    a = cliper_bp_fit(X, Y, BPConfig(epochs=5))
    b = cliper_bp_fit(X, Y, BPConfig(epochs=5))
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
    fc = cliper_bp_predict(a, X[:1], np.array([15.0, 140.0]))
    assert fc.deltas.shape == (1, 4, 2)


def test_cliper_beats_extrapolation_on_curved_world():
    world = synth_world(SynthConfig(n_storms=60), seed=11)
    samples = make_samples(world.tracks, None)
    split_by_years(samples)
    arrays = stack_samples(samples)
    train, test = arrays.where_split("train"), arrays.where_split("test")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sel = pearson_select(train.cliper, train.y.reshape(len(train), -1))
    model = cliper_bp_fit(train.cliper, train.y, BPConfig(epochs=150), selection=sel)
    cliper = mde(test.origin + model.predict(test.cliper)[:, 3], test.truth[:, 3]).mean()
    extrap = mde(test.origin + extrapolate_windows(test.x[:, -1, 3:5])[:, 3], test.truth[:, 3]).mean()
    assert cliper < extrap

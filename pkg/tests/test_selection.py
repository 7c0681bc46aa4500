import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lockdown_aq.evaluation import DriverSpec, SmoothComponent, SynthConfig, generate_synthetic
from lockdown_aq.features import CATEGORICAL, FeatureSpec, build_design
from lockdown_aq.gam import fit, to_json
from lockdown_aq.ingest import daily_series_from_frame
from lockdown_aq.selection import (
    DegenerateCandidate,
    NoViableModel,
    SelectionError,
    ensure_weekday,
    forward_select,
    vif,
)

from oracles import vif_from_correlation

NOISE = [f"N{i}" for i in range(1, 6)]


class TestVif:
    def test_orthogonal(self):
        x = np.array([1.0, -1.0, 1.0, -1.0])
        z = np.array([1.0, 1.0, -1.0, -1.0])
        assert vif(x, [z]) == pytest.approx(1.0, abs=1e-9)

    def test_threshold_equivalence(self):
        # construct a candidate with R^2 = 0.6 exactly against one column
        gen = np.random.default_rng(0)
        a = gen.standard_normal(500)
        e = gen.standard_normal(500)
        a = (a - a.mean()) / a.std()
        e = e - e.mean()
        e -= a * (a @ e) / (a @ a)
        e /= e.std()
        c = math.sqrt(0.6) * a + math.sqrt(0.4) * e
        assert vif(c, [a]) == pytest.approx(2.5, rel=1e-9)

    def test_exact_copy(self):
        x = np.random.default_rng(1).standard_normal(50)
        assert vif(x, [x.copy()]) == math.inf

    def test_empty_included(self):
        assert vif(np.arange(5.0), []) == 1.0

    def test_degenerate(self):
        with pytest.raises(DegenerateCandidate):
            vif(np.ones(10), [np.arange(10.0)])

    def test_against_inverse_correlation(self):
        gen = np.random.default_rng(3)
        z = gen.standard_normal((300, 4))
        cols = [z[:, 0], z[:, 1] + 0.8 * z[:, 0], z[:, 2] - 0.5 * z[:, 1], z[:, 3]]
        oracle = vif_from_correlation(cols)
        for j in range(4):
            others = [c for i, c in enumerate(cols) if i != j]
            assert vif(cols[j], others) == pytest.approx(oracle[j], rel=1e-9)

    @settings(max_examples=25)
    @given(st.integers(0, 10_000), st.floats(0.5, 20.0), st.floats(-50, 50))
    def test_affine_invariance(self, seed, scale, shift):
        gen = np.random.default_rng(seed)
        z = gen.standard_normal((60, 3))
        a = vif(z[:, 0] + 0.5 * z[:, 1], [z[:, 1], z[:, 2]])
        b = vif(scale * (z[:, 0] + 0.5 * z[:, 1]) + shift, [z[:, 1], z[:, 2]])
        assert a == pytest.approx(b, rel=1e-8)


def _noise_drivers(true=("X1",)):
    return tuple(DriverSpec(n, 0.0, 0.0, 0.0, 0.5, 1.0) for n in list(true) + NOISE)


def _one_true(seed, sigma=0.1, duplicate=False):
    cfg = SynthConfig(
        seed=seed, sigma=sigma, drivers=_noise_drivers(),
        smooths=(SmoothComponent("X1", "sine", 0.4, 4.0),),
        weekday_multipliers=(1.0,) * 7,
        duplicates=(("X1dup", "X1", 0.5),) if duplicate else (),
    )
    series, _ = generate_synthetic(cfg)
    names = ["X1"] + NOISE + (["X1dup"] if duplicate else [])
    specs = [FeatureSpec(n) for n in names]
    return build_design(series, "NO2", specs), specs


def test_true_driver_first():
    hits = 0
    for seed in range(20):
        design, specs = _one_true(seed)
        _, trace = forward_select(design, specs)
        hits += trace.selected[0] == "X1"
    assert hits >= 19


def test_duplicate_rejected_after_true_driver():
    design, specs = _one_true(4, duplicate=True)
    assert 1.0 - 1.0 / vif(design.columns["X1dup"], [design.columns["X1"]]) > 0.64
    _, trace = forward_select(design, specs)
    assert trace.selected[0] == "X1"
    for step in trace.steps[1:]:
        out = {o.name: o for o in step.outcomes}
        if "X1dup" in out:
            assert out["X1dup"].rejected and out["X1dup"].aic is None
    assert "X1dup" not in trace.selected


def test_pure_noise_stops_early():
    gen = np.random.default_rng(17)
    n = 600
    idx = pd.date_range("2018-01-01", periods=n, freq="D")
    frame = pd.DataFrame({c: gen.standard_normal(n) for c in NOISE}, index=idx)
    frame["NO2"] = np.exp(2.0 + 0.1 * gen.standard_normal(n))
    series = daily_series_from_frame("S", frame)
    specs = [FeatureSpec(c) for c in NOISE]
    _, trace = forward_select(build_design(series, "NO2", specs), specs)
    assert len(trace.selected) <= 2
    seq = trace.aic_sequence
    assert all(a > b for a, b in zip(seq, seq[1:]))
    stop = trace.steps[-1]
    assert stop.chosen is None
    fitted = [o.aic for o in stop.outcomes if o.aic is not None]
    assert not fitted or min(fitted) >= seq[-1]


@pytest.fixture(scope="module")
def run(synth_two_years):
    series, _ = synth_two_years
    specs = [FeatureSpec(s) for s in ("T", "WS", "RH", "DP", "WDx", "WDy", "P", "DY", "M", "D")]
    specs += [FeatureSpec("T", 1), FeatureSpec("WS", 0, 7)]
    design = build_design(series, "NO2", specs)
    model, trace = forward_select(design, specs)
    return design, specs, model, trace


class TestTraceInvariants:
    def test_chosen_is_minimal(self, run):
        _, _, _, trace = run
        for step in trace.steps:
            fitted = [o for o in step.outcomes if o.aic is not None]
            if step.chosen is not None:
                best = min(o.aic for o in fitted)
                chosen = next(o for o in fitted if o.name == step.chosen)
                assert chosen.aic <= best + 1e-9
                assert step.aic_after == chosen.aic

    def test_vif_gate(self, run):
        _, specs, _, trace = run
        kinds = {s.name: s.kind for s in specs}
        for step in trace.steps:
            for o in step.outcomes:
                if o.rejected:
                    assert o.vif > trace.vif_threshold
                elif o.aic is not None and kinds[o.name] != CATEGORICAL:
                    assert o.vif <= trace.vif_threshold
                if kinds[o.name] == CATEGORICAL:
                    assert o.vif is None and not o.rejected

    def test_single_stop_and_decreasing(self, run):
        _, _, model, trace = run
        assert sum(s.chosen is None for s in trace.steps) == 1
        assert trace.steps[-1].chosen is None
        seq = trace.aic_sequence
        assert all(a > b for a, b in zip(seq, seq[1:]))
        assert model.aic == seq[-1]
        assert model.feature_names == trace.selected

    def test_first_step_vif_is_one(self, run):
        _, _, _, trace = run
        for o in trace.steps[0].outcomes:
            assert o.vif in (None, 1.0)

    def test_deterministic(self, run):
        design, specs, model, trace = run
        model2, trace2 = forward_select(design, specs)
        assert trace2.to_json() == trace.to_json()
        assert to_json(model2) == to_json(model)

    def test_table(self, run):
        _, _, _, trace = run
        lines = trace.table().splitlines()
        assert len(lines) == len(trace.steps) + 1
        assert "STOP" in lines[-1]


def test_no_candidates():
    with pytest.raises(SelectionError):
        forward_select(None, [])


def test_no_viable_model():
    idx = pd.date_range("2020-01-01", periods=12, freq="D")
    series = daily_series_from_frame("S", pd.DataFrame({"NO2": np.arange(1.0, 13.0), "X": np.arange(12.0)}, index=idx))
    spec = [FeatureSpec("X")]
    with pytest.raises(NoViableModel):
        forward_select(build_design(series, "NO2", spec), spec)


class TestEnsureWeekday:
    def test_already_present(self, base_design, base_model):
        again = ensure_weekday(base_model, base_design)
        assert again is base_model
        assert to_json(again) == to_json(base_model)

    def test_adds_weekday(self, base_design):
        m = fit(base_design, [FeatureSpec("T")])
        with_d = ensure_weekday(m, base_design)
        assert with_d.feature_names == ["T", "D"]
        assert with_d.terms["D"].levels == tuple(range(7))
        assert with_d.meta["weekday_added"] is True

    def test_derives_column_when_missing(self, synth_two_years):
        series, _ = synth_two_years
        design = build_design(series, "NO2", [FeatureSpec("T")])
        m = ensure_weekday(fit(design, [FeatureSpec("T")]), design)
        assert m.has_term("D")

    def test_noise_weekday_near_zero(self):
        series, _ = generate_synthetic(SynthConfig(n_days=2000, weekday_multipliers=(1.0,) * 7, seed=5))
        design = build_design(series, "NO2", [FeatureSpec("T"), FeatureSpec("WS"), FeatureSpec("D")])
        m = ensure_weekday(fit(design, [FeatureSpec("T"), FeatureSpec("WS")]), design)
        counts = np.bincount(design.columns["D"].astype(int), minlength=7)
        se = np.sqrt(m.sigma2 * (1.0 / counts[1:] + 1.0 / counts[0]))
        assert np.all(np.abs(np.array(m.terms["D"].coefficients[1:])) <= 3 * se)

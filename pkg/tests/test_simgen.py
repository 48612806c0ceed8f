import json

import numpy as np
import pytest

from trajgam import mark_series_starts
from trajgam.simgen import (
    SimConfig,
    decide,
    gen_words,
    replicate_seeds,
    run_power_harness,
    run_type1_harness,
    word_curves,
)


def test_default_layout():
    d = gen_words()
    assert d.n == 550
    assert len(d["traj"].levels) == 50
    assert d.names == ["traj", "word", "measurement.no", "f2", "duration"]
    assert d["traj"].labels()[0] == "traj.1" and d["word"].labels()[0] == "A"
    dur = d.numeric("duration")
    assert dur.min() >= 0.08 and dur.max() <= 0.16
    s = mark_series_starts(d, "traj", "measurement.no")
    assert s.start_flags.sum() == 50


def test_deterministic():
    a, b = gen_words(SimConfig(seed=4)), gen_words(SimConfig(seed=4))
    for c in a.names:
        assert np.array_equal(a[c].data, b[c].data)
    c = gen_words(SimConfig(seed=5))
    assert not np.array_equal(a.numeric("f2"), c.numeric("f2"))


def test_curves_start_equal_end_apart():
    t = np.arange(11.0)
    cfg = SimConfig(effect=100)
    for dur in (0.08, 0.12, 0.16):
        a, b = word_curves(t, cfg, dur)
        assert b[0] == a[0]
        assert b[-1] - a[-1] == pytest.approx(100, abs=1e-9)
    short = np.ptp(word_curves(t, SimConfig(duration_effect=0.5), 0.08)[0])
    long = np.ptp(word_curves(t, SimConfig(duration_effect=0.5), 0.16)[0])
    assert short < long


def test_noiseless_difference_is_effect():
    d = gen_words(SimConfig(effect=100, noise_sd=0, random_amplitude=0, duration_effect=0))
    f2 = d.numeric("f2").reshape(50, 11)
    assert np.all(f2[25:, -1] - f2[:25, -1] == pytest.approx(100, abs=1e-9))
    assert np.all(f2[25:, 0] == f2[:25, 0])


def test_null_curves_agree():
    d = gen_words(SimConfig(effect=0, n_traj=250, seed=8))
    f2 = d.numeric("f2").reshape(500, 11)
    a, b = f2[:250], f2[250:]
    se = np.sqrt(a.var(0, ddof=1) / 250 + b.var(0, ddof=1) / 250)
    assert np.all(np.abs(a.mean(0) - b.mean(0)) < 3 * se)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n_traj=0)
    with pytest.raises(ValueError):
        SimConfig(noise_sd=-1)
    with pytest.raises(ValueError):
        SimConfig(rho=1.0)
    with pytest.raises(ValueError):
        run_type1_harness(SimConfig(effect=50), 5)
    with pytest.raises(ValueError):
        run_type1_harness(SimConfig(effect=0), 5, variant="bogus")
    with pytest.raises(ValueError):
        run_type1_harness(SimConfig(effect=0), 5, methods=(7,))


def test_decide_returns_requested_methods():
    out = decide(gen_words(SimConfig(seed=2)), "none", methods=(1, 4, 6))
    assert set(out) == {1, 4, 6}
    assert all(isinstance(v, bool) for v in out.values())


def test_seeds_are_distinct_and_stable():
    s = replicate_seeds(1, 50)
    assert len(set(s)) == 50 and s == replicate_seeds(1, 50)


def test_report_reproducible_and_json():
    cfg = SimConfig(effect=0, seed=11)
    a = run_type1_harness(cfg, 12, variant="none")
    b = run_type1_harness(cfg, 12, variant="none")
    assert a.to_json() == b.to_json()
    doc = json.loads(a.to_json())
    assert doc["replicates"] == 12 and doc["completed"] + doc["fit_failures"] == 12
    for m, v in doc["methods"].items():
        assert 0 <= v["rate"] <= 1
        assert v["mc_se"] == pytest.approx(np.sqrt(v["rate"] * (1 - v["rate"]) / doc["completed"]))


def test_power_at_zero_equals_type1():
    cfg = SimConfig(effect=0, seed=13)
    assert run_power_harness(cfg, 10, variant="none").to_json() == \
        run_type1_harness(cfg, 10, variant="none").to_json()


def test_parallel_matches_serial():
    cfg = SimConfig(effect=0, seed=3)
    assert run_type1_harness(cfg, 6, variant="none", jobs=2).to_json() == \
        run_type1_harness(cfg, 6, variant="none").to_json()


def test_fit_failures_are_counted(monkeypatch):
    import trajgam.simgen as sg

    calls = {"n": 0}
    real = sg.decide

    def flaky(data, variant, methods, alpha=0.05):
        calls["n"] += 1
        if calls["n"] % 3 == 0:
            raise sg.FitError("synthetic failure")
        return real(data, variant, methods)

    monkeypatch.setattr(sg, "decide", flaky)
    r = run_type1_harness(SimConfig(effect=0), 6, variant="none")
    assert r.failures == 2 and r.completed == 4
    assert len(r.failure_messages) == 2 and "synthetic failure" in r.failure_messages[0]


def test_power_monotone_in_effect():
    rates = [run_power_harness(SimConfig(effect=e, seed=21), 30, methods=(4,), variant="ar1").rates[4]
             for e in (0, 50, 100)]
    assert rates[0] <= rates[1] <= rates[2]


def test_power_at_default_effect():
    r = run_power_harness(SimConfig(effect=100, seed=31), 100, methods=(4,), variant="ar1")
    assert r.rates[4] >= 0.8


def test_halves_are_consistent():
    r = run_type1_harness(SimConfig(effect=0, seed=41), 200, methods=(1, 3, 6), variant="none")
    d = np.array([[x[m] for m in (1, 3, 6)] for x in r.decisions], dtype=float)
    h1, h2 = d[:100].mean(0), d[100:].mean(0)
    se = np.sqrt(h1 * (1 - h1) / 100 + h2 * (1 - h2) / 100)
    assert np.all(np.abs(h1 - h2) <= 4 * np.maximum(se, 1e-9))

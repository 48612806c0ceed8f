import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from conftest import smooth_data
from trajgam import Dataset, FitError, FittedModel, ModelSpecError, fit, predict_smooth, summarize
from trajgam.diagnostics import acf_split, residuals, start_value_rho
from trajgam.engine import assemble
from trajgam.engine.assemble import ar1_transform, ar1_whiten
from trajgam.engine.model import criterion, fit_at, optimize_lambda, pls_solve


def _small_model(seed, n=25):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 1, n))
    z = rng.normal(size=n)
    y = np.sin(4 * x) + 0.3 * z + rng.normal(0, 0.2, n)
    return assemble('y ~ z + s(x, bs="cr", k=6)', Dataset.from_dict({"x": x, "z": z, "y": y}))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-8, 8))
def test_pls_matches_augmented_least_squares(seed, loglam):
    M = _small_model(seed)
    assert M.p <= 8 and M.n <= 30
    lam = np.exp(loglam)
    res = pls_solve(M, [lam])
    S = np.zeros((M.p, M.p))
    pen = M.penalties[0]
    a, b = M.terms[pen.term].coef_range
    S[a:b, a:b] = pen.S
    w, U = linalg.eigh(lam * S)
    root = (U * np.sqrt(np.clip(w, 0, None))).T
    A = np.vstack([M.X, root])
    rhs = np.concatenate([M.y, np.zeros(M.p)])
    beta, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    np.testing.assert_allclose(res.beta, beta, atol=1e-8 * max(1, np.abs(beta).max()))
    H = np.linalg.solve(M.X.T @ M.X + lam * S, M.X.T @ M.X)
    assert abs(res.tau - np.trace(H)) < 1e-8
    rss = float(np.sum((M.y - M.X @ beta) ** 2))
    assert res.phi == pytest.approx(rss / (M.n - np.trace(H)), rel=1e-8)


def test_zero_lambda_is_least_squares():
    M = _small_model(1)
    res = pls_solve(M, [0.0])
    Q, R = np.linalg.qr(M.X)
    np.testing.assert_allclose(res.beta, np.linalg.solve(R, Q.T @ M.y), atol=1e-8)


def test_lambda_limits_of_edf():
    d = smooth_data(200, seed=2)
    M = assemble('y ~ s(x, bs="cr")', d)
    assert fit_at(M, [1e12]).edf["s(x)"] == pytest.approx(1, abs=0.01)
    assert fit_at(M, [1e-12]).edf["s(x)"] == pytest.approx(9, abs=0.01)


def test_linear_limit_fit_is_straight():
    d = smooth_data(50, seed=3)
    m = fit_at(assemble('y ~ s(x, bs="cr")', d), [1e12])
    x = d.numeric("x")
    np.testing.assert_allclose(np.polyval(np.polyfit(x, m.fitted, 1), x), m.fitted, atol=1e-6)


def test_column_count_words_model(words):
    d, _ = words
    f = 'f2 ~ word.ord + s(measurement.no) + s(measurement.no, by=word.ord) + s(measurement.no, traj, bs="fs", m=1)'
    M = assemble(f, d)
    assert M.p == 1 + 1 + 9 + 9 + 50 * 10
    assert M.labels[:2] == ["(Intercept)", "word.ordB"]
    cover = np.zeros(M.p, dtype=int)
    for t in M.terms:
        a, b = t.coef_range
        cover[a:b] += 1
    assert np.all(cover == 1)


def test_difference_smooth_needs_companions(words):
    d, _ = words
    with pytest.raises(ModelSpecError, match="parametric term word.ord"):
        assemble("f2 ~ s(measurement.no) + s(measurement.no, by=word.ord)", d)
    with pytest.raises(ModelSpecError, match="reference smooth"):
        assemble("f2 ~ word.ord + s(measurement.no, by=word.ord)", d)


def test_assembly_errors():
    d = Dataset.from_dict({"x": np.arange(5.0), "g": list("aabbc"), "y": np.arange(5.0)})
    with pytest.raises(ModelSpecError, match="unknown column"):
        assemble("y ~ q", d)
    with pytest.raises(ModelSpecError, match="only 5 unique"):
        assemble('y ~ s(x, k=6, bs="cr")', d)
    with pytest.raises(ModelSpecError, match="grouping factor first"):
        assemble('y ~ s(x, g, bs="re")', d)


def test_plain_linear_model():
    rng = np.random.default_rng(0)
    x = rng.normal(size=30)
    y = 1 + 2 * x + rng.normal(size=30)
    m = fit("y ~ x", Dataset.from_dict({"x": x, "y": y}))
    np.testing.assert_allclose(m.beta, np.polyfit(x, y, 1)[::-1], atol=1e-10)
    assert len(m.lam) == 0 and m.tau == pytest.approx(2)


def test_ti_by_factor_model():
    rng = np.random.default_rng(1)
    n = 11 * 16
    t = np.tile(np.arange(11.0), 16)
    dec = np.repeat(np.tile([1.0, 2, 3, 4], 4), 11)
    stress = np.repeat(["full", "schwa"] * 8, 11)
    y = t + dec + rng.normal(size=n)
    d = Dataset.from_dict({"t": t, "decade": dec, "stress": stress, "y": y})
    M = assemble("y ~ stress + s(t) + s(decade, k=4) + ti(t, decade, k=c(10,4), by=stress)", d)
    assert [t.label for t in M.terms][-2:] == ["ti(t,decade):stressfull", "ti(t,decade):stressschwa"]
    assert all(t.width == 27 for t in M.terms[-2:])


def test_confounded_terms_named():
    d = smooth_data(30)
    with pytest.raises(FitError, match="x"):
        fit('y ~ x + s(x, bs="cr")', d)


def test_ar1_whiten_three_rows():
    X = np.array([[1.0, 2.0], [3.0, 5.0], [4.0, 9.0]])
    rho = 0.5
    W = ar1_transform(X, rho, [True, False, False])
    np.testing.assert_allclose(W[1], (X[1] - 0.5 * X[0]) / np.sqrt(0.75))
    C = rho ** np.abs(np.subtract.outer(np.arange(3), np.arange(3)))
    L = np.linalg.cholesky(C)
    np.testing.assert_allclose(W, linalg.solve_triangular(L, X, lower=True), atol=1e-10)
    np.testing.assert_allclose(W.T @ W, X.T @ np.linalg.inv(C) @ X, atol=1e-10)
    np.testing.assert_array_equal(ar1_transform(X, 0.0, [True, False, False]), X)
    with pytest.raises(ValueError):
        ar1_transform(X, 1.0, [True, False, False])


def _toy_series(seed=0, rho=0.6):
    rng = np.random.default_rng(seed)
    x = np.tile(np.linspace(0, 1, 10), 2)
    e = np.concatenate([_ar(rng, 10, rho), _ar(rng, 10, rho)])
    y = np.sin(3 * x) + 0.2 * e
    flags = np.zeros(20, dtype=bool)
    flags[[0, 10]] = True
    return Dataset.from_dict({"x": x, "y": y}), flags


def _ar(rng, n, rho):
    out = np.empty(n)
    out[0] = rng.normal()
    for i in range(1, n):
        out[i] = rho * out[i - 1] + np.sqrt(1 - rho**2) * rng.normal()
    return out


def _dense_corr_inv(flags, rho):
    n = len(flags)
    C = np.zeros((n, n))
    starts = list(np.flatnonzero(flags)) + [n]
    for a, b in zip(starts[:-1], starts[1:]):
        idx = np.arange(b - a)
        C[a:b, a:b] = rho ** np.abs(np.subtract.outer(idx, idx))
    return np.linalg.inv(C)


def test_gls_oracle():
    d, flags = _toy_series()
    rho = 0.6
    Ci = _dense_corr_inv(flags, rho)
    M = assemble('y ~ s(x, bs="cr", k=5)', d)
    W = ar1_whiten(M, rho, flags)
    lam = 0.7
    m = fit_at(W, [lam])
    S = np.zeros((M.p, M.p))
    a, b = M.terms[1].coef_range
    S[a:b, a:b] = M.penalties[0].S
    beta = np.linalg.solve(M.X.T @ Ci @ M.X + lam * S, M.X.T @ Ci @ M.y)
    np.testing.assert_allclose(m.beta, beta, atol=1e-8)
    lin = fit("y ~ x", d, rho=rho, starts=flags)
    X1 = np.column_stack([np.ones(20), d.numeric("x")])
    np.testing.assert_allclose(lin.beta, np.linalg.solve(X1.T @ Ci @ X1, X1.T @ Ci @ d.numeric("y")), atol=1e-8)


def test_whitening_invariance_at_rho_zero():
    d, flags = _toy_series(1)
    a = fit('y ~ s(x, bs="cr", k=6)', d, "ML")
    b = fit('y ~ s(x, bs="cr", k=6)', d, "ML", rho=0.0, starts=flags)
    np.testing.assert_allclose(b.beta, a.beta, atol=1e-10)
    assert b.score == pytest.approx(a.score, abs=1e-10)
    np.testing.assert_allclose(residuals(b, "normalized"), residuals(a), atol=1e-10)


def test_one_way_reml_oracle():
    rng = np.random.default_rng(42)
    G, J = 6, 5
    g = np.repeat([f"g{i}" for i in range(G)], J)
    y = np.repeat(rng.normal(0, 2, G), J) + rng.normal(0, 1, G * J)
    m = fit('y ~ s(g, bs="re")', Dataset.from_dict({"g": g, "y": y}), "REML")
    yy = y.reshape(G, J)
    msw = ((yy - yy.mean(1, keepdims=True)) ** 2).sum() / (G * (J - 1))
    msb = J * ((yy.mean(1) - y.mean()) ** 2).sum() / (G - 1)
    ratio = max(0.0, (msb - msw) / J) / msw
    est = 1.0 / (m.lam[0] * m.penalty_scales[0])
    assert est == pytest.approx(ratio, rel=1e-4)


def test_freml_alias():
    d = smooth_data(80, seed=5)
    a, b = fit('y ~ s(x)', d, "REML"), fit('y ~ s(x)', d, "fREML")
    assert a.score == pytest.approx(b.score, abs=1e-9)
    assert b.method == "fREML" and b.criterion == "REML"


def test_gcv_score_formula():
    d = smooth_data(60, seed=8)
    M = assemble('y ~ s(x, bs="cr")', d)
    res = pls_solve(M, [2.0])
    assert criterion(M, [2.0], "GCV") == pytest.approx(M.n * res.rss / (M.n - res.tau) ** 2, rel=1e-10)


def test_saturated_gcv_errors():
    d = Dataset.from_dict({"x": np.arange(6.0), "y": np.arange(6.0) ** 3})
    M = assemble('y ~ s(x, k=6, bs="cr")', d)
    with pytest.raises(FitError, match="saturated"):
        criterion(M, [0.0], "GCV")


def test_no_penalties_optimize_is_plain_solve():
    d = smooth_data(20)
    M = assemble("y ~ x", d)
    np.testing.assert_allclose(optimize_lambda(M, "REML").beta, pls_solve(M, []).beta)


@pytest.mark.parametrize("method", ["GCV", "ML", "REML"])
def test_fitted_model_invariants(method):
    d = smooth_data(80, seed=9)
    m = fit("y ~ s(x)", d, method)
    np.testing.assert_allclose(m.fitted + m.residuals, d.numeric("y"), atol=1e-10)
    assert 1 <= m.tau <= m.p
    assert np.allclose(m.Vb, m.Vb.T)
    assert np.linalg.eigvalsh(m.Vb).min() > -1e-10 * np.abs(m.Vb).max()
    assert m.converged


def test_edf_monotone_in_lambda():
    d = smooth_data(60, seed=10)
    M = assemble('y ~ s(x, bs="cr")', d)
    edf = [fit_at(M, [lam]).edf["s(x)"] for lam in np.logspace(-6, 8, 20)]
    assert np.all(np.diff(edf) <= 1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_nesting_does_not_worsen_ml(seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.uniform(size=100), rng.uniform(size=100)
    y = np.sin(5 * x1) + rng.normal(0, 0.4, 100)
    d = Dataset.from_dict({"x1": x1, "x2": x2, "y": y})
    small = fit('y ~ s(x1, bs="cr")', d, "ML")
    big = fit('y ~ s(x1, bs="cr") + s(x2, bs="cr")', d, "ML")
    assert big.score <= small.score + 1e-6


def test_k_insensitivity():
    rng = np.random.default_rng(2024)
    x = np.linspace(0, 1, 50)
    y = 1 / (1 + np.exp(-12 * (x - 0.5))) + rng.normal(0, 0.08, 50)
    d = Dataset.from_dict({"x": x, "y": y})
    fits = [fit(f'y ~ s(x, bs="cr", k={k})', d, "REML") for k in (10, 20, 50)]
    rng_fit = np.ptp(fits[0].fitted)
    for a in fits:
        for b in fits:
            assert np.abs(a.fitted - b.fitted).max() < 0.02 * rng_fit
            assert abs(a.edf["s(x)"] - b.edf["s(x)"]) < 1.0


def test_linear_truth_reml_edf():
    edfs = []
    for seed in range(30):
        rng = np.random.default_rng(seed)
        x = np.sort(rng.uniform(0, 1, 100))
        y = 1 + 2 * x + rng.normal(0, 0.5, 100)
        edfs.append(fit('y ~ s(x, bs="cr")', Dataset.from_dict({"x": x, "y": y}), "REML").edf["s(x)"])
    assert np.median(edfs) < 1.3


def test_gcv_pure_noise_edf_rate():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = Dataset.from_dict({"x": np.sort(rng.uniform(0, 1, 100)), "y": rng.normal(size=100)})
        hits += fit('y ~ s(x, bs="cr")', d, "GCV").edf["s(x)"] <= 2.5
    # GCV occasionally has a genuine interior minimum at moderate EDF on pure noise
    assert hits >= 80


def test_ar_start_value_rho_whitens():
    rng = np.random.default_rng(7)
    n_series, length = 10, 60
    x = np.tile(np.linspace(0, 1, length), n_series)
    y = np.sin(2 * np.pi * x) + 0.3 * np.concatenate([_ar(rng, length, 0.6) for _ in range(n_series)])
    flags = np.tile(np.r_[True, np.zeros(length - 1, dtype=bool)], n_series)
    d = Dataset.from_dict({"x": x, "y": y})
    m0 = fit('y ~ s(x, bs="cr")', d, "REML", starts=flags)
    rho = start_value_rho(m0)
    m1 = fit('y ~ s(x, bs="cr")', d, "REML", rho=rho, starts=flags)
    assert abs(acf_split(residuals(m1, "normalized"), flags, 1).mean[1]) < 0.1


def test_posterior_coverage():
    rng = np.random.default_rng(99)
    x = np.linspace(0, 1, 100)
    truth = lambda v: np.sin(2 * np.pi * v) + 0.5 * v
    cover = []
    for _ in range(200):
        y = truth(x) + rng.normal(0, 0.3, 100)
        m = fit('y ~ s(x, bs="cr")', Dataset.from_dict({"x": x, "y": y}), "REML")
        g = predict_smooth(m, "x", grid_n=50)
        t = truth(g.grid["x"])
        cover.append(np.mean((g.lower <= t) & (t <= g.upper)))
    assert np.mean(cover) >= 0.88


def test_score_label_in_summary(words):
    d, _ = words
    m = fit('f2 ~ word.ord + s(measurement.no, bs="cr") + s(measurement.no, by=word.ord, bs="cr")', d, "ML")
    assert m.score > 0
    assert f"-ML = {m.score:.1f}" in summarize(m).to_text()


def test_save_load_round_trip(tmp_path, words):
    d, starts = words
    m = fit('f2 ~ word.ord + s(measurement.no, bs="cr") + s(measurement.no, by=word.ord, bs="cr") + '
            's(duration)', d, "ML", rho=0.4, starts=starts)
    p = tmp_path / "m.json"
    m.save(p)
    doc = json.loads(p.read_text())
    assert doc["schema"] == "trajgam.model/1"
    back = FittedModel.load(p)
    np.testing.assert_array_equal(back.beta, m.beta)
    np.testing.assert_array_equal(back.Vb, m.Vb)
    assert back.edf == m.edf and back.ar.rho == 0.4
    a = predict_smooth(m, "measurement.no", {"word.ord": "B", "duration": 0.1})
    b = predict_smooth(back, "measurement.no", {"word.ord": "B", "duration": 0.1})
    np.testing.assert_array_equal(a.fit, b.fit)
    np.testing.assert_array_equal(a.se, b.se)
    np.testing.assert_allclose(back.model_matrix(d) @ back.beta, m.fitted, atol=1e-8)

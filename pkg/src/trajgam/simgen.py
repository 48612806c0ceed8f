"""Synthetic two-word formant trajectories and the Monte-Carlo error-rate harness.

The underlying curve rises along a logistic transition centred on the middle
measurement. Word B departs from word A along the same transition shape, so
the two words coincide at the first measurement and differ by exactly
``effect`` at the last. Longer vowels get a wider excursion. Each trajectory
adds its own random intercept, slope and curvature and AR1 noise.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import Dataset, make_factor, Column, NUMERIC, mark_series_starts, to_ordered_treatment
from .diagnostics import profile_rho
from .engine.assemble import ModelSpecError
from .engine.model import fit
from .engine.pls import FitError
from .inference import compare_ml, predict_diff, predict_smooth, summarize

logger = logging.getLogger(__name__)

ALPHA = 0.05
BASE_F2 = 1650.0
RISE = 350.0
STEEPNESS = 1.2
DURATION_RANGE = (0.08, 0.16)
METHODS = (1, 2, 3, 4, 5, 6)
VARIANTS = ("none", "ar1", "fs")


@dataclass(frozen=True)
class SimConfig:
    n_traj: int = 25  # per word
    n_points: int = 11
    effect: float = 100.0
    duration_effect: float = 0.1
    random_amplitude: float = 0.5
    rho: float = 0.6
    noise_sd: float = 15.0
    seed: int = 1

    def __post_init__(self):
        if self.n_traj < 1 or self.n_points < 2:
            raise ValueError("n_traj must be >= 1 and n_points >= 2")
        if self.noise_sd < 0 or self.random_amplitude < 0:
            raise ValueError("noise_sd and random_amplitude must be non-negative")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")


def _transition(t: np.ndarray, n_points: int) -> np.ndarray:
    """0 at the first measurement, 1 at the last, steepest in the middle."""
    last = n_points - 1
    z = lambda u: 1 / (1 + np.exp(-STEEPNESS * (u - last / 2) * 10 / last))
    return (z(t) - z(0.0)) / (z(float(last)) - z(0.0))


def word_curves(t: np.ndarray, config: SimConfig, duration: float = 0.12) -> tuple[np.ndarray, np.ndarray]:
    """Expected trajectories of words A and B at one duration."""
    g = _transition(np.asarray(t, dtype=float), config.n_points)
    width = 1 + config.duration_effect * (duration - 0.12) / 0.04
    a = BASE_F2 + RISE * width * g
    return a, a + config.effect * g


def _ar1_noise(rng: np.random.Generator, n: int, rho: float, sd: float) -> np.ndarray:
    e = rng.normal(0.0, sd, n)
    out = np.empty(n)
    out[0] = e[0]
    c = math.sqrt(1 - rho**2)
    for i in range(1, n):
        out[i] = rho * out[i - 1] + c * e[i]
    return out


def gen_words(config: SimConfig = SimConfig()) -> Dataset:
    """Long-format data: traj, word, measurement.no, f2, duration."""
    rng = np.random.default_rng(config.seed)
    t = np.arange(config.n_points, dtype=float)
    u = t / (config.n_points - 1) - 0.5
    traj, word, mno, f2, dur = [], [], [], [], []
    amp = config.random_amplitude
    for i in range(2 * config.n_traj):
        w = "A" if i < config.n_traj else "B"
        d = rng.uniform(*DURATION_RANGE)
        a, b = word_curves(t, config, d)
        dev = amp * (rng.normal(0, 20) + rng.normal(0, 40) * u + rng.normal(0, 60) * (u**2 - 1 / 12))
        y = (a if w == "A" else b) + dev + _ar1_noise(rng, config.n_points, config.rho, config.noise_sd)
        traj += [f"traj.{i + 1}"] * config.n_points
        word += [w] * config.n_points
        mno.append(t)
        f2.append(y)
        dur += [d] * config.n_points
    return Dataset.from_columns([
        make_factor("traj", traj),
        make_factor("word", word, ["A", "B"]),
        Column("measurement.no", NUMERIC, np.concatenate(mno)),
        Column("f2", NUMERIC, np.concatenate(f2)),
        Column("duration", NUMERIC, np.asarray(dur)),
    ])


# -- harness ----------------------------------------------------------------------------

FULL = "f2 ~ word.ord + s(measurement.no, bs=\"cr\") + s(measurement.no, by=word.ord, bs=\"cr\")"
REDUCED = "f2 ~ s(measurement.no, bs=\"cr\")"
RANDOM_SMOOTH = " + s(measurement.no, traj, bs=\"fs\", m=1, k=5)"


def harness_models(variant: str) -> tuple[str, str]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    extra = RANDOM_SMOOTH if variant == "fs" else ""
    return FULL + extra, REDUCED + extra


def decide(data: Dataset, variant: str, methods=METHODS, alpha: float = ALPHA) -> dict[int, bool]:
    """Fit one replicate and apply each method's rejection rule."""
    d = to_ordered_treatment(data, "word", "A", name="word.ord")
    starts = mark_series_starts(d, "traj", "measurement.no")
    full_f, red_f = harness_models(variant)
    kw = {}
    if variant == "ar1":
        rho, full = profile_rho(full_f, d, starts)
        if rho > 0:
            kw = {"rho": rho, "starts": starts}
    else:
        full = fit(full_f, d, "ML")
    out = {}
    s = summarize(full)
    p_par = next(r.p_value for r in s.parametric if r.label == "word.ordB")
    p_smooth = next(r.p_value for r in s.smooth if r.label.endswith(":word.ordB"))
    out[1] = p_par < alpha
    out[2] = p_smooth < alpha
    out[3] = out[1] or out[2]
    if 4 in methods:
        reduced = fit(red_f, d, "ML", **kw)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cmp = compare_ml(full, reduced)
        out[4] = cmp.p_value is not None and cmp.p_value < alpha
    if 5 in methods:
        ga = predict_smooth(full, "measurement.no", {"word.ord": "A"}, exclude_random=True)
        gb = predict_smooth(full, "measurement.no", {"word.ord": "B"}, exclude_random=True)
        out[5] = bool(np.any((ga.lower > gb.upper) | (gb.lower > ga.upper)))
    if 6 in methods:
        gd = predict_diff(full, "measurement.no", {"word.ord": ("B", "A")}, exclude_random=True)
        out[6] = bool(np.any(gd.sig))
    return {k: bool(v) for k, v in out.items() if k in methods}


def _replicate(args) -> tuple[int, dict[int, bool] | None, str]:
    i, config, variant, methods = args
    try:
        return i, decide(gen_words(config), variant, methods), ""
    except (FitError, ModelSpecError, np.linalg.LinAlgError, FloatingPointError) as e:
        return i, None, f"{type(e).__name__}: {e}"


@dataclass
class HarnessReport:
    rates: dict[int, float]
    std_errors: dict[int, float]
    replicates: int
    completed: int
    failures: int
    variant: str
    config: dict
    decisions: list[dict[int, bool] | None] = field(default_factory=list, repr=False)
    failure_messages: list[str] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "variant": self.variant,
            "alpha": ALPHA,
            "replicates": self.replicates,
            "completed": self.completed,
            "fit_failures": self.failures,
            "failure_messages": self.failure_messages,
            "methods": {str(k): {"rate": self.rates[k], "mc_se": self.std_errors[k]} for k in self.rates},
            "config": self.config,
        }, indent=2, sort_keys=True)


def replicate_seeds(seed: int, replicates: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(replicates)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def _run(config: SimConfig, replicates: int, methods, variant: str, jobs: int) -> HarnessReport:
    methods = tuple(sorted(set(methods)))
    if not set(methods) <= set(METHODS):
        raise ValueError(f"methods must be drawn from {METHODS}")
    harness_models(variant)
    tasks = [(i, replace(config, seed=s), variant, methods)
             for i, s in enumerate(replicate_seeds(config.seed, replicates))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_replicate, tasks, chunksize=max(1, replicates // (4 * jobs))))
    else:
        results = [_replicate(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    decisions = [r[1] for r in results]
    msgs = [f"replicate {r[0]}: {r[2]}" for r in results if r[1] is None]
    done = [d for d in decisions if d is not None]
    rates, ses = {}, {}
    for m in methods:
        r = sum(d[m] for d in done) / len(done) if done else float("nan")
        rates[m] = r
        ses[m] = math.sqrt(r * (1 - r) / len(done)) if done else float("nan")
    return HarnessReport(rates, ses, replicates, len(done), len(msgs), variant, asdict(config), decisions, msgs)


def run_type1_harness(config: SimConfig, replicates: int = 200, methods=METHODS, variant: str = "ar1",
                      jobs: int = 1) -> HarnessReport:
    """False-positive rates of each method on data with no word difference."""
    if config.effect != 0:
        raise ValueError("the type-I harness needs effect = 0; use run_power_harness otherwise")
    return _run(config, replicates, methods, variant, jobs)


def run_power_harness(config: SimConfig, replicates: int = 100, methods=METHODS, variant: str = "ar1",
                      jobs: int = 1) -> HarnessReport:
    """Rejection rates of each method when the words differ by ``config.effect``."""
    if config.effect < 0:
        raise ValueError("effect must be non-negative")
    return _run(config, replicates, methods, variant, jobs)

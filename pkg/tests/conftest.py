import numpy as np
import pytest

from trajgam import Dataset, SimConfig, gen_words, mark_series_starts, to_ordered_treatment


def smooth_data(n=60, seed=0, sd=0.3, f=np.sin):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 2 * np.pi, n))
    return Dataset.from_dict({"x": x, "y": f(x) + rng.normal(0, sd, n)})


@pytest.fixture(scope="session")
def words():
    d = gen_words(SimConfig(seed=3))
    d = to_ordered_treatment(d, "word", "A", name="word.ord")
    return d, mark_series_starts(d, "traj", "measurement.no")


_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        name = report.nodeid.split("::")[-1]
        num = int(name.split("_")[2])
        prev_ok, secs, details = _criteria.get(num, (True, 0.0, []))
        details = details + [v for k, v in report.user_properties if k == "detail"]
        _criteria[num] = (prev_ok and report.outcome == "passed", secs + report.duration, details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        ok, secs, details = _criteria[num]
        extra = f"  [{'; '.join(details)}]" if details else ""
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'} ({secs:.2f} s){extra}")

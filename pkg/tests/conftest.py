import numpy as np
import pytest

from foodwarn.ingest import ObservationKey, RawSeries
from foodwarn.training import SyntheticSpec, generate_synthetic

# criterion name -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def month_keys(country, commodity, start_year, start_month, count):
    first = ObservationKey(country, commodity, start_year, start_month)
    return [first.shift(i) for i in range(count)]


@pytest.fixture
def small_table():
    table, labels = generate_synthetic(SyntheticSpec(series_count=2, months=36, spike_rate=0.1, seed=4))
    return table, labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def series_of(name, keys, values):
    return RawSeries(name, dict(zip(keys, map(float, values))))

from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from deepstress.panel import BankQuarter, MacroQuarter, Quarter

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


def make_record(bank="B1", quarter=Quarter(2010, 1), **over):
    base = dict(net_loans=780.0, deposits_total=900.0, deposits_domestic=850.0, assets_avg=1200.0,
                earning_assets_avg=1000.0, equity_avg=100.0, loans_avg=800.0, cfd=0.01, yea=0.05,
                nfia=0.01, rw_density=500.0 / 1200.0, loss_loan=0.02, rwa_total=500.0, car=0.2)
    base.update(over)
    return BankQuarter(bank_id=bank, quarter=quarter, **base)


def make_macro(quarter, **over):
    vals = dict(gdp=0.02, export=0.03, govcredit=0.04, debt=0.9, govexp=0.02, inflat=0.02,
                rre=0.03, unr=0.06, yield10y=0.03, stocks=0.05)
    vals.update(over)
    return MacroQuarter(quarter, **vals)


def macro_series(start, n, rng=None):
    out = {}
    for i in range(n):
        q = start.shift(i)
        kw = {}
        if rng is not None:
            kw = dict(gdp=float(rng.normal(0.02, 0.02)), unr=float(rng.uniform(0.03, 0.1)),
                      stocks=float(rng.normal(0.05, 0.1)))
        out[q] = make_macro(q, **kw)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synthetic():
    from deepstress.synthetic import synthetic_panel

    return synthetic_panel(n_banks=30, n_quarters=24, seed=5)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])

from __future__ import annotations

import sys
from decimal import Decimal
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from liqguard.lending import PriceOracle, RateParams, ReserveConfig  # noqa: E402

ZERO_RATES = RateParams(0.0, 0.0, 0.0, 0.8)


def make_configs(rates: RateParams | None = None) -> dict[str, ReserveConfig]:
    r = rates or RateParams()
    return {
        "USDC": ReserveConfig("USDC", 0.80, 0.85, 0.04, 0.5, 1.0, r),
        "WETH": ReserveConfig("WETH", 0.75, 0.80, 0.05, 0.5, 1.0, r),
    }


def flat_oracle(start: int = 0, **prices: float) -> PriceOracle:
    return PriceOracle.from_series({a: [(start, p)] for a, p in prices.items()})


def D(x) -> Decimal:
    return Decimal(str(x))


@pytest.fixture(scope="session")
def configs():
    return make_configs()


@pytest.fixture(scope="session")
def zero_rate_configs():
    return make_configs(ZERO_RATES)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    lines = acceptance_log.summary_lines()
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

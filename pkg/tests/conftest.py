import os
from datetime import date

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lockdown_aq.evaluation import SmoothComponent, SynthConfig, generate_synthetic
from lockdown_aq.features import FeatureSpec, build_design
from lockdown_aq.gam import fit

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

LOCKDOWN = (date(2020, 3, 16), date(2020, 4, 26))  # 42 days
BASE_SPECS = (FeatureSpec("T"), FeatureSpec("WS"), FeatureSpec("D"))


@pytest.fixture(scope="session")
def synth_two_years():
    series, truth = generate_synthetic(SynthConfig())
    return series, truth


@pytest.fixture(scope="session")
def base_design(synth_two_years):
    series, _ = synth_two_years
    return build_design(series, "NO2", list(BASE_SPECS))


@pytest.fixture(scope="session")
def base_model(base_design):
    return fit(base_design, list(BASE_SPECS))


def lockdown_synth(seed=0, sigma=0.1, factor=0.7, **kw):
    """Two pre-lockdown years, a 42-day lockdown scaled by ``factor``, and
    the rest of 2020."""
    cfg = SynthConfig(
        n_days=731 + 366, start=date(2018, 3, 16), sigma=sigma, seed=seed,
        lockdown=(LOCKDOWN[0], LOCKDOWN[1], factor), **kw,
    )
    return generate_synthetic(cfg)


def pre_ld_model(series, specs=BASE_SPECS):
    design = build_design(series, "NO2", list(specs), start=date(2018, 3, 16), end=date(2020, 3, 15))
    return fit(design, list(specs))


@pytest.fixture(scope="session")
def lockdown_case():
    series, truth = lockdown_synth()
    return series, truth, pre_ld_model(series)


def acceptance_generator(seed=0, **kw):
    """One sinusoidal and one linear smooth, weekend multiplier 0.7, sigma 0.1, 730 days."""
    cfg = SynthConfig(
        n_days=730, sigma=0.1, seed=seed,
        smooths=(SmoothComponent("T", "sine", 0.8, 20.0), SmoothComponent("WS", "linear", -0.3, 1.0, 2.5)),
        weekday_multipliers=(1.0, 1.0, 1.0, 1.0, 1.0, 0.7, 0.7),
        **kw,
    )
    return generate_synthetic(cfg)


def rng(seed=0):
    return np.random.default_rng(seed)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    """Store one summary line for an acceptance criterion and echo it."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])

import pytest
from hypothesis import HealthCheck, settings

import synth
from zerodoc.fonts import MonospaceMetrics, default_metrics

settings.register_profile(
    "suite",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture
def mono() -> MonospaceMetrics:
    """The analytic measurement model: 0.6 per char, 1.2 per line."""
    return MonospaceMetrics()


@pytest.fixture(scope="session")
def ttf_metrics():
    return default_metrics()


@pytest.fixture(scope="session")
def big_text() -> str:
    """Session-wide skewed-frequency training text, at least 1 MB."""
    text = synth.zipf_text()
    assert len(text.encode("utf-8")) >= 1_000_000
    return text

from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from glofem.material import MaterialParams


@pytest.fixture(scope="session")
def params() -> MaterialParams:
    """Nickel-superalloy-like parameter set used throughout the suite."""
    return MaterialParams(
        E=154000.0, nu=0.28, C=615000.0, D=1870.0, R=80.0,
        n_f=14.0, K_f=630.0, n_s=17.2, K_s=1300.0,
    )


@pytest.fixture(scope="session")
def elastic_params() -> MaterialParams:
    """Parameters that make both flow mechanisms numerically inert."""
    return MaterialParams(
        E=154000.0, nu=0.28, C=0.0, D=0.0, R=1.0e9,
        n_f=14.0, K_f=630.0, n_s=17.2, K_s=1.0e9,
    )

"""Shared test fixtures."""

import sys
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from simrel.certification import certify_relation
from simrel.config import CASE_STUDY_PATH, COMPARISON_STUDY_PATH
from simrel.modelfile import load_model
from simrel.models import NonlinearSystemTuple
from simrel.relations import InterfaceParams, QuadraticInputRelation, QuadraticStateRelation


@pytest.fixture(autouse=True)
def events_log(tmp_path):
    """Redirect the events log into the test's temporary directory."""
    path = tmp_path / "events.log"
    with patch("simrel.reports.EVENTS_LOG_PATH", path):
        yield path


@pytest.fixture
def run_dir(tmp_path):
    """Empty run directory for pipeline artifacts."""
    path = tmp_path / "run"
    path.mkdir()
    return path


@pytest.fixture(scope="session")
def case_model():
    """Four-subsystem ring shipped in data/."""
    return load_model(CASE_STUDY_PATH)


@pytest.fixture(scope="session")
def comparison_model():
    """Five-dimensional linear ring shipped in data/."""
    return load_model(COMPARISON_STUDY_PATH)


@pytest.fixture
def case_sub(case_model):
    """First subsystem of the four-subsystem ring."""
    return case_model.subsystems[0]


@pytest.fixture
def scalar_system():
    """Stable scalar system x' = 0.5 x + nu + zeta observed through y = x."""
    return NonlinearSystemTuple.linear([[0.5]], [[1.0]], [[1.0]], [[0.0]], [[1.0]])


@pytest.fixture
def identity_certificate(scalar_system):
    """Certificate relating the scalar system to an identical copy of itself."""
    rel = QuadraticStateRelation([[1.0]], [[1.0]], 1.0)
    input_rel = QuadraticInputRelation.matching([[1.0]])
    ifc = InterfaceParams.passthrough(1, 1, 1, 1)
    return certify_relation(scalar_system, scalar_system, rel, input_rel, ifc,
                            delta=0.001, c_nuhat=0.25, beta=0.0, name="identity")


@pytest.fixture
def rng():
    """Seeded generator for tests that need raw draws."""
    return np.random.default_rng(1234)

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from basil.genesets import GeneSetMatrix
from basil.matrixcore import DataMatrix

settings.register_profile(
    "basil", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("basil")

# acceptance results collected by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_membership(rng, p, q, density=0.3):
    C = (rng.random((p, q)) < density).astype(float)
    # every set gets at least two genes so the matrix is nondegenerate
    for j in range(q):
        if C[:, j].sum() < 2:
            C[rng.choice(p, 2, replace=False), j] = 1.0
    return C


@pytest.fixture
def small_problem(rng):
    """Planted-factor data with p=30 genes, q=4 gene sets and k=2."""
    n, p, q, k = 60, 30, 4, 2
    C = random_membership(rng, p, q)
    lam = rng.standard_normal((p, k)) * 1.5
    Y = rng.standard_normal((n, k)) @ lam.T + rng.standard_normal((n, p))
    genes = tuple(f"g{j:02d}" for j in range(p))
    return DataMatrix(Y, genes), GeneSetMatrix.from_array(C, gene_ids=genes)

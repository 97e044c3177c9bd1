import numpy as np
import pytest

from vbglmm import ClusterData, Dataset

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def toy_dataset(family, seed, n=8, n_i=5, r=2, g1=1, g2=1, sigma=0.5):
    """Small random-slope dataset with one subject-level and one within-cluster covariate."""
    rng = np.random.default_rng(seed)
    clusters = []
    for _ in range(n):
        x = rng.normal(size=(n_i, r - 1))
        XR = np.column_stack([np.ones(n_i), x])
        xg1 = rng.normal(size=g1)
        XG2 = rng.normal(size=(n_i, g2))
        eta = 0.3 + XR[:, 1:].sum(axis=1) * 0.5 + xg1.sum() * 0.2 - 0.3 * XG2.sum(axis=1) + rng.normal(0, sigma)
        if family == "poisson":
            y = rng.poisson(np.exp(eta))
        else:
            y = (rng.uniform(size=n_i) < 1 / (1 + np.exp(-eta))).astype(float)
        clusters.append(ClusterData(y, XR, xg1 if g1 else None, XG2 if g2 else None))
    return Dataset(clusters, family)


@pytest.fixture
def poisson_toy():
    return toy_dataset("poisson", 0)


@pytest.fixture
def bernoulli_toy():
    return toy_dataset("bernoulli", 0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

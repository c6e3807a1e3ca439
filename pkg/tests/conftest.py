import numpy as np
import pytest

from greedy_oed.bench import standard_benchmark
from greedy_oed.lti import DataSpaceHessian


def random_spd(n, seed, cond_floor=0.5):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    return G @ G.T / n + cond_floor * np.eye(n)


def random_source(n_sensors, n_steps, seed, noise=None, rank=None):
    """Random K = noise + G G^T with per-sensor noise variances."""
    rng = np.random.default_rng(seed)
    n = n_sensors * n_steps
    G = rng.standard_normal((n, rank or n)) / np.sqrt(rank or n)
    noise = rng.uniform(0.2, 1.5, n_sensors) if noise is None else np.broadcast_to(noise, (n_sensors,)).astype(float)
    K = G @ G.T
    K = 0.5 * (K + K.T)
    K[np.diag_indices(n)] += np.repeat(noise, n_steps)
    return DataSpaceHessian(K, n_steps, noise)


def scratch_logdet(K, n_steps, S):
    if not S:
        return 0.0
    idx = (np.asarray(S)[:, None] * n_steps + np.arange(n_steps)).ravel()
    return float(np.linalg.slogdet(K[np.ix_(idx, idx)])[1])


@pytest.fixture(scope="session")
def wave_k():
    return standard_benchmark()


@pytest.fixture(scope="session")
def wave_problem():
    from greedy_oed.bench import STANDARD
    from greedy_oed.lti import make_wave_problem

    return make_wave_problem(**STANDARD)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])

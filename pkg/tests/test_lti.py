import numpy as np
import pytest

from greedy_oed.errors import DimensionMismatch, IndexOutOfRange, InvalidConfig, TooLarge
from greedy_oed.linalg import cholesky
from greedy_oed.lti import (
    LtiProblem,
    PriorSpec,
    WeightSpec,
    apply_adjoint,
    apply_forward,
    assemble_k,
    make_wave_problem,
    pointwise_variance,
    posterior_covariance_small,
    wave_kernel,
)


def explicit_forward_matrix(problem, S=None):
    """F as a dense matrix, built entry by entry from the kernel definition."""
    h = problem.impulse
    nd, nm, nt = h.shape
    S = range(nd) if S is None else S
    F = np.zeros((len(S) * nt, nm * nt))
    for r, s in enumerate(S):
        for t in range(nt):
            for j in range(nm):
                for tp in range(t + 1):
                    F[r * nt + t, j * nt + tp] = h[s, j, t - tp]
    return F


def random_problem(nm, nd, nt, seed, kind="exponential"):
    rng = np.random.default_rng(seed)
    base = make_wave_problem(nm, nd, nt, seed=seed, prior=PriorSpec(kind, rng.uniform(0.5, 2.0), rng.uniform(0.5, 3.0)))
    return base.with_impulse(rng.standard_normal((nd, nm, nt)))


# --- make_wave_problem ---


def test_colocated_sensor_peaks_at_zero():
    p = make_wave_problem(3, 1, 6, sensor_positions=[1.0])
    assert int(np.argmax(p.impulse[0, 1])) == 0


def test_delay_arithmetic():
    k = wave_kernel(4.0, 8, wave_speed=2.0, decay=0.05)
    assert np.flatnonzero(k)[0] == 2
    assert not k[:2].any()


def test_symmetric_sensors_identical_kernels():
    p = make_wave_problem(5, 2, 10, sensor_positions=[0.5, 3.5])
    np.testing.assert_array_equal(p.impulse[0, 2], p.impulse[1, 2])


def test_deterministic_in_seed():
    a = make_wave_problem(8, 5, 6, seed=3)
    b = make_wave_problem(8, 5, 6, seed=3)
    np.testing.assert_array_equal(a.impulse, b.impulse)
    assert not np.array_equal(a.sensor_positions, make_wave_problem(8, 5, 6, seed=4).sensor_positions)


@pytest.mark.parametrize("kw", [dict(n_params=0), dict(n_sensors=-1), dict(n_steps=0), dict(wave_speed=0.0)])
def test_invalid_sizes(kw):
    args = dict(n_params=4, n_sensors=3, n_steps=5)
    args.update(kw)
    with pytest.raises(InvalidConfig):
        make_wave_problem(**args)


def test_problem_is_immutable():
    h = np.ones((1, 1, 2))
    p = LtiProblem(h, PriorSpec(), 0.1, np.zeros(1), np.zeros(1))
    h[0, 0, 0] = 5.0
    assert p.impulse[0, 0, 0] == 1.0
    with pytest.raises(ValueError):
        p.impulse[0, 0, 0] = 2.0


# --- forward and adjoint ---


def test_forward_of_zero():
    p = make_wave_problem(4, 3, 5)
    assert not apply_forward(p, np.zeros((4, 5))).any()


def test_forward_unit_impulse_returns_kernel():
    p = make_wave_problem(4, 3, 5)
    m = np.zeros((4, 5))
    m[2, 0] = 1.0
    np.testing.assert_array_equal(apply_forward(p, m), p.impulse[:, 2, :])


def test_forward_matches_explicit_convolution():
    p = random_problem(4, 3, 6, 1)
    m = np.random.default_rng(1).standard_normal((4, 6))
    d = apply_forward(p, m)
    np.testing.assert_allclose(d.ravel(), explicit_forward_matrix(p) @ m.ravel(), rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("shift", [1, 3])
def test_shift_invariance(shift):
    p = random_problem(5, 4, 10, 2)
    m = np.random.default_rng(2).standard_normal((5, 10))
    shifted = np.zeros_like(m)
    shifted[:, shift:] = m[:, :-shift]
    d, d_shift = apply_forward(p, m), apply_forward(p, shifted)
    np.testing.assert_allclose(d_shift[:, shift:], d[:, :-shift], rtol=1e-12, atol=1e-12)
    assert not d_shift[:, :shift].any()


def test_forward_dimension_mismatch():
    p = make_wave_problem(4, 3, 5)
    with pytest.raises(DimensionMismatch):
        apply_forward(p, np.zeros((3, 5)))
    with pytest.raises(DimensionMismatch):
        apply_adjoint(p, np.zeros((4, 5)))


def test_adjoint_of_zero():
    p = make_wave_problem(4, 3, 5)
    assert not apply_adjoint(p, np.zeros((3, 5))).any()


def test_adjoint_scalar_case():
    p = LtiProblem(np.array([[[2.5]]]), PriorSpec(), 0.1, np.zeros(1), np.zeros(1))
    assert apply_adjoint(p, np.array([[3.0]]))[0, 0] == 7.5


def test_adjoint_inner_product_small():
    p = random_problem(5, 3, 8, 4)
    rng = np.random.default_rng(4)
    m, d = rng.standard_normal((5, 8)), rng.standard_normal((3, 8))
    assert abs(np.vdot(apply_forward(p, m), d) - np.vdot(m, apply_adjoint(p, d))) <= 1e-12


def test_adjoint_consistency_100_draws():
    rng = np.random.default_rng(5)
    for i in range(100):
        nm, nd, nt = rng.integers(1, 9, size=3)
        p = random_problem(int(nm), int(nd), int(nt), 100 + i)
        m, d = rng.standard_normal((nm, nt)), rng.standard_normal((nd, nt))
        lhs, rhs = np.vdot(apply_forward(p, m), d), np.vdot(m, apply_adjoint(p, d))
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(m) * np.linalg.norm(d)


# --- assemble_k ---


def test_zero_kernels_give_noise_only():
    p = make_wave_problem(4, 3, 5).with_impulse(np.zeros((3, 4, 5)))
    K = assemble_k(p)
    np.testing.assert_array_equal(K.matrix, p.noise_sigma**2 * np.eye(15))


def test_all_ones_weights_bitwise_identical():
    p = make_wave_problem(8, 5, 6, seed=1)
    ones = WeightSpec(np.ones(5), np.ones((8, 6)))
    assert np.array_equal(assemble_k(p).matrix, assemble_k(p, ones).matrix)


def test_k_matches_materialized_operator():
    p = random_problem(2, 2, 2, 6)
    F = explicit_forward_matrix(p)
    oracle = p.noise_sigma**2 * np.eye(4) + F @ p.prior_covariance() @ F.T
    np.testing.assert_allclose(assemble_k(p).matrix, oracle, rtol=1e-13, atol=1e-13)


def test_cost_weights_scale_noise_blocks_only():
    p = make_wave_problem(6, 4, 3, seed=2)
    w = np.array([1.0, 2.0, 0.5, 3.0])
    K0, Kw = assemble_k(p), assemble_k(p, WeightSpec(cost_weights=w))
    diff = Kw.matrix - K0.matrix
    np.testing.assert_allclose(np.diag(diff), np.repeat((w - 1) * p.noise_sigma**2, 3), rtol=1e-12, atol=1e-15)
    assert np.abs(diff - np.diag(np.diag(diff))).max() <= 1e-15
    np.testing.assert_allclose(Kw.noise_diag, w * p.noise_sigma**2)


def test_k_symmetric_spd_and_diagonal_dominates_noise(wave_k, wave_problem):
    wave_k.check_symmetric()
    cholesky(wave_k.matrix)
    nt = wave_k.n_steps
    for i in range(wave_k.n_sensors):
        block = wave_k.block(i, i) - wave_k.noise_diag[i] * np.eye(nt)
        assert np.linalg.eigvalsh(block).min() >= -1e-10 * np.abs(wave_k.matrix).max()


def test_generated_problems_spd():
    rng = np.random.default_rng(7)
    for i in range(20):
        nm, nd, nt = (int(x) for x in rng.integers(1, 10, size=3))
        K = assemble_k(make_wave_problem(nm, nd, nt, seed=i))
        K.check_symmetric()
        cholesky(K.matrix)


def test_mask_zero_equals_kernel_removal():
    p = make_wave_problem(12, 6, 5, seed=3)
    region = np.arange(4, 9)
    mask = np.ones((12, 5))
    mask[region] = 0.0
    h = np.array(p.impulse)
    h[:, region, :] = 0.0
    masked = assemble_k(p, WeightSpec(mask_weights=mask)).matrix
    removed = assemble_k(p.with_impulse(h)).matrix
    assert np.abs(masked - removed).max() <= 1e-12


def test_weight_shape_errors():
    p = make_wave_problem(4, 3, 5)
    with pytest.raises(DimensionMismatch):
        assemble_k(p, WeightSpec(cost_weights=np.ones(2)))
    with pytest.raises(InvalidConfig):
        assemble_k(p, WeightSpec(cost_weights=np.array([1.0, 0.0, 1.0])))
    with pytest.raises(InvalidConfig):
        assemble_k(p, WeightSpec(mask_weights=-np.ones((4, 5))))


def test_read_block_out_of_range(wave_k):
    with pytest.raises(IndexOutOfRange):
        wave_k.read_block(wave_k.n_sensors, 0, np.empty((wave_k.n_steps,) * 2))


def test_k_scaling():
    p = make_wave_problem(4, 3, 5)
    K = assemble_k(p)
    K2 = K.scaled(3.0)
    np.testing.assert_array_equal(K2.matrix, 3.0 * K.matrix)
    np.testing.assert_array_equal(K2.noise_diag, 3.0 * K.noise_diag)


# --- posterior covariance ---


def direct_posterior(problem, S):
    F = explicit_forward_matrix(problem, S)
    prior = problem.prior_covariance()
    H = F.T @ F / problem.noise_sigma**2 + np.linalg.inv(prior)
    return np.linalg.inv(H)


def test_posterior_empty_is_prior():
    p = make_wave_problem(4, 3, 5)
    np.testing.assert_array_equal(posterior_covariance_small(p, []), p.prior_covariance())


def test_posterior_noninformative_sensor():
    p = make_wave_problem(4, 3, 5, noise_sigma=1e6)
    post = posterior_covariance_small(p, [1])
    assert np.abs(post - p.prior_covariance()).max() <= 1e-6 * p.prior.variance


def test_posterior_matches_direct_inversion_small():
    p = random_problem(3, 2, 2, 8)
    a, b = posterior_covariance_small(p, [0, 1]), direct_posterior(p, [0, 1])
    assert np.abs(a - b).max() <= 1e-8 * np.abs(b).max()


def test_posterior_guard():
    p = make_wave_problem(65, 1, 64)
    with pytest.raises(TooLarge):
        posterior_covariance_small(p, [0])
    with pytest.raises(TooLarge):
        pointwise_variance(p, [0])


def test_posterior_symmetric_psd():
    p = make_wave_problem(6, 4, 4, seed=1)
    post = posterior_covariance_small(p, [0, 2])
    assert np.array_equal(post, post.T)
    assert np.linalg.eigvalsh(post).min() >= -1e-12


def test_pointwise_variance_empty_is_prior_diagonal():
    p = make_wave_problem(6, 4, 4, prior=PriorSpec(variance=2.5))
    np.testing.assert_array_equal(pointwise_variance(p, []), np.full((6, 4), 2.5))


def test_pointwise_variance_bounds():
    p = make_wave_problem(6, 4, 4, seed=1)
    var = pointwise_variance(p, [0, 1, 3])
    assert (var > 0).all() and (var <= p.prior.variance + 1e-12).all()


def test_adding_a_sensor_never_increases_variance():
    rng = np.random.default_rng(9)
    for i in range(30):
        nm, nd, nt = int(rng.integers(2, 9)), int(rng.integers(2, 6)), int(rng.integers(1, 5))
        p = random_problem(nm, nd, nt, 200 + i)
        order = rng.permutation(nd).tolist()
        prev = pointwise_variance(p, [])
        for k in range(1, nd + 1):
            cur = pointwise_variance(p, order[:k])
            assert (cur <= prev + 1e-10).all()
            prev = cur


def test_largest_reduction_near_selected_sensor(wave_problem, wave_k):
    """Reported only: where the first greedy sensor reduces variance most."""
    from greedy_oed.selector import greedy_select

    state, _ = greedy_select(wave_k, budget=1)
    s = state.chosen[0]
    ratio = pointwise_variance(wave_problem, [s]).sum(axis=1) / pointwise_variance(wave_problem, []).sum(axis=1)
    nearest = int(np.argmin(np.abs(wave_problem.param_positions - wave_problem.sensor_positions[s])))
    best = int(np.argmin(ratio))
    print(f"sensor {s}: nearest parameter {nearest}, largest reduction at parameter {best}")
    assert np.isfinite(ratio).all()

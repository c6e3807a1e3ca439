"""Synthetic LTI inverse problems and the data-space Hessian.

Parameters and sensors live on a 1-D line. Each sensor sees each parameter
through a causal kernel: a Gaussian pulse that arrives after the travel time
``distance / wave_speed`` and is attenuated by ``exp(-decay * distance)``.
The parameter field is indexed by (parameter, timestep); the prior is an
exponential kernel in space and white in time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, IndexOutOfRange, InvalidConfig, InvalidMatrix, TooLarge

POSTERIOR_GUARD = 4096


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "exponential"
    variance: float = 1.0
    length_scale: float | None = None  # grid units; None means n_params / 8

    def __post_init__(self):
        if self.kind not in ("identity", "exponential"):
            raise InvalidConfig(f"unknown prior kind {self.kind!r}", "prior.kind")
        if not self.variance > 0:
            raise InvalidConfig("must be positive", "prior.variance")
        if self.length_scale is not None and not self.length_scale > 0:
            raise InvalidConfig("must be positive", "prior.length_scale")

    def spatial_covariance(self, param_positions: np.ndarray) -> np.ndarray:
        n = len(param_positions)
        if self.kind == "identity":
            return self.variance * np.eye(n)
        ell = self.length_scale if self.length_scale is not None else max(n / 8.0, 1e-12)
        dist = np.abs(param_positions[:, None] - param_positions[None, :])
        return self.variance * np.exp(-dist / ell)


@dataclass(frozen=True, eq=False)
class WeightSpec:
    """Diagonal cost weights per sensor and mask weights per (param, step)."""

    cost_weights: np.ndarray | None = None
    mask_weights: np.ndarray | None = None

    def validate(self, problem: LtiProblem) -> None:
        if self.cost_weights is not None:
            w = np.asarray(self.cost_weights, dtype=float)
            if w.shape != (problem.n_sensors,):
                raise DimensionMismatch(f"cost_weights shape {w.shape} != ({problem.n_sensors},)")
            if not (w > 0).all():
                raise InvalidConfig("cost weights must be positive", "cost_weights")
        if self.mask_weights is not None:
            w = np.asarray(self.mask_weights, dtype=float)
            if w.shape != (problem.n_params, problem.n_steps):
                raise DimensionMismatch(
                    f"mask_weights shape {w.shape} != {(problem.n_params, problem.n_steps)}"
                )
            if not (w >= 0).all():
                raise InvalidConfig("mask weights must be nonnegative", "mask_weights")


@dataclass(frozen=True, eq=False)
class LtiProblem:
    impulse: np.ndarray  # (n_sensors, n_params, n_steps)
    prior: PriorSpec
    noise_sigma: float
    param_positions: np.ndarray
    sensor_positions: np.ndarray
    _prior_space: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        h = np.array(self.impulse, dtype=np.float64)
        if h.ndim != 3:
            raise DimensionMismatch(f"impulse must be 3-D, got {h.shape}")
        if not np.isfinite(h).all():
            raise InvalidConfig("impulse responses must be finite", "impulse")
        if not self.noise_sigma > 0:
            raise InvalidConfig("must be positive", "noise_sigma")
        h.setflags(write=False)
        object.__setattr__(self, "impulse", h)
        object.__setattr__(self, "_prior_space", self.prior.spatial_covariance(self.param_positions))

    @property
    def n_sensors(self) -> int:
        return self.impulse.shape[0]

    @property
    def n_params(self) -> int:
        return self.impulse.shape[1]

    @property
    def n_steps(self) -> int:
        return self.impulse.shape[2]

    def apply_prior(self, m: np.ndarray) -> np.ndarray:
        return np.tensordot(self._prior_space, m, axes=(1, 0))

    def prior_covariance(self) -> np.ndarray:
        """Dense prior over the flattened (param, step) index ``j * n_steps + t``."""
        return np.kron(self._prior_space, np.eye(self.n_steps))

    def with_impulse(self, impulse: np.ndarray) -> LtiProblem:
        return LtiProblem(impulse, self.prior, self.noise_sigma, self.param_positions, self.sensor_positions)


def wave_kernel(distance: float, n_steps: int, wave_speed: float, decay: float, pulse_width: float = 1.0):
    """Causal pulse seen at ``distance``; zero before the arrival time."""
    delay = distance / wave_speed
    tau = np.arange(n_steps, dtype=float)
    pulse = math.exp(-decay * distance) * np.exp(-0.5 * ((tau - delay) / pulse_width) ** 2)
    pulse[tau < delay] = 0.0
    return pulse


def make_wave_problem(
    n_params: int,
    n_sensors: int,
    n_steps: int,
    wave_speed: float = 4.0,
    decay: float = 0.05,
    seed: int = 0,
    *,
    pulse_width: float = 1.0,
    prior: PriorSpec | None = None,
    noise_sigma: float | None = None,
    sensor_positions=None,
) -> LtiProblem:
    """Build a 1-D wave-like LTI problem.

    Parameters sit at integer grid points ``0 .. n_params - 1``. Unless given,
    sensor positions are drawn uniformly on the same interval from ``seed``.
    The default noise level is a tenth of the largest kernel amplitude.
    """
    for name, value in (("n_params", n_params), ("n_sensors", n_sensors), ("n_steps", n_steps)):
        if int(value) != value or value < 1:
            raise InvalidConfig(f"must be a positive integer, got {value!r}", name)
    if not wave_speed > 0:
        raise InvalidConfig("must be positive", "wave_speed")
    if not decay >= 0:
        raise InvalidConfig("must be nonnegative", "decay")
    if not pulse_width > 0:
        raise InvalidConfig("must be positive", "pulse_width")

    params = np.arange(n_params, dtype=float)
    if sensor_positions is None:
        rng = np.random.default_rng(seed)
        sensors = np.sort(rng.uniform(0.0, max(n_params - 1, 0), size=n_sensors))
    else:
        sensors = np.asarray(sensor_positions, dtype=float)
        if sensors.shape != (n_sensors,):
            raise DimensionMismatch(f"sensor_positions shape {sensors.shape} != ({n_sensors},)")

    h = np.empty((n_sensors, n_params, n_steps))
    for s, xs in enumerate(sensors):
        for j, xj in enumerate(params):
            h[s, j] = wave_kernel(abs(xs - xj), n_steps, wave_speed, decay, pulse_width)

    if noise_sigma is None:
        peak = float(np.abs(h).max())
        noise_sigma = 0.1 * peak if peak > 0 else 1.0
    return LtiProblem(h, prior or PriorSpec(), float(noise_sigma), params, sensors)


def apply_forward(problem: LtiProblem, m: np.ndarray) -> np.ndarray:
    """``d[s, t] = sum_j sum_{tau <= t} h[s, j, tau] m[j, t - tau]``.

    Trailing axes of ``m`` beyond (param, step) are batch axes.
    """
    h = problem.impulse
    m = np.asarray(m, dtype=np.float64)
    if m.shape[:2] != (problem.n_params, problem.n_steps):
        raise DimensionMismatch(f"m has shape {m.shape}, expected {(problem.n_params, problem.n_steps)}+batch")
    nt = problem.n_steps
    d = np.zeros((problem.n_sensors,) + m.shape[1:])
    for tau in range(nt):
        d[:, tau:] += np.tensordot(h[:, :, tau], m[:, : nt - tau], axes=(1, 0))
    return d


def apply_adjoint(problem: LtiProblem, d: np.ndarray) -> np.ndarray:
    """Exact discrete adjoint of :func:`apply_forward`."""
    h = problem.impulse
    d = np.asarray(d, dtype=np.float64)
    if d.shape[:2] != (problem.n_sensors, problem.n_steps):
        raise DimensionMismatch(f"d has shape {d.shape}, expected {(problem.n_sensors, problem.n_steps)}+batch")
    nt = problem.n_steps
    m = np.zeros((problem.n_params,) + d.shape[1:])
    for tau in range(nt):
        m[:, : nt - tau] += np.tensordot(h[:, :, tau], d[:, tau:], axes=(0, 0))
    return m


class DataSpaceHessian:
    """Dense in-memory K, addressed by ``n_steps x n_steps`` sensor blocks.

    Implements the block-source protocol used by the selectors:
    ``n_sensors``, ``n_steps``, ``noise_diag``, ``read_block`` and
    ``read_test_column``.
    """

    def __init__(self, matrix: np.ndarray, n_steps: int, noise_diag=None):
        matrix = np.ascontiguousarray(matrix, dtype=np.float64)
        n = matrix.shape[0]
        if matrix.ndim != 2 or matrix.shape[1] != n or n % n_steps:
            raise DimensionMismatch(f"matrix {matrix.shape} is not a square grid of {n_steps}-blocks")
        self.matrix = matrix
        self.n_steps = n_steps
        self.n_sensors = n // n_steps
        self.noise_diag = None if noise_diag is None else np.asarray(noise_diag, dtype=np.float64)
        if self.noise_diag is not None and self.noise_diag.shape != (self.n_sensors,):
            raise DimensionMismatch("noise_diag must have one entry per sensor")

    def block(self, i: int, j: int) -> np.ndarray:
        if not (0 <= i < self.n_sensors and 0 <= j < self.n_sensors):
            raise IndexOutOfRange(f"block ({i}, {j}) outside {self.n_sensors} x {self.n_sensors}")
        b = self.n_steps
        return self.matrix[i * b : (i + 1) * b, j * b : (j + 1) * b]

    def read_block(self, i: int, j: int, out: np.ndarray) -> None:
        np.copyto(out, self.block(i, j))

    def read_test_column(self, S, s: int, out: np.ndarray) -> None:
        b = self.n_steps
        for r, i in enumerate(S):
            np.copyto(out[r * b : (r + 1) * b], self.block(i, s))

    def submatrix(self, S) -> np.ndarray:
        idx = block_indices(S, self.n_steps)
        return self.matrix[np.ix_(idx, idx)]

    def scaled(self, c: float) -> DataSpaceHessian:
        noise = None if self.noise_diag is None else c * self.noise_diag
        return DataSpaceHessian(c * self.matrix, self.n_steps, noise)

    def check_symmetric(self, rtol: float = 1e-10) -> None:
        scale = float(np.abs(self.matrix).max()) or 1.0
        asym = float(np.abs(self.matrix - self.matrix.T).max())
        if asym > rtol * scale:
            raise InvalidMatrix(f"K is not symmetric: max asymmetry {asym:.3e}")


def block_indices(S, n_steps: int) -> np.ndarray:
    S = np.asarray(list(S), dtype=np.int64)
    return (S[:, None] * n_steps + np.arange(n_steps)[None, :]).ravel()


def _effective_noise(problem: LtiProblem, weights: WeightSpec | None) -> np.ndarray:
    noise = np.full(problem.n_sensors, problem.noise_sigma**2)
    if weights is not None and weights.cost_weights is not None:
        noise = np.asarray(weights.cost_weights, dtype=float) * noise
    return noise


def _masked_prior_apply(problem: LtiProblem, weights: WeightSpec | None, v: np.ndarray) -> np.ndarray:
    mask = None if weights is None else weights.mask_weights
    if mask is None:
        return problem.apply_prior(v)
    mask = np.asarray(mask, dtype=float)
    mask = mask.reshape(mask.shape + (1,) * (v.ndim - 2))
    return mask * problem.apply_prior(mask * v)


def assemble_k(problem: LtiProblem, weights: WeightSpec | None = None) -> DataSpaceHessian:
    """``K = W_c Gamma_noise + F W_m Gamma_prior W_m F*`` as a dense matrix.

    Columns are obtained by pushing unit data impulses through the adjoint,
    the (masked) prior and the forward map. The result is symmetrized.
    """
    if weights is not None:
        weights.validate(problem)
    nd, nt = problem.n_sensors, problem.n_steps
    n = nd * nt
    impulses = np.eye(n).reshape(nd, nt, n)
    v = apply_adjoint(problem, impulses)
    v = _masked_prior_apply(problem, weights, v)
    K = apply_forward(problem, v).reshape(n, n)
    K = 0.5 * (K + K.T)
    noise = _effective_noise(problem, weights)
    K[np.diag_indices(n)] += np.repeat(noise, nt)
    return DataSpaceHessian(K, nt, noise)


def forward_matrix(problem: LtiProblem, S=None) -> np.ndarray:
    """Materialize the rows of F belonging to sensors ``S`` (all by default)."""
    nm, nt = problem.n_params, problem.n_steps
    F = apply_forward(problem, np.eye(nm * nt).reshape(nm, nt, nm * nt))
    if S is not None:
        F = F[list(S)]
    return F.reshape(-1, nm * nt)


def posterior_covariance_small(problem: LtiProblem, S, weights: WeightSpec | None = None) -> np.ndarray:
    """``Gamma_prior - G_S* K_S^{-1} G_S`` over the flattened parameter field."""
    nm, nt = problem.n_params, problem.n_steps
    if nm * nt > POSTERIOR_GUARD:
        raise TooLarge(
            f"n_params * n_steps = {nm * nt} exceeds {POSTERIOR_GUARD}; shrink the problem to materialize covariances"
        )
    S = list(S)
    gamma_prior = problem.prior_covariance()
    if weights is not None and weights.mask_weights is not None:
        w = np.asarray(weights.mask_weights, dtype=float).ravel()
        gamma_prior = w[:, None] * gamma_prior * w[None, :]
    if not S:
        return gamma_prior
    F_S = forward_matrix(problem, S)
    G_S = F_S @ gamma_prior
    noise = np.repeat(_effective_noise(problem, weights)[S], nt)
    K_S = G_S @ F_S.T
    K_S = 0.5 * (K_S + K_S.T)
    K_S[np.diag_indices_from(K_S)] += noise
    factor = scipy.linalg.cho_factor(K_S, lower=True)
    post = gamma_prior - G_S.T @ scipy.linalg.cho_solve(factor, G_S)
    return 0.5 * (post + post.T)


def pointwise_variance(problem: LtiProblem, S, weights: WeightSpec | None = None) -> np.ndarray:
    """Posterior variance per (param, step), shaped ``(n_params, n_steps)``."""
    post = posterior_covariance_small(problem, S, weights)
    return post.diagonal().reshape(problem.n_params, problem.n_steps).copy()

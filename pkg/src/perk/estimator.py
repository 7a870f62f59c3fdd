"""Kernel regression estimators trained on simulated data.

Two estimators share one training set representation:

* :class:`ExactPerk` solves the centered kernel ridge system with the full
  N x N Gram matrix. It is the validation path and the object the closed-form
  bias/covariance analysis works on.
* :class:`RffPerk` replaces the Gaussian kernel by random Fourier features and
  reduces training to sample means and covariances of the features, which can
  be accumulated in chunks for very large N.

Arrays follow the column convention: regressands are L x N, regressors are
P x N with the D magnitudes first and the K known parameters last.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import DataError, NumericalError
from .priors import PriorSpec
from .signals import Acquisition, NoiseModel, acquisition_signal

DEFAULT_LAMBDA = 2**0.6
DEFAULT_RHO = 2.0**-41
DEFAULT_Z = 1000
GRAM_CAP = 20_000
CHUNK = 8192


# -- data synthesis ----------------------------------------------------------


def add_rician_noise(s: np.ndarray, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Magnitude of ``s`` plus complex Gaussian noise (D leading axis).

    Real and imaginary noise components of dataset ``d`` are independent with
    standard deviation ``noise.sigmas[d]``.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape[0] != noise.d:
        raise DataError(f"signal has {s.shape[0]} datasets, noise model has {noise.d}")
    sig = noise.as_array().reshape((-1,) + (1,) * (s.ndim - 1))
    re = s + sig * rng.standard_normal(s.shape)
    im = sig * rng.standard_normal(s.shape)
    return np.hypot(re, im)


@dataclass
class TrainingSet:
    regressands: np.ndarray  # L x N
    regressors: np.ndarray  # P x N
    noise: NoiseModel | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        self.regressands = np.atleast_2d(np.asarray(self.regressands, dtype=np.float64))
        self.regressors = np.atleast_2d(np.asarray(self.regressors, dtype=np.float64))
        if self.regressands.shape[1] != self.regressors.shape[1]:
            raise DataError("regressands and regressors must have the same number of columns")

    @property
    def n(self) -> int:
        return self.regressors.shape[1]

    @property
    def l(self) -> int:
        return self.regressands.shape[0]

    @property
    def p(self) -> int:
        return self.regressors.shape[0]

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.regressands[:, idx], self.regressors[:, idx], self.noise, self.seed)


def generate_training_set(priors: PriorSpec, acq: Acquisition, noise: NoiseModel, n: int, seed: int) -> TrainingSet:
    """Sample (x, kappa) from ``priors`` and simulate noisy magnitude regressors."""
    if n < 1:
        raise DataError(f"training set size must be >= 1, got {n}")
    if noise.d != acq.d:
        raise DataError(f"noise model has {noise.d} datasets, acquisition has {acq.d}")
    rng = np.random.default_rng(seed)
    x, nu = priors.sample(n, rng)
    s = acquisition_signal(x, nu[0], acq)
    mag = add_rician_noise(s, noise, rng)
    return TrainingSet(x, np.vstack([mag, nu]), noise, seed)


# -- Gaussian kernel ---------------------------------------------------------


@dataclass(frozen=True)
class KernelConfig:
    """Diagonal Gaussian kernel bandwidth ``Lambda = lam * diag(scales)``."""

    lam: float
    scales: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        sc = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        object.__setattr__(self, "scales", sc)
        if not self.lam > 0:
            raise DataError("bandwidth scale lambda must be > 0")
        if np.any(~np.isfinite(sc)) or np.any(sc <= 0):
            raise DataError("bandwidth scales must be finite and > 0")

    @property
    def bandwidth(self) -> np.ndarray:
        """Diagonal of Lambda, length P."""
        return self.lam * self.scales

    @property
    def p(self) -> int:
        return self.scales.size

    def with_lambda(self, lam: float) -> "KernelConfig":
        return KernelConfig(lam, self.scales)


def bandwidth_from_test_data(magnitudes: Any, known: Any, lam: float = DEFAULT_LAMBDA, mask: Any = None) -> KernelConfig:
    """Bandwidth from voxel means of test magnitudes and known parameters.

    ``magnitudes`` is D x (voxels...) and ``known`` is K x (voxels...); an
    optional boolean ``mask`` over the voxel axes selects the voxels averaged.
    """
    y = np.asarray(magnitudes, dtype=np.float64)
    nu = np.asarray(known, dtype=np.float64)
    if nu.ndim == y.ndim - 1:
        nu = nu[None]
    if y.shape[1:] != nu.shape[1:]:
        raise DataError(f"magnitude voxels {y.shape[1:]} and known-parameter voxels {nu.shape[1:]} differ")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        y, nu = y[:, m], nu[:, m]
    y = y.reshape(y.shape[0], -1)
    nu = nu.reshape(nu.shape[0], -1)
    if y.shape[1] == 0:
        raise DataError("no voxels selected for the bandwidth means")
    means = np.concatenate([y.mean(axis=1), nu.mean(axis=1)])
    if np.any(means <= 0):
        raise DataError("a zero voxel mean gives a degenerate kernel bandwidth")
    return KernelConfig(lam, means)


def gaussian_kernel(p, q, cfg: KernelConfig) -> np.ndarray:
    """``exp(-0.5 * sum(((p - q) / Lambda_ii) ** 2))`` over the leading axis, broadcasting the rest."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[0] != cfg.p or q.shape[0] != cfg.p:
        raise DataError(f"kernel inputs must have leading dimension {cfg.p}")
    bw = cfg.bandwidth.reshape((-1,) + (1,) * (max(p.ndim, q.ndim) - 1))
    return np.exp(-0.5 * np.sum(((p - q) / bw) ** 2, axis=0))


def gram(a, b, cfg: KernelConfig) -> np.ndarray:
    """Kernel matrix between columns of ``a`` (P x A) and ``b`` (P x B), shape A x B."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64).T).T
    b = np.atleast_2d(np.asarray(b, dtype=np.float64).T).T
    if a.shape[0] != cfg.p or b.shape[0] != cfg.p:
        raise DataError(f"kernel inputs must have leading dimension {cfg.p}")
    bw = cfg.bandwidth
    d2 = np.zeros((a.shape[1], b.shape[1]))
    for i in range(cfg.p):
        d2 += np.subtract.outer(a[i] / bw[i], b[i] / bw[i]) ** 2
    return np.exp(-0.5 * d2)


# -- exact kernel PERK -------------------------------------------------------


KernelFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _spd_solve(a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    try:
        c = sla.cho_factor(a, lower=True, check_finite=True)
        return sla.cho_solve(c, b)
    except np.linalg.LinAlgError:
        warnings.warn(f"{what} is not numerically positive definite; using a symmetric indefinite solve", stacklevel=3)
    try:
        out = sla.solve(a, b, assume_a="sym")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"{what} solve failed ({exc}); try a larger rho") from None
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{what} solve produced non-finite values; try a larger rho")
    return out


@dataclass
class ExactPerk:
    """Gram-form estimator ``x(p) = m_x + R (k(p) - K 1 / N)``.

    Row ``l`` of ``weights`` is ``x_l^T M (M K M + N rho_l I)^-1``. With
    ``center_test_kernel=False`` the ``K 1 / N`` offset is dropped.
    """

    regressors: np.ndarray  # P x N
    m_x: np.ndarray  # L
    weights: np.ndarray  # L x N
    k_mean: np.ndarray  # N, row means of K
    rho: np.ndarray  # L
    kernel: KernelConfig | None
    kernel_fn: KernelFn | None = None
    center_test_kernel: bool = True

    @property
    def n(self) -> int:
        return self.regressors.shape[1]

    def kernel_vectors(self, p: np.ndarray) -> np.ndarray:
        """N x V kernel evaluations against the training regressors."""
        if self.kernel_fn is not None:
            return self.kernel_fn(p, self.regressors)
        return gram(self.regressors, p, self.kernel)


def train_exact(
    ts: TrainingSet,
    cfg: KernelConfig | None,
    rho: float | Sequence[float],
    kernel_fn: KernelFn | None = None,
    max_n: int = GRAM_CAP,
    center_test_kernel: bool = True,
) -> ExactPerk:
    """Train the Gram-form estimator.

    ``kernel_fn(p, regressors)`` may replace the Gaussian kernel; it must return
    the N x V matrix of kernel values between training columns and test columns.
    """
    n = ts.n
    if n > max_n:
        raise DataError(f"exact PERK needs an N x N Gram matrix; N={n} exceeds the cap {max_n}")
    if cfg is None and kernel_fn is None:
        raise DataError("either a kernel config or a kernel function is required")
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (ts.l,)).copy()
    if np.any(rho <= 0):
        raise DataError("regularization rho must be > 0")
    k = kernel_fn(ts.regressors, ts.regressors) if kernel_fn is not None else gram(ts.regressors, ts.regressors, cfg)
    k = 0.5 * (k + k.T)
    k_mean = k.mean(axis=1)
    kc = k - k_mean[:, None] - k_mean[None, :] + k_mean.mean()
    m_x = ts.regressands.mean(axis=1)
    xc = ts.regressands - m_x[:, None]  # rows are (M x_l)^T
    weights = np.empty((ts.l, n))
    for r in np.unique(rho):
        rows = np.flatnonzero(rho == r)
        sol = _spd_solve(kc + n * r * np.eye(n), xc[rows].T, "M K M + N rho I")
        weights[rows] = sol.T
    return ExactPerk(ts.regressors.copy(), m_x, weights, k_mean, rho, cfg, kernel_fn, center_test_kernel)


def predict_exact(est: ExactPerk, p) -> np.ndarray:
    """Estimates for one regressor (length P) or many (P x V)."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pp = p[:, None] if single else p
    if pp.shape[0] != est.regressors.shape[0]:
        raise DataError(f"regressor must have dimension {est.regressors.shape[0]}, got {pp.shape[0]}")
    out = np.empty((est.m_x.size, pp.shape[1]))
    for lo in range(0, pp.shape[1], CHUNK):
        kv = est.kernel_vectors(pp[:, lo : lo + CHUNK])
        if est.center_test_kernel:
            kv = kv - est.k_mean[:, None]
        out[:, lo : lo + CHUNK] = est.m_x[:, None] + est.weights @ kv
    return out[:, 0] if single else out


# -- random Fourier features -------------------------------------------------


@dataclass(frozen=True)
class FeatureMap:
    freqs: np.ndarray = field(repr=False)  # P x Z
    phases: np.ndarray = field(repr=False)  # Z, in [0, 1)
    seed: int | None = None

    @property
    def z(self) -> int:
        return self.phases.size

    @property
    def p(self) -> int:
        return self.freqs.shape[0]


def rff_draw(cfg: KernelConfig, z: int, seed: int) -> FeatureMap:
    """Frequencies ``v_i ~ N(0, 1 / (2 pi Lambda_ii)^2)`` and phases ``s ~ U(0, 1)``."""
    if z < 1:
        raise DataError(f"feature count must be >= 1, got {z}")
    rng = np.random.default_rng(seed)
    std_normal = rng.standard_normal((cfg.p, z))
    phases = rng.uniform(0.0, 1.0, size=z)
    freqs = std_normal / (2 * np.pi * cfg.bandwidth[:, None])
    return FeatureMap(freqs, phases, seed)


def featurize(fm: FeatureMap, p) -> np.ndarray:
    """``sqrt(2 / Z) cos(2 pi (v^T p + s))`` for one (P) or many (P x V) regressors."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] != fm.p:
        raise DataError(f"regressor must have dimension {fm.p}, got {p.shape[0]}")
    arg = fm.freqs.T @ p
    arg += fm.phases if p.ndim == 1 else fm.phases[:, None]
    return np.sqrt(2.0 / fm.z) * np.cos(2 * np.pi * arg)


@dataclass
class FeatureMoments:
    """Sample means and centered covariances of features and regressands."""

    n: int
    m_x: np.ndarray
    m_z: np.ndarray
    c_zz: np.ndarray
    c_zx: np.ndarray


def _chunks(n: int, chunk: int) -> list[slice]:
    return [slice(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]


def feature_moments(ts: TrainingSet, fm: FeatureMap, chunk: int = CHUNK, threads: int = 1) -> FeatureMoments:
    """Two-pass chunked accumulation; never holds the full Z x N feature matrix.

    Partial sums are reduced in fixed chunk order, so results do not depend on
    ``threads``.
    """
    n = ts.n
    parts = _chunks(n, chunk)

    def first(sl):
        return featurize(fm, ts.regressors[:, sl]).sum(axis=1)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        sums = list(pool.map(first, parts))
    m_z = np.sum(sums, axis=0) / n
    m_x = ts.regressands.mean(axis=1)

    def second(sl):
        zc = featurize(fm, ts.regressors[:, sl]) - m_z[:, None]
        xc = ts.regressands[:, sl] - m_x[:, None]
        return zc @ zc.T, zc @ xc.T

    c_zz = np.zeros((fm.z, fm.z))
    c_zx = np.zeros((fm.z, ts.l))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for a, b in pool.map(second, parts):
            c_zz += a
            c_zx += b
    c_zz /= n
    c_zx /= n
    return FeatureMoments(n, m_x, m_z, 0.5 * (c_zz + c_zz.T), c_zx)


@dataclass
class RffPerk:
    """Affine estimator on random Fourier features.

    ``x(p) = m_x + c_zx^T (C_zz + rho I)^-1 (z(p) - m_z)``; the solved
    coefficients are cached in ``coef`` (Z x L).
    """

    feature_map: FeatureMap
    kernel: KernelConfig
    m_x: np.ndarray
    m_z: np.ndarray
    c_zx: np.ndarray
    factor: np.ndarray | None  # lower Cholesky factor of C_zz + rho I
    rho: float
    coef: np.ndarray = field(repr=False)

    @property
    def z(self) -> int:
        return self.feature_map.z

    @property
    def l(self) -> int:
        return self.m_x.size


def fit_from_moments(mom: FeatureMoments, fm: FeatureMap, cfg: KernelConfig, rho: float) -> RffPerk:
    if not rho > 0:
        raise DataError("regularization rho must be > 0")
    a = mom.c_zz + rho * np.eye(fm.z)
    try:
        factor = sla.cholesky(a, lower=True)
        coef = sla.cho_solve((factor, True), mom.c_zx)
    except np.linalg.LinAlgError:
        warnings.warn("C_zz + rho I is not numerically positive definite; using a symmetric indefinite solve", stacklevel=2)
        factor = None
        try:
            coef = sla.solve(a, mom.c_zx, assume_a="sym")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"feature covariance solve failed ({exc}); try a larger rho") from None
    if not np.all(np.isfinite(coef)):
        raise NumericalError("feature covariance solve produced non-finite coefficients; try a larger rho")
    # C order, matching what load_estimator produces, so reloaded estimators predict bit-identically
    return RffPerk(fm, cfg, mom.m_x, mom.m_z, mom.c_zx, factor, float(rho), np.ascontiguousarray(coef))


def train_rff(ts: TrainingSet, fm: FeatureMap, rho: float = DEFAULT_RHO, cfg: KernelConfig | None = None,
              chunk: int = CHUNK, threads: int = 1) -> RffPerk:
    """Train the random-feature estimator; ``cfg`` is recorded for serialization."""
    if ts.p != fm.p:
        raise DataError(f"training regressors have dimension {ts.p}, feature map expects {fm.p}")
    mom = feature_moments(ts, fm, chunk, threads)
    if cfg is None:
        cfg = KernelConfig(1.0, np.ones(fm.p))
    return fit_from_moments(mom, fm, cfg, rho)


def predict(est: RffPerk, p) -> np.ndarray:
    """Estimates for one regressor (length P) or many (P x V)."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pp = p[:, None] if single else p
    if pp.shape[0] != est.feature_map.p:
        raise DataError(f"regressor must have dimension {est.feature_map.p}, got {pp.shape[0]}")
    out = np.empty((est.l, pp.shape[1]))
    for lo in range(0, pp.shape[1], CHUNK):
        zc = featurize(est.feature_map, pp[:, lo : lo + CHUNK]) - est.m_z[:, None]
        out[:, lo : lo + CHUNK] = est.m_x[:, None] + est.coef.T @ zc
    return out[:, 0] if single else out


def predict_map(est: RffPerk | ExactPerk, magnitudes: Any, known: Any, mask: Any = None) -> np.ndarray:
    """Per-voxel estimates; returns L x (image shape) maps, zero outside ``mask``."""
    y = np.asarray(magnitudes, dtype=np.float64)
    nu = np.asarray(known, dtype=np.float64)
    if nu.ndim == y.ndim - 1:
        nu = nu[None]
    shape = y.shape[1:]
    if nu.shape[1:] != shape:
        raise DataError(f"magnitude image shape {shape} and known map shape {nu.shape[1:]} differ")
    m = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise DataError(f"mask shape {m.shape} does not match image shape {shape}")
    l = est.m_x.size
    out = np.zeros((l,) + shape)
    if not m.any():
        return out
    p = np.vstack([y[:, m], nu[:, m]])
    fn = predict_exact if isinstance(est, ExactPerk) else predict
    out[:, m] = fn(est, p)
    return out


def rff_kernel_fn(fm: FeatureMap) -> KernelFn:
    """Kernel function ``z(q)^T z(p)`` of a feature map, for use with :func:`train_exact`."""

    def fn(p, q):
        return featurize(fm, q).T @ featurize(fm, p)

    return fn

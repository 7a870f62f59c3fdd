"""Fisher information, worst-case CRLB and conditional bias/covariance of kernel PERK.

The closed forms assume diagonal noise covariance and a diagonal kernel
bandwidth, and approximate each magnitude by a Gaussian centred on its Rician
mean. :func:`monte_carlo_bias_cov` is the slow but assumption-free reference.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DataError
from .estimator import ExactPerk, predict_exact
from .signals import Acquisition, KnownParams, LatentParams, NoiseModel, acquisition_signal, rician_mean, signal_gradient

SNR_GATE = 5.0  # closed forms warn below this |s| / sigma


# -- noise helpers -----------------------------------------------------------


def _cov_matrix(noise, d: int) -> np.ndarray:
    """Per-component noise covariance (D x D) from a NoiseModel, sigma vector or matrix."""
    if isinstance(noise, NoiseModel):
        c = np.diag(noise.as_array() ** 2)
    else:
        a = np.asarray(noise, dtype=np.float64)
        c = np.diag(a**2) if a.ndim == 1 else a
    if c.shape != (d, d):
        raise DataError(f"noise must describe {d} datasets, got shape {c.shape}")
    if not np.allclose(c, c.T):
        raise DataError("noise covariance must be symmetric")
    return c


def _diag_variances(noise, d: int) -> np.ndarray:
    c = _cov_matrix(noise, d)
    if np.any(c - np.diag(np.diag(c))):
        raise DataError("closed-form analysis needs a diagonal noise covariance; use monte_carlo_bias_cov")
    return np.diag(c).copy()


def _vec(x) -> np.ndarray:
    if isinstance(x, LatentParams):
        return x.as_array().astype(np.float64).ravel()
    return np.asarray(x, dtype=np.float64).ravel()


def _kappa(nu) -> np.ndarray:
    if isinstance(nu, KnownParams):
        return np.atleast_1d(np.asarray(nu.kappa, dtype=np.float64))
    return np.atleast_1d(np.asarray(nu, dtype=np.float64)).ravel()


# -- Fisher information ------------------------------------------------------


@dataclass
class FisherResult:
    f: np.ndarray
    crlb_diag: np.ndarray  # +inf where F is singular
    cond: float

    @property
    def crlb_std(self) -> np.ndarray:
        return np.sqrt(self.crlb_diag)


def _fisher_result(f: np.ndarray) -> FisherResult:
    f = 0.5 * (f + f.T)
    cond = float(np.linalg.cond(f)) if np.any(f) else math.inf
    if not cond < 1.0 / np.finfo(float).eps:
        crlb = np.full(f.shape[0], math.inf)
    else:
        crlb = np.diag(np.linalg.inv(f)).copy()
    return FisherResult(f, crlb, cond)


def fisher_from_gradient(g, noise) -> FisherResult:
    """Fisher matrix of a Gaussian model with Jacobian ``g`` (D x L)."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    c = _cov_matrix(noise, g.shape[0])
    if np.any(np.diag(c) <= 0):
        raise DataError("Fisher information needs every noise variance > 0")
    try:
        f = g.T @ np.linalg.solve(c, g)
    except np.linalg.LinAlgError:
        raise DataError("noise covariance is singular") from None
    return _fisher_result(f)


def fisher(acq: Acquisition, x, nu, noise) -> FisherResult:
    """``F = G^T Sigma^-1 G`` with G the Jacobian of the noiseless magnitudes."""
    return fisher_from_gradient(signal_gradient(acq, x, nu), noise)


@dataclass
class WorstCase:
    point: tuple  # (LatentParams, KnownParams) maximizing the largest CRLB ratio
    max_cond: float
    max_crlb: np.ndarray  # elementwise max over the grid
    n_singular: int
    rows: list[dict] = field(default_factory=list)


def worst_case_crlb(acq: Acquisition, grid: Iterable[tuple[LatentParams, KnownParams]], noise) -> WorstCase:
    """Exhaustive scan; the worst point maximizes the largest relative CRLB std."""
    rows = []
    best = None
    for x, nu in grid:
        res = fisher(acq, x, nu, noise)
        xv = np.abs(_vec(x))
        rel = np.sqrt(res.crlb_diag) / np.where(xv > 0, xv, 1.0)
        score = float(np.max(rel))
        rows.append(dict(x=x, nu=nu, crlb=res.crlb_diag, cond=res.cond, score=score))
        if best is None or score > best["score"]:
            best = rows[-1]
    if not rows:
        raise DataError("CRLB grid is empty")
    crlbs = np.array([r["crlb"] for r in rows])
    return WorstCase(
        (best["x"], best["nu"]),
        max(r["cond"] for r in rows),
        crlbs.max(axis=0),
        int(sum(np.any(~np.isfinite(r["crlb"])) for r in rows)),
        rows,
    )


# -- closed-form bias and covariance -----------------------------------------


@dataclass
class BiasCovReport:
    bias: np.ndarray | None
    cov: np.ndarray | None
    method: str  # "closed_form" or "monte_carlo"
    snr_context: dict
    bias_se: np.ndarray | None = None
    trials: int | None = None


def _setup(est: ExactPerk, x, nu, noise):
    if est.kernel is None or est.kernel_fn is not None:
        raise DataError("closed-form analysis needs an estimator with a Gaussian kernel config")
    xv = _vec(x)
    kap = _kappa(nu)
    p = est.regressors.shape[0]
    d = p - kap.size
    if d < 1:
        raise DataError("estimator regressors have no magnitude rows")
    return xv, kap, d, _diag_variances(noise, d)


def _snr_context(s: np.ndarray, var: np.ndarray) -> dict:
    sig = np.sqrt(var)
    with np.errstate(divide="ignore"):
        ratio = np.where(sig > 0, np.abs(s) / np.where(sig > 0, sig, 1.0), np.inf)
    ctx = {"snr": ratio.tolist(), "min_snr": float(ratio.min())}
    if ratio.min() < SNR_GATE:
        warnings.warn(
            f"|s|/sigma = {ratio.min():.3g} < {SNR_GATE}; the Gaussian approximation of Rician magnitudes is poor",
            stacklevel=3,
        )
    return ctx


class _Moments:
    """Per-dimension pieces shared by the expected kernel and its outer product."""

    def __init__(self, est: ExactPerk, mu: np.ndarray, kap: np.ndarray, var: np.ndarray):
        bw = est.kernel.bandwidth
        d = mu.size
        self.a = 1.0 / bw[:d] ** 2  # Lambda_y^-2
        self.var = var
        self.as_ = self.a * var
        reg = est.regressors
        # scaled differences, as in the Gram computation
        self.ytil = (mu / bw[:d])[:, None] - reg[:d] / bw[:d, None]  # D x N, (mu - alpha_n) / Lambda
        d2 = np.zeros(reg.shape[1])
        for i in range(d):
            d2 += self.ytil[i] ** 2 / (1.0 + self.as_[i])
        for j in range(kap.size):
            i = d + j
            d2 += (kap[j] / bw[i] - reg[i] / bw[i]) ** 2
        self.log_det = 0.5 * float(np.sum(np.log1p(self.as_)))
        self.ek = np.exp(-0.5 * d2 - self.log_det)


def expected_kernel_vector(est: ExactPerk, x, nu, noise, acq: Acquisition) -> np.ndarray:
    """``E[k(alpha, nu), p_n]`` over Gaussian magnitudes ``alpha ~ N(mu, Sigma)``."""
    xv, kap, d, var = _setup(est, x, nu, noise)
    s = acquisition_signal(xv, kap[0], acq)
    mu = rician_mean(s, np.sqrt(var))
    return _Moments(est, mu, kap, var).ek


def _noiseless(acq, xv, kap, d):
    s = acquisition_signal(xv, kap[0], acq)
    if s.shape[0] != d:
        raise DataError(f"acquisition produces {s.shape[0]} datasets, estimator expects {d}")
    return s


def conditional_bias(est: ExactPerk, x, nu, noise, acq: Acquisition) -> BiasCovReport:
    """Closed-form ``E[x_hat | x, nu] - x``; the report's ``cov`` is left empty."""
    xv, kap, d, var = _setup(est, x, nu, noise)
    s = _noiseless(acq, xv, kap, d)
    ctx = _snr_context(s, var)
    mom = _Moments(est, rician_mean(s, np.sqrt(var)), kap, var)
    kv = mom.ek - est.k_mean if est.center_test_kernel else mom.ek
    bias = est.m_x + est.weights @ kv - xv
    return BiasCovReport(bias, None, "closed_form", ctx)


def expected_kernel_cov(est: ExactPerk, x, nu, noise, acq: Acquisition) -> np.ndarray:
    """N x N covariance ``E[k k^T] - E[k] E[k]^T`` of the test kernel vector.

    Written as ``E[k] E[k]^T * expm1(...)`` so it vanishes exactly at zero noise.
    """
    xv, kap, d, var = _setup(est, x, nu, noise)
    s = _noiseless(acq, xv, kap, d)
    mom = _Moments(est, rician_mean(s, np.sqrt(var)), kap, var)
    return _kernel_cov(mom)


def _kernel_cov(mom: _Moments) -> np.ndarray:
    n = mom.ek.size
    expo = np.zeros((n, n))
    log_ratio = 0.0
    for i in range(mom.ytil.shape[0]):
        u = mom.as_[i]
        if u == 0:
            continue
        yt = mom.ytil[i]
        dm = np.subtract.outer(yt, yt) ** 2
        dp = np.add.outer(yt, yt) ** 2
        # first-term minus second-term exponents, per dimension (ytil is already scaled by 1/Lambda)
        expo += -u * dm / (4 * (1 + u)) + u * dp / (4 * (1 + u) * (1 + 2 * u))
        log_ratio += math.log1p(u) - 0.5 * math.log1p(2 * u)
    c = np.outer(mom.ek, mom.ek) * np.expm1(expo + log_ratio)
    return 0.5 * (c + c.T)


def conditional_cov(est: ExactPerk, x, nu, noise, acq: Acquisition) -> BiasCovReport:
    """Closed-form ``Cov(x_hat | x, nu) = R E[k~ k~^T] R^T``; the report's ``bias`` is left empty."""
    xv, kap, d, var = _setup(est, x, nu, noise)
    s = _noiseless(acq, xv, kap, d)
    ctx = _snr_context(s, var)
    mom = _Moments(est, rician_mean(s, np.sqrt(var)), kap, var)
    cov = est.weights @ _kernel_cov(mom) @ est.weights.T
    return BiasCovReport(None, 0.5 * (cov + cov.T), "closed_form", ctx)


def closed_form_bias_cov(est: ExactPerk, x, nu, noise, acq: Acquisition) -> BiasCovReport:
    b = conditional_bias(est, x, nu, noise, acq)
    c = conditional_cov(est, x, nu, noise, acq)
    return BiasCovReport(b.bias, c.cov, "closed_form", b.snr_context)


# -- Monte Carlo reference ---------------------------------------------------


def monte_carlo_bias_cov(est, x, nu, noise, acq: Acquisition, trials: int, seed: int,
                         chunk: int = 20_000) -> BiasCovReport:
    """Empirical bias and covariance of ``est`` over complex-Gaussian noise draws.

    Works with any estimator accepted by :func:`perk.estimator.predict_map`
    style prediction and with non-diagonal noise covariances. Chunks use
    independent child streams of ``seed`` and are reduced in order.
    """
    if trials < 1:
        raise DataError("trials must be >= 1")
    from .estimator import predict

    fn = predict_exact if isinstance(est, ExactPerk) else predict
    xv = _vec(x)
    kap = _kappa(nu)
    s = acquisition_signal(xv, kap[0], acq)
    d = s.shape[0]
    cov_n = _cov_matrix(noise, d)
    ctx = _snr_context(s, np.diag(cov_n))
    chol = np.linalg.cholesky(cov_n) if np.any(cov_n) else np.zeros((d, d))
    sizes = [min(chunk, trials - lo) for lo in range(0, trials, chunk)]
    streams = np.random.SeedSequence(seed).spawn(len(sizes))
    ref = None
    s1 = s2 = None
    for size, ss in zip(sizes, streams):
        rng = np.random.default_rng(ss)
        re = s[:, None] + chol @ rng.standard_normal((d, size))
        im = chol @ rng.standard_normal((d, size))
        p = np.vstack([np.hypot(re, im), np.repeat(kap[:, None], size, axis=1)])
        xh = fn(est, p)
        if ref is None:
            ref = xh[:, 0].copy()  # shift for a stable one-pass variance
            s1 = np.zeros(ref.size)
            s2 = np.zeros((ref.size, ref.size))
        dev = xh - ref[:, None]
        s1 += dev.sum(axis=1)
        s2 += dev @ dev.T
    mean_dev = s1 / trials
    mean = ref + mean_dev
    if trials > 1:
        cov = (s2 - trials * np.outer(mean_dev, mean_dev)) / (trials - 1)
    else:
        cov = np.zeros_like(s2)
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.clip(np.diag(cov), 0, None) / trials)
    return BiasCovReport(mean - xv, cov, "monte_carlo", ctx, se, trials)

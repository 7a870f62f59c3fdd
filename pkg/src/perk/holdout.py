"""Holdout selection of the kernel bandwidth scale and ridge regularization."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .estimator import (
    ExactPerk,
    KernelConfig,
    RffPerk,
    feature_moments,
    fit_from_moments,
    generate_training_set,
    predict,
    predict_exact,
    rff_draw,
)
from .priors import PriorSpec
from .signals import Acquisition, NoiseModel

DEFAULT_WEIGHTS = (0.0, 0.5, 0.5)  # ignore M0, weigh T1 and T2 equally


def log2_grid(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(round((hi - lo) / step)) + 1
    return 2.0 ** (lo + step * np.arange(n))


DEFAULT_LAMBDAS = log2_grid(-2, 3, 0.5)
DEFAULT_RHOS = log2_grid(-50, -20, 3)
# 7 x 7 neighbourhood of the usual operating point
DESK_LAMBDAS = log2_grid(0.6 - 1.5, 0.6 + 1.5, 0.5)
DESK_RHOS = log2_grid(-41 - 9, -41 + 9, 3)


@dataclass(frozen=True)
class HoldoutConfig:
    lambda_grid: tuple
    rho_grid: tuple
    t: int = 10_000
    w: tuple = DEFAULT_WEIGHTS

    def __post_init__(self) -> None:
        lam = tuple(float(v) for v in np.atleast_1d(self.lambda_grid))
        rho = tuple(float(v) for v in np.atleast_1d(self.rho_grid))
        w = tuple(float(v) for v in np.atleast_1d(self.w))
        for name, g in (("lambda_grid", lam), ("rho_grid", rho)):
            if not g:
                raise DataError(f"{name} is empty")
            if any(v <= 0 for v in g):
                raise DataError(f"{name} entries must be > 0")
            if any(b <= a for a, b in zip(g, g[1:])):
                raise DataError(f"{name} must be strictly increasing")
        if self.t < 1:
            raise DataError("holdout test count t must be >= 1")
        if any(v < 0 for v in w) or not math.isclose(sum(w), 1.0, rel_tol=1e-12):
            raise DataError("holdout weights must be nonnegative and sum to 1")
        object.__setattr__(self, "lambda_grid", lam)
        object.__setattr__(self, "rho_grid", rho)
        object.__setattr__(self, "w", w)


@dataclass
class HoldoutSurface:
    cost: np.ndarray  # |lambda| x |rho|
    lambda_grid: np.ndarray
    rho_grid: np.ndarray

    @property
    def argmin_index(self) -> tuple[int, int]:
        # row-major argmin: first hit is the smallest lambda, then the smallest rho
        i = int(np.argmin(self.cost))
        return divmod(i, self.cost.shape[1])

    @property
    def argmin(self) -> tuple[float, float]:
        i, j = self.argmin_index
        return float(self.lambda_grid[i]), float(self.rho_grid[j])

    @property
    def min_cost(self) -> float:
        return float(self.cost.min())

    def at(self, lam: float, rho: float) -> float:
        i = int(np.argmin(np.abs(np.log2(self.lambda_grid) - math.log2(lam))))
        j = int(np.argmin(np.abs(np.log2(self.rho_grid) - math.log2(rho))))
        return float(self.cost[i, j])

    def rows(self) -> list[tuple[float, float, float]]:
        return [
            (math.log2(lam), math.log2(rho), float(self.cost[i, j]))
            for i, lam in enumerate(self.lambda_grid)
            for j, rho in enumerate(self.rho_grid)
        ]


def holdout_cost(estimator, x_test, p_test, w=DEFAULT_WEIGHTS) -> float:
    """Weighted normalized RMSE of ``estimator`` on L x T truths and P x T regressors."""
    x = np.atleast_2d(np.asarray(x_test, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p_test, dtype=np.float64))
    w = np.asarray(w, dtype=np.float64)
    if x.shape[1] < 1:
        raise DataError("holdout set is empty")
    if w.size != x.shape[0]:
        raise DataError(f"weights have length {w.size}, regressands have {x.shape[0]} rows")
    if np.any(x[w > 0] == 0):
        raise DataError("holdout regressand is zero where its weight is nonzero")
    if isinstance(estimator, ExactPerk):
        xh = predict_exact(estimator, p)
    elif isinstance(estimator, RffPerk):
        xh = predict(estimator, p)
    else:
        xh = np.atleast_2d(estimator(p))
    rel = np.zeros_like(x)
    on = w > 0
    rel[on] = (xh[on] - x[on]) / x[on]
    return float(np.sqrt(np.mean(np.sum(w[:, None] * rel**2, axis=0))))


@dataclass(frozen=True)
class HoldoutSeeds:
    train: int = 0
    features: int = 1
    test: int = 2


def holdout_search(
    cfg: HoldoutConfig,
    priors: PriorSpec,
    acq: Acquisition,
    noise: NoiseModel,
    base_scales,
    train_n: int,
    z: int,
    seeds: HoldoutSeeds = HoldoutSeeds(),
    threads: int = 1,
) -> HoldoutSurface:
    """Exhaustive grid search of the holdout cost.

    Every cell uses the same seed-fixed training set and feature-map seed, so
    cells differ only in (lambda, rho). Feature moments are computed once per
    lambda and refit for each rho. Cells whose training fails cost +inf.
    """
    train = generate_training_set(priors, acq, noise, train_n, seeds.train)
    test = generate_training_set(priors, acq, noise, cfg.t, seeds.test)
    cost = np.full((len(cfg.lambda_grid), len(cfg.rho_grid)), np.inf)
    for i, lam in enumerate(cfg.lambda_grid):
        kcfg = KernelConfig(lam, base_scales)
        fm = rff_draw(kcfg, z, seeds.features)
        mom = feature_moments(train, fm, threads=threads)
        for j, rho in enumerate(cfg.rho_grid):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    est = fit_from_moments(mom, fm, kcfg, rho)
                psi = holdout_cost(est, test.regressands, test.regressors, cfg.w)
            except (NumericalError, np.linalg.LinAlgError, FloatingPointError):
                continue
            if np.isfinite(psi):
                cost[i, j] = psi
    return HoldoutSurface(cost, np.asarray(cfg.lambda_grid), np.asarray(cfg.rho_grid))

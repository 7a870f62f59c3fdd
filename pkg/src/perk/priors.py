"""Separable sampling distributions for latent and known parameters."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from .errors import ConfigError, DataError

M0_FLOOR = 2.2e-16
M0_SUPPORT_FACTOR = 6.67  # multiple of the largest test magnitude
KAPPA_SUPPORT = (0.5, 2.0)
TIGHT_T1 = (400.0, 2000.0)
TIGHT_T2 = (40.0, 200.0)
BROAD_T1 = (10**1.5, 10**3.5)
BROAD_T2 = (10**0.5, 10**3.5)


def _check_n(n: int) -> None:
    if n < 1:
        raise DataError(f"sample count must be >= 1, got {n}")


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise DataError(f"Uniform needs lo < hi, got ({self.lo}, {self.hi})")

    @property
    def support(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        _check_n(n)
        return rng.uniform(self.lo, self.hi, size=n)

    def to_dict(self) -> dict:
        return {"kind": "uniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class LogUniform:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not 0 < self.lo < self.hi:
            raise DataError(f"LogUniform needs 0 < lo < hi, got ({self.lo}, {self.hi})")

    @property
    def support(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        _check_n(n)
        out = np.exp(rng.uniform(np.log(self.lo), np.log(self.hi), size=n))
        # exp/log round trip can step a hair outside the support
        return np.clip(out, self.lo, self.hi)

    def to_dict(self) -> dict:
        return {"kind": "loguniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class ClippedKde:
    """Gaussian KDE restricted to ``[lo, hi]`` by rejection.

    A zero bandwidth denotes a point mass at the (single) sample value.
    """

    points: np.ndarray = field(repr=False)
    bandwidth: float
    lo: float
    hi: float

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).ravel()
        object.__setattr__(self, "points", pts)
        if pts.size == 0:
            raise DataError("KDE needs at least one point")
        if not self.lo < self.hi:
            raise DataError("KDE support must be a nonempty interval")
        if self.bandwidth < 0:
            raise DataError("KDE bandwidth must be >= 0")
        if self.bandwidth == 0 and not np.all((pts >= self.lo) & (pts <= self.hi)):
            raise DataError("point-mass KDE lies outside its support")

    @property
    def support(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        _check_n(n)
        if self.bandwidth == 0:
            return np.full(n, self.points[0])
        out = np.empty(n)
        todo = np.arange(n)
        for _ in range(1000):
            draw = self.points[rng.integers(0, self.points.size, size=todo.size)]
            draw = draw + self.bandwidth * rng.standard_normal(todo.size)
            ok = (draw >= self.lo) & (draw <= self.hi)
            out[todo[ok]] = draw[ok]
            todo = todo[~ok]
            if todo.size == 0:
                return out
        raise DataError("KDE rejection sampling failed: almost no mass inside the support")

    def to_dict(self) -> dict:
        return {
            "kind": "kde",
            "points": self.points.tolist(),
            "bandwidth": self.bandwidth,
            "lo": self.lo,
            "hi": self.hi,
        }


ScalarDistribution = Union[Uniform, LogUniform, ClippedKde]


def fit_kde(samples: Any, support: tuple[float, float] = KAPPA_SUPPORT) -> ClippedKde:
    """Silverman-bandwidth Gaussian KDE clipped to ``support``."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    if x.size == 0:
        raise DataError("cannot fit a KDE to an empty sample")
    lo, hi = support
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    if sd == 0.0:
        warnings.warn("all KDE samples identical; using a point mass", stacklevel=2)
        return ClippedKde(x[:1], 0.0, lo, hi)
    h = 1.06 * sd * x.size ** (-1 / 5)
    return ClippedKde(x, h, lo, hi)


def m0_support_from_data(magnitudes: Any) -> Uniform:
    y = np.asarray(magnitudes, dtype=np.float64)
    if y.size == 0:
        raise DataError("no test magnitudes given")
    top = float(np.max(np.abs(y)))
    if not top > 0:
        raise DataError("test magnitudes are all zero")
    return Uniform(M0_FLOOR, M0_SUPPORT_FACTOR * top)


@dataclass(frozen=True)
class PriorSpec:
    m0: ScalarDistribution
    t1: ScalarDistribution
    t2: ScalarDistribution
    kappa: ScalarDistribution

    def __post_init__(self) -> None:
        for name in ("t1", "t2", "kappa"):
            if getattr(self, name).support[0] <= 0:
                raise DataError(f"{name} prior support must be strictly positive")
        if self.m0.support[0] < 0:
            raise DataError("m0 prior support must be nonnegative")

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` joint samples; returns latent (3 x n) and known (1 x n) arrays."""
        m0 = self.m0.sample(n, rng)
        t1 = self.t1.sample(n, rng)
        t2 = self.t2.sample(n, rng)
        kappa = self.kappa.sample(n, rng)
        return np.stack([m0, t1, t2]), kappa[None, :]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in ("m0", "t1", "t2", "kappa")}

    @classmethod
    def from_dict(cls, d: dict, path: str = "priors") -> "PriorSpec":
        try:
            return cls(**{k: distribution_from_dict(d[k], f"{path}.{k}") for k in ("m0", "t1", "t2", "kappa")})
        except KeyError as exc:
            raise ConfigError(f"{path}: missing key {exc.args[0]!r}") from None


def distribution_from_dict(d: dict, path: str = "distribution") -> ScalarDistribution:
    try:
        kind = d["kind"]
        if kind == "uniform":
            return Uniform(float(d["lo"]), float(d["hi"]))
        if kind == "loguniform":
            return LogUniform(float(d["lo"]), float(d["hi"]))
        if kind == "kde":
            return ClippedKde(np.asarray(d["points"], dtype=float), float(d["bandwidth"]), float(d["lo"]), float(d["hi"]))
    except KeyError as exc:
        raise ConfigError(f"{path}: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raise ConfigError(f"{path}.kind: unknown distribution {kind!r}")


def paper_default_priors(test_magnitudes: Any, kappa_map: Any, broad: bool = False) -> PriorSpec:
    """Priors matched to test data: M0 from the data scale, kappa by KDE, log-uniform T1/T2.

    ``broad=True`` widens the T1/T2 supports to the dictionary search ranges.
    """
    t1 = LogUniform(*(BROAD_T1 if broad else TIGHT_T1))
    t2 = LogUniform(*(BROAD_T2 if broad else TIGHT_T2))
    kappa = np.asarray(kappa_map, dtype=np.float64).ravel()
    if kappa.size == 0:
        raise DataError("kappa map is empty")
    return PriorSpec(m0_support_from_data(test_magnitudes), t1, t2, fit_kde(kappa, KAPPA_SUPPORT))

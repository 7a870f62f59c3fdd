"""Steady-state magnitude signal models and their derivatives.

All models take relaxation times and echo/repetition times in milliseconds and
flip angles in degrees. Parameter fields may be scalars or numpy arrays; every
function broadcasts over them, so a whole training set or dictionary can be
evaluated in one call.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import DataError

# Latent parameter order used for every L-indexed array in the package.
LATENT_NAMES = ("m0", "t1", "t2")
KNOWN_NAMES = ("kappa",)

_EPS_FLOOR = 1e-8  # absolute floor for finite-difference steps


class ScanKind(str, enum.Enum):
    SPGR = "SPGR"
    DESS = "DESS"
    MONOEXP = "MONOEXP"  # toy s = M0 exp(-TE/T2), analytically checkable


_SIGNALS_PER_SCAN = {ScanKind.SPGR: 1, ScanKind.DESS: 2, ScanKind.MONOEXP: 1}


@dataclass(frozen=True)
class LatentParams:
    m0: Any
    t1: Any
    t2: Any

    def __post_init__(self) -> None:
        for name in LATENT_NAMES:
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise DataError(f"{name} must be finite")
        if np.any(np.asarray(self.m0) < 0):
            raise DataError("m0 must be >= 0")
        if np.any(np.asarray(self.t1) <= 0) or np.any(np.asarray(self.t2) <= 0):
            raise DataError("t1 and t2 must be > 0")
        # batches (dictionaries, broad priors) legitimately cover t2 > t1; only flag single voxels
        if np.ndim(self.t1) == 0 and np.ndim(self.t2) == 0 and float(self.t2) > float(self.t1):
            warnings.warn("t2 > t1 is physically implausible", stacklevel=3)

    @classmethod
    def from_array(cls, x: Any) -> "LatentParams":
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != 3:
            raise DataError(f"latent array must have leading dimension 3, got {x.shape}")
        return cls(x[0], x[1], x[2])

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(*(np.asarray(getattr(self, n), dtype=np.float64) for n in LATENT_NAMES)))

    def replace(self, **kw) -> "LatentParams":
        vals = {n: getattr(self, n) for n in LATENT_NAMES}
        vals.update(kw)
        return LatentParams(**vals)


@dataclass(frozen=True)
class KnownParams:
    kappa: Any = 1.0

    def __post_init__(self) -> None:
        k = np.asarray(self.kappa, dtype=np.float64)
        if not np.all(np.isfinite(k)) or np.any(k <= 0):
            raise DataError("kappa must be finite and > 0")


@dataclass(frozen=True)
class ScanSpec:
    kind: ScanKind
    flip_deg: float = 90.0
    tr_ms: float = float("inf")
    te_ms: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScanKind(self.kind))
        if not 0.0 <= self.te_ms < self.tr_ms:
            raise DataError(f"need 0 <= te_ms < tr_ms, got te={self.te_ms}, tr={self.tr_ms}")
        if self.kind is not ScanKind.MONOEXP:
            if not 0.0 < self.flip_deg < 180.0:
                raise DataError(f"flip_deg must lie in (0, 180), got {self.flip_deg}")
            if not np.isfinite(self.tr_ms):
                raise DataError("tr_ms must be finite for steady-state scans")

    @property
    def n_signals(self) -> int:
        return _SIGNALS_PER_SCAN[self.kind]

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "te_ms": self.te_ms}
        if self.kind is not ScanKind.MONOEXP:
            d.update(flip_deg=self.flip_deg, tr_ms=self.tr_ms)
        return d


@dataclass(frozen=True)
class Acquisition:
    scans: tuple[ScanSpec, ...]

    def __post_init__(self) -> None:
        scans = tuple(s if isinstance(s, ScanSpec) else ScanSpec(**s) for s in self.scans)
        if not scans:
            raise DataError("acquisition needs at least one scan")
        object.__setattr__(self, "scans", scans)

    @property
    def d(self) -> int:
        return sum(s.n_signals for s in self.scans)

    def dataset_names(self) -> list[str]:
        names = []
        for i, s in enumerate(self.scans):
            if s.kind is ScanKind.DESS:
                names += [f"dess{i}_e1", f"dess{i}_e2"]
            else:
                names.append(f"{s.kind.value.lower()}{i}")
        return names

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self.scans]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> "Acquisition":
        return cls(tuple(ScanSpec(**dict(it)) for it in items))


def reference_acquisition() -> Acquisition:
    """Two SPGR scans (5 and 15 deg, TR 12.2 ms) and one DESS scan (30 deg, TR 17.5 ms), TE 4.67 ms."""
    return Acquisition(
        (
            ScanSpec(ScanKind.SPGR, flip_deg=5.0, tr_ms=12.2, te_ms=4.67),
            ScanSpec(ScanKind.SPGR, flip_deg=15.0, tr_ms=12.2, te_ms=4.67),
            ScanSpec(ScanKind.DESS, flip_deg=30.0, tr_ms=17.5, te_ms=4.67),
        )
    )


@dataclass(frozen=True)
class NoiseModel:
    """Per-dataset noise level.

    ``sigmas[d]`` is the standard deviation of each of the real and imaginary
    noise components of dataset ``d``. Magnitudes far above the noise floor are
    then approximately Gaussian with standard deviation ``sigmas[d]``.
    """

    sigmas: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        s = tuple(float(v) for v in np.atleast_1d(np.asarray(self.sigmas, dtype=np.float64)))
        if any(not np.isfinite(v) or v < 0 for v in s):
            raise DataError("noise sigmas must be finite and >= 0")
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def isotropic(cls, sigma: float, d: int) -> "NoiseModel":
        return cls((float(sigma),) * d)

    @property
    def d(self) -> int:
        return len(self.sigmas)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.sigmas, dtype=np.float64)


def _latent(x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not isinstance(x, LatentParams):
        x = LatentParams.from_array(x)
    return tuple(np.asarray(getattr(x, n), dtype=np.float64) for n in LATENT_NAMES)


def _kappa(nu) -> np.ndarray:
    if isinstance(nu, KnownParams):
        return np.asarray(nu.kappa, dtype=np.float64)
    k = np.asarray(nu, dtype=np.float64)
    if not np.all(np.isfinite(k)) or np.any(k <= 0):
        raise DataError("kappa must be finite and > 0")
    return k


def _check_kind(scan: ScanSpec, kind: ScanKind) -> None:
    if scan.kind is not kind:
        raise DataError(f"expected a {kind.value} scan, got {scan.kind.value}")


def spgr_signal(x, nu, scan: ScanSpec) -> np.ndarray:
    """Ernst-formula SPGR magnitude with T2 echo decay."""
    _check_kind(scan, ScanKind.SPGR)
    m0, t1, t2 = _latent(x)
    a = _kappa(nu) * np.deg2rad(scan.flip_deg)
    e1 = np.exp(-scan.tr_ms / t1)
    s = m0 * np.sin(a) * (1.0 - e1) / (1.0 - e1 * np.cos(a)) * np.exp(-scan.te_ms / t2)
    return np.abs(s)


def dess_signals(x, nu, scan: ScanSpec) -> tuple[np.ndarray, np.ndarray]:
    """First (FISP-like) and second (PSIF-like) DESS echo magnitudes.

    Echo 1 is sampled TE after excitation, echo 2 at TR - TE after excitation.
    The second echo is written without the ``1 - (1 - E1 cos a) r`` subtraction
    so that it stays accurate as T2 -> 0.
    """
    _check_kind(scan, ScanKind.DESS)
    m0, t1, t2 = _latent(x)
    a = _kappa(nu) * np.deg2rad(scan.flip_deg)
    tr, te = scan.tr_ms, scan.te_ms
    e1 = np.exp(-tr / t1)
    e2 = np.exp(-tr / t2)
    c, s = np.cos(a), np.sin(a)
    den = (1.0 - e1 * c) ** 2 - e2**2 * (e1 - c) ** 2
    r = np.sqrt((1.0 - e2**2) / den)
    # tan(a/2) written as (1 - cos a) / sin a to avoid the 0/0 at a = 0
    tan_half = np.divide(1.0 - c, s, out=np.zeros(np.broadcast(c, s).shape), where=s != 0)
    s1 = m0 * tan_half * (1.0 - (e1 - c) * r) * np.exp(-te / t2)
    s2 = m0 * s * (1.0 - c) * e2 * (1.0 - e1**2) / (den * (1.0 + (1.0 - e1 * c) * r)) * np.exp(-(tr - te) / t2)
    return np.abs(s1), np.abs(s2)


def monoexp_signal(x, nu, scan: ScanSpec) -> np.ndarray:
    _check_kind(scan, ScanKind.MONOEXP)
    m0, _, t2 = _latent(x)
    _kappa(nu)
    return np.abs(m0 * np.exp(-scan.te_ms / t2))


def scan_signals(x, nu, scan: ScanSpec) -> list[np.ndarray]:
    if scan.kind is ScanKind.SPGR:
        return [spgr_signal(x, nu, scan)]
    if scan.kind is ScanKind.DESS:
        return list(dess_signals(x, nu, scan))
    return [monoexp_signal(x, nu, scan)]


def acquisition_signal(x, nu, acq: Acquisition) -> np.ndarray:
    """Noiseless magnitudes of every dataset, stacked along axis 0 (length D)."""
    out = []
    for scan in acq.scans:
        out += scan_signals(x, nu, scan)
    out = np.broadcast_arrays(*out)
    return np.stack(out)


def rician_mean(s, noise: NoiseModel | Any) -> np.ndarray:
    """High-SNR mean of Rician magnitudes, ``sqrt(|s|^2 + sigma^2)`` per dataset."""
    s = np.asarray(s, dtype=np.float64)
    sig = noise.as_array() if isinstance(noise, NoiseModel) else np.asarray(noise, dtype=np.float64)
    if s.shape[0] != sig.shape[0]:
        raise DataError(f"signal has {s.shape[0]} datasets but noise has {sig.shape[0]}")
    sig = sig.reshape((-1,) + (1,) * (s.ndim - 1))
    return np.hypot(np.abs(s), sig)


# -- gradients ---------------------------------------------------------------


def _spgr_grad(m0, t1, t2, kappa, scan):
    a = kappa * np.deg2rad(scan.flip_deg)
    c, sn = np.cos(a), np.sin(a)
    e1 = np.exp(-scan.tr_ms / t1)
    decay = np.exp(-scan.te_ms / t2)
    ratio = (1.0 - e1) / (1.0 - e1 * c)
    unit = sn * ratio * decay
    d_ratio_de1 = (c - 1.0) / (1.0 - e1 * c) ** 2
    d_e1_dt1 = e1 * scan.tr_ms / t1**2
    g_t1 = m0 * sn * decay * d_ratio_de1 * d_e1_dt1
    g_t2 = m0 * unit * scan.te_ms / t2**2
    return [np.stack([unit, g_t1, g_t2])]


def _monoexp_grad(m0, t1, t2, kappa, scan):
    decay = np.exp(-scan.te_ms / t2)
    return [np.stack([decay, np.zeros_like(decay), m0 * decay * scan.te_ms / t2**2])]


def _analytic_gradient(acq, x, nu) -> np.ndarray:
    m0, t1, t2 = (float(v) for v in _latent(x))
    kappa = float(_kappa(nu))
    rows = []
    for scan in acq.scans:
        if scan.kind is ScanKind.SPGR:
            rows += _spgr_grad(m0, t1, t2, kappa, scan)
        elif scan.kind is ScanKind.MONOEXP:
            rows += _monoexp_grad(m0, t1, t2, kappa, scan)
        else:
            raise DataError(f"no analytic gradient for {scan.kind.value} scans; use method='fd'")
    return np.stack(rows)


def signal_gradient(acq: Acquisition, x, nu, method: str = "fd") -> np.ndarray:
    """Jacobian of :func:`acquisition_signal` with respect to (M0, T1, T2), shape D x 3.

    ``method='fd'`` uses central differences with step ``1e-5 * max(|x_l|, 1e-8)``,
    falling back to a one-sided step where the central stencil would leave the
    parameter domain. ``method='analytic'`` is available for SPGR and toy scans.
    """
    if method == "analytic":
        return _analytic_gradient(acq, x, nu)
    if method != "fd":
        raise DataError(f"unknown gradient method {method!r}")
    xv = np.array([float(v) for v in _latent(x)])
    # M0 may sit on its boundary 0; T1, T2 must stay strictly positive
    lower = np.array([0.0, 0.0, 0.0])
    strict = np.array([False, True, True])
    if np.any(xv[strict] <= 0):
        raise DataError("t1 and t2 must be strictly positive for gradients")
    jac = np.empty((acq.d, 3))
    for l in range(3):
        h = 1e-5 * max(abs(xv[l]), _EPS_FLOOR)
        xp, xm = xv.copy(), xv.copy()
        xp[l] += h
        xm[l] -= h
        if xm[l] < lower[l] or (strict[l] and xm[l] <= lower[l]):
            jac[:, l] = (acquisition_signal(xp, nu, acq) - acquisition_signal(xv, nu, acq)) / h
        else:
            jac[:, l] = (acquisition_signal(xp, nu, acq) - acquisition_signal(xm, nu, acq)) / (2 * h)
    return jac

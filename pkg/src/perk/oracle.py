"""Brute-force isochromat Bloch simulation of SPGR and DESS steady states.

This is the reference the closed-form models in :mod:`perk.signals` are
checked against. Each isochromat is rotated by an instantaneous hard pulse
about x, relaxed with exact exponentials between events, and (for gradient
spoiling) precessed by its own dephasing angle once per TR. Repetitions run
until the echo amplitudes stop changing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConvergenceError, DataError
from .signals import Acquisition, KnownParams, LatentParams, ScanKind, ScanSpec, scan_signals

CONVERGENCE_LIMIT = 1e-6  # relative change tolerated at the final repetition


class Spoiling(str, enum.Enum):
    IDEAL = "ideal"
    GRADIENT = "gradient"


@dataclass(frozen=True)
class IsochromatConfig:
    n_spins: int = 10_000
    n_reps: int = 20_000
    spoiling: Spoiling | None = None  # None: ideal for SPGR, gradient for DESS
    tol: float = 1e-11  # early-stop threshold on the relative change
    jitter: bool = False  # randomly perturb the equispaced phases (uses seed)
    phase_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.n_spins < 1 or self.n_reps < 1:
            raise DataError("n_spins and n_reps must be >= 1")
        if self.spoiling is not None:
            object.__setattr__(self, "spoiling", Spoiling(self.spoiling))


def _relax(mx, my, mz, m0, e1, e2):
    return mx * e2, my * e2, m0 + (mz - m0) * e1


def simulate_steady_state(x: LatentParams, nu: KnownParams, scan: ScanSpec, cfg: IsochromatConfig = IsochromatConfig(), seed: int = 0) -> np.ndarray:
    """Steady-state echo magnitudes of one voxel (1 value for SPGR, 2 for DESS).

    Echo 1 is sampled TE after each excitation; echo 2 (DESS only) is sampled
    TR - TE after excitation, after the per-TR dephasing has refocused the
    previous repetition's coherence.
    """
    if scan.kind is ScanKind.MONOEXP:
        raise DataError("the isochromat oracle simulates steady-state scans only")
    m0, t1, t2 = (float(np.asarray(getattr(x, n))) for n in ("m0", "t1", "t2"))
    kappa = float(np.asarray(nu.kappa))
    spoil = cfg.spoiling or (Spoiling.IDEAL if scan.kind is ScanKind.SPGR else Spoiling.GRADIENT)
    n = 1 if spoil is Spoiling.IDEAL else cfg.n_spins

    phi = 2 * np.pi * np.arange(n) / n
    if cfg.jitter:
        rng = np.random.default_rng(seed)
        phi = phi + rng.uniform(0, 2 * np.pi / n, size=n)
    phi = phi + cfg.phase_offset
    cphi, sphi = np.cos(phi), np.sin(phi)

    a = kappa * np.deg2rad(scan.flip_deg)
    ca, sa = np.cos(a), np.sin(a)
    tr, te = scan.tr_ms, scan.te_ms
    e1_te, e2_te = np.exp(-te / t1), np.exp(-te / t2)
    mid = tr - 2 * te
    dess = scan.kind is ScanKind.DESS
    if dess and mid < 0:
        raise DataError("DESS simulation needs te_ms <= tr_ms / 2")
    e1_rest, e2_rest = np.exp(-(tr - te) / t1), np.exp(-(tr - te) / t2)
    e1_mid, e2_mid = np.exp(-mid / t1), np.exp(-mid / t2)

    mx = np.zeros(n)
    my = np.zeros(n)
    mz = np.full(n, m0)
    floor = max(abs(m0), 1.0) * 1e-9
    prev = None
    change = np.inf
    for _ in range(cfg.n_reps):
        if spoil is Spoiling.IDEAL:
            mx[:] = 0.0
            my[:] = 0.0
        my, mz = my * ca + mz * sa, mz * ca - my * sa
        mx, my, mz = _relax(mx, my, mz, m0, e1_te, e2_te)
        echoes = [abs(complex(mx.mean(), my.mean()))]
        if dess:
            mx, my = mx * cphi - my * sphi, mx * sphi + my * cphi
            mx, my, mz = _relax(mx, my, mz, m0, e1_mid, e2_mid)
            echoes.append(abs(complex(mx.mean(), my.mean())))
            mx, my, mz = _relax(mx, my, mz, m0, e1_te, e2_te)
        else:
            if spoil is Spoiling.GRADIENT:
                mx, my = mx * cphi - my * sphi, mx * sphi + my * cphi
            mx, my, mz = _relax(mx, my, mz, m0, e1_rest, e2_rest)
        cur = np.array(echoes)
        if prev is not None:
            change = float(np.max(np.abs(cur - prev) / np.maximum(np.abs(cur), floor)))
            if change <= cfg.tol:
                break
        prev = cur
    if not np.all(np.isfinite(cur)):
        raise ConvergenceError("non-finite magnetization in isochromat simulation")
    if change > CONVERGENCE_LIMIT:
        raise ConvergenceError(
            f"steady state not reached after {cfg.n_reps} repetitions (relative change {change:.3g})"
        )
    return cur


@dataclass
class OracleCheck:
    max_rel_err: float
    worst: dict
    rows: list[dict]


def oracle_grid_check(
    acq: Acquisition,
    grid: Iterable[tuple[LatentParams, KnownParams]],
    cfg: IsochromatConfig = IsochromatConfig(),
    seed: int = 0,
) -> OracleCheck:
    """Compare closed-form amplitudes with simulation over a grid of voxels."""
    rows = []
    for x, nu in grid:
        for i, scan in enumerate(acq.scans):
            analytic = [float(v) for v in scan_signals(x, nu, scan)]
            if scan.kind is ScanKind.MONOEXP:
                simulated = [float(np.asarray(x.m0)) * float(np.exp(-scan.te_ms / float(np.asarray(x.t2))))]
            else:
                simulated = list(simulate_steady_state(x, nu, scan, cfg, seed))
            for echo, (an, si) in enumerate(zip(analytic, simulated), start=1):
                rel = abs(an - si) / abs(si) if si != 0 else abs(an - si)
                rows.append(
                    dict(
                        t1=float(np.asarray(x.t1)), t2=float(np.asarray(x.t2)), kappa=float(np.asarray(nu.kappa)),
                        scan=i, kind=scan.kind.value, echo=echo, analytic=an, simulated=float(si), rel_err=float(rel),
                    )
                )
    if not rows:
        raise DataError("oracle grid is empty")
    worst = max(rows, key=lambda r: r["rel_err"])
    return OracleCheck(worst["rel_err"], worst, rows)


def support_grid(
    t1_range: Sequence[float] = (400.0, 2000.0),
    t2_range: Sequence[float] = (40.0, 200.0),
    kappas: Sequence[float] = (0.5, 1.0, 2.0),
    n_t1: int = 5,
    n_t2: int = 5,
    m0: float = 1.0,
) -> list[tuple[LatentParams, KnownParams]]:
    """Log-spaced (T1, T2) by kappa grid used for oracle and CRLB sweeps."""
    t1s = np.geomspace(*t1_range, n_t1)
    t2s = np.geomspace(*t2_range, n_t2)
    return [
        (LatentParams(m0, float(t1), float(t2)), KnownParams(float(k)))
        for t1 in t1s
        for t2 in t2s
        for k in kappas
    ]

"""Dictionary grid search with variable projection (the maximum-likelihood baseline).

M0 enters every signal model linearly, so for each dictionary atom it is
eliminated in closed form and only (T1, T2) are searched exhaustively. Voxels
are grouped by flip-angle scaling with k-means++ so that one dictionary per
cluster suffices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import DataError
from .signals import Acquisition, acquisition_signal

FULL_GRID = dict(t1_count=500, t2_count=500, t1_support=(10**1.5, 10**3.5), t2_support=(10**0.5, 10**3.0), k=20)
DESK_GRID = dict(t1_count=100, t2_count=100, t1_support=(10**1.5, 10**3.5), t2_support=(10**0.5, 10**3.0), k=5)


@dataclass
class KappaClusters:
    centers: np.ndarray  # k
    labels: np.ndarray  # one per value
    distortions: list[float]  # within-cluster sum of squares after each Lloyd step


def _assign(v, centers):
    d = (v[:, None] - centers[None, :]) ** 2
    lab = np.argmin(d, axis=1)
    return lab, float(d[np.arange(v.size), lab].sum())


def kmeanspp(values: Any, k: int, seed: int = 0, max_iters: int = 100) -> KappaClusters:
    """k-means++ seeding followed by Lloyd iterations on scalar values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if k < 1:
        raise DataError("k must be >= 1")
    if np.unique(v).size < k:
        raise DataError(f"need at least {k} distinct values, got {np.unique(v).size}")
    rng = np.random.default_rng(seed)
    centers = [v[rng.integers(v.size)]]
    d2 = (v - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(v.size, p=d2 / total) if total > 0 else rng.integers(v.size)
        centers.append(v[idx])
        d2 = np.minimum(d2, (v - v[idx]) ** 2)
    centers = np.array(centers)
    labels, dist = _assign(v, centers)
    history = [dist]
    for _ in range(max_iters):
        for j in range(k):
            members = v[labels == j]
            if members.size:
                centers[j] = members.mean()
        new, dist = _assign(v, centers)
        history.append(dist)
        if np.array_equal(new, labels):
            break
        labels = new
    return KappaClusters(centers, labels, history)


@dataclass
class Dictionary:
    atoms: np.ndarray  # D x A, unit M0
    t1_grid: np.ndarray
    t2_grid: np.ndarray
    kappa: float

    @property
    def size(self) -> int:
        return self.atoms.shape[1]


def build_dictionary(acq: Acquisition, kappa: float, t1_count: int, t2_count: int,
                     t1_support=FULL_GRID["t1_support"], t2_support=FULL_GRID["t2_support"]) -> Dictionary:
    """Unit-M0 signals on log-spaced T1 x T2 grids; atom index = i_t1 * t2_count + i_t2."""
    if t1_count < 1 or t2_count < 1:
        raise DataError("grid counts must be >= 1")
    for lo, hi in (t1_support, t2_support):
        if not 0 < lo <= hi:
            raise DataError(f"invalid grid support ({lo}, {hi})")
    t1 = np.geomspace(*t1_support, t1_count)
    t2 = np.geomspace(*t2_support, t2_count)
    tt1, tt2 = np.meshgrid(t1, t2, indexing="ij")
    x = np.stack([np.ones(tt1.size), tt1.ravel(), tt2.ravel()])
    with np.errstate(all="ignore"):
        atoms = acquisition_signal(x, kappa, acq)
    return Dictionary(atoms, t1, t2, float(kappa))


@dataclass
class VpmResult:
    m0: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    index: np.ndarray
    residual: np.ndarray


def vpm_search(y: Any, dictionary: Dictionary, chunk: int = 64) -> VpmResult:
    """Batched search over voxels (columns of the D x V array ``y``)."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    y = y[:, None] if single else y
    if y.shape[0] != dictionary.atoms.shape[0]:
        raise DataError(f"data has {y.shape[0]} datasets, dictionary atoms have {dictionary.atoms.shape[0]}")
    if np.any(y < 0):
        raise DataError("magnitude data must be nonnegative")
    atoms = dictionary.atoms
    norms2 = np.sum(atoms**2, axis=0)
    if np.any(~(norms2 > 0)):
        raise DataError("dictionary contains an all-zero atom")
    v = y.shape[1]
    idx = np.empty(v, dtype=np.int64)
    for lo in range(0, v, chunk):
        ip = atoms.T @ y[:, lo : lo + chunk]  # A x c
        # residual = |y|^2 - max(ip, 0)^2 / |d|^2 ; argmax picks the lowest index on ties
        gain = np.maximum(ip, 0.0) ** 2 / norms2[:, None]
        idx[lo : lo + chunk] = np.argmax(gain, axis=0)
    ip = np.einsum("dv,dv->v", atoms[:, idx], y)
    m0 = np.maximum(ip / norms2[idx], 0.0)
    resid = np.sum((y - m0 * atoms[:, idx]) ** 2, axis=0)
    n2 = dictionary.t2_grid.size
    out = VpmResult(m0, dictionary.t1_grid[idx // n2], dictionary.t2_grid[idx % n2], idx, resid)
    if single:
        return VpmResult(*(np.asarray(a)[0] for a in (out.m0, out.t1, out.t2, out.index, out.residual)))
    return out


def vpm_estimate(y_mag: Any, dictionary: Dictionary) -> np.ndarray:
    """(M0, T1, T2) of the best-fitting atom for one voxel."""
    r = vpm_search(np.asarray(y_mag, dtype=np.float64).ravel(), dictionary)
    return np.array([r.m0, r.t1, r.t2], dtype=np.float64)


def vpm_map(magnitudes: Any, kappa_map: Any, mask: Any, acq: Acquisition, k: int = DESK_GRID["k"],
            t1_count: int = DESK_GRID["t1_count"], t2_count: int = DESK_GRID["t2_count"],
            t1_support=DESK_GRID["t1_support"], t2_support=DESK_GRID["t2_support"], seed: int = 0) -> np.ndarray:
    """3 x (image shape) VPM maps; one dictionary per kappa cluster, zero outside ``mask``."""
    y = np.asarray(magnitudes, dtype=np.float64)
    kap = np.asarray(kappa_map, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if y.shape[1:] != kap.shape or m.shape != kap.shape:
        raise DataError(f"image shapes differ: data {y.shape[1:]}, kappa {kap.shape}, mask {m.shape}")
    out = np.zeros((3,) + kap.shape)
    if not m.any():
        return out
    kv = kap[m]
    yv = y[:, m]
    k_eff = min(k, np.unique(kv).size)
    clusters = kmeanspp(kv, k_eff, seed=seed)
    est = np.zeros((3, kv.size))
    for j, c in enumerate(clusters.centers):
        sel = clusters.labels == j
        if not sel.any():
            continue
        d = build_dictionary(acq, c, t1_count, t2_count, t1_support, t2_support)
        r = vpm_search(yv[:, sel], d)
        est[:, sel] = np.stack([r.m0, r.t1, r.t2])
    out[:, m] = est
    return out

"""Synthetic digital phantoms, noisy data synthesis and ROI statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError
from .estimator import add_rician_noise
from .signals import Acquisition, NoiseModel, acquisition_signal

# (M0, T1 ms, T2 ms)
WM = (0.77, 832.0, 79.6)
GM = (0.86, 1331.0, 110.0)
# Bright long-T1/T2 fluid. It sets the data maximum that the M0 prior scales from.
CSF = (1.0, 4000.0, 2000.0)

# NIST T2-array vials 4-8, (T1, T2) in ms
VIALS = {
    "V4": (1604.0, 190.94),
    "V5": (1332.0, 133.27),
    "V6": (1044.0, 96.89),
    "V7": (801.7, 64.07),
    "V8": (608.6, 46.42),
}
WATER = (1.0, 3000.0, 2000.0)


@dataclass
class PhantomScene:
    dims: tuple[int, int]
    class_map: np.ndarray  # int labels, 0 = background
    labels: dict[int, str]
    truth: np.ndarray  # 3 x rows x cols (M0, T1, T2)
    kappa_map: np.ndarray
    roi_masks: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def object_mask(self) -> np.ndarray:
        return self.class_map > 0

    @property
    def background_mask(self) -> np.ndarray:
        return self.class_map == 0


def _radius(dims):
    rows, cols = dims
    yy, xx = np.mgrid[0:rows, 0:cols]
    cy, cx = (rows - 1) / 2, (cols - 1) / 2
    return np.hypot(yy - cy, xx - cx), yy, xx


def _fill(truth, mask, values):
    for i, v in enumerate(values):
        truth[i][mask] = v


def kappa_bump(dims, amplitude: float = 0.2) -> np.ndarray:
    """Radial quadratic flip-angle scaling, 1 + a at the center and 1 - a at the corners."""
    if not 0.0 <= amplitude <= 0.5:
        raise DataError(f"kappa amplitude must lie in [0, 0.5], got {amplitude}")
    r, _, _ = _radius(dims)
    r_max = r.max()
    if r_max == 0:
        return np.full(dims, 1.0 + amplitude)
    return (1.0 + amplitude) - 2.0 * amplitude * (r / r_max) ** 2


def _erode(mask):
    return ndimage.binary_erosion(mask, structure=np.ones((3, 3), dtype=bool))


def brain_phantom(dims=(64, 64), kappa_amplitude: float = 0.2) -> PhantomScene:
    """Concentric brain-like slice: GM annulus around a WM disk with a central CSF pool.

    ROI masks "WM" and "GM" drop a one-voxel layer at every class boundary.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 2 or min(dims) < 16:
        raise DataError(f"brain phantom needs dims of at least 16 x 16, got {dims}")
    r, _, _ = _radius(dims)
    half = min(dims) / 2
    head = r <= 0.9 * half
    wm_disk = r <= 0.6 * half
    csf = r <= 0.16 * half
    cm = np.zeros(dims, dtype=np.int64)
    cm[head] = 2
    cm[wm_disk] = 1
    cm[csf] = 3
    truth = np.zeros((3,) + dims)
    _fill(truth, cm == 1, WM)
    _fill(truth, cm == 2, GM)
    _fill(truth, cm == 3, CSF)
    rois = {"WM": _erode(cm == 1), "GM": _erode(cm == 2)}
    return PhantomScene(dims, cm, {1: "WM", 2: "GM", 3: "CSF"}, truth, kappa_bump(dims, kappa_amplitude), rois)


def vial_phantom(dims=(96, 96), kappa_amplitude: float = 0.2) -> PhantomScene:
    """Water-filled disk holding five vials with NIST T2-array (T1, T2) values, M0 = 1."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 2 or min(dims) < 64:
        raise DataError(f"vial phantom needs dims of at least 64 x 64, got {dims}")
    r, yy, xx = _radius(dims)
    half = min(dims) / 2
    cy, cx = (dims[0] - 1) / 2, (dims[1] - 1) / 2
    cm = np.zeros(dims, dtype=np.int64)
    cm[r <= 0.92 * half] = 1
    labels = {1: "water"}
    truth = np.zeros((3,) + dims)
    _fill(truth, cm == 1, WATER)
    rois = {}
    ring, vr = 0.5 * half, 0.2 * half
    for i, (name, (t1, t2)) in enumerate(VIALS.items()):
        ang = 2 * math.pi * i / len(VIALS) - math.pi / 2
        vy, vx = cy + ring * math.sin(ang), cx + ring * math.cos(ang)
        disk = np.hypot(yy - vy, xx - vx) <= vr
        cm[disk] = i + 2
        labels[i + 2] = name
        _fill(truth, disk, (1.0, t1, t2))
        # ROI kept well inside the vial wall
        rois[name] = np.hypot(yy - vy, xx - vx) <= 0.7 * vr
    return PhantomScene(dims, cm, labels, truth, kappa_bump(dims, kappa_amplitude), rois)


def noiseless(scene: PhantomScene, acq: Acquisition) -> np.ndarray:
    s = np.zeros((acq.d,) + scene.dims)
    m = scene.object_mask
    s[:, m] = acquisition_signal(scene.truth[:, m], scene.kappa_map[m], acq)
    return s


def synthesize(scene: PhantomScene, acq: Acquisition, noise: NoiseModel, seed: int, return_noise: bool = False):
    """D noisy magnitude images; background voxels carry pure (Rayleigh) noise.

    With ``return_noise`` the complex noise realization is returned as well.
    """
    s = noiseless(scene, acq)
    y = add_rician_noise(s, noise, np.random.default_rng(seed))
    if not return_noise:
        return y
    # replay the same stream: real parts are drawn first, then imaginary parts
    rng = np.random.default_rng(seed)
    sig = noise.as_array()[:, None, None]
    eps = sig * rng.standard_normal(s.shape) + 1j * sig * rng.standard_normal(s.shape)
    return y, eps


def sigma_for_snr(scene: PhantomScene, acq: Acquisition, roi: str = "WM", snr_range=(94.0, 154.0)) -> float:
    """Noise level placing the per-dataset ROI SNRs geometrically centred in ``snr_range``.

    Uses the expected noise norm ``sqrt(2 n) sigma`` of complex noise over n voxels.
    """
    m = scene.roi_masks[roi]
    n = int(m.sum())
    if n == 0:
        raise DataError(f"ROI {roi!r} is empty")
    norms = np.sqrt(np.sum(noiseless(scene, acq)[:, m] ** 2, axis=1))
    lo, hi = snr_range
    return float(np.sqrt(norms.min() * norms.max()) / (np.sqrt(2 * n) * np.sqrt(lo * hi)))


def snr(y_roi, eps_roi) -> float:
    """Ratio of the Euclidean norms of image voxels and noise voxels."""
    den = float(np.linalg.norm(np.ravel(eps_roi)))
    if den == 0:
        raise DataError("noise voxels are all zero")
    return float(np.linalg.norm(np.ravel(y_roi))) / den


def estimate_sigma(background) -> float:
    """Rayleigh second-moment noise estimate ``sqrt(mean(r^2) / 2)``."""
    r = np.asarray(background, dtype=np.float64).ravel()
    if r.size == 0:
        raise DataError("empty background region")
    top = float(np.max(np.abs(r)))
    if top == 0:
        return 0.0
    # scale first so tiny or huge magnitudes do not under/overflow when squared
    return top * float(np.sqrt(np.mean((r / top) ** 2) / 2))


@dataclass(frozen=True)
class RoiStats:
    n: int
    mean: float
    std: float
    rmse: float
    se_mean: float
    se_std: float
    truth: float

    def row(self) -> dict:
        return dict(n=self.n, mean=self.mean, std=self.std, rmse=self.rmse, se_mean=self.se_mean, se_std=self.se_std, truth=self.truth)


def roi_stats(estimate, truth: float, mask) -> RoiStats:
    vals = np.asarray(estimate, dtype=np.float64)[np.asarray(mask, dtype=bool)]
    n = vals.size
    if n < 2:
        raise DataError(f"ROI needs at least 2 voxels, got {n}")
    mean = float(vals.mean())
    std = float(vals.std(ddof=1))
    rmse = float(np.sqrt(np.mean((vals - truth) ** 2)))
    return RoiStats(n, mean, std, rmse, std / math.sqrt(n), std / math.sqrt(2 * (n - 1)), float(truth))


def round_to_se(value: float, se: float) -> str:
    """Round ``value`` to the decimal place of the leading digit of ``se``."""
    if not se > 0:
        raise DataError("standard error must be > 0")
    place = math.floor(math.log10(se))
    digits = max(0, -place)
    q = round(value, -place)
    return f"{q:.{digits}f}"

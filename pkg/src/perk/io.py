"""On-disk formats: parameter maps, trained estimators and CSV tables."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .estimator import FeatureMap, KernelConfig, RffPerk

MAP_VERSION = 1
DTYPE_TAG = "<f8"


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def write_map(path, data, channels: Sequence[str], units: Sequence[str] | None = None, extra: dict | None = None) -> Path:
    """Write a C x rows x cols stack as ``<stem>.json`` plus a raw ``<stem>.bin``."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise DataError(f"map data must be 2-D or 3-D, got shape {a.shape}")
    if len(channels) != a.shape[0]:
        raise DataError(f"{len(channels)} channel names for {a.shape[0]} channels")
    units = list(units) if units is not None else [""] * a.shape[0]
    if len(units) != a.shape[0]:
        raise DataError("one unit string per channel required")
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": MAP_VERSION,
        "dims": [int(a.shape[1]), int(a.shape[2])],
        "channels": list(channels),
        "units": units,
        "dtype": DTYPE_TAG,
        "order": "C",
        "extra": extra or {},
    }
    stem.with_suffix(".bin").write_bytes(np.ascontiguousarray(a, dtype=DTYPE_TAG).tobytes())
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return stem


def read_map(path) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    try:
        meta = json.loads(stem.with_suffix(".json").read_text())
        raw = stem.with_suffix(".bin").read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"missing map file: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{stem}.json: malformed sidecar ({exc})") from None
    if meta.get("dtype") != DTYPE_TAG:
        raise DataError(f"{stem}.json: unsupported dtype {meta.get('dtype')!r}")
    rows, cols = meta["dims"]
    c = len(meta["channels"])
    expect = rows * cols * c * 8
    if len(raw) != expect:
        raise DataError(f"{stem}.bin: {len(raw)} bytes, sidecar implies {expect}")
    a = np.frombuffer(raw, dtype=DTYPE_TAG).reshape(c, rows, cols).astype(np.float64)
    return a, meta


def map_channel(a: np.ndarray, meta: dict, name: str) -> np.ndarray:
    try:
        return a[meta["channels"].index(name)]
    except ValueError:
        raise DataError(f"map has no channel {name!r}; channels are {meta['channels']}") from None


# -- estimator files ---------------------------------------------------------

MAGIC = b"PERKRFF\x00"
EST_VERSION = 1


def _pack(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_estimator(path, est: RffPerk) -> None:
    """Little-endian binary: magic, version, JSON header, then float64 arrays."""
    fm = est.feature_map
    header = {
        "z": fm.z,
        "l": est.l,
        "p": fm.p,
        "seed": fm.seed,
        "lam": est.kernel.lam,
        "rho": est.rho,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [
        MAGIC,
        struct.pack("<II", EST_VERSION, len(hb)),
        hb,
        _pack(est.kernel.scales),
        _pack(fm.freqs),
        _pack(fm.phases),
        _pack(est.m_x),
        _pack(est.m_z),
        _pack(est.c_zx),
        _pack(est.coef),
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def load_estimator(path) -> RffPerk:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"estimator file not found: {path}") from None
    if buf[:8] != MAGIC:
        raise DataError(f"{path}: not a PERK estimator file")
    version, hlen = struct.unpack("<II", buf[8:16])
    if version != EST_VERSION:
        raise DataError(f"{path}: unsupported estimator version {version}")
    h = json.loads(buf[16 : 16 + hlen])
    z, l, p = h["z"], h["l"], h["p"]
    sizes = [("scales", (p,)), ("freqs", (p, z)), ("phases", (z,)), ("m_x", (l,)), ("m_z", (z,)), ("c_zx", (z, l)), ("coef", (z, l))]
    off = 16 + hlen
    total = off + 8 * sum(int(np.prod(s)) for _, s in sizes)
    if len(buf) != total:
        raise DataError(f"{path}: truncated or oversized estimator file")
    arrs = {}
    for name, shape in sizes:
        n = int(np.prod(shape))
        arrs[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    fm = FeatureMap(arrs["freqs"], arrs["phases"], h["seed"])
    cfg = KernelConfig(h["lam"], arrs["scales"])
    return RffPerk(fm, cfg, arrs["m_x"], arrs["m_z"], arrs["c_zx"], None, h["rho"], arrs["coef"])


# -- tables ------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")

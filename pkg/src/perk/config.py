"""YAML run configuration.

Every section is optional; missing keys fall back to the desk-scale defaults
below. Errors name the offending key path, e.g. ``estimator.z``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import ConfigError, DataError
from .signals import Acquisition, reference_acquisition

STREAMS = ("phantom", "train", "features", "holdout_train", "holdout_features", "holdout_test", "vpm", "analysis", "oracle")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "seeds": {},
    "acquisition": "reference",
    "phantom": {"kind": "brain", "dims": [64, 64], "kappa_amplitude": 0.2, "snr_range": [94.0, 154.0]},
    # sigma: a number, a per-dataset list, "estimate" (from background voxels) or "phantom" (data sidecar)
    "noise": {"sigma": "phantom"},
    "priors": {"support": "tight"},
    "estimator": {"n": 100_000, "z": 1000, "lambda_log2": 0.6, "rho_log2": -41.0, "chunk": 8192},
    "vpm": {"k": 20, "t1_count": 500, "t2_count": 500, "t1_support": [10**1.5, 10**3.5], "t2_support": [10**0.5, 10**3.0]},
    "holdout": {
        "lambda_log2": [-0.9, -0.4, 0.1, 0.6, 1.1, 1.6, 2.1],
        "rho_log2": [-50.0, -47.0, -44.0, -41.0, -38.0, -35.0, -32.0],
        "t": 10_000,
        "w": [0.0, 0.5, 0.5],
        "train_n": 100_000,
        "z": 1000,
    },
    "analysis": {
        "n_train": 100,
        "rho_log2": -20.0,
        "trials": 10_000,
        "points": [[0.77, 832.0, 79.6, 1.0], [0.86, 1331.0, 110.0, 1.0]],
        "crlb_grid": {"t1": [400.0, 2000.0], "t2": [40.0, 200.0], "kappa": [0.5, 1.0, 2.0], "n_t1": 8, "n_t2": 8},
    },
    "oracle": {"n_spins": 4096, "n_reps": 20_000, "tol": 1e-3, "n_t1": 5, "n_t2": 5, "kappa": [0.5, 1.0, 2.0]},
}


def _merge(base: dict, over: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}.{k}" if path else str(k)
        if k not in base:
            raise ConfigError(f"{key}: unknown key")
        if isinstance(base[k], dict) and base[k] and k != "seeds":
            if not isinstance(v, dict):
                raise ConfigError(f"{key}: expected a mapping")
            out[k] = _merge(base[k], v, key)
        else:
            out[k] = v
    return out


def _num(cfg: dict, path: str, kind=float, positive=False):
    node = cfg
    for part in path.split("."):
        node = node[part]
    try:
        v = kind(node)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {node!r}") from None
    if kind is int and v != node:
        raise ConfigError(f"{path}: expected an integer, got {node!r}")
    if positive and not v > 0:
        raise ConfigError(f"{path}: must be > 0")
    return v


def derive_seeds(master: int, explicit: dict | None = None) -> dict[str, int]:
    """Independent per-stream seeds from one master seed; ``explicit`` entries win."""
    explicit = explicit or {}
    out = {}
    for i, name in enumerate(STREAMS):
        if name in explicit:
            out[name] = int(explicit[name])
        else:
            out[name] = int(np.random.SeedSequence(master, spawn_key=(i,)).generate_state(1, np.uint32)[0])
    return out


@dataclass
class RunConfig:
    raw: dict
    acquisition: Acquisition
    seeds: dict[str, int]

    def section(self, name: str) -> dict:
        return self.raw[name]

    @property
    def lam(self) -> float:
        return 2.0 ** _num(self.raw, "estimator.lambda_log2")

    @property
    def rho(self) -> float:
        return 2.0 ** _num(self.raw, "estimator.rho_log2")

    @classmethod
    def from_dict(cls, d: dict | None, seed_override: int | None = None) -> "RunConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        raw = _merge(DEFAULTS, d, "")
        acq_raw = raw["acquisition"]
        try:
            if acq_raw == "reference":
                acq = reference_acquisition()
            elif isinstance(acq_raw, list):
                acq = Acquisition.from_list(acq_raw)
            else:
                raise ConfigError("acquisition: expected 'reference' or a list of scans")
        except (DataError, TypeError) as exc:
            raise ConfigError(f"acquisition: {exc}") from None
        for p in ("estimator.n", "estimator.z", "estimator.chunk", "holdout.t", "holdout.train_n", "holdout.z",
                  "analysis.n_train", "analysis.trials", "vpm.k", "vpm.t1_count", "vpm.t2_count",
                  "oracle.n_spins", "oracle.n_reps"):
            _num(raw, p, int, positive=True)
        for p in ("estimator.lambda_log2", "estimator.rho_log2", "analysis.rho_log2"):
            _num(raw, p)
        _num(raw, "oracle.tol", positive=True)
        if raw["priors"].get("support") not in ("tight", "broad") and "m0" not in raw["priors"]:
            raise ConfigError("priors.support: expected 'tight' or 'broad' (or a full m0/t1/t2/kappa spec)")
        sigma = raw["noise"]["sigma"]
        if isinstance(sigma, list):
            if len(sigma) != acq.d:
                raise ConfigError(f"noise.sigma: {len(sigma)} values for {acq.d} datasets")
        elif not (sigma in ("estimate", "phantom") or isinstance(sigma, (int, float))):
            raise ConfigError("noise.sigma: expected a number, a list, 'estimate' or 'phantom'")
        if raw["phantom"]["kind"] not in ("brain", "vials"):
            raise ConfigError("phantom.kind: expected 'brain' or 'vials'")
        master = seed_override if seed_override is not None else raw["seed"]
        try:
            master = int(master)
        except (TypeError, ValueError):
            raise ConfigError(f"seed: expected an integer, got {master!r}") from None
        if master < 0:
            raise ConfigError("seed: must be >= 0")
        explicit = {} if seed_override is not None else raw["seeds"]
        unknown = set(explicit) - set(STREAMS)
        if unknown:
            raise ConfigError(f"seeds.{sorted(unknown)[0]}: unknown stream")
        raw["seed"] = master
        return cls(raw, acq, derive_seeds(master, explicit))


def load_config(path: str | Path | None, seed_override: int | None = None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({}, seed_override)
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return RunConfig.from_dict(d, seed_override)

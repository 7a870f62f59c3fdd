"""``perk`` command-line tool.

All commands read and write inside one run directory (``--out``). ``phantom``
writes the test data there; later commands pick it up unless ``--data``
points elsewhere.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import analysis, estimator, holdout, io, oracle, phantom, priors, vpm
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, NumericalError, PerkError
from .signals import LATENT_NAMES, NoiseModel

UNITS = {"m0": "a.u.", "t1": "ms", "t2": "ms"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _Clock:
    def __init__(self):
        self.laps = {}
        self._t = time.perf_counter()

    def lap(self, name):
        now = time.perf_counter()
        self.laps[name] = round(now - self._t, 4)
        self._t = now


# -- shared inputs -----------------------------------------------------------


class Inputs:
    """Test data of one run: magnitudes, kappa map, masks and (optionally) truth."""

    def __init__(self, data, kappa, masks: dict, names, truth=None, sigma=None):
        self.data = data
        self.kappa = kappa
        self.masks = masks
        self.names = names
        self.truth = truth
        self.sigma = sigma

    @property
    def object_mask(self):
        return self.masks["object"]


def _build_scene(cfg: RunConfig):
    ph = cfg.section("phantom")
    dims = tuple(ph["dims"])
    amp = float(ph["kappa_amplitude"])
    if ph["kind"] == "brain":
        return phantom.brain_phantom(dims, amp), "WM"
    return phantom.vial_phantom(dims, amp), None


def _scene_sigma(cfg: RunConfig, scene, roi) -> list[float]:
    sig = cfg.section("noise")["sigma"]
    if isinstance(sig, (int, float)):
        return [float(sig)] * cfg.acquisition.d
    if isinstance(sig, list):
        return [float(v) for v in sig]
    if roi is None:
        # vial phantom: calibrate on the first vial
        roi = next(iter(scene.roi_masks))
    lo, hi = cfg.section("phantom")["snr_range"]
    return [phantom.sigma_for_snr(scene, cfg.acquisition, roi, (lo, hi))] * cfg.acquisition.d


def load_inputs(cfg: RunConfig, data_dir: Path, required: bool = True) -> Inputs:
    stem = data_dir / "data"
    if not stem.with_suffix(".json").exists():
        if required:
            raise DataError(f"no test data at {stem}.json; run `perk phantom` first or pass --data")
        scene, roi = _build_scene(cfg)
        sig = _scene_sigma(cfg, scene, roi)
        y = phantom.synthesize(scene, cfg.acquisition, NoiseModel(tuple(sig)), cfg.seeds["phantom"])
        masks = {"object": scene.object_mask, **scene.roi_masks}
        return Inputs(y, scene.kappa_map, masks, cfg.acquisition.dataset_names(), scene.truth, sig)
    y, meta = io.read_map(stem)
    if y.shape[0] != cfg.acquisition.d:
        raise DataError(f"data has {y.shape[0]} datasets, the configured acquisition has {cfg.acquisition.d}")
    kap, _ = io.read_map(data_dir / "kappa")
    mk, mmeta = io.read_map(data_dir / "masks")
    masks = {name: mk[i] > 0.5 for i, name in enumerate(mmeta["channels"])}
    if "object" not in masks:
        raise DataError("masks file has no 'object' channel")
    truth = None
    if (data_dir / "truth.json").exists():
        truth, _ = io.read_map(data_dir / "truth")
    if kap.shape[1:] != y.shape[1:] or mk.shape[1:] != y.shape[1:]:
        raise DataError("data, kappa and mask maps have different dimensions")
    return Inputs(y, kap[0], masks, meta["channels"], truth, meta.get("extra", {}).get("sigma"))


def resolve_noise(cfg: RunConfig, inp: Inputs) -> NoiseModel:
    sig = cfg.section("noise")["sigma"]
    d = cfg.acquisition.d
    if isinstance(sig, (int, float)):
        return NoiseModel.isotropic(float(sig), d)
    if isinstance(sig, list):
        return NoiseModel(tuple(float(v) for v in sig))
    if sig == "phantom":
        if inp.sigma is None:
            raise ConfigError("noise.sigma: 'phantom' needs data written by `perk phantom`; use a number or 'estimate'")
        return NoiseModel(tuple(inp.sigma))
    bg = ~inp.object_mask
    if not bg.any():
        raise DataError("no background voxels to estimate the noise level from")
    return NoiseModel(tuple(phantom.estimate_sigma(inp.data[d_][bg]) for d_ in range(d)))


def resolve_priors(cfg: RunConfig, inp: Inputs) -> priors.PriorSpec:
    pc = cfg.section("priors")
    if "m0" in pc:
        return priors.PriorSpec.from_dict(pc, "priors")
    m = inp.object_mask
    if not m.any():
        raise DataError("object mask is empty; cannot derive priors from the test data")
    return priors.paper_default_priors(inp.data[:, m], inp.kappa[m], broad=pc["support"] == "broad")


def resolve_kernel(cfg: RunConfig, inp: Inputs, lam: float | None = None) -> estimator.KernelConfig:
    lam = cfg.lam if lam is None else lam
    return estimator.bandwidth_from_test_data(inp.data, inp.kappa, lam, mask=inp.object_mask)


def _print_seeds(cfg: RunConfig):
    print("seeds: " + json.dumps({"master": cfg.raw["seed"], **cfg.seeds}, sort_keys=True))


def _roi_rows(maps, inp: Inputs):
    rows = []
    if inp.truth is None:
        return rows
    for roi, mask in inp.masks.items():
        if roi == "object" or mask.sum() < 2:
            continue
        for l, name in enumerate(LATENT_NAMES):
            truth = float(np.median(inp.truth[l][mask]))
            st = phantom.roi_stats(maps[l], truth, mask)
            rows.append([roi, name, st.n, st.mean, st.std, st.rmse, st.se_mean, st.se_std, truth,
                         phantom.round_to_se(st.mean, st.se_mean) if st.se_mean > 0 else repr(st.mean)])
    return rows


ROI_HEADER = ["roi", "param", "n", "mean", "std", "rmse", "se_mean", "se_std", "truth", "mean_rounded"]


# -- commands ----------------------------------------------------------------


def cmd_phantom(cfg: RunConfig, args) -> dict:
    out = Path(args.out)
    scene, roi = _build_scene(cfg)
    sig = _scene_sigma(cfg, scene, roi)
    y = phantom.synthesize(scene, cfg.acquisition, NoiseModel(tuple(sig)), cfg.seeds["phantom"])
    io.write_map(out / "data", y, cfg.acquisition.dataset_names(), extra={"sigma": sig})
    io.write_map(out / "truth", scene.truth, list(LATENT_NAMES), [UNITS[n] for n in LATENT_NAMES])
    io.write_map(out / "kappa", scene.kappa_map, ["kappa"])
    names = ["object"] + list(scene.roi_masks)
    io.write_map(out / "masks", np.stack([scene.object_mask] + list(scene.roi_masks.values())).astype(float), names)
    return {"sigma": sig, "dims": list(scene.dims)}


def cmd_train(cfg: RunConfig, args) -> dict:
    clock = _Clock()
    inp = load_inputs(cfg, Path(args.data or args.out), required=False)
    noise = resolve_noise(cfg, inp)
    pri = resolve_priors(cfg, inp)
    kcfg = resolve_kernel(cfg, inp)
    est_cfg = cfg.section("estimator")
    ts = estimator.generate_training_set(pri, cfg.acquisition, noise, int(est_cfg["n"]), cfg.seeds["train"])
    clock.lap("simulate")
    fm = estimator.rff_draw(kcfg, int(est_cfg["z"]), cfg.seeds["features"])
    est = estimator.train_rff(ts, fm, cfg.rho, kcfg, int(est_cfg["chunk"]), args.threads)
    clock.lap("train")
    io.save_estimator(Path(args.out) / "estimator.perk", est)
    return {"timing_s": clock.laps, "n": ts.n, "z": fm.z, "lambda": kcfg.lam, "rho": cfg.rho,
            "sigma": list(noise.sigmas)}


def _write_maps(out: Path, name: str, maps, inp: Inputs) -> list:
    io.write_map(out / name, maps, list(LATENT_NAMES), [UNITS[n] for n in LATENT_NAMES])
    rows = _roi_rows(maps, inp)
    if rows:
        io.write_csv(out / f"{name}_roi_stats.csv", ROI_HEADER, rows)
    return rows


def cmd_estimate(cfg: RunConfig, args) -> dict:
    clock = _Clock()
    out = Path(args.out)
    est = io.load_estimator(args.estimator or out / "estimator.perk")
    inp = load_inputs(cfg, Path(args.data or args.out))
    clock.lap("load")
    maps = estimator.predict_map(est, inp.data, inp.kappa, inp.object_mask)
    clock.lap("estimate")
    rows = _write_maps(out, "perk_maps", maps, inp)
    return {"timing_s": clock.laps, "voxels": int(inp.object_mask.sum()), "roi_rows": len(rows)}


def cmd_vpm(cfg: RunConfig, args) -> dict:
    clock = _Clock()
    out = Path(args.out)
    inp = load_inputs(cfg, Path(args.data or args.out))
    v = cfg.section("vpm")
    clock.lap("load")
    maps = vpm.vpm_map(inp.data, inp.kappa, inp.object_mask, cfg.acquisition, int(v["k"]), int(v["t1_count"]),
                       int(v["t2_count"]), tuple(v["t1_support"]), tuple(v["t2_support"]), cfg.seeds["vpm"])
    clock.lap("estimate")
    rows = _write_maps(out, "vpm_maps", maps, inp)
    return {"timing_s": clock.laps, "voxels": int(inp.object_mask.sum()), "roi_rows": len(rows)}


def cmd_holdout(cfg: RunConfig, args) -> dict:
    clock = _Clock()
    out = Path(args.out)
    inp = load_inputs(cfg, Path(args.data or args.out), required=False)
    h = cfg.section("holdout")
    try:
        hcfg = holdout.HoldoutConfig(2.0 ** np.asarray(h["lambda_log2"], float), 2.0 ** np.asarray(h["rho_log2"], float),
                                     int(h["t"]), tuple(h["w"]))
    except DataError as exc:
        raise ConfigError(f"holdout: {exc}") from None
    seeds = holdout.HoldoutSeeds(cfg.seeds["holdout_train"], cfg.seeds["holdout_features"], cfg.seeds["holdout_test"])
    surf = holdout.holdout_search(hcfg, resolve_priors(cfg, inp), cfg.acquisition, resolve_noise(cfg, inp),
                                  resolve_kernel(cfg, inp, 1.0).scales, int(h["train_n"]), int(h["z"]), seeds, args.threads)
    clock.lap("search")
    io.write_csv(out / "holdout.csv", ["lambda_log2", "rho_log2", "psi"], surf.rows())
    lam, rho = surf.argmin
    return {"timing_s": clock.laps, "lambda_log2": float(np.log2(lam)), "rho_log2": float(np.log2(rho)),
            "psi_min": surf.min_cost}


def cmd_analyze(cfg: RunConfig, args) -> dict:
    clock = _Clock()
    out = Path(args.out)
    inp = load_inputs(cfg, Path(args.data or args.out), required=False)
    noise = resolve_noise(cfg, inp)
    a = cfg.section("analysis")
    acq = cfg.acquisition
    pri = resolve_priors(cfg, inp)
    kcfg = resolve_kernel(cfg, inp)
    ts = estimator.generate_training_set(pri, acq, noise, int(a["n_train"]), cfg.seeds["train"])
    exact = estimator.train_exact(ts, kcfg, 2.0 ** float(a["rho_log2"]))
    rff = io.load_estimator(args.estimator) if args.estimator else None
    clock.lap("train")
    rows, fisher_rows = [], []
    for i, pt in enumerate(a["points"]):
        if len(pt) != 4:
            raise ConfigError(f"analysis.points[{i}]: expected [m0, t1, t2, kappa]")
        x, nu = np.asarray(pt[:3], float), float(pt[3])
        fr = analysis.fisher(acq, x, nu, noise)
        fisher_rows.append([i, *pt, fr.cond, *fr.crlb_std])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cf = analysis.closed_form_bias_cov(exact, x, nu, noise, acq)
            mc = analysis.monte_carlo_bias_cov(exact, x, nu, noise, acq, int(a["trials"]), cfg.seeds["analysis"] + i)
            mr = analysis.monte_carlo_bias_cov(rff, x, nu, noise, acq, int(a["trials"]), cfg.seeds["analysis"] + i) if rff else None
        for l, name in enumerate(LATENT_NAMES):
            row = [i, name, x[l], fr.crlb_std[l], cf.bias[l], np.sqrt(max(cf.cov[l, l], 0.0)),
                   mc.bias[l], np.sqrt(mc.cov[l, l]), mc.bias_se[l]]
            row += [mr.bias[l], np.sqrt(mr.cov[l, l])] if mr else ["", ""]
            rows.append(row)
    clock.lap("points")
    io.write_csv(out / "fisher.csv", ["point", "m0", "t1", "t2", "kappa", "cond", "crlb_std_m0", "crlb_std_t1", "crlb_std_t2"], fisher_rows)
    io.write_csv(out / "bias_cov.csv", ["point", "param", "truth", "crlb_std", "bias_cf", "std_cf", "bias_mc", "std_mc",
                                        "bias_mc_se", "bias_mc_rff", "std_mc_rff"], rows)
    g = a["crlb_grid"]
    grid = oracle.support_grid(tuple(g["t1"]), tuple(g["t2"]), tuple(g["kappa"]), int(g["n_t1"]), int(g["n_t2"]))
    wc = analysis.worst_case_crlb(acq, grid, noise)
    clock.lap("crlb")
    x, nu = wc.point
    return {"timing_s": clock.laps, "worst_point": {"t1": float(x.t1), "t2": float(x.t2), "kappa": float(nu.kappa)},
            "max_cond": wc.max_cond, "max_crlb_std": np.sqrt(wc.max_crlb).tolist(), "n_singular": wc.n_singular}


def cmd_oracle_check(cfg: RunConfig, args) -> dict:
    clock = _Clock()
    o = cfg.section("oracle")
    p = cfg.section("priors")
    t1 = priors.BROAD_T1 if p.get("support") == "broad" else priors.TIGHT_T1
    t2 = priors.BROAD_T2 if p.get("support") == "broad" else priors.TIGHT_T2
    grid = oracle.support_grid(t1, t2, tuple(o["kappa"]), int(o["n_t1"]), int(o["n_t2"]))
    icfg = oracle.IsochromatConfig(n_spins=int(o["n_spins"]), n_reps=int(o["n_reps"]))
    res = oracle.oracle_grid_check(cfg.acquisition, grid, icfg, cfg.seeds["oracle"])
    clock.lap("simulate")
    keys = ["t1", "t2", "kappa", "scan", "kind", "echo", "analytic", "simulated", "rel_err"]
    io.write_csv(Path(args.out) / "oracle.csv", keys, [[r[k] for k in keys] for r in res.rows])
    ok = res.max_rel_err <= float(o["tol"])
    print(f"oracle check: max relative error {res.max_rel_err:.3e} (tol {float(o['tol']):.1e}) -> {'PASS' if ok else 'FAIL'}")
    report = {"timing_s": clock.laps, "max_rel_err": res.max_rel_err, "tol": float(o["tol"]), "pass": ok}
    if not ok:
        io.write_json(Path(args.out) / "oracle-check_report.json", report)
        raise NumericalError(f"oracle check failed: max relative error {res.max_rel_err:.3e}")
    return report


COMMANDS = {
    "phantom": (cmd_phantom, "synthesize a phantom and its noisy test data"),
    "train": (cmd_train, "train a random-feature PERK estimator"),
    "estimate": (cmd_estimate, "apply a trained estimator to test data"),
    "vpm": (cmd_vpm, "dictionary grid search with variable projection"),
    "holdout": (cmd_holdout, "holdout grid search over (lambda, rho)"),
    "analyze": (cmd_analyze, "Fisher/CRLB and bias/covariance tables"),
    "oracle-check": (cmd_oracle_check, "compare signal models with Bloch simulation"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="perk", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="master seed; overrides the config and its per-stream seeds")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--out", default="perk_run", help="run directory")
        if name not in ("phantom", "oracle-check"):
            sp.add_argument("--data", help="directory holding data/kappa/masks maps (default: --out)")
        if name in ("estimate", "analyze"):
            sp.add_argument("--estimator", help="trained estimator file")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("perk: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config, args.seed)
        _print_seeds(cfg)
        fn = COMMANDS[args.command][0]
        t0 = time.perf_counter()
        report = fn(cfg, args)
        report = {"command": args.command, "seeds": cfg.seeds, "master_seed": cfg.raw["seed"],
                  "wall_s": round(time.perf_counter() - t0, 4), **(report or {})}
        io.write_json(Path(args.out) / f"{args.command}_report.json", report)
        print(f"{args.command}: done in {report['wall_s']:.2f} s")
        return 0
    except PerkError as exc:
        print(f"perk: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"perk: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

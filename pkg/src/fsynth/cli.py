"""Command-line front end.

Subcommands ``fit``, ``augment``, ``cv``, ``band``, ``placebo`` work on a
panel file; ``simulate`` runs a Monte Carlo design.  Exit status is 0 on
success, 2 for invalid input and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import fields, replace

import numpy as np

from fsynth import io
from fsynth.errors import FsynthError, NumericalError, ValidationError
from fsynth.estimator import FitConfig, basis_for, fit_weights, predict
from fsynth.inference import conformal_band, order_statistic_index, placebo_test
from fsynth.simulate import DEFAULT_SEED, ESTIMATOR_NAMES, ArConfig, FactorConfig, run_monte_carlo
from fsynth.weights import cv_lambda, diagnostics

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
BASIS_NAMES = {"bspline": "bspline_cubic", "bspline_cubic": "bspline_cubic",
               "fourier": "fourier", "standard": "standard"}


@contextmanager
def stage(name):
    """Label any library error raised inside the block with ``name``."""
    try:
        yield
    except FsynthError as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
        raise
    except np.linalg.LinAlgError as exc:
        err = NumericalError(str(exc))
        err.stage = name
        raise err from exc


def _parse_grid_list(text):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ValidationError(f"bad --lambda-grid {text!r}") from exc
    if not vals or min(vals) <= 0:
        raise ValidationError("--lambda-grid needs positive values")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with run settings; flags override it")
    common.add_argument("--out-dir", default=".", help="directory for result files")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--json-errors", action="store_true",
                        help="write errors to stderr as JSON")

    panel = argparse.ArgumentParser(add_help=False)
    panel.add_argument("--panel", help="panel file (.csv or .json)")
    panel.add_argument("--format", choices=("csv", "json"), default=None)
    panel.add_argument("--space", default=None,
                       help="l2, wasserstein, spd-frobenius, spd-power:p, spd-logeuclidean, "
                            "laplacian:W or composition")
    panel.add_argument("--estimator", choices=("fsc", "afsc"), default=None)
    panel.add_argument("--lambda", dest="lam", type=float, default=None)
    panel.add_argument("--lambda-grid", default=None, help="comma-separated penalties")
    panel.add_argument("--basis", choices=("bspline", "fourier", "standard"), default=None)
    panel.add_argument("--K", type=int, default=None)
    panel.add_argument("--alpha", type=float, default=None)
    panel.add_argument("--covariates", action="store_true", default=None,
                       help="use the panel's covariates")

    p = argparse.ArgumentParser(prog="fsynth", description="Functional synthetic control")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common, panel], help="synthetic control weights")
    sub.add_parser("augment", parents=[common, panel], help="ridge-augmented weights")
    sub.add_parser("cv", parents=[common, panel], help="penalty selection curve")
    sub.add_parser("band", parents=[common, panel], help="conformal prediction bands")
    pl = sub.add_parser("placebo", parents=[common, panel], help="placebo permutation test")
    pl.add_argument("--fixed-lambda", action="store_true",
                    help="reuse the treated unit's penalty in placebo refits")
    sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo study")
    sim.add_argument("--design", choices=("ar", "factor"), default=None)
    sim.add_argument("--reps", type=int, default=None)
    sim.add_argument("--noise", type=float, default=None, help="noise bound C")
    sim.add_argument("--lambda-grid", default=None)
    sim.add_argument("--basis", choices=("bspline", "fourier", "standard"), default=None)
    sim.add_argument("--K", type=int, default=None)
    return p


def _settings(args):
    cfg = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ValidationError(f"config file {args.config} does not exist")
        try:
            cfg = dict(io.read_json(args.config))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid config JSON: {exc}") from exc
    for key in ("space", "estimator", "basis", "K", "alpha", "seed", "threads",
                "covariates", "design", "reps", "noise"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "lam", None) is not None:
        cfg["lambda"] = args.lam
    if getattr(args, "lambda_grid", None) is not None:
        cfg["lambda_grid"] = _parse_grid_list(args.lambda_grid)
    cfg.setdefault("seed", DEFAULT_SEED)
    cfg.setdefault("threads", 1)
    return cfg


def _fit_config(cfg, estimator):
    basis = cfg.get("basis", "bspline")
    if basis not in BASIS_NAMES:
        raise ValidationError(f"unknown basis {basis!r}")
    grid = cfg.get("lambda_grid")
    return FitConfig(
        estimator=estimator,
        lam=cfg.get("lambda"),
        lambda_grid=tuple(grid) if grid is not None else None,
        lambda_scale=float(cfg.get("lambda_scale", 1.0)),
        basis=BASIS_NAMES[basis],
        K=cfg.get("K"),
        use_covariates=bool(cfg.get("covariates", False)),
        covariate_weight=float(cfg.get("covariate_weight", 0.0)),
    )


def _load(args, cfg):
    if not args.panel:
        raise ValidationError("--panel is required")
    options = cfg.get("space_options", {})
    with stage("ingest"):
        return io.load_panel(args.panel, args.format, cfg.get("space"), **options)


def _weights_doc(data, res, config):
    p = data.panel
    return {
        "estimator": config.estimator,
        "lambda": res.lam,
        "treated": p.unit_ids[0],
        "unit_ids": list(p.unit_ids[1:]),
        "weights": [float(v) for v in res.weights.weights],
        "gamma_scm": [float(v) for v in res.gamma_scm.weights],
    }


def _write_estimates(path, data, res):
    p, adapter = data.panel, data.adapter
    rows = []
    with stage("project"):
        for t in range(p.T0 + 1, p.T + 1):
            est = predict(p, res.weights, adapter, t)
            for k in range(p.grid.size):
                rows.append((t, k + 1, float(p.grid.points[k]), float(est.raw.values[k]),
                             float(est.projected.values[k]), float(p.outcomes[0, t - 1, k])))
    io.write_csv(path, ("period", "coord_index", "x", "raw", "projected", "observed"), rows)


def cmd_fit(args, cfg, estimator):
    data = _load(args, cfg)
    config = _fit_config(cfg, estimator)
    with stage("fit" if estimator == "fsc" else "augment"):
        basis = basis_for(data.panel, config)
        res = fit_weights(data.panel, config, basis)
        diag = diagnostics(data.panel, res.weights, basis)
    out = args.out_dir
    io.write_json(os.path.join(out, "weights.json"), _weights_doc(data, res, config))
    d = {"estimator": config.estimator, "basis": config.basis, "K": basis.K}
    d.update(diag.as_dict())
    io.write_json(os.path.join(out, "diagnostics.json"), d)
    _write_estimates(os.path.join(out, "estimates.csv"), data, res)
    return res


def cmd_cv(args, cfg):
    data = _load(args, cfg)
    config = _fit_config(cfg, "afsc")
    with stage("augment"):
        basis = basis_for(data.panel, config)
        cv = cv_lambda(data.panel, basis, config.lambda_grid, covariates=config.use_covariates)
    io.write_json(os.path.join(args.out_dir, "cv.json"), {
        "best_lambda": cv.best_lambda,
        "lambdas": [float(v) for v in cv.lambdas],
        "curve": [float(v) for v in cv.curve],
    })


def cmd_band(args, cfg):
    data = _load(args, cfg)
    alpha = float(cfg.get("alpha", 0.1))
    with stage("infer"):
        order_statistic_index(data.panel.T0, alpha)
    config = _fit_config(cfg, cfg.get("estimator", "fsc"))
    with stage("fit" if config.estimator == "fsc" else "augment"):
        res = fit_weights(data.panel, config)
    rows = []
    p = data.panel
    with stage("infer"):
        for t in range(p.T0 + 1, p.T + 1):
            b = conformal_band(p, res.weights, t, alpha)
            for k in range(p.grid.size):
                rows.append((t, k + 1, float(p.grid.points[k]), float(b.center[k]),
                             float(b.lower[k]), float(b.upper[k]),
                             float(p.outcomes[0, t - 1, k])))
    io.write_json(os.path.join(args.out_dir, "weights.json"), _weights_doc(data, res, config))
    io.write_csv(os.path.join(args.out_dir, "bands.csv"),
                 ("period", "coord_index", "x", "center", "lower", "upper", "observed"), rows)


def cmd_placebo(args, cfg):
    data = _load(args, cfg)
    config = _fit_config(cfg, cfg.get("estimator", "fsc"))
    reselect = not (getattr(args, "fixed_lambda", False) or cfg.get("fixed_lambda", False))
    include = bool(cfg.get("include_treated_as_donor", False))
    p = data.panel
    periods = []
    with stage("infer"):
        for t in range(p.T0 + 1, p.T + 1):
            r = placebo_test(p, config, t, data.adapter, reselect, include)
            periods.append({
                "period": t,
                "p_value": r.p_value,
                "residual_norms": [float(v) for v in r.residual_norms],
                "lambdas": None if r.lambdas is None else [float(v) for v in r.lambdas],
            })
    io.write_json(os.path.join(args.out_dir, "placebo.json"), {
        "estimator": config.estimator,
        "reselect_lambda": reselect,
        "unit_ids": list(p.unit_ids),
        "periods": periods,
    })


def _design(cfg):
    design = cfg.get("design", "ar")
    cls = {"ar": ArConfig, "factor": FactorConfig}.get(design)
    if cls is None:
        raise ValidationError(f"unknown design {design!r}")
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in cfg.get("design_options", {}).items() if k in names}
    unknown = set(cfg.get("design_options", {})) - names
    if unknown:
        raise ValidationError(f"unknown design options {sorted(unknown)}")
    if "lag_coefs" in kw:
        kw["lag_coefs"] = tuple(kw["lag_coefs"])
    conf = cls(**kw)
    conf = replace(conf, seed=int(cfg["seed"]))
    if "noise" in cfg:
        conf = replace(conf, C=float(cfg["noise"]))
    return conf


def cmd_simulate(args, cfg):
    with stage("simulate"):
        conf = _design(cfg)
        basis = BASIS_NAMES.get(cfg.get("basis", "bspline"))
        if basis is None:
            raise ValidationError(f"unknown basis {cfg.get('basis')!r}")
        grid = cfg.get("lambda_grid")
        mc = run_monte_carlo(
            conf,
            estimators=cfg.get("estimators", ESTIMATOR_NAMES),
            reps=int(cfg.get("reps", 50)),
            basis_kind=basis,
            K=int(cfg.get("K", 50)),
            lambda_grid=np.asarray(grid) if grid is not None else None,
            threads=int(cfg["threads"]),
        )
    rows = [(r["estimator"], r["reps"], r["failures"], r["q25"], r["median"], r["q75"], r["mean"])
            for r in mc.summary()]
    io.write_csv(os.path.join(args.out_dir, "mc_table.csv"),
                 ("estimator", "reps", "failures", "q25", "median", "q75", "mean"), rows)
    reps = len(mc.lam_cv)
    err_rows = [(r, *[float(mc.errors[n][r]) for n in mc.names], float(mc.lam_cv[r]))
                for r in range(reps)]
    io.write_csv(os.path.join(args.out_dir, "mc_errors.csv"),
                 ("rep", *mc.names, "lambda_cv"), err_rows)
    return mc


def _report(exc, code, json_errors):
    stage_name = getattr(exc, "stage", None)
    if json_errors:
        doc = {"error": type(exc).__name__, "stage": stage_name, "message": str(exc),
               "exit_code": code}
        sys.stderr.write(json.dumps(doc) + "\n")
    else:
        where = f" [{stage_name}]" if stage_name else ""
        sys.stderr.write(f"fsynth: error{where}: {exc}\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        cfg = _settings(args)
        if args.out_dir:
            os.makedirs(args.out_dir, exist_ok=True)
        if args.command == "fit":
            cmd_fit(args, cfg, cfg.get("estimator", "fsc"))
        elif args.command == "augment":
            cmd_fit(args, cfg, "afsc")
        elif args.command == "cv":
            cmd_cv(args, cfg)
        elif args.command == "band":
            cmd_band(args, cfg)
        elif args.command == "placebo":
            cmd_placebo(args, cfg)
        elif args.command == "simulate":
            cmd_simulate(args, cfg)
    except ValidationError as exc:
        _report(exc, EXIT_VALIDATION, args.json_errors)
        return EXIT_VALIDATION
    except (NumericalError, FsynthError) as exc:
        _report(exc, EXIT_NUMERICAL, args.json_errors)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

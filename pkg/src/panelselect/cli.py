"""Command-line front end: ``panelselect simulate|estimate|describe|report``.

Exit codes: 0 success, 1 configuration or data validation problem, 2
numerical failure (non-convergence, singular Hessian, rank deficiency).
Set ``PANELSELECT_LOG`` (e.g. ``INFO``) for more log output.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import build_design_matrices, load_panel_csv, validate_panel, write_panel_csv
from .describe import describe_panel
from .dgp import TrueParams, implied_sigma, simulate_panel
from .errors import ConfigError, NumericalError, PanelSelectError, ParameterError
from .stage1 import Stage1Config, Stage1Fit, fit_stage1, random_effects_correlation
from .stage2 import BootstrapConfig, correction_terms, fit_stage2, two_stage_bootstrap_se
from .tables import Table, write_table

logger = logging.getLogger("panelselect")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
ESTIMATE_JSON = "estimate.json"
STAGE2_LABELS = {"lambda1": "Correction term from attrition", "lambda2": "Correction term from employment"}


class ValidationFailed(ConfigError):
    pass


def _clean(obj):
    """JSON-ready copy: numpy scalars/arrays to Python, NaN to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    return obj


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2) + "\n", encoding="utf-8")


def _num(v):
    return float("nan") if v is None else float(v)


# ---------------------------------------------------------------- truth


def expected_coefficients(params: TrueParams) -> dict:
    """Population values the estimators target, keyed like the output tables.

    Wave dummies are 0. The correction-term coefficients are the
    single-period values ``sigma_j3 / sqrt(1 + sigma_jj)``; in a panel they
    hold approximately because survival shifts the attrition effect.
    """
    cg = params.covariates
    s1, s2, s3 = params.s1, params.s2, params.s3
    if s3 < 0:
        s1, s2, s3 = -s1, -s2, -s3
    sig = implied_sigma(params)
    stage1 = {"attrition:const": params.theta[0], "employment:const": params.alpha[0]}
    stage1.update({f"attrition:{v}": c for v, c in zip(cg.z_vars, params.theta[1:])})
    stage1.update({f"employment:{v}": c for v, c in zip(cg.x_vars, params.alpha[1:])})
    stage1.update({"s1": s1, "s2": s2, "s3": s3})
    stage2 = {"const": params.beta[0]}
    stage2.update(dict(zip(cg.w_vars, params.beta[1:])))
    stage2["lambda1"] = params.sigma13 / math.sqrt(1.0 + sig[0, 0])
    stage2["lambda2"] = params.sigma23 / math.sqrt(1.0 + sig[1, 1])
    return {"stage1": stage1, "stage2": stage2}


def _truth_value(table: dict, name: str):
    if name in table:
        return table[name]
    if name.rsplit(":", 1)[-1].startswith("wave"):
        return 0.0
    return None


def _load_truth(cfg: RunConfig):
    path = cfg.truth_path()
    if path is None:
        return None
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read truth file {path}: {exc}") from exc


# ---------------------------------------------------------------- simulate


def cmd_simulate(cfg: RunConfig, args) -> int:
    if cfg.dgp is None:
        raise ConfigError("simulate needs a 'dgp' block")
    seed = args.seed if args.seed is not None else cfg.dgp_seed
    if seed is None:
        raise ConfigError("dgp.seed is required (or pass --seed)")
    ds = simulate_panel(cfg.dgp, cfg.n, seed, replicate_weights=cfg.replicate_weights)
    path = cfg.data
    path.parent.mkdir(parents=True, exist_ok=True)
    write_panel_csv(ds, path)
    truth = {
        "n": cfg.n,
        "seed": seed,
        "params": cfg.dgp.to_dict(),
        "sigma": implied_sigma(cfg.dgp),
        "expected": expected_coefficients(cfg.dgp),
    }
    _write_json(path.parent / "truth.json", truth)
    print(f"wrote {path} ({len(ds)} rows, {ds.n_persons} persons) and {path.parent / 'truth.json'}")
    return EXIT_OK


# ---------------------------------------------------------------- estimate


def _load_validated(cfg: RunConfig, spec):
    ds = load_panel_csv(cfg.data, spec)
    report = validate_panel(ds, spec)
    if not report.ok:
        lines = [str(v) for v in list(report)[:50]]
        more = len(report) - len(lines)
        msg = f"{cfg.data}: {len(report)} validation violation(s):\n  " + "\n  ".join(lines)
        if more > 0:
            msg += f"\n  ... and {more} more"
        raise ValidationFailed(msg)
    return ds


def _rho_se(fit: Stage1Fit) -> float:
    """Delta-method SE of the implied error correlation."""
    names = [n for n, f in zip(fit.names, fit.free) if f]
    if not all(s in names for s in ("s1", "s2", "s3")):
        return float("nan")
    pos = [names.index(s) for s in ("s1", "s2", "s3")]
    s = np.array([fit.params.s1, fit.params.s2, fit.params.s3])

    def rho(v):
        return v[1] * v[2] / math.sqrt((1 + v[0] ** 2 + v[1] ** 2) * (1 + v[2] ** 2))

    grad = np.empty(3)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-6
        grad[j] = (rho(s + e) - rho(s - e)) / 2e-6
    cov = fit.covariance[np.ix_(pos, pos)]
    return float(math.sqrt(max(grad @ cov @ grad, 0.0)))


def stage1_table(fit: Stage1Fit, truth: dict | None) -> Table:
    cols = ["section", "term", "estimate", "se"] + (["truth"] if truth else [])
    t = Table("Stage 1: joint attrition and employment probits (simulated likelihood)", cols)
    sections = {"attrition": "Non-attrition equation", "employment": "Employment equation"}
    exp = truth["expected"]["stage1"] if truth else {}
    for name, est, se in fit.table():
        eq, _, term = name.partition(":")
        section = sections.get(eq, "Parameters for the random terms")
        term = term or name
        row = [section, term, float(est), float(se)]
        if truth:
            tv = _truth_value(exp, name)
            if name == "s1" and tv is not None:
                tv = math.copysign(abs(tv), fit.params.s1)
            row.append(None if tv is None else float(tv))
        t.add(*row)
    pad = [None] if truth else []
    p = fit.params
    t.add("Derived", "rho (implied error correlation)", fit.rho, _rho_se(fit), *pad)
    t.add("Derived", "corr(u1, u2)", random_effects_correlation(p), float("nan"), *pad)
    t.add("Derived", "sigma11", p.sigma11, float("nan"), *pad)
    t.add("Derived", "sigma12", p.sigma12, float("nan"), *pad)
    t.add("Derived", "sigma22", p.sigma22, float("nan"), *pad)
    t.add("Fit", "log-likelihood", fit.loglik, float("nan"), *pad)
    t.add("Fit", "persons", fit.n_persons, float("nan"), *pad)
    t.add("Fit", "draws per person (R)", fit.R_used, float("nan"), *pad)
    t.add("Fit", "seed", fit.seed, float("nan"), *pad)
    t.add("Fit", "iterations", fit.iterations, float("nan"), *pad)
    t.add("Fit", "max abs mean gradient", fit.gradient_norm, float("nan"), *pad)
    t.notes.append(f"status: {fit.convergence}")
    t.notes.append("s3 is sign-normalized to be non-negative; s1 is identified up to sign"
                   + (" (truth shown with the estimate's sign)" if truth else ""))
    return t


def stage2_table(fit2, naive, truth: dict | None) -> Table:
    cols = ["section", "term", "coef", "se", "se_robust", "naive_coef", "naive_se"] + (["truth"] if truth else [])
    t = Table("Stage 2: selection-corrected pooled wage regression", cols)
    exp = truth["expected"]["stage2"] if truth else {}
    naive_coef = dict(zip(naive.names, naive.coef))
    naive_se = dict(zip(naive.names, naive.se_naive))
    nan = float("nan")
    for name, c, se, sen in zip(fit2.names, fit2.coef, fit2.se, fit2.se_naive):
        row = ["Wage equation", STAGE2_LABELS.get(name, name), float(c), float(se), float(sen),
               float(naive_coef.get(name, nan)), float(naive_se.get(name, nan))]
        if truth:
            tv = _truth_value(exp, name)
            row.append(None if tv is None else float(tv))
        t.add(*row)
    pad = [None] if truth else []
    se1, se2 = float(fit2.se[-2]), float(fit2.se[-1])
    t.add("Derived", "sigma13_hat = -coef(attrition term)", -fit2.coef_lambda1, se1, nan, nan, nan, *pad)
    t.add("Derived", "sigma23_hat = -coef(employment term)", -fit2.coef_lambda2, se2, nan, nan, nan, *pad)
    t.add("Derived", "mean attrition term", fit2.mean_lambda1, nan, nan, nan, nan, *pad)
    t.add("Derived", "mean employment term", fit2.mean_lambda2, nan, nan, nan, nan, *pad)
    g1, g2 = fit2.gaps()
    t.add("Derived", "selection gap, attrition (%)", g1.percent, 100 * se1 * fit2.mean_lambda1, nan, nan, nan, *pad)
    t.add("Derived", "selection gap, employment (%)", g2.percent, 100 * se2 * fit2.mean_lambda2, nan, nan, nan, *pad)
    t.add("Fit", "adjusted R-squared", fit2.r_squared_adj, nan, nan, naive.r_squared_adj, nan, *pad)
    t.add("Fit", "residual variance", fit2.residual_variance, nan, nan, naive.residual_variance, nan, *pad)
    t.add("Fit", "N", fit2.n, nan, nan, naive.n, nan, *pad)
    for wave, count in fit2.n_by_wave.items():
        t.add("Fit", f"N wave {wave}", count, nan, nan, naive.n_by_wave.get(wave, 0), nan, *pad)
    t.notes.append(f"se: {fit2.se_kind}; se_robust: heteroskedasticity-robust, ignores the estimated terms")
    t.notes.append("residual variance absorbs var(u3) + var(v3); the two are not separately identified")
    return t


def _stage1_config(cfg: RunConfig, seed: int) -> Stage1Config:
    e = cfg.estimation
    return Stage1Config(R=e.R, seed=seed, max_iter=e.max_iter, gtol=e.gtol,
                        freeze_loadings=e.freeze_loadings, antithetic=e.antithetic)


def cmd_estimate(cfg: RunConfig, args) -> int:
    if cfg.model is None:
        raise ConfigError("estimate needs a 'model' block (or a 'dgp' block to derive it from)")
    seed = args.seed if args.seed is not None else cfg.estimation.seed
    if seed is None:
        raise ConfigError("estimation.seed is required (or pass --seed)")
    ds = _load_validated(cfg, cfg.model)
    design = build_design_matrices(ds, cfg.model)
    truth = _load_truth(cfg)
    s1cfg = _stage1_config(cfg, seed)
    fit1 = fit_stage1(design, s1cfg)

    out = cfg.out
    result = {
        "data": cfg.data.name,
        "seed": seed,
        "truth": truth,
        "stage1": {
            "names": fit1.names, "estimate": fit1.params.vector(), "se": fit1.se, "free": fit1.free,
            "loglik": fit1.loglik, "convergence": fit1.convergence, "iterations": fit1.iterations,
            "gradient_norm": fit1.gradient_norm, "R": fit1.R_used, "n_persons": fit1.n_persons,
            "rho": fit1.rho, "rho_se": _rho_se(fit1),
        },
    }
    write_table(stage1_table(fit1, truth), out, "stage1", cfg.format)
    if fit1.convergence != "converged":
        _write_json(out / ESTIMATE_JSON, result)
        raise NumericalError(f"stage 1 did not converge (status: {fit1.convergence}, "
                             f"max abs gradient {fit1.gradient_norm:.3g})")
    if args.stage1_only:
        _write_json(out / ESTIMATE_JSON, result)
        print(f"stage 1 {fit1.convergence}; wrote {out / 'stage1.csv'}")
        return EXIT_OK

    terms = correction_terms(design, fit1.params)
    fit2 = fit_stage2(design, terms)
    naive = fit_stage2(design, None, corrected=False)
    B = args.bootstrap if args.bootstrap is not None else cfg.estimation.bootstrap
    boot_info = None
    if B:
        bseed = cfg.estimation.bootstrap_seed if cfg.estimation.bootstrap_seed is not None else seed
        boot = two_stage_bootstrap_se(design, fit1, BootstrapConfig(B=B, seed=bseed), s1cfg)
        fit2 = replace(fit2, se_bootstrap=boot.se)
        boot_info = {"B": B, "seed": bseed, "dropped": boot.dropped}

    result["stage2"] = {
        "names": fit2.names, "coef": fit2.coef, "se": fit2.se, "se_kind": fit2.se_kind,
        "se_robust": fit2.se_naive, "se_cluster": fit2.se_cluster,
        "r_squared_adj": fit2.r_squared_adj, "residual_variance": fit2.residual_variance,
        "n_by_wave": fit2.n_by_wave, "mean_lambda1": fit2.mean_lambda1, "mean_lambda2": fit2.mean_lambda2,
        "rho": terms.rho, "clamp_events": terms.clamp_events, "bootstrap": boot_info,
    }
    result["naive"] = {
        "names": naive.names, "coef": naive.coef, "se_robust": naive.se_naive, "se_cluster": naive.se_cluster,
        "r_squared_adj": naive.r_squared_adj, "n_by_wave": naive.n_by_wave,
    }
    write_table(stage2_table(fit2, naive, truth), out, "stage2", cfg.format)
    _write_json(out / ESTIMATE_JSON, result)
    g1, g2 = fit2.gaps()
    print(f"stage 1 {fit1.convergence} (loglik {fit1.loglik:.4f}); rho = {fit1.rho:.4f}")
    print(f"selection gaps: attrition {g1.percent:.2f}%, employment {g2.percent:.2f}%")
    print(f"wrote {out / 'stage1.csv'}, {out / 'stage2.csv'}, {out / ESTIMATE_JSON}")
    return EXIT_OK


# ---------------------------------------------------------------- describe


def cmd_describe(cfg: RunConfig, args) -> int:
    d = cfg.describe
    ds = _load_validated(cfg, None)
    seed = args.seed if args.seed is not None else d.seed
    B = args.bootstrap if args.bootstrap is not None else d.bootstrap
    if d.replicate_prefix is None and seed is None:
        raise ConfigError("describe.seed is required for bootstrap standard errors (or pass --seed)")
    tab = describe_panel(ds, list(d.variables), replicate_prefix=d.replicate_prefix, B=B,
                         seed=seed if seed is not None else 0, scale=d.brr_scale)
    cols = list(tab.columns)
    t = Table("Weighted means at wave t by response status at wave t+1", cols)
    for rec in tab.itertuples(index=False):
        t.add(*[v.item() if isinstance(v, np.generic) else v for v in rec])
    source = f"replicate weights '{d.replicate_prefix}*'" if d.replicate_prefix else f"person bootstrap, B={B}"
    t.notes.append(f"se from {source}; scale factor {d.brr_scale}; * marks a difference significant at 5%")
    write_table(t, cfg.out, "describe", cfg.format)
    print(f"wrote {cfg.out / 'describe.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- report


def report_table(est: dict) -> Table:
    s2, nv = est.get("stage2"), est.get("naive")
    if s2 is None or nv is None:
        raise ConfigError(f"{ESTIMATE_JSON} has no stage-2 results (was estimate run with --stage1-only?)")
    truth = est.get("truth")
    exp = truth["expected"]["stage2"] if truth else {}
    cols = ["term", "naive_coef", "naive_se", "corrected_coef", "corrected_se", "difference"]
    if truth:
        cols += ["truth", "bias_naive", "bias_corrected"]
    t = Table("Naive versus selection-corrected wage equation", cols)
    naive = {n: (_num(c), _num(s)) for n, c, s in zip(nv["names"], nv["coef"], nv["se_robust"])}
    nan = float("nan")
    for name, c, se in zip(s2["names"], s2["coef"], s2["se"]):
        c, se = _num(c), _num(se)
        nc, ns = naive.get(name, (nan, nan))
        row = [STAGE2_LABELS.get(name, name), nc, ns, c, se, c - nc]
        if truth:
            tv = _truth_value(exp, name)
            tv = nan if tv is None else float(tv)
            row += [tv, nc - tv, c - tv]
        t.add(*row)
    pad = [nan] * (len(cols) - 2)
    names = list(s2["names"])
    for label, key, mean_key in (("attrition", "lambda1", "mean_lambda1"), ("employment", "lambda2", "mean_lambda2")):
        coef = _num(s2["coef"][names.index(key)])
        se = _num(s2["se"][names.index(key)])
        mean = _num(s2[mean_key])
        gap = -coef * mean
        t.add(f"mean {label} term", mean, *pad)
        t.add(f"selection gap, {label} (log points)", gap, *pad)
        t.add(f"selection gap, {label} (%)", 100 * gap, *pad)
        t.add(f"selection gap, {label} (% se)", 100 * se * mean, *pad)
    t.add("rho (implied error correlation)", _num(s2["rho"]), *pad)
    t.notes.append(f"corrected se: {s2['se_kind']}; naive se: heteroskedasticity-robust")
    t.notes.append("selection gap = -coef x mean correction term")
    return t


def cmd_report(cfg: RunConfig, args) -> int:
    path = cfg.out / ESTIMATE_JSON
    if not path.exists():
        raise ConfigError(f"missing {path}; run 'panelselect estimate' first")
    est = json.loads(path.read_text(encoding="utf-8"))
    write_table(report_table(est), cfg.out, "report", cfg.format)
    print(f"wrote {cfg.out / 'report.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "describe": cmd_describe, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panelselect",
                                description="Panel wage regressions corrected for attrition and employment selection.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", help="output directory (overrides paths.out)")
    p.add_argument("--stage1-only", action="store_true", help="estimate: stop after stage 1")
    p.add_argument("--bootstrap", type=int, metavar="B", help="bootstrap replicates (estimate, describe)")
    p.add_argument("--seed", type=int, help="overrides the seed of the chosen command")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("PANELSELECT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.bootstrap is not None and args.bootstrap != 0 and args.bootstrap < 50:
            raise ConfigError("--bootstrap must be 0 or >= 50")
        cfg = load_config(args.config)
        if args.out:
            cfg = cfg.with_out(args.out)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, ParameterError, OSError) as exc:
        print(f"panelselect: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PanelSelectError as exc:
        print(f"panelselect: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

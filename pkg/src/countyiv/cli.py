"""Batch command line: ``countyiv <command> [options]``.

Every command writes canonical JSON (sorted keys, fixed float repr) so that
identical inputs give byte-identical artifacts; wall-clock times go to
``meta/<command>.json`` only.  Exit status: 0 success, 1 runtime failure,
2 usage error.  Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .data import (
    Dataset,
    DataError,
    Schema,
    balance_table,
    load_dataset,
    validate,
    write_dataset,
)
from .first_stage import (
    exclusion_sensitivity,
    fit_first_stage,
    relevance_test,
    sensitivity_verdict,
)
from .inference import PlaceboConfig, bonferroni_level, bootstrap, placebo_regression, PLACEBO_OUTCOMES
from .outcome import (
    EffectsConfig,
    OutcomeConfig,
    bound_effects,
    effect_report,
    mortality_difference,
    outcome_data,
    period_effects,
    period_samples,
    series_length,
)
from .prep import prepare_dataset
from .simulate import DgpConfig, simulate
from .survival import SurvivalConfig, fit_survival, overall_effect, survival_curves

log = logging.getLogger("countyiv")

COMMANDS = (
    "simulate", "prep", "first-stage", "sensitivity", "fit", "effects",
    "survival", "bootstrap", "placebo", "report",
)
THREADS_ENV = "COUNTYIV_THREADS"

ARTIFACTS = {
    "first-stage": "first_stage.json",
    "sensitivity": "sensitivity.json",
    "fit": "fit.json",
    "effects": "effects.json",
    "survival": "survival.json",
    "placebo": "placebo.json",
    "bootstrap": "bootstrap.json",
}
REPORT_ORDER = ("first-stage", "sensitivity", "fit", "effects", "survival")
FREEZE_FILE = "design_freeze.json"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    quadrature_order: int = 64
    B: int = 1000
    alpha_overall: float = 0.05
    m: int = 3
    data: str | None = None
    out: str | None = None
    options: dict = field(default_factory=dict)  # command section

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ io helpers


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj), encoding="utf-8")
    return path


def read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def _write_meta(out: Path, command: str, started: float, argv: list[str]):
    write_json(out / "meta" / f"{command.replace('-', '_')}.json", {
        "command": command,
        "argv": argv,
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "seconds": round(time.time() - started, 3),
    })


def load_data_dir(path) -> Dataset:
    d = Path(path)
    if not (d / "schema.json").exists():
        raise DataError(f"{d}: no schema.json; expected a directory written by simulate or prep")
    schema = Schema.from_dict(read_json(d / "schema.json"))
    ev = d / "events.csv"
    pn = d / "panel.csv"
    ds = load_dataset(d / "patients.csv", schema,
                      ev if ev.exists() and ev.stat().st_size else None,
                      pn if pn.exists() and pn.stat().st_size else None)
    return ds


def save_data_dir(ds: Dataset, out) -> None:
    paths = write_dataset(ds, out)
    write_json(Path(out) / "schema.json", ds.schema.to_dict())
    return paths


def _require(ds: Dataset):
    # continuous covariates must be complete before any model is fitted
    return validate(ds)


def design_hash(ds: Dataset, spec: dict) -> str:
    from .data import encode_design

    des = encode_design(ds)
    payload = {
        "covariates": list(des.covariate_names),
        "instruments": list(des.instrument_names),
        "reference_county": des.reference_county,
        "first_stage": spec,
    }
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


def _check_freeze(cfg: RunConfig, ds: Dataset) -> dict:
    out = Path(cfg.out)
    fz = out / FREEZE_FILE
    if not fz.exists():
        raise RuntimeError(
            f"no design freeze in {out}: run `first-stage` before fitting outcomes"
        )
    frozen = read_json(fz)
    now = design_hash(ds, frozen["spec"])
    if now != frozen["hash"]:
        raise RuntimeError("design does not match the frozen first-stage specification "
                           f"(frozen {frozen['hash'][:12]}, now {now[:12]})")
    return frozen


def _outcome_config(cfg: RunConfig) -> OutcomeConfig:
    o = cfg.options
    return OutcomeConfig(quadrature_order=cfg.quadrature_order, het=o.get("het"),
                         relevance_check=bool(o.get("relevance_check", True)))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# ------------------------------------------------------------------ commands


def cmd_simulate(cfg: RunConfig) -> dict:
    o = dict(cfg.options)
    o.setdefault("seed", cfg.seed)
    dgp = DgpConfig.from_dict(o)
    ds, truth = simulate(dgp)
    out = Path(cfg.out)
    save_data_dir(ds, out)
    write_json(out / "truth.json", {"dgp": dgp.to_dict(), **truth.to_dict()})
    return {"patients": len(ds), "aa_share": float(ds.d.mean()), "out": str(out)}


def cmd_prep(cfg: RunConfig) -> dict:
    new, summary, fm = prepare_dataset(load_data_dir(cfg.data), cfg.options)
    new = _require(new)
    out = Path(cfg.out)
    save_data_dir(new, out)
    if fm is not None:
        write_json(out / "factor_model.json", fm.to_dict(blank_below=float(cfg.options.get("blank_below", 0.2))))
    write_json(out / "prep.json", {"config": cfg.to_dict(), **summary})
    return summary


def cmd_first_stage(cfg: RunConfig) -> dict:
    ds = _require(load_data_dir(cfg.data))
    firth = bool(cfg.options.get("firth", False))
    fit = fit_first_stage(ds, firth=firth)
    rel = relevance_test(fit)
    rel_lr = relevance_test(fit, method="lr") if cfg.options.get("lr", False) else None
    bal_cols = cfg.options.get("balance", list(ds.schema.covariates))
    spec = {"firth": firth, "model": "probit", "instrument": "county"}
    report = {
        "config": cfg.to_dict(),
        "n": fit.n,
        "aa_share": float(ds.d.mean()),
        "converged": fit.converged,
        "loglik": fit.loglik,
        "coefficients": fit.coefficient_table(),
        "relevance": rel.to_dict(),
        "relevance_lr": None if rel_lr is None else rel_lr.to_dict(),
        "balance": balance_table(ds, bal_cols).to_dict(),
    }
    out = Path(cfg.out)
    write_json(out / ARTIFACTS["first-stage"], report)
    write_json(out / FREEZE_FILE, {"hash": design_hash(ds, spec), "spec": spec,
                                   "covariates": list(ds.covariate_names)})
    return {"F": rel.statistic, "df1": rel.df1, "p_value": rel.p_value}


def cmd_sensitivity(cfg: RunConfig) -> dict:
    ds = _require(load_data_dir(cfg.data))
    outcomes = cfg.options.get("outcomes", ["sre_pre", "pain_pre"])
    tests = [exclusion_sensitivity(ds, oc, firth=bool(cfg.options.get("firth", False))) for oc in outcomes]
    verdict = sensitivity_verdict(tests, cfg.alpha_overall)
    write_json(Path(cfg.out) / ARTIFACTS["sensitivity"], {"config": cfg.to_dict(), **verdict.to_dict()})
    return {"verdict": verdict.verdict}


def _outcome_vector(ds: Dataset, outcome: str, period: int | None):
    """(rows to use, y) for a cross-sectional column or one panel period."""
    if outcome in ds.n_periods:
        T = series_length(ds, outcome)
        t = T if period is None else int(period)
        if not 1 <= t <= T:
            raise DataError(f"period {t} outside 1..{T} for {outcome!r}")
        for tt, use, y, _ in period_samples(ds, outcome, T):
            if tt == t:
                idx = np.flatnonzero(use)
                return idx, y[idx]
    if outcome not in ds.frame.columns:
        raise DataError(f"unknown outcome {outcome!r}")
    return np.arange(len(ds)), ds.column(outcome).astype(float)


def cmd_fit(cfg: RunConfig) -> dict:
    ds = _require(load_data_dir(cfg.data))
    frozen = _check_freeze(cfg, ds)
    outcome = cfg.options.get("outcome", "y")
    period = cfg.options.get("period")
    idx, y = _outcome_vector(ds, outcome, period)
    data = outcome_data(ds, het=cfg.options.get("het")).take(idx).with_outcome(y)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = effect_report(data, _outcome_config(cfg))
    rep["warnings"] = sorted({str(w.message) for w in caught})
    write_json(Path(cfg.out) / ARTIFACTS["fit"], {
        "config": cfg.to_dict(), "design_hash": frozen["hash"], "outcome": outcome,
        "period": period, **rep,
    })
    return {"ate": rep["ate"], "ate_se": rep["ate_se"], "converged": rep["fit"]["converged"]}


def cmd_effects(cfg: RunConfig) -> dict:
    ds = _require(load_data_dir(cfg.data))
    frozen = _check_freeze(cfg, ds)
    o = cfg.options
    outcomes = o.get("outcomes", [k for k in ("dead", "pain", "sre") if k in ds.n_periods])
    if not outcomes:
        raise DataError("dataset has no outcome panels")
    ecfg = EffectsConfig(
        outcome_config=replace(_outcome_config(cfg), relevance_check=False),
        max_periods=o.get("max_periods"), alpha_overall=cfg.alpha_overall, family_size=cfg.m,
        xbar_sample=o.get("xbar_sample", "full"), min_events=int(o.get("min_events", 5)),
    )
    bounds = o.get("bounds", "both")
    base = outcome_data(ds, het=o.get("het"))
    result: dict[str, Any] = {}
    rows: list[dict] = []
    notes: list[str] = []
    for oc in outcomes:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            series = {"primary": period_effects(ds, oc, ecfg, base=base)}
            if bounds == "both" and oc != "dead":
                for label in (1, 0):
                    s = bound_effects(ds, oc, label, ecfg, base=base)
                    series[s.variant] = s
        notes.extend(f"{oc}: {w.message}" for w in caught)
        result[oc] = {k: v.to_dict() for k, v in series.items()}
        for v in series.values():
            rows.extend(v.to_rows())
    out = Path(cfg.out)
    write_json(out / ARTIFACTS["effects"], {
        "config": cfg.to_dict(), "design_hash": frozen["hash"], "level": bonferroni_level(cfg.alpha_overall, cfg.m),
        "mortality_difference": mortality_difference(ds) if "dead" in ds.n_periods else None,
        "series": result, "warnings": notes,
    })
    write_csv(out / "effects.csv", rows)
    return {oc: sum(e["status"] == "ok" for e in result[oc]["primary"]["entries"]) for oc in outcomes}


def cmd_survival(cfg: RunConfig) -> dict:
    ds = _require(load_data_dir(cfg.data))
    frozen = _check_freeze(cfg, ds)
    o = cfg.options
    scfg = SurvivalConfig(quadrature_order=cfg.quadrature_order, het=o.get("het"),
                          n_periods=o.get("n_periods"),
                          treatment_weight=o.get("treatment_weight", "patient"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_survival(ds, scfg)
        curves = survival_curves(fit, ds)
    t_bar = o.get("t_bar")
    if t_bar is None:
        t_bar = min([len(curves), *ds.n_periods.values()])
    effect = overall_effect(curves, int(t_bar))
    out = Path(cfg.out)
    write_json(out / ARTIFACTS["survival"], {
        "config": cfg.to_dict(), "design_hash": frozen["hash"], "fit": fit.to_dict(),
        "curves": curves.to_dict(), "t_bar": int(t_bar), "overall_effect": effect,
        "warnings": [str(w.message) for w in caught],
    })
    write_csv(out / "survival_curves.csv", curves.to_rows())
    return {"overall_effect": effect, "t_bar": int(t_bar), "converged": fit.converged}


def cmd_bootstrap(cfg: RunConfig) -> dict:
    ds = _require(load_data_dir(cfg.data))
    frozen = _check_freeze(cfg, ds)
    o = cfg.options
    outcome = o.get("outcome", "y")
    period = o.get("period")
    ocfg = _outcome_config(cfg)
    idx, y = _outcome_vector(ds, outcome, period)
    full = outcome_data(ds, het=o.get("het"))
    point = effect_report(full.take(idx).with_outcome(y), ocfg)
    start = point["fit"]["theta"]
    quiet = replace(ocfg, relevance_check=False)

    from .outcome import Theta

    def estimator(sample: Dataset) -> float:
        i, yy = _outcome_vector(sample, outcome, period)
        data = outcome_data(sample, het=o.get("het")).take(i).with_outcome(yy)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return effect_report(data, quiet, start=Theta.from_dict(start))["ate"]

    res = bootstrap(estimator, ds, B=int(cfg.B), seed=cfg.seed, alpha_overall=cfg.alpha_overall, m=cfg.m,
                    ci_method=o.get("ci_method", "percentile"), workers=_threads())
    write_json(Path(cfg.out) / ARTIFACTS["bootstrap"], {
        "config": cfg.to_dict(), "design_hash": frozen["hash"], "outcome": outcome, "period": period,
        "point_ate": point["ate"], "delta_method_se": point["ate_se"], **res.to_dict(),
    })
    return {"se": res.se, "ci": list(res.ci), "failures": res.failures}


def cmd_placebo(cfg: RunConfig) -> dict:
    ds = _require(load_data_dir(cfg.data))
    frozen = _check_freeze(cfg, ds)
    o = cfg.options
    outcomes = o.get("outcomes", [p for p in PLACEBO_OUTCOMES if p in ds.frame.columns])
    if not outcomes:
        raise DataError("no placebo outcome columns present")
    pcfg = PlaceboConfig(psa_threshold=o.get("psa_threshold"), alpha_overall=cfg.alpha_overall,
                         m=len(outcomes), outcome_config=_outcome_config(cfg))
    res = []
    for p in outcomes:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res.append(placebo_regression(ds, p, pcfg).to_dict())
    write_json(Path(cfg.out) / ARTIFACTS["placebo"], {"config": cfg.to_dict(), "design_hash": frozen["hash"],
                                                      "results": res})
    return {r["outcome"]: r["verdict"] for r in res}


def _fmt(v, digits=4):
    return "NA" if v is None else f"{v:.{digits}f}"


def cmd_report(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    required = cfg.options.get("require", list(REPORT_ORDER))
    missing = [step for step in required if not (out / ARTIFACTS[step]).exists()]
    if missing:
        raise RuntimeError(f"report is missing artifacts from step(s): {', '.join(missing)}")
    parts = {step: read_json(out / ARTIFACTS[step]) for step in ARTIFACTS if (out / ARTIFACTS[step]).exists()}
    order = [s for s in ("first-stage", "sensitivity", "fit", "effects", "survival", "placebo", "bootstrap")
             if s in parts]
    write_json(out / "report.json", {"order": order, "sections": {s: parts[s] for s in order}})

    lines = ["# Protocol report", ""]
    if "first-stage" in parts:
        fs = parts["first-stage"]
        lines += ["## First stage probit", "", "| term | estimate (se) |", "|---|---|"]
        lines += [f"| {c['name']} | {c['display']} |" for c in fs["coefficients"]]
        r = fs["relevance"]
        lines += ["", "## Relevance of the county block", "",
                  f"F = {_fmt(r['statistic'])}, Df = {r['df1']}, p = {_fmt(r['p_value'], 6)}"
                  f" (F > 10: {'yes' if r['rule_of_thumb_f_gt_10'] else 'no'})", ""]
    if "sensitivity" in parts:
        s = parts["sensitivity"]
        lines += ["## Exclusion sensitivity", "", "| outcome | F | Df | p |", "|---|---|---|---|"]
        lines += [f"| {t['block']} | {_fmt(t['statistic'])} | {t['df1']} | {_fmt(t['p_value'])} |"
                  for t in s["tests"]]
        lines += ["", f"Single-test level {_fmt(s['single_test_level'])}: {s['verdict']}", ""]
    if "fit" in parts:
        f = parts["fit"]
        lines += ["## Outcome model", "", f"outcome {f['outcome']}: ATE {_fmt(f['ate'])} (se {_fmt(f['ate_se'])}),"
                  f" delta1 {_fmt(f['delta1'])} (se {_fmt(f['delta1_se'])}), n = {f['n']}", ""]
    if "effects" in parts:
        e = parts["effects"]
        lines += ["## Per-period effects", "", "| outcome | variant | t | estimate | CI | status |",
                  "|---|---|---|---|---|---|"]
        for oc, variants in e["series"].items():
            for var, ser in variants.items():
                for en in ser["entries"]:
                    ci = "" if en["ci_low"] is None else f"[{_fmt(en['ci_low'])}, {_fmt(en['ci_high'])}]"
                    lines.append(f"| {oc} | {var} | {en['period']} | {_fmt(en['estimate'])} | {ci} | {en['status']} |")
        lines.append("")
    if "survival" in parts:
        sv = parts["survival"]
        lines += ["## Survival", "", f"overall effect up to period {sv['t_bar']}: {_fmt(sv['overall_effect'])}", ""]
    if "placebo" in parts:
        lines += ["## Placebo regressions", ""]
        lines += [f"- {r['outcome']}: z = {_fmt(r['z'], 3)}, p = {_fmt(r['p_value'])}, {r['verdict']}"
                  for r in parts["placebo"]["results"]]
        lines.append("")
    (out / "report.md").write_text("\n".join(lines), encoding="utf-8")
    return {"sections": order}


HANDLERS = {
    "simulate": cmd_simulate, "prep": cmd_prep, "first-stage": cmd_first_stage,
    "sensitivity": cmd_sensitivity, "fit": cmd_fit, "effects": cmd_effects,
    "survival": cmd_survival, "bootstrap": cmd_bootstrap, "placebo": cmd_placebo,
    "report": cmd_report,
}


# ------------------------------------------------------------------ parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "usage", "message": message}) + "\n")
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file; its values override flags")
    common.add_argument("--seed", type=int)
    common.add_argument("--quadrature-order", type=int, dest="quadrature_order")
    common.add_argument("--B", type=int, dest="B", help="bootstrap replicates")
    common.add_argument("--alpha", type=float, dest="alpha_overall")
    common.add_argument("--m", type=int, help="outcome family size for Bonferroni")
    common.add_argument("--data", help="dataset directory (patients.csv, schema.json, ...)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="countyiv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset and truth.json")
    s.add_argument("--n", type=int)
    s.add_argument("--periods", type=int, dest="n_periods")
    sub.add_parser("prep", parents=[common], help="impute, factor-analyse, derive pre-treatment flags")
    fs = sub.add_parser("first-stage", parents=[common], help="treatment probit and relevance test")
    fs.add_argument("--firth", action="store_true", default=None)
    se = sub.add_parser("sensitivity", parents=[common], help="exclusion-restriction sensitivity tests")
    se.add_argument("--firth", action="store_true", default=None)
    for name in ("fit", "bootstrap"):
        f = sub.add_parser(name, parents=[common],
                           help="fit the outcome model" if name == "fit" else "bootstrap the average effect")
        f.add_argument("--outcome")
        f.add_argument("--period", type=int)
    e = sub.add_parser("effects", parents=[common], help="per-period effect series with bounds")
    e.add_argument("--outcome", dest="outcomes", action="append", choices=["dead", "pain", "sre"])
    e.add_argument("--max-periods", type=int, dest="max_periods")
    e.add_argument("--bounds", choices=["none", "both"])
    sv = sub.add_parser("survival", parents=[common], help="IV survival model and curves")
    sv.add_argument("--t-bar", type=int, dest="t_bar")
    pl = sub.add_parser("placebo", parents=[common], help="placebo regressions on pre-treatment covariates")
    pl.add_argument("--psa-threshold", type=float, dest="psa_threshold")
    sub.add_parser("report", parents=[common], help="assemble the protocol report")
    return p


GLOBAL_KEYS = ("seed", "quadrature_order", "B", "alpha_overall", "m", "data", "out")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config", "verbose")}
    for k in GLOBAL_KEYS:
        if k in flags:
            setattr(cfg, k, flags.pop(k))
    options = dict(flags)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        try:
            file_cfg = read_json(path)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        for k in GLOBAL_KEYS:
            if k in file_cfg:
                setattr(cfg, k, file_cfg[k])
        section = file_cfg.get(args.command.replace("-", "_"), {})
        options.update(section)
    cfg.options = options
    if cfg.out is None:
        raise UsageError("--out is required")
    if args.command not in ("simulate", "report") and cfg.data is None:
        raise UsageError("--data is required")
    if cfg.B < 2:
        raise UsageError("B must be at least 2")
    if not 0 < cfg.alpha_overall < 1:
        raise UsageError("alpha must lie in (0, 1)")
    if cfg.quadrature_order < 16:
        raise UsageError("quadrature order must be at least 16")
    return cfg


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "usage", "command": args.command, "message": str(exc)}) + "\n")
        return 2
    started = time.time()
    try:
        summary = HANDLERS[args.command](cfg)
    except Exception as exc:  # reported as JSON; traceback only with -v
        if args.verbose:
            log.exception("command failed")
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "command": args.command,
                                     "message": str(exc)}) + "\n")
        return 1
    _write_meta(Path(cfg.out), args.command, started, argv)
    sys.stdout.write(canonical_json({"command": args.command, "status": "ok", **summary}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

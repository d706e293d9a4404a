"""Bonferroni levels, patient-level bootstrap, and placebo regressions."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.10
PLACEBO_OUTCOMES = ("psa", "gleason", "metastases")


class BootstrapError(RuntimeError):
    pass


def bonferroni_level(alpha_overall: float, m: int) -> float:
    """Per-test significance level for a family of ``m`` tests."""
    if not 0.0 < alpha_overall < 1.0:
        raise ValueError("alpha_overall must lie in (0, 1)")
    if int(m) != m or m < 1:
        raise ValueError("m must be a positive integer")
    return alpha_overall / m


@dataclass
class BootstrapResult:
    replicates: int
    estimates: np.ndarray  # (B,) or (B, k); NaN rows for failed replicates
    se: np.ndarray | float
    ci: tuple[Any, Any]
    seed: int
    level: float
    method: str = "percentile"
    failures: int = 0
    point: Any = None

    def to_dict(self) -> dict:
        def lst(v):
            return np.asarray(v, dtype=float).tolist()

        return {
            "replicates": self.replicates,
            "seed": self.seed,
            "level": self.level,
            "method": self.method,
            "failures": self.failures,
            "point": None if self.point is None else lst(self.point),
            "se": lst(self.se),
            "ci_low": lst(self.ci[0]),
            "ci_high": lst(self.ci[1]),
        }


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    """Independent stream for replicate ``b``; does not depend on run order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(b)]))


def _resample(ds, idx):
    if hasattr(ds, "subset"):
        return ds.subset(idx)
    if isinstance(ds, np.ndarray):
        return ds[idx]
    return [ds[i] for i in idx]


def percentile_interval(values: np.ndarray, level: float):
    """Two-sided percentile interval at miscoverage ``level``; endpoints are order statistics."""
    v = np.asarray(values, dtype=float)
    lo = np.quantile(v, level / 2, axis=0, method="inverted_cdf")
    hi = np.quantile(v, 1 - level / 2, axis=0, method="inverted_cdf")
    return lo, hi


def bootstrap(
    estimator: Callable,
    ds,
    B: int = 1000,
    seed: int = 0,
    level: float | None = None,
    ci_method: str = "percentile",
    alpha_overall: float = 0.05,
    m: int = 3,
    workers: int = 1,
) -> BootstrapResult:
    """Nonparametric bootstrap resampling whole patients with replacement.

    ``level`` is the two-sided miscoverage of the interval; by default the
    Bonferroni level alpha_overall / m.  Replicates whose estimator raises or
    returns non-finite values count as failures; more than 10% is an error.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    level = bonferroni_level(alpha_overall, m) if level is None else float(level)
    n = len(ds)
    point = estimator(ds)
    shape = np.shape(point)
    est = np.full((B, *shape), np.nan)

    # each replicate has its own (seed, b) stream, so threading cannot change results
    def one(b):
        idx = replicate_rng(seed, b).integers(0, n, size=n)
        try:
            return np.asarray(estimator(_resample(ds, idx)), dtype=float), None
        except Exception as exc:  # estimator failures are counted, not fatal
            return None, f"replicate {b}: {type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, range(B)))
    else:
        outcomes = [one(b) for b in range(B)]
    failures = 0
    errors: list[str] = []
    for b, (val, err) in enumerate(outcomes):
        if err is None and (val.shape != shape or not np.all(np.isfinite(val))):
            err = f"replicate {b}: non-finite or mis-shaped estimate"
        if err is not None:
            failures += 1
            if len(errors) < 5:
                errors.append(err)
            continue
        est[b] = val
    if failures > MAX_FAILURE_SHARE * B:
        raise BootstrapError(
            f"{failures} of {B} replicates failed (limit {MAX_FAILURE_SHARE:.0%}): " + "; ".join(errors)
        )
    ok = est[np.all(np.isfinite(est.reshape(B, -1)), axis=1)]
    se = ok.std(axis=0, ddof=1)
    if ci_method == "percentile":
        ci = percentile_interval(ok, level)
    elif ci_method == "normal":
        z = stats.norm.ppf(1 - level / 2)
        ci = (np.asarray(point) - z * se, np.asarray(point) + z * se)
    else:
        raise ValueError(f"unknown ci_method {ci_method!r}")
    if not shape:
        se = float(se)
        ci = (float(ci[0]), float(ci[1]))
    return BootstrapResult(B, est, se, ci, int(seed), level, ci_method, failures, point)


# ------------------------------------------------------------------ placebo


@dataclass
class PlaceboConfig:
    psa_threshold: float | None = None  # None = sample median
    alpha_overall: float = 0.05
    m: int = len(PLACEBO_OUTCOMES)
    outcome_config: Any = None
    columns: dict = field(default_factory=lambda: {o: o for o in PLACEBO_OUTCOMES})


@dataclass
class PlaceboResult:
    outcome: str
    report: dict  # same schema as the main-analysis effect report
    z: float
    p_value: float
    level: float

    @property
    def significant(self) -> bool:
        return self.p_value < self.level

    @property
    def verdict(self) -> str:
        return "hidden-bias signal" if self.significant else "no hidden-bias signal"

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "z": self.z, "p_value": self.p_value, "level": self.level,
                "verdict": self.verdict, "report": self.report}


def placebo_binary(ds, outcome: str, config: PlaceboConfig) -> np.ndarray:
    col = ds.column(config.columns.get(outcome, outcome)).astype(float)
    if outcome == "psa":
        thr = float(np.median(col)) if config.psa_threshold is None else config.psa_threshold
        return (col > thr).astype(float)
    vals = set(np.unique(col).tolist())
    if not vals <= {0.0, 1.0}:
        raise ValueError(f"placebo outcome {outcome!r} must be coded 0/1")
    return col


def placebo_regression(ds, placebo_outcome: str, config: PlaceboConfig | None = None) -> PlaceboResult:
    """Run the main effect estimator with a pre-treatment covariate as outcome."""
    from .outcome import OutcomeConfig, effect_report, outcome_data

    cfg = config or PlaceboConfig()
    if placebo_outcome not in cfg.columns:
        raise ValueError(f"unknown placebo outcome {placebo_outcome!r}")
    y = placebo_binary(ds, placebo_outcome, cfg)
    ocfg = cfg.outcome_config or OutcomeConfig()
    data = outcome_data(ds, y=y, het=ocfg.het)
    rep = effect_report(data, ocfg)
    z = rep["ate"] / rep["ate_se"] if rep["ate_se"] > 0 else 0.0
    p = float(2 * stats.norm.sf(abs(z)))
    return PlaceboResult(placebo_outcome, rep, float(z), p, bonferroni_level(cfg.alpha_overall, cfg.m))

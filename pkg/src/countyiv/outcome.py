"""Binary outcome with an endogenous binary treatment, estimated by full ML.

The latent outcome is beta0 + delta'x + D*(delta1 + deltaD'(x - xbar)) + u_D
with u_d = rho_d * eps + sqrt(1 - rho_d^2) * eta_d, where eps is the error of
the treatment probit.  The success probability given (x, z, d) is a
truncated-normal integral; see :mod:`countyiv.quadrature`.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize, stats
from scipy.special import ndtr

from . import joint
from .data import OUTCOME_CAPS, Dataset, DataError, encode_design
from .first_stage import (
    EstimationError,
    fit_probit,
    relevance_test,
    RULE_OF_THUMB_F,
)
from .quadrature import DEFAULT_ORDER, log_bvn, log_ndtr_derivs

log = logging.getLogger(__name__)

RHO_BOUNDARY = 0.995


class BoundaryWarning(UserWarning):
    pass


class WeakInstrumentWarning(UserWarning):
    pass


@dataclass
class Theta:
    beta0: float
    delta: np.ndarray
    delta1: float
    deltaD: np.ndarray
    gamma: np.ndarray
    rho0: float
    rho1: float
    xbar: np.ndarray  # means of the heterogeneity covariates
    het: tuple[int, ...] = ()  # columns of x interacted with treatment

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        self.deltaD = np.asarray(self.deltaD, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.xbar = np.asarray(self.xbar, dtype=float)
        if not self.het:
            self.het = tuple(range(len(self.deltaD)))
        if len(self.deltaD) != len(self.het) or len(self.xbar) != len(self.het):
            raise ValueError("deltaD, xbar and het must have equal length")
        if not (abs(self.rho0) < 1 and abs(self.rho1) < 1):
            raise ValueError("correlations must lie strictly inside (-1, 1)")

    def outcome_coefs(self) -> np.ndarray:
        return np.concatenate([[self.beta0], self.delta, [self.delta1], self.deltaD])

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.outcome_coefs(), self.gamma, [np.arctanh(self.rho0), np.arctanh(self.rho1)]]
        )

    def with_vector(self, vec: np.ndarray) -> "Theta":
        p, h, k = len(self.delta), len(self.deltaD), len(self.gamma)
        vec = np.asarray(vec, dtype=float)
        return replace(
            self,
            beta0=float(vec[0]),
            delta=vec[1:1 + p].copy(),
            delta1=float(vec[1 + p]),
            deltaD=vec[2 + p:2 + p + h].copy(),
            gamma=vec[2 + p + h:2 + p + h + k].copy(),
            rho0=float(np.tanh(vec[-2])),
            rho1=float(np.tanh(vec[-1])),
        )

    def names(self, covariate_names: Sequence[str] = (), z_names: Sequence[str] = ()) -> list[str]:
        cn = list(covariate_names) or [f"x{j}" for j in range(len(self.delta))]
        zn = list(z_names) or [f"z{j}" for j in range(len(self.gamma))]
        return (
            ["beta0"] + [f"delta[{c}]" for c in cn] + ["delta1"]
            + [f"deltaD[{cn[j]}]" for j in self.het] + [f"gamma[{z}]" for z in zn] + ["rho0", "rho1"]
        )

    def natural_vector(self) -> np.ndarray:
        return np.concatenate([self.outcome_coefs(), self.gamma, [self.rho0, self.rho1]])

    def to_dict(self) -> dict:
        return {
            "beta0": self.beta0,
            "delta": self.delta.tolist(),
            "delta1": self.delta1,
            "deltaD": self.deltaD.tolist(),
            "gamma": self.gamma.tolist(),
            "rho0": self.rho0,
            "rho1": self.rho1,
            "xbar": self.xbar.tolist(),
            "het": list(self.het),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Theta":
        return cls(
            beta0=d["beta0"], delta=np.array(d["delta"]), delta1=d["delta1"],
            deltaD=np.array(d["deltaD"]), gamma=np.array(d["gamma"]), rho0=d["rho0"],
            rho1=d["rho1"], xbar=np.array(d["xbar"]), het=tuple(d.get("het", ())),
        )


@dataclass(frozen=True)
class OutcomeData:
    """Arrays for one cross-sectional fit.  Z is the first-stage design [1, x, Q]."""

    y: np.ndarray
    d: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    xbar: np.ndarray
    het: tuple[int, ...]
    covariate_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()
    block: tuple[int, ...] = ()
    ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)

    def outcome_design(self) -> np.ndarray:
        Xh = self.X[:, list(self.het)] - self.xbar
        return np.column_stack([np.ones(len(self.y)), self.X, self.d, self.d[:, None] * Xh])

    def rows(self) -> joint.JointRows:
        return joint.JointRows(self.outcome_design(), self.Z, self.y.astype(float),
                               self.d.astype(float), row_ids=self.ids)

    def take(self, idx) -> "OutcomeData":
        idx = np.asarray(idx)
        return replace(self, y=self.y[idx], d=self.d[idx], X=self.X[idx], Z=self.Z[idx],
                       ids=None if self.ids is None else self.ids[idx])

    def with_outcome(self, y) -> "OutcomeData":
        return replace(self, y=np.asarray(y, dtype=float))


def _resolve_het(names: Sequence[str], het) -> tuple[int, ...]:
    if het is None:
        return tuple(range(len(names)))
    out = []
    for h in het:
        if isinstance(h, (int, np.integer)):
            out.append(int(h))
        elif h in names:
            out.append(list(names).index(h))
        else:
            raise DataError(f"unknown heterogeneity covariate {h!r}")
    return tuple(out)


def outcome_data(ds: Dataset, y=None, het=None, xbar=None) -> OutcomeData:
    """Model arrays from a dataset; ``y`` defaults to NaN (set later)."""
    des = encode_design(ds)
    if des.Q.shape[1] == 0:
        raise EstimationError("instrument block is empty: a single county gives no variation")
    holes = [c for c, bad in zip(des.covariate_names, np.isnan(des.X).any(axis=0)) if bad]
    if holes:
        raise DataError(f"covariates with missing values (run prep first): {holes}")
    Z = np.hstack([np.ones((len(ds), 1)), des.X, des.Q])
    hidx = _resolve_het(des.covariate_names, het)
    xb = des.X[:, list(hidx)].mean(axis=0) if xbar is None else np.asarray(xbar, dtype=float)
    p = 1 + des.X.shape[1]
    return OutcomeData(
        y=np.full(len(ds), np.nan) if y is None else np.asarray(y, dtype=float),
        d=des.d,
        X=des.X,
        Z=Z,
        xbar=xb,
        het=hidx,
        covariate_names=des.covariate_names,
        z_names=("(Intercept)", *des.covariate_names, *des.instrument_names),
        block=tuple(range(p, Z.shape[1])),
        ids=ds.ids,
    )


# ------------------------------------------------------------------ probabilities


def _indices(theta: Theta, X, d):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m0 = theta.beta0 + X @ theta.delta
    m1 = m0 + theta.delta1 + (X[:, list(theta.het)] - theta.xbar) @ theta.deltaD
    return m0, m1


def _z_from(theta: Theta, X, county) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    county = np.broadcast_to(np.asarray(county, dtype=int), (X.shape[0],))
    n_q = len(theta.gamma) - 1 - X.shape[1]
    Q = np.zeros((X.shape[0], n_q))
    on = county > 0
    Q[np.flatnonzero(on), county[on] - 1] = 1.0
    return np.hstack([np.ones((X.shape[0], 1)), X, Q])


def cond_prob(theta: Theta, x, county, d, order: int = DEFAULT_ORDER):
    """P(Y = 1 | x, county, D = d).

    ``county`` is the instrument column index: 0 for the reference county,
    c >= 1 for the c-th one-hot column.  Vectorized over rows of ``x``.
    """
    scalar = np.ndim(x) == 1
    Z = _z_from(theta, x, county)
    a = Z @ theta.gamma
    m0, m1 = _indices(theta, x, None)
    d = np.broadcast_to(np.asarray(d), a.shape)
    m = np.where(d == 1, m1, m0)
    s = np.where(d == 1, 1.0, -1.0)
    rho = np.where(d == 1, theta.rho1, theta.rho0)
    p = np.exp(log_bvn(m, s * a, s * rho, order) - log_ndtr_derivs(s * a)[0])
    p = np.clip(p, 0.0, 1.0)
    return float(p[0]) if scalar else p


def loglik(theta: Theta, data: OutcomeData, order: int = DEFAULT_ORDER) -> float:
    return joint.evaluate(theta.to_vector(), data.rows(), order)


def loglik_grad(theta: Theta, data: OutcomeData, order: int = DEFAULT_ORDER):
    """(log likelihood, gradient w.r.t. the unconstrained vector ``theta.to_vector()``)."""
    return joint.evaluate(theta.to_vector(), data.rows(), order, level=1)


# ------------------------------------------------------------------ fitting


@dataclass
class OutcomeConfig:
    quadrature_order: int = DEFAULT_ORDER
    het: Sequence | None = None
    gtol: float = 1e-7
    max_iter: int = 200
    relevance_check: bool = True


@dataclass
class OutcomeFit:
    theta: Theta
    xbar: np.ndarray
    loglik: float
    converged: bool
    quadrature_order: int
    cov: np.ndarray  # over the unconstrained vector
    iterations: int = 0
    grad_norm: float = 0.0
    n: int = 0
    names: tuple[str, ...] = ()
    notes: list[str] = field(default_factory=list)

    @property
    def se_vector(self) -> np.ndarray:
        """SEs on the natural scale (delta method for the correlations)."""
        se = np.sqrt(np.clip(np.diag(self.cov), 0.0, None))
        se = se.copy()
        se[-2] *= 1.0 - self.theta.rho0**2
        se[-1] *= 1.0 - self.theta.rho1**2
        return se

    def se(self, name: str) -> float:
        return float(self.se_vector[list(self.names).index(name)])

    def estimate(self, name: str) -> float:
        return float(self.theta.natural_vector()[list(self.names).index(name)])

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.to_dict(),
            "estimates": {n: float(v) for n, v in zip(self.names, self.theta.natural_vector())},
            "se": {n: float(v) for n, v in zip(self.names, self.se_vector)},
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "n": self.n,
            "quadrature_order": self.quadrature_order,
            "notes": list(self.notes),
        }


def naive_probit(data: OutcomeData):
    """Probit of Y on [1, x, D, D*(x - xbar)], ignoring endogeneity."""
    J = data.outcome_design()
    names = ["beta0", *(f"delta[{c}]" for c in data.covariate_names or range(data.X.shape[1])), "delta1",
             *(f"deltaD[{j}]" for j in data.het)]
    return fit_probit(data.y, J, names)


def starting_values(data: OutcomeData, first_stage=None) -> Theta:
    fs = first_stage or fit_probit(data.d, data.Z, data.z_names, block=data.block)
    nv = naive_probit(data)
    p, h = data.X.shape[1], len(data.het)
    b = nv.gamma
    return Theta(
        beta0=float(b[0]), delta=b[1:1 + p], delta1=float(b[1 + p]), deltaD=b[2 + p:2 + p + h],
        gamma=fs.gamma, rho0=0.0, rho1=0.0, xbar=data.xbar, het=data.het,
    )


def maximize(rows: joint.JointRows, start: np.ndarray, order: int, gtol: float, max_iter: int):
    """Trust-region Newton on the exact Hessian; returns (x, value, cov, iters, gnorm, ok)."""
    obj = joint.CachedObjective(rows, order)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize.minimize(
            obj.fun, start, jac=obj.jac, hess=obj.hess, method="trust-exact",
            options={"gtol": gtol, "maxiter": max_iter},
        )
    x = res.x
    value, grad, H = joint.evaluate(x, rows, order, level=2)
    gnorm = float(np.max(np.abs(grad)) / obj.scale)
    try:
        cov = np.linalg.inv(-H)
        ok_cov = np.all(np.diag(cov) > 0)
    except np.linalg.LinAlgError:
        cov = np.full_like(H, np.nan)
        ok_cov = False
    ok = bool(np.isfinite(value) and gnorm < max(gtol, 1e-6) * 10 and ok_cov)
    return x, value, cov, int(res.nit), gnorm, ok


def fit_outcome_model(data: OutcomeData, config: OutcomeConfig | None = None,
                      start: Theta | None = None, first_stage=None) -> OutcomeFit:
    cfg = config or OutcomeConfig()
    if not data.block:
        raise EstimationError("instrument block is empty: a single county gives no variation")
    if np.ptp(data.y) == 0:
        raise EstimationError("outcome is constant; model is not identified")
    notes: list[str] = []
    fs = first_stage
    if start is None or cfg.relevance_check:
        fs = fs or fit_probit(data.d, data.Z, data.z_names, block=data.block)
    if cfg.relevance_check:
        rel = relevance_test(fs)
        if rel.statistic <= RULE_OF_THUMB_F:
            msg = f"weak instrument: relevance F = {rel.statistic:.2f} <= {RULE_OF_THUMB_F:g}"
            warnings.warn(msg, WeakInstrumentWarning, stacklevel=2)
            notes.append(msg)
    theta0 = start if start is not None else starting_values(data, fs)
    # heterogeneity terms are centred on this sample's means
    theta0 = replace(theta0, xbar=data.xbar, het=data.het)
    rows = data.rows()
    x, value, cov, iters, gnorm, ok = maximize(
        rows, theta0.to_vector(), cfg.quadrature_order, cfg.gtol, cfg.max_iter
    )
    theta = theta0.with_vector(x)
    if max(abs(theta.rho0), abs(theta.rho1)) > RHO_BOUNDARY:
        msg = f"correlation estimate near the boundary (rho0={theta.rho0:.4f}, rho1={theta.rho1:.4f})"
        warnings.warn(msg, BoundaryWarning, stacklevel=2)
        notes.append(msg)
    if not ok:
        notes.append("optimizer did not reach the gradient tolerance")
    return OutcomeFit(
        theta=theta, xbar=data.xbar, loglik=float(value), converged=ok,
        quadrature_order=cfg.quadrature_order, cov=cov, iterations=iters, grad_norm=gnorm,
        n=len(data), names=tuple(theta.names(data.covariate_names, data.z_names)), notes=notes,
    )


# ------------------------------------------------------------------ effects


def cate(fit_or_theta, x) -> np.ndarray | float:
    """Phi(m1) - Phi(m0) at covariates ``x`` (a row or a matrix of rows)."""
    theta = fit_or_theta.theta if isinstance(fit_or_theta, OutcomeFit) else fit_or_theta
    scalar = np.ndim(x) == 1
    m0, m1 = _indices(theta, x, None)
    out = ndtr(m1) - ndtr(m0)
    return float(out[0]) if scalar else out


def ate(fit_or_theta, X) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("no rows to average over")
    return float(np.mean(cate(fit_or_theta, X)))


def ate_gradient(theta: Theta, X) -> np.ndarray:
    """d ate / d (unconstrained vector)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m0, m1 = _indices(theta, X, None)
    f0, f1 = stats.norm.pdf(m0), stats.norm.pdf(m1)
    n = X.shape[0]
    Xh = X[:, list(theta.het)] - theta.xbar
    g_b0 = np.mean(f1 - f0)
    g_delta = ((f1 - f0)[:, None] * X).mean(axis=0)
    g_d1 = np.mean(f1)
    g_dD = (f1[:, None] * Xh).mean(axis=0) if n else np.zeros(len(theta.het))
    zeros = np.zeros(len(theta.gamma) + 2)
    return np.concatenate([[g_b0], g_delta, [g_d1], g_dD, zeros])


@dataclass(frozen=True)
class EffectEntry:
    period: int
    estimate: float | None
    se: float | None
    ci_low: float | None
    ci_high: float | None
    n_alive: int
    n_used: int
    variant: str = "primary"
    status: str = "ok"
    relabel: int | None = None

    def to_dict(self) -> dict:
        return {
            "period": self.period, "estimate": self.estimate, "se": self.se,
            "ci_low": self.ci_low, "ci_high": self.ci_high, "n_alive": self.n_alive,
            "n_used": self.n_used, "variant": self.variant, "status": self.status,
            "relabel": self.relabel,
        }


@dataclass(frozen=True)
class EffectSeries:
    outcome: str
    entries: tuple[EffectEntry, ...]
    level: float
    variant: str = "primary"

    def estimates(self) -> np.ndarray:
        return np.array([np.nan if e.estimate is None else e.estimate for e in self.entries])

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "variant": self.variant, "level": self.level,
                "entries": [e.to_dict() for e in self.entries]}

    def to_rows(self) -> list[dict]:
        return [dict(outcome=self.outcome, **e.to_dict()) for e in self.entries]


@dataclass
class EffectsConfig:
    outcome_config: OutcomeConfig = field(default_factory=OutcomeConfig)
    max_periods: int | None = None
    min_events: int = 5
    alpha_overall: float = 0.05
    family_size: int = 3
    xbar_sample: str = "full"  # or "alive"
    warm_start: bool = True


def series_length(ds: Dataset, outcome: str, max_periods: int | None = None) -> int:
    T = ds.n_periods.get(outcome)
    if T is None:
        raise DataError(f"no panel rows for outcome {outcome!r}")
    T = min(T, OUTCOME_CAPS.get(outcome, T))
    if max_periods is not None:
        T = min(T, int(max_periods))
    return T


def period_samples(ds: Dataset, outcome: str, T: int, relabel: int | None = None):
    """Yield (t, row mask, y, n_alive) for each period.

    Mortality uses the cumulative death indicator on everyone whose status at
    the end of t is known.  Morbidity uses patients alive entering t; with
    ``relabel`` the patients dead before t are kept with outcome ``relabel``.
    """
    death = ds.death_period()
    follow = ds.followup_periods()
    if outcome == "dead":
        for t in range(1, T + 1):
            died = (death > 0) & (death <= t)
            known = died | (follow >= t)
            alive = ((death == 0) | (death >= t)) & (follow >= t)
            yield t, known, died.astype(float), int(alive.sum())
        return
    panel = ds.panel_matrix(outcome, T)
    for t in range(1, T + 1):
        alive = ((death == 0) | (death >= t)) & (follow >= t)
        y = panel[:, t - 1].copy()
        use = alive & ~np.isnan(y)
        if relabel is not None:
            gone = (death > 0) & (death < t)
            y[gone] = relabel
            use = use | gone
        yield t, use, y, int(alive.sum())


def period_effects(ds: Dataset, outcome: str, config: EffectsConfig | None = None,
                   relabel: int | None = None, variant: str = "primary",
                   base: OutcomeData | None = None) -> EffectSeries:
    from .inference import bonferroni_level

    cfg = config or EffectsConfig()
    T = series_length(ds, outcome, cfg.max_periods)
    level = bonferroni_level(cfg.alpha_overall, cfg.family_size)
    zcrit = stats.norm.ppf(1 - level / 2)
    full = base or outcome_data(ds, het=cfg.outcome_config.het)
    fs = fit_probit(full.d, full.Z, full.z_names, block=full.block)
    ocfg = replace(cfg.outcome_config, relevance_check=False)
    if cfg.outcome_config.relevance_check:
        rel = relevance_test(fs)
        if rel.statistic <= RULE_OF_THUMB_F:
            warnings.warn(f"weak instrument: relevance F = {rel.statistic:.2f}", WeakInstrumentWarning,
                          stacklevel=2)
    entries = []
    prev: Theta | None = None
    for t, use, y, n_alive in period_samples(ds, outcome, T, relabel):
        idx = np.flatnonzero(use)
        sub = full.take(idx).with_outcome(y[idx])
        if cfg.xbar_sample == "alive":
            sub = replace(sub, xbar=sub.X[:, list(sub.het)].mean(axis=0))
        yy, dd = sub.y, sub.d
        ev1 = int(((yy == 1) & (dd == 1)).sum())
        ev0 = int(((yy == 1) & (dd == 0)).sum())
        status = "ok"
        if len(idx) == 0 or np.ptp(yy) == 0:
            status = "degenerate"
        elif min(ev1, ev0) < cfg.min_events:
            status = "unstable"
        if status != "ok":
            entries.append(EffectEntry(t, None, None, None, None, n_alive, len(idx), variant, status, relabel))
            continue
        start = prev if (cfg.warm_start and prev is not None) else None
        try:
            fit = fit_outcome_model(sub, ocfg, start=start, first_stage=fs if start is None else None)
        except (EstimationError, joint.LikelihoodError, np.linalg.LinAlgError) as exc:
            log.warning("period %d fit failed: %s", t, exc)
            entries.append(EffectEntry(t, None, None, None, None, n_alive, len(idx), variant, "failed", relabel))
            continue
        if not fit.converged and start is not None:
            fit = fit_outcome_model(sub, ocfg, first_stage=fs)
        if not fit.converged:
            entries.append(EffectEntry(t, None, None, None, None, n_alive, len(idx), variant, "failed", relabel))
            continue
        prev = fit.theta
        est = ate(fit, sub.X)
        g = ate_gradient(fit.theta, sub.X)
        se = float(np.sqrt(max(g @ fit.cov @ g, 0.0)))
        entries.append(EffectEntry(t, est, se, est - zcrit * se, est + zcrit * se, n_alive, len(idx),
                                   variant, "ok", relabel))
    return EffectSeries(outcome, tuple(entries), level, variant)


def mortality_difference(ds: Dataset) -> float:
    """Share dead by end of follow-up, AA minus ENZ."""
    died = ds.death_period() > 0
    d = ds.d
    return float(died[d == 1].mean() - died[d == 0].mean())


def bound_effects(ds: Dataset, outcome: str, label: int, config: EffectsConfig | None = None,
                  base: OutcomeData | None = None) -> EffectSeries:
    """Morbidity series with dead patients relabelled as ``label`` after death.

    The variant name is on the scale of the estimate (AA minus ENZ morbidity):
    when ENZ mortality is higher, labelling the dead as morbid lowers the
    estimate, so label 1 is the lower bound, and vice versa.
    """
    if outcome == "dead":
        raise ValueError("bounds apply to morbidity outcomes only")
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    enz_higher = mortality_difference(ds) < 0
    if label == 1:
        variant = "lower_bound" if enz_higher else "upper_bound"
    else:
        variant = "upper_bound" if enz_higher else "lower_bound"
    return period_effects(ds, outcome, config, relabel=label, variant=variant, base=base)


def effect_report(data: OutcomeData, config: OutcomeConfig | None = None, start: Theta | None = None) -> dict:
    """Fit the model and summarize the average effect.

    The main analysis and the placebo regressions both go through here, so
    their reports share one schema.
    """
    fit = fit_outcome_model(data, config, start=start)
    est = ate(fit, data.X)
    g = ate_gradient(fit.theta, data.X)
    se = float(np.sqrt(max(g @ fit.cov @ g, 0.0)))
    return {
        "ate": est,
        "ate_se": se,
        "delta1": fit.theta.delta1,
        "delta1_se": fit.se("delta1"),
        "n": fit.n,
        "events_treated": int(((data.y == 1) & (data.d == 1)).sum()),
        "events_control": int(((data.y == 1) & (data.d == 0)).sum()),
        "fit": fit.to_dict(),
    }

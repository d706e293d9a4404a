"""Discrete-time IV survival model.

Each period t < T has its own baseline beta_t; covariate, treatment and
correlation parameters are shared across periods.  The per-period death
probability has the same form as the cross-sectional outcome model with the
intercept replaced by beta_t.  Periods in which nobody dies get beta_t = -inf
(hazard 0) instead of an unidentified free parameter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import joint
from .data import Dataset, DataError
from .first_stage import EstimationError, fit_probit
from .outcome import Theta, cond_prob, maximize, outcome_data
from .quadrature import DEFAULT_ORDER, log_bvn, log_ndtr_derivs

log = logging.getLogger(__name__)


@dataclass
class SurvivalTheta:
    xi: np.ndarray  # beta_1 .. beta_{T-1}; -inf marks a period without deaths
    delta: np.ndarray
    delta1: float
    deltaD: np.ndarray
    gamma: np.ndarray
    rho0: float
    rho1: float
    xbar: np.ndarray
    het: tuple[int, ...] = ()

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)
        self.deltaD = np.asarray(self.deltaD, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.xbar = np.asarray(self.xbar, dtype=float)
        if not self.het:
            self.het = tuple(range(len(self.deltaD)))
        if not (abs(self.rho0) < 1 and abs(self.rho1) < 1):
            raise ValueError("correlations must lie strictly inside (-1, 1)")

    @property
    def n_periods(self) -> int:
        """T, one more than the number of baselines."""
        return len(self.xi) + 1

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.xi))

    def period_theta(self, t: int) -> Theta:
        """Cross-sectional parameter bundle for period ``t`` (1-based)."""
        if not 1 <= t <= len(self.xi):
            raise ValueError(f"period {t} outside 1..{len(self.xi)}")
        return Theta(float(self.xi[t - 1]), self.delta, self.delta1, self.deltaD, self.gamma,
                     self.rho0, self.rho1, self.xbar, self.het)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.xi[self.free], self.delta, [self.delta1], self.deltaD, self.gamma,
                               [np.arctanh(self.rho0), np.arctanh(self.rho1)]])

    def with_vector(self, vec) -> "SurvivalTheta":
        vec = np.asarray(vec, dtype=float)
        f, p, h, k = len(self.free), len(self.delta), len(self.deltaD), len(self.gamma)
        xi = self.xi.copy()
        xi[self.free] = vec[:f]
        o = f
        return replace(
            self, xi=xi, delta=vec[o:o + p].copy(), delta1=float(vec[o + p]),
            deltaD=vec[o + p + 1:o + p + 1 + h].copy(), gamma=vec[o + p + 1 + h:o + p + 1 + h + k].copy(),
            rho0=float(np.tanh(vec[-2])), rho1=float(np.tanh(vec[-1])),
        )

    def names(self, covariate_names: Sequence[str] = (), z_names: Sequence[str] = ()) -> list[str]:
        cn = list(covariate_names) or [f"x{j}" for j in range(len(self.delta))]
        zn = list(z_names) or [f"z{j}" for j in range(len(self.gamma))]
        return ([f"xi[{t + 1}]" for t in self.free] + [f"delta[{c}]" for c in cn] + ["delta1"]
                + [f"deltaD[{cn[j]}]" for j in self.het] + [f"gamma[{z}]" for z in zn] + ["rho0", "rho1"])

    def natural_vector(self) -> np.ndarray:
        v = self.to_vector()
        v[-2:] = [self.rho0, self.rho1]
        return v

    def to_dict(self) -> dict:
        return {
            "xi": [None if not np.isfinite(v) else float(v) for v in self.xi],
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
    def from_dict(cls, d: dict) -> "SurvivalTheta":
        xi = np.array([-np.inf if v is None else v for v in d["xi"]], dtype=float)
        return cls(xi, np.array(d["delta"]), d["delta1"], np.array(d["deltaD"]), np.array(d["gamma"]),
                   d["rho0"], d["rho1"], np.array(d["xbar"]), tuple(d.get("het", ())))


def hazard_prob(theta: SurvivalTheta, x, county, d, t: int, order: int = DEFAULT_ORDER):
    """P(death in period t | alive entering t, x, county, D = d)."""
    if not 1 <= t <= len(theta.xi):
        raise ValueError(f"period {t} outside 1..{len(theta.xi)}")
    if not np.isfinite(theta.xi[t - 1]):
        return 0.0 if np.ndim(x) == 1 else np.zeros(np.atleast_2d(x).shape[0])
    return cond_prob(theta.period_theta(t), x, county, d, order)


# ------------------------------------------------------------------ likelihood


@dataclass
class SurvivalConfig:
    quadrature_order: int = DEFAULT_ORDER
    het: Sequence | None = None
    n_periods: int | None = None  # T; default: longest mortality panel
    # "patient": treatment probability counted once per patient;
    # "period": once per patient-period, as the pooled product is written
    treatment_weight: str = "patient"
    gtol: float = 1e-7
    max_iter: int = 300


@dataclass
class SurvivalFit:
    theta: SurvivalTheta
    loglik: float
    converged: bool
    cov: np.ndarray
    names: tuple[str, ...]
    n_patients: int
    n_rows: int
    iterations: int = 0
    grad_norm: float = 0.0
    notes: list[str] = field(default_factory=list)
    quadrature_order: int = DEFAULT_ORDER

    @property
    def se_vector(self) -> np.ndarray:
        se = np.sqrt(np.clip(np.diag(self.cov), 0.0, None)).copy()
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
            "n_patients": self.n_patients,
            "n_rows": self.n_rows,
            "quadrature_order": self.quadrature_order,
            "notes": list(self.notes),
        }


@dataclass(frozen=True)
class SurvivalData:
    """Patient-period rows plus what is needed to rebuild them for curves."""

    rows: joint.JointRows
    patient: np.ndarray  # patient index per row
    period: np.ndarray  # 1-based period per row
    free_periods: np.ndarray  # 1-based periods with a free baseline
    T: int
    base: object  # OutcomeData for the patients


def exposure(ds: Dataset, T: int) -> tuple[np.ndarray, np.ndarray]:
    """(death period or 0, number of modelled periods T_i capped at T - 1)."""
    death = ds.death_period()
    follow = ds.followup_periods()
    last = np.where(death > 0, death, follow)
    return death, np.minimum(last, T - 1)


def survival_rows(ds: Dataset, config: SurvivalConfig | None = None) -> SurvivalData:
    cfg = config or SurvivalConfig()
    if cfg.treatment_weight not in ("patient", "period"):
        raise ValueError(f"unknown treatment_weight {cfg.treatment_weight!r}")
    T = cfg.n_periods or ds.n_periods.get("dead")
    if not T:
        raise DataError("survival model needs a mortality panel")
    if T < 2:
        raise DataError("survival model needs at least two periods (T - 1 baselines)")
    base = outcome_data(ds, het=cfg.het)
    death, Ti = exposure(ds, T)
    n = len(ds)
    patient = np.repeat(np.arange(n), Ti)
    period = np.concatenate([np.arange(1, k + 1) for k in Ti]) if n else np.empty(0, dtype=int)
    y = (death[patient] == period).astype(float)
    deaths = np.bincount(period[y == 1], minlength=T)[1:T]
    free = np.flatnonzero(deaths > 0) + 1
    if not len(free):
        raise EstimationError("no deaths in any modelled period")
    keep = np.isin(period, free)
    dropped_p = patient[~keep]
    patient, period, y = patient[keep], period[keep], y[keep]

    col = {t: j for j, t in enumerate(free)}
    E = np.zeros((len(period), len(free)))
    E[np.arange(len(period)), [col[t] for t in period]] = 1.0
    X, d = base.X[patient], base.d[patient]
    Xh = X[:, list(base.het)] - base.xbar
    J = np.column_stack([E, X, d, d[:, None] * Xh])
    Z = base.Z[patient]

    if cfg.treatment_weight == "patient":
        first = np.r_[True, patient[1:] != patient[:-1]] if len(patient) else np.zeros(0, bool)
        conditional = ~first
        extra = np.setdiff1d(np.arange(n), patient)
    else:
        conditional = np.zeros(len(patient), dtype=bool)
        extra = dropped_p
    rows = joint.JointRows(
        J, Z, y, d.astype(float), conditional=conditional,
        row_ids=np.array([f"{ds.ids[i]}@{t}" for i, t in zip(patient, period)]),
        extra_Z=base.Z[extra], extra_d=base.d[extra].astype(float),
    )
    return SurvivalData(rows, patient, period, free, int(T), base)


def _theta_template(sd: SurvivalData, T: int) -> SurvivalTheta:
    b = sd.base
    xi = np.full(T - 1, -np.inf)
    xi[sd.free_periods - 1] = 0.0
    p, h = b.X.shape[1], len(b.het)
    return SurvivalTheta(xi, np.zeros(p), 0.0, np.zeros(h), np.zeros(b.Z.shape[1]), 0.0, 0.0, b.xbar, b.het)


def survival_loglik(theta: SurvivalTheta, ds: Dataset, config: SurvivalConfig | None = None) -> float:
    cfg = config or SurvivalConfig()
    sd = survival_rows(ds, replace(cfg, n_periods=theta.n_periods))
    if not np.array_equal(np.flatnonzero(np.isfinite(theta.xi)) + 1, sd.free_periods):
        raise ValueError("theta's free baselines do not match the periods with deaths")
    return joint.evaluate(theta.to_vector(), sd.rows, cfg.quadrature_order)


def fit_survival(ds: Dataset, config: SurvivalConfig | None = None,
                 start: SurvivalTheta | None = None) -> SurvivalFit:
    cfg = config or SurvivalConfig()
    sd = survival_rows(ds, cfg)
    T = sd.T
    notes = []
    empty = sorted(set(range(1, T)) - set(sd.free_periods.tolist()))
    if empty:
        msg = f"periods without deaths fixed at zero hazard: {empty}"
        log.info(msg)
        notes.append(msg)
    b = sd.base
    if start is None:
        fs = fit_probit(b.d, b.Z, b.z_names, block=b.block)
        pooled = fit_probit(sd.rows.y, sd.rows.J)
        start = _theta_template(sd, T).with_vector(
            np.concatenate([pooled.gamma, fs.gamma, [0.0, 0.0]])
        )
    x, value, cov, iters, gnorm, ok = maximize(sd.rows, start.to_vector(), cfg.quadrature_order,
                                               cfg.gtol, cfg.max_iter)
    theta = start.with_vector(x)
    if not ok:
        notes.append("optimizer did not reach the gradient tolerance")
    return SurvivalFit(
        theta=theta, loglik=float(value), converged=ok, cov=cov,
        names=tuple(theta.names(b.covariate_names, b.z_names)), n_patients=len(ds),
        n_rows=len(sd.rows.y), iterations=iters, grad_norm=gnorm, notes=notes,
        quadrature_order=cfg.quadrature_order,
    )


# ------------------------------------------------------------------ curves


@dataclass(frozen=True)
class SurvivalCurves:
    s1: np.ndarray  # AA
    s0: np.ndarray  # ENZ
    risk_set_sizes: np.ndarray  # (periods, 2): columns n_1t, n_0t
    notes: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.s1)

    def to_dict(self) -> dict:
        return {
            "period": list(range(1, len(self) + 1)),
            "s1": self.s1.tolist(),
            "s0": self.s0.tolist(),
            "n1": self.risk_set_sizes[:, 0].astype(int).tolist(),
            "n0": self.risk_set_sizes[:, 1].astype(int).tolist(),
            "notes": list(self.notes),
        }

    def to_rows(self) -> list[dict]:
        return [{"t": t + 1, "s1": float(a), "s0": float(b)} for t, (a, b) in enumerate(zip(self.s1, self.s0))]


def hazard_matrix(theta: SurvivalTheta, X, Z, d, order: int = DEFAULT_ORDER) -> np.ndarray:
    """(n, T - 1) hazards of each patient under their own treatment."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = np.asarray(d, dtype=float)
    a = np.atleast_2d(np.asarray(Z, dtype=float)) @ theta.gamma
    s = 2.0 * d - 1.0
    rho = np.where(d == 1, theta.rho1, theta.rho0)
    shift = X @ theta.delta + d * (theta.delta1 + (X[:, list(theta.het)] - theta.xbar) @ theta.deltaD)
    denom = log_ndtr_derivs(s * a)[0]
    P = np.zeros((X.shape[0], len(theta.xi)))
    for t in range(len(theta.xi)):
        if np.isfinite(theta.xi[t]):
            P[:, t] = np.clip(np.exp(log_bvn(theta.xi[t] + shift, s * a, s * rho, order) - denom), 0.0, 1.0)
    return P


def curves_from_hazards(P: np.ndarray, d, at_risk: np.ndarray) -> SurvivalCurves:
    """Risk-set averages of cumulative survival products.

    ``at_risk[i, t-1]`` marks patient i alive and followed entering period t.
    """
    d = np.asarray(d)
    S = np.cumprod(1.0 - P, axis=1)
    s1, s0, sizes, notes = [], [], [], []
    for t in range(P.shape[1]):
        r1 = at_risk[:, t] & (d == 1)
        r0 = at_risk[:, t] & (d == 0)
        if not r1.any() or not r0.any():
            notes.append(f"empty risk set at period {t + 1}; curves truncated at {t}")
            break
        s1.append(S[r1, t].mean())
        s0.append(S[r0, t].mean())
        sizes.append((r1.sum(), r0.sum()))
    return SurvivalCurves(np.array(s1), np.array(s0), np.array(sizes, dtype=int).reshape(-1, 2), tuple(notes))


def survival_curves(fit: SurvivalFit | SurvivalTheta, ds: Dataset, config: SurvivalConfig | None = None,
                    order: int | None = None) -> SurvivalCurves:
    theta = fit.theta if isinstance(fit, SurvivalFit) else fit
    if isinstance(fit, SurvivalFit) and not fit.converged:
        log.warning("survival curves from a non-converged fit")
    cfg = config or SurvivalConfig()
    order = order or (fit.quadrature_order if isinstance(fit, SurvivalFit) else cfg.quadrature_order)
    base = outcome_data(ds, het=theta.het, xbar=theta.xbar)
    T = theta.n_periods
    death, _ = exposure(ds, T)
    follow = ds.followup_periods()
    t = np.arange(1, T)
    at_risk = ((death[:, None] == 0) | (death[:, None] >= t)) & (follow[:, None] >= t)
    P = hazard_matrix(theta, base.X, base.Z, base.d, order)
    out = curves_from_hazards(P, base.d, at_risk)
    for note in out.notes:
        log.warning(note)
    return out


def overall_effect(curves: SurvivalCurves, T_bar: int | None = None) -> float:
    """Sum over t <= T_bar of S(AA, t) - S(ENZ, t), in periods."""
    if len(curves.s1) != len(curves.s0):
        raise ValueError("curve lengths differ")
    T_bar = len(curves.s1) if T_bar is None else int(T_bar)
    if not 0 <= T_bar <= len(curves.s1):
        raise ValueError(f"T_bar={T_bar} exceeds the {len(curves.s1)} available periods")
    return float(np.sum(curves.s1[:T_bar] - curves.s0[:T_bar]))

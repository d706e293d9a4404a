"""Treatment-assignment probit with a categorical instrument block.

Relevance of the instrument block and the exclusion-restriction sensitivity
check are both joint Wald tests on the county coefficients, reported on the
F scale (W / q with reference F(q, n - k)).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats
from scipy.special import log_ndtr

from .data import DataError, Dataset, encode_design, significance_stars
from .inference import bonferroni_level
from .quadrature import log_ndtr_derivs

log = logging.getLogger(__name__)

RULE_OF_THUMB_F = 10.0


class SeparationError(RuntimeError):
    """Perfect or quasi-complete separation in a probit design."""

    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"separation detected on column(s): {', '.join(self.columns)}")


class EstimationError(RuntimeError):
    pass


@dataclass
class ProbitFit:
    gamma: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    loglik: float
    n: int
    converged: bool
    iterations: int
    names: tuple[str, ...] = ()
    grad_norm: float = 0.0
    firth: bool = False
    block: tuple[int, ...] = ()
    _y: np.ndarray | None = field(default=None, repr=False)
    _Z: np.ndarray | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return len(self.gamma)

    def index(self, Z: np.ndarray) -> np.ndarray:
        return Z @ self.gamma

    def coefficient_table(self) -> list[dict]:
        z = np.divide(self.gamma, self.se, out=np.zeros_like(self.gamma), where=self.se > 0)
        p = 2 * stats.norm.sf(np.abs(z))
        names = self.names or tuple(f"z{j}" for j in range(self.k))
        return [
            {
                "name": nm,
                "coef": float(c),
                "se": float(s),
                "p_value": float(pv),
                "stars": significance_stars(pv),
                "display": f"{c:.3f}{significance_stars(pv)} ({s:.3f})",
            }
            for nm, c, s, pv in zip(names, self.gamma, self.se, p)
        ]


@dataclass(frozen=True)
class JointTestResult:
    statistic: float
    df1: int
    df2: int
    p_value: float
    block: str
    method: str = "wald"

    @property
    def passes_rule_of_thumb(self) -> bool:
        return self.statistic > RULE_OF_THUMB_F

    def to_dict(self) -> dict:
        return {
            "block": self.block,
            "method": self.method,
            "statistic": self.statistic,
            "df1": self.df1,
            "df2": self.df2,
            "p_value": self.p_value,
            "rule_of_thumb_f_gt_10": self.passes_rule_of_thumb,
        }


# ------------------------------------------------------------------ likelihood


def probit_loglik(gamma: np.ndarray, y: np.ndarray, Z: np.ndarray) -> float:
    """Bernoulli-probit log likelihood."""
    q = 2.0 * np.asarray(y, dtype=float) - 1.0
    return float(log_ndtr(q * (Z @ gamma)).sum())


def _probit_parts(gamma, y, Z, hessian=False):
    q = 2.0 * y - 1.0
    val, d1, d2 = log_ndtr_derivs(q * (Z @ gamma))
    grad = Z.T @ (q * d1)
    H = (Z * d2[:, None]).T @ Z if hessian else None
    return val.sum(), grad, H


def _firth_parts(gamma, Z):
    """Jeffreys penalty 0.5 log|I(gamma)| and its gradient."""
    eta = Z @ gamma
    lp = -0.5 * eta**2 - 0.5 * np.log(2 * np.pi)
    lP, lQ = log_ndtr(eta), log_ndtr(-eta)
    w = np.exp(2 * lp - lP - lQ)
    info = (Z * w[:, None]).T @ Z
    sign, logdet = np.linalg.slogdet(info)
    if sign <= 0:
        return -np.inf, np.zeros_like(gamma)
    hat = w * np.einsum("ij,jk,ik->i", Z, np.linalg.inv(info), Z)
    dlogw = -2 * eta - np.exp(lp - lP) + np.exp(lp - lQ)
    return 0.5 * logdet, Z.T @ (0.5 * hat * dlogw)


def _indicator_separation(y, Z, names) -> list[str]:
    bad = []
    for j in range(Z.shape[1]):
        col = Z[:, j]
        if not np.all((col == 0) | (col == 1)) or col.all():
            continue
        on = col == 1
        if on.any() and np.ptp(y[on]) == 0:
            bad.append(names[j])
    return bad


def fit_probit(
    y,
    Z,
    names: Sequence[str] = (),
    firth: bool = False,
    start: np.ndarray | None = None,
    gtol: float = 1e-6,
    max_iter: int = 1000,
    block: Sequence[int] = (),
) -> ProbitFit:
    """Probit ML by BFGS with analytic gradient, Newton-polished at the end.

    Standard errors come from the observed information at the optimum.
    """
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, k = Z.shape
    names = tuple(names) or tuple(f"z{j}" for j in range(k))
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("outcome must be binary 0/1")
    if np.ptp(y) == 0:
        raise EstimationError("outcome is constant; probit is not identified")
    if np.linalg.matrix_rank(Z) < k:
        raise EstimationError("design matrix is rank deficient")
    if not firth:
        sep = _indicator_separation(y, Z, names)
        if sep:
            raise SeparationError(sep)

    def objective(g):
        val, grad, _ = _probit_parts(g, y, Z)
        if firth:
            pen, pgrad = _firth_parts(g, Z)
            val, grad = val + pen, grad + pgrad
        return -val / n, -grad / n

    g0 = np.zeros(k) if start is None else np.asarray(start, dtype=float)
    res = optimize.minimize(
        objective, g0, jac=True, method="BFGS", options={"gtol": gtol * 1e-2, "maxiter": max_iter}
    )
    g = res.x
    iters = int(res.nit)
    if not firth:
        # concave: a few Newton steps bring the gradient to machine level
        for _ in range(20):
            val, grad, H = _probit_parts(g, y, Z, hessian=True)
            try:
                step = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                break
            t = 1.0
            while t > 1e-8 and probit_loglik(g - t * step, y, Z) < val - 1e-12 * abs(val):
                t /= 2
            g = g - t * step
            iters += 1
            if np.max(np.abs(t * step)) < 1e-9:
                break
    val, grad, H = _probit_parts(g, y, Z, hessian=True)
    if firth:
        pen, pgrad = _firth_parts(g, Z)
        grad = grad + pgrad
    scale = max(1.0, abs(val) / n)
    grad_norm = float(np.max(np.abs(grad)) / n / scale)
    converged = grad_norm < gtol
    if not firth:
        big = np.flatnonzero(np.abs(g) > 10)
        if big.size:
            # not getting worse along the diverging direction means separation
            # (a perfect fit leaves the likelihood flat at zero)
            push = g.copy()
            push[big] *= 1.5
            if probit_loglik(push, y, Z) >= val:
                raise SeparationError([names[j] for j in big])
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("observed information is singular") from exc
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if not converged:
        log.warning("probit did not converge (scaled gradient %.2e)", grad_norm)
    return ProbitFit(
        gamma=g, se=se, cov=cov, loglik=float(val), n=n, converged=converged,
        iterations=iters, names=names, grad_norm=grad_norm, firth=firth,
        block=tuple(block), _y=y, _Z=Z,
    )


# ------------------------------------------------------------------ tests


def wald_f(coef: np.ndarray, cov: np.ndarray, df2: int, label: str = "block") -> JointTestResult:
    coef = np.asarray(coef, dtype=float)
    q = len(coef)
    if q == 0:
        raise ValueError("empty coefficient block")
    try:
        W = float(coef @ np.linalg.solve(cov, coef))
    except np.linalg.LinAlgError as exc:
        raise EstimationError("block covariance is singular") from exc
    F = max(W, 0.0) / q
    return JointTestResult(F, q, int(df2), float(stats.f.sf(F, q, df2)), label, "wald")


def relevance_test(fit: ProbitFit, block: Sequence[int] | None = None, method: str = "wald",
                   label: str = "county") -> JointTestResult:
    """Joint test that the instrument coefficients are zero.

    ``method="lr"`` uses 2*(l_full - l_restricted)/q on the same F reference;
    it refits the restricted model and needs the fit's stored data.
    """
    block = list(fit.block if block is None else block)
    if not block:
        raise ValueError("instrument block is empty")
    if not fit.converged:
        log.warning("relevance test on a non-converged fit")
    df2 = fit.n - fit.k
    if method == "wald":
        return wald_f(fit.gamma[block], fit.cov[np.ix_(block, block)], df2, label)
    if method == "lr":
        if fit._y is None or fit._Z is None:
            raise ValueError("LR test needs the data stored on the fit")
        keep = [j for j in range(fit.k) if j not in set(block)]
        restricted = fit_probit(fit._y, fit._Z[:, keep], [fit.names[j] for j in keep])
        q = len(block)
        F = max(2.0 * (fit.loglik - restricted.loglik), 0.0) / q
        return JointTestResult(F, q, df2, float(stats.f.sf(F, q, df2)), label, "lr")
    raise ValueError(f"unknown method {method!r}")


def first_stage_design(ds: Dataset):
    """(Z, names, instrument block indices) with Z = [1, X, Q]."""
    des = encode_design(ds)
    holes = [c for c, bad in zip(des.covariate_names, np.isnan(des.X).any(axis=0)) if bad]
    if holes:
        raise DataError(f"covariates with missing values (run prep first): {holes}")
    Z = np.hstack([np.ones((len(ds), 1)), des.X, des.Q])
    names = ("(Intercept)", *des.covariate_names, *des.instrument_names)
    p = 1 + des.X.shape[1]
    return Z, names, tuple(range(p, p + des.Q.shape[1]))


def fit_first_stage(ds: Dataset, firth: bool = False) -> ProbitFit:
    Z, names, block = first_stage_design(ds)
    if not block:
        raise EstimationError("instrument block is empty: a single county gives no variation")
    return fit_probit(ds.d, Z, names, firth=firth, block=block)


def exclusion_sensitivity(ds: Dataset, outcome: str, firth: bool = False,
                          method: str = "wald") -> JointTestResult:
    """Probit of a pre-treatment outcome on (X, Q); joint test of the county block."""
    Z, names, block = first_stage_design(ds)
    if not block:
        raise EstimationError("instrument block is empty: a single county gives no variation")
    fit = fit_probit(ds.column(outcome).astype(float), Z, names, firth=firth, block=block)
    return relevance_test(fit, method=method, label=outcome)


@dataclass(frozen=True)
class SensitivityVerdict:
    tests: tuple[JointTestResult, ...]
    level: float
    rejected: bool

    @property
    def verdict(self) -> str:
        return "validity rejected" if self.rejected else "validity not rejected"

    def to_dict(self) -> dict:
        return {
            "tests": [t.to_dict() for t in self.tests],
            "single_test_level": self.level,
            "verdict": self.verdict,
        }


def sensitivity_verdict(tests: Sequence[JointTestResult], alpha_overall: float = 0.05) -> SensitivityVerdict:
    """Bonferroni over the pre-treatment outcomes: reject if any p < alpha/m."""
    tests = tuple(tests)
    level = bonferroni_level(alpha_overall, len(tests))
    return SensitivityVerdict(tests, level, any(t.p_value < level for t in tests))

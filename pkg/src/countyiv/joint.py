"""Likelihood engine shared by the cross-sectional and survival IV models.

Each row i carries an outcome index m_i = J_i'b, a treatment index a_i = z_i'g,
the treatment d_i and a binary outcome y_i.  With q = 2y - 1 and s = 2d - 1
the joint probability of (y_i, d_i) is Phi2(q m, s a; q s rho_d).  Rows
flagged ``conditional`` contribute only P(y | d, z), i.e. the joint term minus
log Phi(s a); the survival model uses this for every period after a
patient's first.

The parameter vector is [b, g, atanh(rho0), atanh(rho1)].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quadrature import DEFAULT_ORDER, log_bvn_derivs, log_ndtr_derivs


class LikelihoodError(FloatingPointError):
    pass


@dataclass(frozen=True)
class JointRows:
    J: np.ndarray  # (rows, nb) outcome-index design
    Z: np.ndarray  # (rows, ng) treatment-index design
    y: np.ndarray
    d: np.ndarray
    conditional: np.ndarray | None = None  # bool per row
    row_ids: np.ndarray | None = None  # labels used in error messages
    # patients with no rows still contribute their treatment probability
    extra_Z: np.ndarray | None = None
    extra_d: np.ndarray | None = None

    @property
    def nb(self) -> int:
        return self.J.shape[1]

    @property
    def ng(self) -> int:
        return self.Z.shape[1]

    @property
    def size(self) -> int:
        return self.nb + self.ng + 2


def _split(vec, rows: JointRows):
    b = vec[: rows.nb]
    g = vec[rows.nb: rows.nb + rows.ng]
    rho = np.tanh(vec[-2:])
    if np.any(np.abs(rho) >= 1.0):  # tanh saturates near |atanh rho| ~ 19
        raise LikelihoodError("correlation rounds to +-1")
    return b, g, rho


def evaluate(vec: np.ndarray, rows: JointRows, order: int = DEFAULT_ORDER, level: int = 0):
    """Log likelihood; with ``level`` 1 also the gradient, with 2 the Hessian."""
    vec = np.asarray(vec, dtype=float)
    b, g, rho = _split(vec, rows)
    y = rows.y
    d = rows.d
    q = 2.0 * y - 1.0
    s = 2.0 * d - 1.0
    m = rows.J @ b
    a = rows.Z @ g
    rho_row = np.where(d == 1, rho[1], rho[0])
    h, k, r = q * m, s * a, q * s * rho_row
    D = log_bvn_derivs(h, k, r, order=order, second=level >= 2)
    terms = D.value.copy()
    cond = rows.conditional
    if cond is not None and cond.any():
        lk, l1, l2 = log_ndtr_derivs(k)
        terms = np.where(cond, terms - lk, terms)
    if not np.all(np.isfinite(terms)):
        i = int(np.flatnonzero(~np.isfinite(terms))[0])
        label = rows.row_ids[i] if rows.row_ids is not None else i
        raise LikelihoodError(f"non-finite likelihood term at row {label}")
    value = float(np.sum(terms))
    ex_parts = None
    if rows.extra_Z is not None and len(rows.extra_Z):
        ex_s = 2.0 * rows.extra_d - 1.0
        ev, e1, e2 = log_ndtr_derivs(ex_s * (rows.extra_Z @ g))
        value += float(ev.sum())
        ex_parts = (ex_s, e1, e2)
    if level == 0:
        return value

    dm = q * D.h
    da = s * D.k
    if cond is not None and cond.any():
        da = np.where(cond, da - s * l1, da)
    jac_rho = (1.0 - rho**2)  # d rho / d atanh(rho)
    drho = q * s * D.r
    grad = np.empty(rows.size)
    grad[: rows.nb] = rows.J.T @ dm
    grad[rows.nb: rows.nb + rows.ng] = rows.Z.T @ da
    on1 = d == 1
    grad[-2] = drho[~on1].sum() * jac_rho[0]
    grad[-1] = drho[on1].sum() * jac_rho[1]
    if ex_parts is not None:
        ex_s, e1, _ = ex_parts
        grad[rows.nb: rows.nb + rows.ng] += rows.extra_Z.T @ (ex_s * e1)
    if level == 1:
        return value, grad

    # q^2 = s^2 = 1 simplifies the chain rule
    dmm = D.hh
    daa = D.kk
    if cond is not None and cond.any():
        daa = np.where(cond, daa - l2, daa)
    dma = q * s * D.hk
    dmr = s * D.hr  # q * (q s)
    dar = q * D.kr  # s * (q s)
    drr = D.rr
    nb, ng = rows.nb, rows.ng
    H = np.zeros((rows.size, rows.size))
    J, Z = rows.J, rows.Z
    H[:nb, :nb] = (J * dmm[:, None]).T @ J
    H[nb:nb + ng, nb:nb + ng] = (Z * daa[:, None]).T @ Z
    H[:nb, nb:nb + ng] = (J * dma[:, None]).T @ Z
    H[nb:nb + ng, :nb] = H[:nb, nb:nb + ng].T
    for j, sel in ((0, ~on1), (1, on1)):
        col = -2 + j
        w = jac_rho[j]
        H[:nb, col] = J[sel].T @ dmr[sel] * w
        H[nb:nb + ng, col] = Z[sel].T @ dar[sel] * w
        H[col, :nb] = H[:nb, col]
        H[col, nb:nb + ng] = H[nb:nb + ng, col]
        H[col, col] = drr[sel].sum() * w * w + drho[sel].sum() * (-2.0 * rho[j] * w)
    if ex_parts is not None:
        _, _, e2 = ex_parts
        H[nb:nb + ng, nb:nb + ng] += (rows.extra_Z * e2[:, None]).T @ rows.extra_Z
    return value, grad, H


class CachedObjective:
    """Negative mean log likelihood with value/gradient/Hessian shared per point."""

    def __init__(self, rows: JointRows, order: int = DEFAULT_ORDER, scale: float | None = None):
        self.rows = rows
        self.order = order
        self.scale = float(scale if scale is not None else max(len(rows.y), 1))
        self._x = None
        self._out = None
        self.evaluations = 0

    def _eval(self, x):
        if self._x is None or not np.array_equal(x, self._x):
            try:
                v, g, H = evaluate(x, self.rows, self.order, level=2)
            except LikelihoodError:
                n = self.rows.size
                v, g, H = -np.inf, np.zeros(n), -np.eye(n)
            self._x = np.array(x, copy=True)
            self._out = (-v / self.scale, -g / self.scale, -H / self.scale)
            self.evaluations += 1
        return self._out

    def fun(self, x):
        return self._eval(x)[0]

    def jac(self, x):
        return self._eval(x)[1]

    def hess(self, x):
        return self._eval(x)[2]

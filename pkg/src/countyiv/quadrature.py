"""Truncated-normal quadrature for the endogenous-treatment probit.

Everything in the outcome and survival likelihoods reduces to the
bivariate standard normal orthant probability

    Phi2(h, k; r) = int_{-k}^{inf} Phi((h + r*e) / sqrt(1 - r^2)) phi(e) de,

i.e. P(Y* > 0, D* > 0) for one treatment regime after sign flips.  The value
is computed with fixed-order Gauss-Legendre on the truncated domain of ``e``;
derivatives use the closed forms for Phi2, which are exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import log_ndtr, ndtr

DEFAULT_ORDER = 64

# Truncation at 40 log-units below the peak of exp(k*t - t^2/2); the dropped
# mass is below 1e-17 relative.
_LOG_SPAN = 80.0
_ROOT_SPAN = float(np.sqrt(_LOG_SPAN))
_LOG_2PI = float(np.log(2.0 * np.pi))
# z-distance treated as saturated for ndtr when bracketing the steep region
_STEP_HALFWIDTH = 6.0


@lru_cache(maxsize=None)
def _unit_nodes(m: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = leggauss(m)
    return (x + 1.0) / 2.0, np.log(w / 2.0)


def _panel_log_mean(edges, sizes, h, k, r, s):
    """log of the truncated-normal mean of Phi((h + r*e)/s) over panels."""
    ts, lws = [], []
    for (a, b), m in zip(zip(edges[:-1], edges[1:]), sizes):
        x, lw = _unit_nodes(m)
        length = b - a
        ts.append(a[:, None] + length[:, None] * x)
        with np.errstate(divide="ignore"):
            lws.append(np.log(length)[:, None] + lw)
    t = np.concatenate(ts, axis=1)
    # e = t - k; density of e restricted to e > -k, rescaled by exp(k^2/2)
    lw = np.concatenate(lws, axis=1) + t * (k[:, None] - 0.5 * t)
    lw -= lw.max(axis=1, keepdims=True)
    wt = np.exp(lw)
    z = (h[:, None] + r[:, None] * (t - k[:, None])) / s[:, None]
    den = wt.sum(axis=1)
    num = (wt * ndtr(z)).sum(axis=1)
    out = np.empty_like(num)
    ok = num > 1e-250
    out[ok] = np.log(num[ok] / den[ok])
    if not ok.all():
        bad = ~ok
        a = lw[bad] + log_ndtr(z[bad])
        peak = a.max(axis=1)
        out[bad] = peak + np.log(np.exp(a - peak[:, None]).sum(axis=1)) - np.log(den[bad])
    return out


def log_bvn(h, k, r, order: int = DEFAULT_ORDER) -> np.ndarray:
    """log Phi2(h, k; r) by Gauss-Legendre over the truncated normal of e.

    ``order`` is the total node count per row.  The domain is split where the
    integrand's Phi factor changes fastest: two panels when the transition is
    wide, three when it is narrow relative to the domain.
    """
    h, k, r = np.broadcast_arrays(
        np.asarray(h, dtype=float), np.asarray(k, dtype=float), np.asarray(r, dtype=float)
    )
    shape = h.shape
    h, k, r = h.ravel(), k.ravel(), r.ravel()
    if order < 16:
        raise ValueError("quadrature order must be at least 16")
    if np.any(np.abs(r) >= 1.0):
        raise ValueError("correlation must lie strictly inside (-1, 1)")
    s = np.sqrt((1.0 - r) * (1.0 + r))

    lo = np.maximum(0.0, k - _ROOT_SPAN)
    hi = k + np.sqrt(np.minimum(k, 0.0) ** 2 + _LOG_SPAN)
    nz = r != 0.0
    safe_r = np.where(nz, r, 1.0)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        step = np.where(nz, k - h / safe_r, np.nan)
        halfwidth = np.where(nz, _STEP_HALFWIDTH * s / np.abs(safe_r), np.inf)
    inside = nz & (step > lo) & (step < hi)
    narrow = inside & (halfwidth < (hi - lo) / 4.0)

    out = np.empty_like(h)
    wide = ~narrow
    if wide.any():
        l, u = lo[wide], hi[wide]
        mid = np.where(inside[wide], step[wide], 0.5 * (l + u))
        n1 = order // 2
        out[wide] = _panel_log_mean(
            [l, mid, u], [n1, order - n1], h[wide], k[wide], r[wide], s[wide]
        )
    if narrow.any():
        l, u, c, w = lo[narrow], hi[narrow], step[narrow], halfwidth[narrow]
        a = np.maximum(c - w, l + (c - l) / 8.0)
        b = np.minimum(c + w, u - (u - c) / 8.0)
        n1 = order // 3
        out[narrow] = _panel_log_mean(
            [l, a, b, u], [n1, order - 2 * n1, n1], h[narrow], k[narrow], r[narrow], s[narrow]
        )
    return (log_ndtr(k) + out).reshape(shape)


def log_bvn_density(h, k, r) -> np.ndarray:
    """log of the bivariate standard normal density phi2(h, k; r)."""
    h, k, r = (np.asarray(v, dtype=float) for v in (h, k, r))
    one_m_r2 = (1.0 - r) * (1.0 + r)
    quad = h * h - 2.0 * r * h * k + k * k
    return -_LOG_2PI - 0.5 * np.log(one_m_r2) - 0.5 * quad / one_m_r2


def _log_phi(x):
    return -0.5 * x * x - 0.5 * _LOG_2PI


@dataclass
class BvnDerivs:
    """First and second partials of log Phi2 with respect to (h, k, r)."""

    value: np.ndarray
    h: np.ndarray
    k: np.ndarray
    r: np.ndarray
    hh: np.ndarray | None = None
    kk: np.ndarray | None = None
    rr: np.ndarray | None = None
    hk: np.ndarray | None = None
    hr: np.ndarray | None = None
    kr: np.ndarray | None = None


def log_bvn_derivs(h, k, r, order: int = DEFAULT_ORDER, second: bool = False) -> BvnDerivs:
    """Value and closed-form partial derivatives of log Phi2(h, k; r)."""
    h, k, r = np.broadcast_arrays(
        np.asarray(h, dtype=float), np.asarray(k, dtype=float), np.asarray(r, dtype=float)
    )
    logf = log_bvn(h, k, r, order)
    one_m_r2 = (1.0 - r) * (1.0 + r)
    s = np.sqrt(one_m_r2)
    gh = np.exp(_log_phi(h) + log_ndtr((k - r * h) / s) - logf)
    gk = np.exp(_log_phi(k) + log_ndtr((h - r * k) / s) - logf)
    e = np.exp(log_bvn_density(h, k, r) - logf)
    out = BvnDerivs(value=logf, h=gh, k=gk, r=e)
    if not second:
        return out
    # F_ij / F from the closed-form second partials of Phi2
    fhh = -h * gh - r * e
    fkk = -k * gk - r * e
    fhk = e
    fhr = -e * (h - r * k) / one_m_r2
    fkr = -e * (k - r * h) / one_m_r2
    quad = h * h - 2.0 * r * h * k + k * k
    frr = e * ((r + h * k) / one_m_r2 - r * quad / one_m_r2**2)
    out.hh = fhh - gh * gh
    out.kk = fkk - gk * gk
    out.hk = fhk - gh * gk
    out.hr = fhr - gh * e
    out.kr = fkr - gk * e
    out.rr = frr - e * e
    return out


def log_ndtr_derivs(x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """log Phi(x) with its first two derivatives (inverse Mills ratio form)."""
    x = np.asarray(x, dtype=float)
    val = log_ndtr(x)
    lam = np.exp(_log_phi(x) - val)
    return val, lam, -lam * (x + lam)

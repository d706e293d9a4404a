"""Synthetic cohorts with known potential outcomes.

Treatment follows a probit with county intercepts, the outcome a probit whose
error is correlated with the treatment error through rho_d.  Potential
treatments are defined against a binary contrast between rank-mirrored
counties (the k-th highest AA share against the k-th lowest), so that the
observed treatment is (1 - Q) D(0) + Q D(1) and monotonicity holds by
construction unless defiers are switched on.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy import optimize, stats
from scipy.special import ndtr, ndtri

from .data import OUTCOME_CAPS, Dataset, Schema
from .outcome import Theta

log = logging.getLogger(__name__)

COUNTIES = (
    "Blekinge", "Dalarna", "Gavleborg", "Gotland", "Halland", "Jamtland", "Jonkopings lan",
    "Kalmar", "Kronoberg", "Norrbotten", "Orebro", "Ostergotlands lan", "Skane", "Sodermanland",
    "Stockholm", "Uppsala", "Varmland", "Vasterbotten", "Vasternorrland", "Vastmanland",
    "Vastra gotalands lan",
)
# AA share over 2015-2018 per county
AA_SHARES = (
    0.15, 0.31, 0.15, 0.13, 0.19, 0.29, 0.18, 0.16, 0.61, 0.28, 0.26,
    0.18, 0.08, 0.08, 0.22, 0.51, 0.17, 0.32, 0.36, 0.29, 0.34,
)
POOLED_AA_SHARE = 0.24

BASE_COVARIATES = ("diff_time", "age10", "comorb", "score")
EDUCATION_LEVELS = ("compulsory", "secondary", "tertiary")
CALIBRATION_DRAWS = 400_000
CALIBRATION_SEED = 20150101

_PAIN_CODES = ("N02AA01", "N02AX02", "N02BE01")
_SRE_CODES = ("M844", "M485", "G550", "M907")
_OTHER_RX = ("C09AA02", "A10BA02", "B01AC06", "N02BE01")
_OTHER_ICD = ("I21", "J18", "C61", "N39")


class SimulationError(ValueError):
    pass


@dataclass
class HazardParams:
    """Per-period probit for a panel outcome, same form as the main outcome model."""

    baseline: float | list = -2.0
    delta: list = field(default_factory=lambda: [0.0, 0.1, 0.2, -0.1])
    delta1: float = 0.3
    deltaD: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    rho0: float = 0.3
    rho1: float = 0.3

    def baselines(self, T: int) -> np.ndarray:
        b = np.atleast_1d(np.asarray(self.baseline, dtype=float))
        if b.size == 1:
            return np.full(T, float(b[0]))
        if b.size < T:
            raise SimulationError(f"need {T} baselines, got {b.size}")
        return b[:T]


def _default_panels() -> dict:
    return {
        "dead": HazardParams(),
        "pain": HazardParams(baseline=-1.5, delta1=-0.1, rho0=0.2, rho1=0.2),
        "sre": HazardParams(baseline=-1.9, delta1=0.1, rho0=0.2, rho1=0.2),
    }


@dataclass
class DgpConfig:
    n: int = 5000
    county_labels: tuple = COUNTIES
    county_shares: tuple = AA_SHARES
    # None: equal-size counties tilted so the pooled share equals pooled_share
    county_weights: tuple | None = None
    pooled_share: float | None = POOLED_AA_SHARE
    beta0: float = -0.5
    delta: list = field(default_factory=lambda: [0.05, 0.2, 0.3, -0.2])
    delta1: float = 0.4
    deltaD: list = field(default_factory=lambda: [0.0, 0.1, 0.0, 0.1])
    gamma_x: list = field(default_factory=lambda: [-0.1, 0.1, -0.15, 0.1])
    rho0: float = 0.5
    rho1: float = 0.5
    compliance: str = "monotone"  # or "with_defiers"
    defier_rate: float = 0.0
    exclusion_violation: float = 0.0
    seed: int = 0
    n_periods: int = 0  # 0 = cross-section only
    panel_errors: str = "renewal"  # fresh treatment-consistent eps each period, or "shared"
    panels: dict = field(default_factory=_default_panels)
    min_followup: int | None = None  # default: half the periods
    extras: bool = True  # raw factor columns, income history, education, placebo outcomes
    n_raw: int = 27
    n_latent: int = 9

    def __post_init__(self):
        if self.n < 1:
            raise SimulationError("n must be at least 1")
        if len(self.county_labels) != len(self.county_shares):
            raise SimulationError("county_labels and county_shares differ in length")
        for s in self.county_shares:
            if not 0.0 <= s <= 1.0:
                raise SimulationError(f"county share {s} outside [0, 1]")
        p = len(BASE_COVARIATES)
        for name in ("delta", "deltaD", "gamma_x"):
            if len(getattr(self, name)) != p:
                raise SimulationError(f"{name} must have {p} entries")
        if not (abs(self.rho0) < 1 and abs(self.rho1) < 1):
            raise SimulationError("correlations must lie strictly inside (-1, 1)")
        if self.compliance not in ("monotone", "with_defiers"):
            raise SimulationError(f"unknown compliance {self.compliance!r}")
        if self.compliance == "monotone" and self.defier_rate:
            raise SimulationError("defier_rate requires compliance='with_defiers'")
        if not 0.0 <= self.defier_rate <= 1.0:
            raise SimulationError("defier_rate must lie in [0, 1]")
        if self.panel_errors not in ("renewal", "shared"):
            raise SimulationError(f"unknown panel_errors {self.panel_errors!r}")
        if self.n_periods < 0 or self.n_periods > max(OUTCOME_CAPS.values()):
            raise SimulationError("n_periods out of range")
        # partial settings are merged onto the default panel of the same name
        base = _default_panels()
        for k, v in self.panels.items():
            if isinstance(v, HazardParams):
                base[k] = v
            else:
                base[k] = HazardParams(**{**asdict(base.get(k, HazardParams())), **v})
        self.panels = base

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        d = dict(d)
        for k in ("county_labels", "county_shares", "county_weights"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["county_labels"] = list(self.county_labels)
        out["county_shares"] = list(self.county_shares)
        out["county_weights"] = None if self.county_weights is None else list(self.county_weights)
        return out


@dataclass
class SyntheticTruth:
    ids: np.ndarray
    county: np.ndarray
    Q: np.ndarray
    D0: np.ndarray
    D1: np.ndarray
    Y0: np.ndarray
    Y1: np.ndarray
    compliance_type: np.ndarray
    theta: Theta | None = None
    county_intercepts: dict = field(default_factory=dict)
    true_ate_model: float = float("nan")  # mean of Phi(m1) - Phi(m0)
    pre_flags: dict = field(default_factory=dict)
    panels: dict = field(default_factory=dict)  # panel outcome -> hazard params in estimator form

    @property
    def true_ate(self) -> float:
        return float(np.mean(self.Y1 - self.Y0))

    @property
    def true_late(self) -> float:
        return oracle_effects(self)[1]

    def to_dict(self) -> dict:
        comp = self.compliance_type == "complier"
        return {
            "true_ate": self.true_ate,
            "true_late": float(np.mean((self.Y1 - self.Y0)[comp])) if comp.any() else None,
            "true_ate_model": self.true_ate_model,
            "theta": None if self.theta is None else self.theta.to_dict(),
            "county_intercepts": self.county_intercepts,
            "compliance_counts": {
                k: int((self.compliance_type == k).sum()) for k in ("always", "never", "complier", "defier")
            },
            "panels": self.panels,
            "patients": {
                "id": [str(i) for i in self.ids],
                "Q": self.Q.astype(int).tolist(),
                "D0": self.D0.astype(int).tolist(),
                "D1": self.D1.astype(int).tolist(),
                "Y0": self.Y0.astype(int).tolist(),
                "Y1": self.Y1.astype(int).tolist(),
                "compliance_type": self.compliance_type.tolist(),
                **{k: np.asarray(v).astype(int).tolist() for k, v in self.pre_flags.items()},
            },
        }


def compliance_types(D0, D1) -> np.ndarray:
    D0 = np.asarray(D0, dtype=int)
    D1 = np.asarray(D1, dtype=int)
    out = np.empty(len(D0), dtype=object)
    out[(D0 == 1) & (D1 == 1)] = "always"
    out[(D0 == 0) & (D1 == 0)] = "never"
    out[(D0 == 0) & (D1 == 1)] = "complier"
    out[(D0 == 1) & (D1 == 0)] = "defier"
    return out.astype(str)


def oracle_effects(truth: SyntheticTruth) -> tuple[float, float]:
    """(mean of Y(1) - Y(0) over everyone, same mean over compliers)."""
    diff = np.asarray(truth.Y1, dtype=float) - np.asarray(truth.Y0, dtype=float)
    comp = np.asarray(truth.compliance_type) == "complier"
    if not comp.any():
        raise SimulationError("no compliers: the local average treatment effect is undefined")
    return float(diff.mean()), float(diff[comp].mean())


# ------------------------------------------------------------------ calibration


def calibrate_county_intercepts(shares, X: np.ndarray | None = None, gamma_x=None,
                                xtol: float = 1e-12) -> np.ndarray:
    """Intercepts c with mean(Phi(X gamma_x + c)) equal to each target share.

    ``X`` is a sample from the covariate distribution; without it the model is
    covariate free and c = Phi^-1(share).  Shares of exactly 0 or 1 map to
    -inf / +inf (a county that never or always prescribes AA).
    """
    shares = np.asarray(shares, dtype=float)
    if X is None or gamma_x is None or np.size(X) == 0:
        index = np.zeros(1)
    else:
        index = np.asarray(X, dtype=float) @ np.asarray(gamma_x, dtype=float)
    out = np.empty(len(shares))
    for j, s in enumerate(shares):
        if s <= 0.0:
            out[j] = -np.inf
            continue
        if s >= 1.0:
            out[j] = np.inf
            continue
        if np.ptp(index) == 0:
            out[j] = ndtri(s) - index[0]
            continue

        def gap(c):
            return ndtr(index + c).mean() - s

        lo, hi = ndtri(s) - index.max() - 1.0, ndtri(s) - index.min() + 1.0
        try:
            out[j] = optimize.brentq(gap, lo, hi, xtol=xtol)
        except (ValueError, RuntimeError) as exc:
            raise SimulationError(f"intercept calibration failed for share {s}: {exc}") from exc
        if abs(gap(out[j])) > 1e-4:
            raise SimulationError(f"intercept calibration missed share {s}")
    return out


def tilted_weights(shares, pooled: float) -> np.ndarray:
    """County size weights proportional to exp(lam * share) with pooled share ``pooled``."""
    s = np.asarray(shares, dtype=float)
    if not s.min() < pooled < s.max():
        raise SimulationError(f"pooled share {pooled} outside the range of county shares")

    def gap(lam):
        w = np.exp(lam * (s - s.mean()))
        return (w * s).sum() / w.sum() - pooled

    lam = optimize.brentq(gap, -500.0, 500.0, xtol=1e-14)
    w = np.exp(lam * (s - s.mean()))
    return w / w.sum()


def _allocate(n: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder integer counts summing to n."""
    raw = n * weights
    base = np.floor(raw).astype(int)
    short = n - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def _mirror_partner(shares: np.ndarray, labels) -> np.ndarray:
    order = sorted(range(len(shares)), key=lambda j: (shares[j], labels[j]))
    rank = np.empty(len(shares), dtype=int)
    rank[order] = np.arange(len(shares))
    return np.array([order[len(shares) - 1 - rank[j]] for j in range(len(shares))])


# ------------------------------------------------------------------ draws


def _covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    days = 14 + np.round(rng.gamma(2.0, 180.0, n)).astype(int)
    diff_time = days / 365.25
    age10 = rng.normal(0.0, 0.785, n)
    comorb = (rng.random(n) < 0.3).astype(float)
    score = rng.normal(0.0, 1.0, n)
    return np.column_stack([diff_time, age10, comorb, score])


@lru_cache(maxsize=1)
def _calibration_sample() -> np.ndarray:
    return _covariates(np.random.default_rng(CALIBRATION_SEED), CALIBRATION_DRAWS)


@lru_cache(maxsize=32)
def _cached_intercepts(shares: tuple, gamma_x: tuple) -> np.ndarray:
    return calibrate_county_intercepts(shares, _calibration_sample(), gamma_x)


def _eps_given_d(rng, a: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Standard normal draws restricted to eps > -a when d = 1 and eps <= -a when d = 0."""
    lo = np.where(d == 1, -a, -np.inf)
    hi = np.where(d == 1, np.inf, -a)
    return stats.truncnorm.rvs(lo, hi, random_state=rng)


def _latent_outcome(rng, index, rho, eps):
    return index + rho * eps + np.sqrt(1.0 - rho**2) * rng.standard_normal(len(index))


def simulate(cfg: DgpConfig) -> tuple[Dataset, SyntheticTruth]:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n
    labels = list(cfg.county_labels)
    shares = np.asarray(cfg.county_shares, dtype=float)
    C = len(labels)

    if cfg.county_weights is not None:
        w = np.asarray(cfg.county_weights, dtype=float)
        w = w / w.sum()
    elif cfg.pooled_share is not None:
        w = tilted_weights(shares, cfg.pooled_share)
    else:
        w = np.full(C, 1.0 / C)
    county = rng.permutation(np.repeat(np.arange(C), _allocate(n, w)))

    X = _covariates(rng, n)
    gx = np.asarray(cfg.gamma_x, dtype=float)
    intercepts = _cached_intercepts(tuple(shares.tolist()), tuple(gx.tolist())).copy()
    partner = _mirror_partner(shares, labels)
    own_c, mate_c = intercepts[county], intercepts[partner[county]]
    Q = (own_c >= mate_c).astype(int)
    lo_c, hi_c = np.minimum(own_c, mate_c), np.maximum(own_c, mate_c)

    base_index = X @ gx
    eps = rng.standard_normal(n)
    D0 = (base_index + lo_c + eps > 0).astype(int)
    D1 = (base_index + hi_c + eps > 0).astype(int)
    if cfg.compliance == "with_defiers" and cfg.defier_rate > 0:
        flip = rng.random(n) < cfg.defier_rate
        D0 = np.where(flip, 1, D0)
        D1 = np.where(flip, 0, D1)
    D = np.where(Q == 1, D1, D0)

    # direct county effect, standardized over the finite intercepts
    fin = np.isfinite(intercepts)
    cz = np.zeros(C)
    if fin.sum() > 1 and np.ptp(intercepts[fin]) > 0:
        cz[fin] = (intercepts[fin] - intercepts[fin].mean()) / intercepts[fin].std()
    leak = cfg.exclusion_violation * cz[county]

    xbar = X.mean(axis=0)
    delta = np.asarray(cfg.delta, dtype=float)
    deltaD = np.asarray(cfg.deltaD, dtype=float)
    m0 = cfg.beta0 + X @ delta
    m1 = m0 + cfg.delta1 + (X - xbar) @ deltaD
    Y0 = (_latent_outcome(rng, m0 + leak, cfg.rho0, eps) >= 0).astype(int)
    Y1 = (_latent_outcome(rng, m1 + leak, cfg.rho1, eps) >= 0).astype(int)
    Y = np.where(D == 1, Y1, Y0)

    ids = np.array([f"P{i + 1:06d}" for i in range(n)])
    frame = pd.DataFrame({"id": ids, "county": np.array(labels, dtype=object)[county], "d": D})
    for j, name in enumerate(BASE_COVARIATES):
        frame[name] = X[:, j]
    frame["y"] = Y

    # pre-treatment morbidity and its event streams
    pain_pre = (-1.9 + 0.2 * X[:, 1] + 0.3 * X[:, 2] + leak + rng.standard_normal(n) > 0).astype(int)
    sre_pre = (-1.7 + 0.1 * X[:, 1] + 0.2 * X[:, 2] + leak + rng.standard_normal(n) > 0).astype(int)
    diag_day = rng.integers(0, 4 * 365, n)
    gap_days = np.round(X[:, 0] * 365.25).astype(int)
    origin = date(2015, 1, 1)
    frame["diagnosis_date"] = [(origin + timedelta(days=int(v))).isoformat() for v in diag_day]
    frame["treatment_date"] = [(origin + timedelta(days=int(v))).isoformat() for v in diag_day + gap_days]
    events = _events(rng, ids, diag_day, gap_days, pain_pre, sre_pre, origin)

    categorical: dict = {}
    covariates = list(BASE_COVARIATES)
    auxiliary = ["y", "diagnosis_date", "treatment_date"]
    if cfg.extras:
        extra = _extras(rng, X, leak, cfg)
        for k, v in extra.items():
            frame[k] = v
        covariates.append("income")
        categorical["education"] = EDUCATION_LEVELS
        auxiliary += [k for k in extra if k not in ("income", "education")]
    schema = Schema(tuple(covariates), tuple(labels), categorical, tuple(auxiliary))

    panel = pd.DataFrame(columns=["id", "period", "outcome", "value"])
    panel_truth: dict = {}
    if cfg.n_periods:
        panel, panel_truth = _panels(rng, cfg, X, xbar, D, base_index + own_c, leak, ids)
    ds = Dataset(frame=frame[list(schema.columns)], schema=schema, events=events, panel=panel)

    # the estimator's parameterization: intercept at the reference county, dummies as contrasts
    seen = set(frame["county"])
    present = [c for c in labels if c in seen]  # schema order, as the design encoder uses
    ref = labels.index(present[0])
    gamma = np.concatenate([[intercepts[ref]], gx, [intercepts[labels.index(c)] - intercepts[ref]
                                                   for c in present[1:]]])
    theta = None
    if np.all(np.isfinite(gamma)):
        theta = Theta(cfg.beta0, delta, cfg.delta1, deltaD, gamma, cfg.rho0, cfg.rho1, xbar)
    truth = SyntheticTruth(
        ids=ids, county=frame["county"].to_numpy(), Q=Q, D0=D0, D1=D1, Y0=Y0, Y1=Y1,
        compliance_type=compliance_types(D0, D1), theta=theta,
        county_intercepts={lb: float(c) for lb, c in zip(labels, intercepts)},
        true_ate_model=float(np.mean(ndtr(m1) - ndtr(m0))),
        pre_flags={"pain_pre": pain_pre, "sre_pre": sre_pre},
        panels=panel_truth,
    )
    return ds, truth


def _events(rng, ids, diag_day, gap_days, pain_pre, sre_pre, origin) -> pd.DataFrame:
    rows = []
    base = pd.Timestamp(origin)
    for i, pid in enumerate(ids):
        d0, span = int(diag_day[i]), int(gap_days[i])
        if pain_pre[i]:
            for code, off in zip(_PAIN_CODES, rng.integers(0, min(span, 60) + 1, 3)):
                rows.append((pid, d0 + int(off), "prescription", code))
        elif rng.random() < 0.1:
            # a qualifying combination after treatment start must not count
            for code, off in zip(_PAIN_CODES, rng.integers(1, 60, 3)):
                rows.append((pid, d0 + span + int(off), "prescription", code))
        if sre_pre[i]:
            rows.append((pid, d0 + int(rng.integers(0, span + 1)), "inpatient",
                         _SRE_CODES[rng.integers(len(_SRE_CODES))]))
        elif rng.random() < 0.05:
            rows.append((pid, d0 + span + int(rng.integers(1, 90)), "inpatient", _SRE_CODES[0]))
        for _ in range(rng.poisson(1.5)):
            rows.append((pid, d0 + int(rng.integers(0, span + 1)), "prescription",
                         _OTHER_RX[rng.integers(len(_OTHER_RX))]))
        for _ in range(rng.poisson(0.3)):
            rows.append((pid, d0 + int(rng.integers(0, span + 1)), "inpatient",
                         _OTHER_ICD[rng.integers(len(_OTHER_ICD))]))
    ev = pd.DataFrame(rows, columns=["id", "day", "kind", "code"])
    ev["date"] = base + pd.to_timedelta(ev["day"], unit="D")
    ev = ev[["id", "date", "kind", "code"]]
    return ev.sort_values(["id", "date"], kind="stable").reset_index(drop=True)


def _extras(rng, X, leak, cfg: DgpConfig) -> dict:
    n = len(X)
    out: dict = {}
    F = rng.standard_normal((n, cfg.n_latent))
    for j in range(cfg.n_raw):
        f = j % cfg.n_latent
        g = (f + 1) % cfg.n_latent
        out[f"raw_{j + 1}"] = 0.7 * F[:, f] + 0.2 * F[:, g] + np.sqrt(1 - 0.53) * rng.standard_normal(n)

    # income in 100k SEK with three preceding years; current year sometimes missing
    level = np.exp(rng.normal(1.0, 0.35, n) - 0.1 * X[:, 1])
    lags = level[:, None] * np.exp(rng.normal(0.0, 0.05, (n, 3)))
    lag_miss = rng.random((n, 3)) < 0.1
    lag_miss[lag_miss.all(axis=1), 0] = False
    lags[lag_miss] = np.nan
    income = level * np.exp(rng.normal(0.0, 0.05, n))
    income[rng.random(n) < 0.03] = np.nan
    out["income"] = income
    for k in range(3):
        out[f"income_lag{k + 1}"] = lags[:, k]
    out["pension"] = 0.6 * level * np.exp(rng.normal(0.0, 0.1, n))
    out["birth_nordic"] = (rng.random(n) < 0.9).astype(int)
    edu_latent = 0.8 * np.log(level) - 0.3 * X[:, 1] + rng.normal(0.0, 0.5, n)
    edu = np.array(EDUCATION_LEVELS, dtype=object)[np.digitize(edu_latent, [0.5, 1.2])]
    edu[rng.random(n) < 0.04] = None
    out["education"] = edu

    # placebo outcomes are fixed before treatment, so only a county leak links them to D
    out["psa"] = np.exp(2.0 + 0.3 * X[:, 3] + 0.2 * X[:, 1] + leak + 0.8 * rng.standard_normal(n))
    out["gleason"] = (-0.2 + 0.2 * X[:, 1] + leak + rng.standard_normal(n) > 0).astype(int)
    out["metastases"] = (0.3 * X[:, 2] + leak + rng.standard_normal(n) > 0).astype(int)
    return out


def _panels(rng, cfg: DgpConfig, X, xbar, D, a, leak, ids):
    T = cfg.n_periods
    n = len(D)
    lo = cfg.min_followup if cfg.min_followup is not None else max(1, T // 2)
    follow = rng.integers(min(lo, T), T + 1, n)
    pars = cfg.panels

    def draw(name, t):
        hp = pars[name]
        b = hp.baselines(T)[t - 1]
        dl, dD = np.asarray(hp.delta, dtype=float), np.asarray(hp.deltaD, dtype=float)
        m = b + X @ dl + D * (hp.delta1 + (X - xbar) @ dD) + leak
        rho = np.where(D == 1, hp.rho1, hp.rho0)
        e = eps_shared if cfg.panel_errors == "shared" else _eps_given_d(rng, a, D)
        return (_latent_outcome(rng, m, rho, e) >= 0).astype(int)

    eps_shared = None
    if cfg.panel_errors == "shared":
        eps_shared = _eps_given_d(rng, a, D)

    death = np.zeros(n, dtype=int)
    morb = {k: np.full((n, T), -1) for k in ("pain", "sre") if k in pars}
    for t in range(1, T + 1):
        at_risk = (death == 0) & (follow >= t)
        for k in morb:
            y = draw(k, t)
            morb[k][at_risk, t - 1] = y[at_risk]
        dies = draw("dead", t).astype(bool) & at_risk
        death[dies] = t

    parts = []
    last = np.where(death > 0, death, follow)
    rep = np.repeat(np.arange(n), last)
    per = np.concatenate([np.arange(1, k + 1) for k in last]) if n else np.empty(0, dtype=int)
    val = ((death[rep] > 0) & (per == death[rep])).astype(int)
    parts.append(pd.DataFrame({"id": ids[rep], "period": per, "outcome": "dead", "value": val}))
    for k, M in morb.items():
        cap = min(T, OUTCOME_CAPS[k])
        ii, tt = np.nonzero(M[:, :cap] >= 0)
        parts.append(pd.DataFrame({"id": ids[ii], "period": tt + 1, "outcome": k, "value": M[ii, tt]}))
    panel = pd.concat(parts, ignore_index=True)
    panel = panel.sort_values(["outcome", "id", "period"], kind="stable").reset_index(drop=True)
    truth = {k: {**asdict(v), "baseline": v.baselines(T).tolist()} for k, v in pars.items()}
    return panel, truth

"""Covariate preparation: factor analysis and imputation."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import Codebook, Dataset, derive_pre_treatment_flags

log = logging.getLogger(__name__)


class PrepError(ValueError):
    pass


@dataclass(frozen=True)
class FactorModel:
    loadings: np.ndarray  # (p, k), rotated
    uniquenesses: np.ndarray
    rotation: str
    explained_variance: np.ndarray  # proportion of total variance per factor
    cumulative_variance: float
    score_weights: np.ndarray  # (p, k), regression-method weights R^-1 L
    columns: tuple[str, ...] = ()
    method: str = "principal_axis"
    iterations: int = 0

    @property
    def communalities(self) -> np.ndarray:
        return 1.0 - self.uniquenesses

    def to_dict(self, blank_below: float | None = None) -> dict:
        L = np.round(self.loadings, 6).tolist()
        if blank_below is not None:
            L = [[v if abs(v) >= blank_below else None for v in row] for row in L]
        return {
            "method": self.method,
            "rotation": self.rotation,
            "columns": list(self.columns),
            "loadings": L,
            "uniquenesses": np.round(self.uniquenesses, 6).tolist(),
            "explained_variance": np.round(self.explained_variance, 6).tolist(),
            "cumulative_variance": round(float(self.cumulative_variance), 6),
            "iterations": self.iterations,
        }


def standardize(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0, ddof=1)
    sd[sd == 0] = 1.0
    return (X - X.mean(axis=0)) / sd


def varimax(L: np.ndarray, normalize: bool = True, max_iter: int = 500, tol: float = 1e-10):
    """Kaiser varimax; returns (rotated loadings, rotation matrix)."""
    p, k = L.shape
    if k < 2:
        return L.copy(), np.eye(k)
    h = np.sqrt((L**2).sum(axis=1)) if normalize else np.ones(p)
    h[h == 0] = 1.0
    A = L / h[:, None]
    R = np.eye(k)
    crit = 0.0
    for _ in range(max_iter):
        B = A @ R
        u, s, vt = np.linalg.svd(A.T @ (B**3 - B @ np.diag((B**2).sum(axis=0)) / p))
        R = u @ vt
        new = s.sum()
        if new - crit < tol * max(new, 1.0):
            break
        crit = new
    return (A @ R) * h[:, None], R


def fit_factor_analysis(
    Xc: np.ndarray,
    k: int = 9,
    rotation: str = "varimax",
    max_iter: int = 1000,
    tol: float = 1e-8,
    columns: Sequence[str] = (),
) -> FactorModel:
    """Principal-axis factoring from squared-multiple-correlation starts."""
    Xc = np.asarray(Xc, dtype=float)
    n, p = Xc.shape
    if k < 1:
        raise PrepError("k must be at least 1")
    if k >= p:
        raise PrepError(f"k={k} factors requires more than {k} covariates, got {p}")
    if np.isnan(Xc).any():
        raise PrepError("factor analysis input contains missing values")
    R = np.corrcoef(Xc, rowvar=False)
    try:
        Rinv = np.linalg.inv(R)
        h2 = 1.0 - 1.0 / np.diag(Rinv)
    except np.linalg.LinAlgError:
        Rinv = np.linalg.pinv(R)
        h2 = np.clip(1.0 - 1.0 / np.diag(Rinv), 0.0, 1.0)
    h2 = np.clip(h2, 0.0, 1.0)
    for it in range(1, max_iter + 1):
        Rr = R.copy()
        np.fill_diagonal(Rr, h2)
        vals, vecs = np.linalg.eigh(Rr)
        order = np.argsort(vals)[::-1][:k]
        L = vecs[:, order] * np.sqrt(np.clip(vals[order], 0.0, None))
        new = (L**2).sum(axis=1)
        if np.any(new > 1.0):
            log.warning("Heywood case: communality above 1 clipped")
            new = np.minimum(new, 0.995)
        delta = np.max(np.abs(new - h2))
        h2 = new
        if delta < tol:
            break
    else:
        raise PrepError(f"principal-axis iterations did not converge in {max_iter} steps")

    if rotation == "varimax":
        L, _ = varimax(L)
    elif rotation != "none":
        raise PrepError(f"unsupported rotation {rotation!r}")
    ss = (L**2).sum(axis=0)
    order = np.argsort(-ss, kind="stable")
    L = L[:, order]
    ss = ss[order]
    signs = np.where(L.sum(axis=0) < 0, -1.0, 1.0)
    L = L * signs
    uniq = 1.0 - (L**2).sum(axis=1)
    expl = ss / p
    return FactorModel(
        loadings=L,
        uniquenesses=uniq,
        rotation=rotation,
        explained_variance=expl,
        cumulative_variance=float(expl.sum()),
        score_weights=np.linalg.solve(R, L) if np.linalg.matrix_rank(R) == p else Rinv @ L,
        columns=tuple(columns),
        iterations=it,
    )


def factor_scores(fm: FactorModel, Xc: np.ndarray) -> np.ndarray:
    """Regression-method (Thurstone) scores for standardized data."""
    Xc = np.atleast_2d(np.asarray(Xc, dtype=float))
    if Xc.shape[1] != fm.loadings.shape[0]:
        raise PrepError(
            f"schema mismatch: model has {fm.loadings.shape[0]} covariates, data has {Xc.shape[1]}"
        )
    return Xc @ fm.score_weights


def _is_missing(v) -> bool:
    return v is None or (isinstance(v, float) and np.isnan(v))


def knn_impute_categorical(targets: Sequence, features: np.ndarray, k: int = 5) -> list:
    """Fill missing targets with the mode of the k nearest complete rows.

    Distances are Euclidean on z-scored features.  Rows tied with the k-th
    neighbour's distance are all included; ties between modes go to the
    lexicographically smallest value.
    """
    targets = list(targets)
    F = standardize(np.asarray(features, dtype=float))
    if np.isnan(F).any():
        raise PrepError("kNN features contain missing values")
    missing = np.array([_is_missing(v) for v in targets])
    complete = np.flatnonzero(~missing)
    if len(complete) < k:
        raise PrepError(f"need at least {k} complete rows, have {len(complete)}")
    out = list(targets)
    for i in np.flatnonzero(missing):
        dist = np.sqrt(((F[complete] - F[i]) ** 2).sum(axis=1))
        kth = np.partition(dist, k - 1)[k - 1]
        # relative slack so rounding in the squared sums does not split ties
        near = complete[dist <= kth * (1 + 1e-12) + 1e-15]
        counts = Counter(str(targets[j]) for j in near)
        top = max(counts.values())
        winner = min(v for v, c in counts.items() if c == top)
        # hand back the original object rather than its string form
        out[i] = next(targets[j] for j in near if str(targets[j]) == winner)
    return out


def mean_impute_continuous(series: Sequence) -> float:
    """Mean of the available values over the preceding years."""
    vals = np.array([np.nan if _is_missing(v) else float(v) for v in series], dtype=float)
    ok = ~np.isnan(vals)
    if not ok.any():
        raise PrepError("all values missing; nothing to average")
    return float(vals[ok].mean())


DEFAULT_HISTORY = {"income": ["income_lag1", "income_lag2", "income_lag3"]}
DEFAULT_KNN = {"education": ["income", "pension", "age10", "birth_nordic"]}


def prepare_dataset(ds: Dataset, options: dict | None = None):
    """Impute, add factor scores, and derive pre-treatment flags.

    Returns ``(dataset, summary, factor_model)``; ``factor_model`` is None
    when there are no raw columns to factor-analyse.  Steps whose columns
    are absent are skipped.
    """
    o = options or {}
    frame = ds.frame.copy()
    schema = ds.schema
    summary: dict = {"imputed": {}}

    for col, lags in o.get("income_history", DEFAULT_HISTORY).items():
        if col not in frame.columns:
            continue
        miss = frame[col].isna().to_numpy()
        vals = frame[col].to_numpy(dtype=float).copy()
        for i in np.flatnonzero(miss):
            vals[i] = mean_impute_continuous([frame[c].iloc[i] for c in lags if c in frame.columns])
        frame[col] = vals
        summary["imputed"][col] = int(miss.sum())

    k_nn = int(o.get("knn_k", 5))
    for col, feats in o.get("knn", DEFAULT_KNN).items():
        if col not in frame.columns or not all(f in frame.columns for f in feats):
            continue
        targets = [None if (isinstance(v, float) and math.isnan(v)) else v for v in frame[col].tolist()]
        frame[col] = knn_impute_categorical(targets, frame[feats].to_numpy(dtype=float), k=k_nn)
        summary["imputed"][col] = sum(v is None for v in targets)

    cols = o.get("factor_columns")
    if cols is None:
        prefix = o.get("factor_prefix", "raw_")
        cols = [c for c in frame.columns if c.startswith(prefix)]
    fm = None
    if cols:
        k = int(o.get("factors", 9))
        Xc = standardize(frame[cols].to_numpy(dtype=float))
        fm = fit_factor_analysis(Xc, k=k, columns=cols)
        names = [f"factor_{j + 1}" for j in range(k)]
        scores = factor_scores(fm, Xc)
        for j, nm in enumerate(names):
            frame[nm] = scores[:, j]
        schema = replace(schema, covariates=tuple(schema.covariates) + tuple(names))

    new = replace(ds, frame=frame, schema=schema)
    if len(new.events):
        new = derive_pre_treatment_flags(new, Codebook(window_days=int(o.get("window_days", 90))))
        summary["pain_pre"] = int(new.column("pain_pre").sum())
        summary["sre_pre"] = int(new.column("sre_pre").sum())
    summary["covariates"] = list(new.covariate_names)
    return new, summary, fm

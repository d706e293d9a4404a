"""Patient dataset: schema, CSV ingestion, event flags, balance table, design."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

log = logging.getLogger(__name__)

PERIOD_LENGTH_DAYS = 30
OUTCOME_CAPS = {"dead": 70, "pain": 76, "sre": 64}
MORBIDITY_OUTCOMES = ("pain", "sre")
EVENT_KINDS = ("prescription", "inpatient")
_CODE_RE = re.compile(r"^[A-Z0-9]+$")


class DataError(ValueError):
    """Raised when an input file or dataset fails validation."""


@dataclass(frozen=True)
class Codebook:
    pain_atc: frozenset[str] = frozenset({"N02AA", "N02AX02", "N02BE01"})
    sre_icd: frozenset[str] = frozenset(
        {"M485", "M495", "M844", "M907", "G550", "G834", "G952", "G958", "G959", "G992"}
    )
    window_days: int = 90

    def __post_init__(self):
        for name in ("pain_atc", "sre_icd"):
            codes = getattr(self, name)
            if not codes:
                raise DataError(f"codebook {name} is empty")
            bad = [c for c in codes if not _CODE_RE.match(c)]
            if bad:
                raise DataError(f"codebook {name} has malformed codes: {sorted(bad)}")
        if self.window_days < 1:
            raise DataError("window_days must be positive")


@dataclass(frozen=True)
class Schema:
    """Column declaration for the patient file.

    ``covariates`` are numeric columns entering the model design; ``categorical``
    maps further design columns to their codebook of levels (first level is the
    reference).  ``auxiliary`` columns are carried along but never enter the
    design (pre-treatment flags, placebo outcomes, dates).
    """

    covariates: tuple[str, ...]
    counties: tuple[str, ...]
    categorical: dict[str, tuple[str, ...]] = field(default_factory=dict)
    auxiliary: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(
            covariates=tuple(d["covariates"]),
            counties=tuple(str(c) for c in d["counties"]),
            categorical={k: tuple(str(v) for v in lv) for k, lv in d.get("categorical", {}).items()},
            auxiliary=tuple(d.get("auxiliary", ())),
        )

    def to_dict(self) -> dict:
        return {
            "covariates": list(self.covariates),
            "counties": list(self.counties),
            "categorical": {k: list(v) for k, v in self.categorical.items()},
            "auxiliary": list(self.auxiliary),
        }

    @property
    def columns(self) -> tuple[str, ...]:
        return ("id", "county", "d", *self.covariates, *self.categorical, *self.auxiliary)


@dataclass(frozen=True)
class Event:
    date: date
    kind: str
    code: str


@dataclass(frozen=True)
class PatientRecord:
    id: str
    county: str
    d: int
    x: np.ndarray
    events: tuple[Event, ...]
    y_panel: dict[str, np.ndarray]
    alive_periods: int


@dataclass(frozen=True)
class Dataset:
    """Columnar patient data.  Methods never mutate; they return new datasets."""

    frame: pd.DataFrame
    schema: Schema
    events: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(columns=["id", "date", "kind", "code"])
    )
    panel: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(columns=["id", "period", "outcome", "value"])
    )
    period_length_days: int = PERIOD_LENGTH_DAYS

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def ids(self) -> np.ndarray:
        return self.frame["id"].to_numpy()

    @property
    def d(self) -> np.ndarray:
        return self.frame["d"].to_numpy(dtype=np.int64)

    @property
    def county(self) -> np.ndarray:
        return self.frame["county"].to_numpy()

    @property
    def county_count(self) -> int:
        return int(self.frame["county"].nunique())

    @property
    def covariate_names(self) -> list[str]:
        names = list(self.schema.covariates)
        for col, levels in self.schema.categorical.items():
            names.extend(f"{col}[{lv}]" for lv in levels[1:])
        return names

    @property
    def n_periods(self) -> dict[str, int]:
        if self.panel.empty:
            return {}
        g = self.panel.groupby("outcome")["period"].max()
        return {k: min(int(v), OUTCOME_CAPS.get(k, int(v))) for k, v in g.items()}

    def covariates(self) -> np.ndarray:
        """Design covariates (numeric columns plus categorical indicators), no intercept."""
        parts = [self.frame[list(self.schema.covariates)].to_numpy(dtype=float)]
        for col, levels in self.schema.categorical.items():
            vals = self.frame[col].astype(str).to_numpy()
            parts.append(np.column_stack([vals == lv for lv in levels[1:]]).astype(float)
                         if len(levels) > 1 else np.empty((len(vals), 0)))
        return np.hstack(parts) if parts else np.empty((len(self), 0))

    def column(self, name: str) -> np.ndarray:
        if name not in self.frame.columns:
            raise DataError(f"unknown column {name!r}")
        return self.frame[name].to_numpy()

    def with_columns(self, **cols) -> "Dataset":
        frame = self.frame.copy()
        for k, v in cols.items():
            frame[k] = v
        aux = tuple(self.schema.auxiliary) + tuple(k for k in cols if k not in self.schema.columns)
        return replace(self, frame=frame, schema=replace(self.schema, auxiliary=aux))

    def subset(self, rows) -> "Dataset":
        """Patients at ``rows`` (positional; repeats allowed) with their events and panel.

        Repeated patients get suffixed ids so that panel lookups stay unique.
        """
        rows = np.asarray(rows)
        frame = self.frame.iloc[rows].reset_index(drop=True)
        old_ids = frame["id"].astype(str).to_numpy()
        new_ids = old_ids.copy()
        if len(np.unique(old_ids)) < len(old_ids):
            seen: dict[str, int] = {}
            for i, v in enumerate(old_ids):
                c = seen.get(v, 0)
                seen[v] = c + 1
                if c:
                    new_ids[i] = f"{v}#{c}"
        frame["id"] = new_ids
        idmap = pd.DataFrame({"id": old_ids, "new_id": new_ids})

        def remap(tab: pd.DataFrame) -> pd.DataFrame:
            if tab.empty:
                return tab.copy()
            t = tab.assign(id=tab["id"].astype(str)).merge(idmap, on="id", how="inner")
            return t.drop(columns="id").rename(columns={"new_id": "id"})[tab.columns]

        return replace(self, frame=frame, events=remap(self.events), panel=remap(self.panel))

    def panel_matrix(self, outcome: str, n_periods: int | None = None) -> np.ndarray:
        """(n, T) array of the outcome panel; NaN where a period was not observed."""
        if self.panel.empty:
            raise DataError("dataset has no outcome panel")
        p = self.panel[self.panel["outcome"] == outcome]
        if p.empty:
            raise DataError(f"no panel rows for outcome {outcome!r}")
        cap = OUTCOME_CAPS.get(outcome)
        T = int(p["period"].max()) if n_periods is None else int(n_periods)
        if cap is not None:
            T = min(T, cap)
        pos = pd.Series(np.arange(len(self)), index=self.frame["id"].astype(str))
        rows = pos.reindex(p["id"].astype(str)).to_numpy()
        keep = ~np.isnan(rows) & (p["period"].to_numpy() <= T)
        out = np.full((len(self), T), np.nan)
        out[rows[keep].astype(int), p["period"].to_numpy()[keep].astype(int) - 1] = (
            p["value"].to_numpy(dtype=float)[keep]
        )
        return out

    def death_period(self) -> np.ndarray:
        """Period of death (1-based) or 0 for patients not observed to die."""
        dead = self.panel_matrix("dead")
        hit = np.nan_to_num(dead, nan=0.0) > 0
        return np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, 0)

    def followup_periods(self) -> np.ndarray:
        """Number of periods with an observed mortality status."""
        return (~np.isnan(self.panel_matrix("dead"))).sum(axis=1)

    @property
    def patients(self) -> list[PatientRecord]:
        X = self.covariates()
        ev = {k: g for k, g in self.events.groupby(self.events["id"].astype(str))} if len(self.events) else {}
        outcomes = sorted(self.panel["outcome"].unique()) if len(self.panel) else []
        mats = {o: self.panel_matrix(o) for o in outcomes}
        alive = self.followup_periods() if "dead" in mats else np.zeros(len(self), dtype=int)
        out = []
        for i, row in enumerate(self.frame.itertuples(index=False)):
            pid = str(row.id)
            g = ev.get(pid)
            events = ()
            if g is not None:
                events = tuple(
                    Event(pd.Timestamp(r.date).date(), r.kind, r.code)
                    for r in g.sort_values("date", kind="stable").itertuples(index=False)
                )
            y = {o: m[i][~np.isnan(m[i])] for o, m in mats.items()}
            out.append(PatientRecord(pid, str(row.county), int(row.d), X[i], events, y, int(alive[i])))
        return out


# ---------------------------------------------------------------- ingestion


def _fail(path, row, col, msg):
    where = f"{Path(path).name}: row {row}" + (f", column {col!r}" if col else "")
    raise DataError(f"{where}: {msg}")


def read_patients(path, schema: Schema) -> pd.DataFrame:
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in ("id", "county", "d", *schema.covariates, *schema.categorical) if c not in raw.columns]
    if missing:
        raise DataError(f"{Path(path).name}: missing column(s) {missing}")
    frame = pd.DataFrame({"id": raw["id"].astype(str)})
    if frame["id"].duplicated().any():
        dup = frame["id"][frame["id"].duplicated()].iloc[0]
        raise DataError(f"{Path(path).name}: duplicate patient id {dup!r}")
    counties = set(schema.counties)
    for i, v in enumerate(raw["county"], start=1):
        if v not in counties:
            _fail(path, i, "county", f"unknown county label {v!r}")
    frame["county"] = raw["county"]
    for i, v in enumerate(raw["d"], start=1):
        if v.strip() not in ("0", "1"):
            _fail(path, i, "d", f"treatment must be 0/1, got {v!r}")
    frame["d"] = raw["d"].astype(int)
    for c in schema.covariates:
        num = pd.to_numeric(raw[c].replace("", np.nan), errors="coerce")
        bad = num.isna() & (raw[c] != "")
        if bad.any():
            _fail(path, int(np.argmax(bad.to_numpy())) + 1, c, f"unparseable number {raw[c][bad].iloc[0]!r}")
        frame[c] = num.astype(float)
    for c, levels in schema.categorical.items():
        for i, v in enumerate(raw[c], start=1):
            if v != "" and v not in levels:
                _fail(path, i, c, f"level {v!r} not in codebook {list(levels)}")
        frame[c] = raw[c].replace("", np.nan)
    for c in schema.auxiliary:
        if c not in raw.columns:
            continue
        num = pd.to_numeric(raw[c].replace("", np.nan), errors="coerce")
        frame[c] = num if (num.notna() | (raw[c] == "")).all() else raw[c]
    return frame


def read_events(path) -> pd.DataFrame:
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in ("id", "date", "kind", "code") if c not in raw.columns]
    if missing:
        raise DataError(f"{Path(path).name}: missing column(s) {missing}")
    dates = pd.to_datetime(raw["date"], format="ISO8601", errors="coerce")
    if dates.isna().any():
        i = int(np.argmax(dates.isna().to_numpy()))
        _fail(path, i + 1, "date", f"unparseable ISO-8601 date {raw['date'].iloc[i]!r}")
    bad = ~raw["kind"].isin(EVENT_KINDS)
    if bad.any():
        i = int(np.argmax(bad.to_numpy()))
        _fail(path, i + 1, "kind", f"event kind must be one of {EVENT_KINDS}")
    codes = raw["code"].str.replace(".", "", regex=False).str.upper()
    ev = pd.DataFrame({"id": raw["id"].astype(str), "date": dates, "kind": raw["kind"], "code": codes})
    return ev.sort_values(["id", "date"], kind="stable").reset_index(drop=True)


def read_panel(path) -> pd.DataFrame:
    raw = pd.read_csv(path, dtype={"id": str})
    missing = [c for c in ("id", "period", "outcome", "value") if c not in raw.columns]
    if missing:
        raise DataError(f"{Path(path).name}: missing column(s) {missing}")
    for c in ("period", "value"):
        num = pd.to_numeric(raw[c], errors="coerce")
        if num.isna().any():
            i = int(np.argmax(num.isna().to_numpy()))
            _fail(path, i + 1, c, f"unparseable value {raw[c].iloc[i]!r}")
    if not raw["value"].isin([0, 1]).all():
        i = int(np.argmax(~raw["value"].isin([0, 1]).to_numpy()))
        _fail(path, i + 1, "value", "outcome values must be 0/1")
    if (raw["period"] < 1).any():
        i = int(np.argmax((raw["period"] < 1).to_numpy()))
        _fail(path, i + 1, "period", "periods start at 1")
    out = raw.astype({"period": int, "value": int})
    out["id"] = out["id"].astype(str)
    return out.sort_values(["outcome", "id", "period"], kind="stable").reset_index(drop=True)


def validate(ds: Dataset) -> Dataset:
    """Check the dataset invariants; returns ``ds`` unchanged when they hold."""
    fr = ds.frame
    if not fr["d"].isin([0, 1]).all():
        raise DataError("treatment must be 0/1")
    bad = ~fr["county"].isin(ds.schema.counties)
    if bad.any():
        raise DataError(f"unknown county label {fr['county'][bad].iloc[0]!r}")
    cov = list(ds.schema.covariates)
    if cov and fr[cov].isna().any().any():
        col = fr[cov].columns[fr[cov].isna().any()][0]
        row = int(np.argmax(fr[col].isna().to_numpy())) + 1
        raise DataError(f"row {row}, column {col!r}: missing value after preparation")
    if len(ds.panel):
        for (pid, outcome), g in ds.panel.groupby(["id", "outcome"]):
            per = g["period"].to_numpy()
            if per.min() != 1 or np.any(np.diff(per) != 1):
                raise DataError(f"patient {pid}: {outcome} panel periods are not contiguous from 1")
            if outcome == "dead":
                v = g["value"].to_numpy()
                if v[:-1].any():
                    raise DataError(f"patient {pid}: periods recorded after death")
    return ds


def load_dataset(path, schema: Schema, events_path=None, panel_path=None) -> Dataset:
    frame = read_patients(path, schema)
    events = read_events(events_path) if events_path else Dataset.__dataclass_fields__["events"].default_factory()
    panel = read_panel(panel_path) if panel_path else Dataset.__dataclass_fields__["panel"].default_factory()
    ds = Dataset(frame=frame, schema=schema, events=events, panel=panel)
    if schema.covariates and not frame[list(schema.covariates)].isna().any().any():
        validate(ds)
    log.info("loaded %d patients from %s", len(ds), path)
    return ds


def write_dataset(ds: Dataset, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"patients": out / "patients.csv", "events": out / "events.csv", "panel": out / "panel.csv"}
    ds.frame.to_csv(paths["patients"], index=False, float_format="%.10g", lineterminator="\n")
    ev = ds.events.copy()
    if len(ev):
        ev["date"] = pd.to_datetime(ev["date"]).dt.strftime("%Y-%m-%d")
    ev.to_csv(paths["events"], index=False, lineterminator="\n")
    ds.panel.to_csv(paths["panel"], index=False, lineterminator="\n")
    return paths


# ---------------------------------------------------------------- event flags


def _as_days(events: Iterable) -> list[tuple[int, str, str]]:
    out = []
    for ev in events:
        d, kind, code = (ev.date, ev.kind, ev.code) if isinstance(ev, Event) else ev
        if isinstance(d, (int, np.integer)):
            day = int(d)
        else:
            day = pd.Timestamp(d).toordinal()
        out.append((day, kind, str(code).replace(".", "").upper()))
    return out


def _pain_group(code: str, codebook: Codebook) -> str | None:
    for prefix in sorted(codebook.pain_atc):
        if code.startswith(prefix):
            return prefix
    return None


def flag_pain(events: Iterable, codebook: Codebook = Codebook()) -> int:
    """1 if some window of ``window_days`` consecutive days holds a prescription
    from every pain ATC group.

    Events are ``Event`` objects or ``(date_or_day, kind, code)`` tuples.  A
    window starting on day s covers days s .. s + window_days - 1.
    """
    groups = sorted(codebook.pain_atc)
    rx = sorted(
        (day, g)
        for day, kind, code in _as_days(events)
        if kind == "prescription" and (g := _pain_group(code, codebook)) is not None
    )
    if not rx:
        return 0
    need = len(groups)
    count: dict[str, int] = {}
    lo = 0
    # two-pointer sweep over windows ending at each prescription
    for day, g in rx:
        count[g] = count.get(g, 0) + 1
        while rx[lo][0] <= day - codebook.window_days:
            og = rx[lo][1]
            count[og] -= 1
            if not count[og]:
                del count[og]
            lo += 1
        if len(count) == need:
            return 1
    return 0


def flag_sre(events: Iterable, codebook: Codebook = Codebook()) -> int:
    """1 if any inpatient ICD code falls in the SRE codebook (subcodes included)."""
    codes = tuple(sorted(codebook.sre_icd))
    for _, kind, code in _as_days(events):
        if kind == "inpatient" and code.startswith(codes):
            return 1
    return 0


def derive_pre_treatment_flags(ds: Dataset, codebook: Codebook = Codebook(),
                               start_col: str = "diagnosis_date", end_col: str = "treatment_date") -> Dataset:
    """Add ``pain_pre`` / ``sre_pre`` from the event streams.

    Events are restricted to [diagnosis, treatment] when both date columns are
    present on the patient frame; otherwise the whole stream is used.
    """
    ev = ds.events
    windowed = start_col in ds.frame.columns and end_col in ds.frame.columns
    if windowed and len(ev):
        bounds = ds.frame[["id", start_col, end_col]].assign(id=lambda f: f["id"].astype(str))
        ev = ev.merge(bounds, on="id", how="inner")
        lo = pd.to_datetime(ev[start_col])
        hi = pd.to_datetime(ev[end_col])
        ev = ev[(ev["date"] >= lo) & (ev["date"] <= hi)]
    by_id = {k: list(zip(g["date"], g["kind"], g["code"])) for k, g in ev.groupby("id")} if len(ev) else {}
    ids = ds.frame["id"].astype(str)
    pain = np.array([flag_pain(by_id.get(i, []), codebook) for i in ids], dtype=int)
    sre = np.array([flag_sre(by_id.get(i, []), codebook) for i in ids], dtype=int)
    return ds.with_columns(pain_pre=pain, sre_pre=sre)


# ---------------------------------------------------------------- balance


@dataclass(frozen=True)
class BalanceRow:
    name: str
    mean0: float
    sd0: float
    mean1: float
    sd1: float
    diff: float
    p_value: float

    @property
    def stars(self) -> str:
        return significance_stars(self.p_value)

    def render(self, digits: int = 2) -> tuple[str, str, str]:
        f = f"{{:.{digits}f}}"
        return (
            f"{f.format(self.mean0)} ({f.format(self.sd0)})",
            f"{f.format(self.mean1)} ({f.format(self.sd1)})",
            f"{f.format(self.diff)}{self.stars}",
        )


@dataclass(frozen=True)
class BalanceTable:
    """Covariate means by arm; column 0 is ENZ (d=0), column 1 is AA (d=1)."""

    rows: tuple[BalanceRow, ...]

    def to_dict(self) -> list[dict]:
        return [
            {"covariate": r.name, "mean0": r.mean0, "sd0": r.sd0, "mean1": r.mean1,
             "sd1": r.sd1, "diff": r.diff, "p_value": r.p_value, "stars": r.stars}
            for r in self.rows
        ]


def significance_stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


def balance_table(ds: Dataset, covariates: Sequence[str]) -> BalanceTable:
    d = ds.d
    rows = []
    for name in covariates:
        if name not in ds.frame.columns:
            raise DataError(f"unknown covariate {name!r}")
        v = ds.frame[name].to_numpy(dtype=float)
        a, b = v[d == 0], v[d == 1]
        m0, m1 = float(a.mean()), float(b.mean())
        s0 = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        s1 = float(b.std(ddof=1)) if len(b) > 1 else 0.0
        if s0 == 0.0 and s1 == 0.0:
            p = 1.0 if m0 == m1 else 0.0
        else:
            p = float(stats.ttest_ind(a, b, equal_var=False).pvalue)
        rows.append(BalanceRow(name, m0, s0, m1, s1, m0 - m1, p))
    return BalanceTable(tuple(rows))


# ---------------------------------------------------------------- design


@dataclass(frozen=True)
class Design:
    X: np.ndarray
    Q: np.ndarray
    d: np.ndarray
    covariate_names: tuple[str, ...]
    instrument_names: tuple[str, ...]
    reference_county: str | None


def encode_design(ds: Dataset) -> Design:
    """Covariates, county one-hot block (reference = first present county), treatment.

    Declared counties with no patients get no column.
    """
    present = sorted(set(ds.county))
    empty = sorted(set(ds.schema.counties) - set(present))
    if empty:
        log.warning("counties without patients dropped from the instrument block: %s", empty)
    ref, rest = (present[0], present[1:]) if present else (None, [])
    county = ds.county
    Q = np.column_stack([county == c for c in rest]).astype(float) if rest else np.empty((len(ds), 0))
    return Design(
        X=ds.covariates(),
        Q=Q,
        d=ds.d.astype(float),
        covariate_names=tuple(ds.covariate_names),
        instrument_names=tuple(f"county[{c}]" for c in rest),
        reference_county=ref,
    )

"""Panel data model: CSV ingestion, validation and design matrices.

The panel is stored in long format, one row per person-wave, in a
``pandas.DataFrame`` sorted by ``(person_id, wave)``. Fixed columns are
``person_id, wave, responded, employed, log_wage, weight``; every further
column is a numeric covariate. Empty cells mean "not observed".
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, ContractError, IntegrityError, ParseError, SchemaError

logger = logging.getLogger(__name__)

FIXED_COLUMNS = ("person_id", "wave", "responded", "employed", "log_wage", "weight")
EQUATIONS = ("attrition", "employment", "wage")


@dataclass(frozen=True)
class ModelSpec:
    """Covariate roles for the three equations.

    Identification of the corrected wage equation wants at least one
    attrition covariate and one employment covariate that are excluded from
    the wage equation. Set ``allow_nonlinear_identification`` to accept a
    specification that relies on the nonlinearity of the correction terms
    alone.
    """

    z_vars: tuple[str, ...]
    x_vars: tuple[str, ...]
    w_vars: tuple[str, ...]
    wave_dummies: Mapping[str, bool] = field(
        default_factory=lambda: {"attrition": False, "employment": False, "wage": False}
    )
    weight_mode: str = "unweighted"
    allow_nonlinear_identification: bool = False

    def __post_init__(self):
        for name in ("z_vars", "x_vars", "w_vars"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        dummies = {eq: bool(self.wave_dummies.get(eq, False)) for eq in EQUATIONS}
        unknown = set(self.wave_dummies) - set(EQUATIONS)
        if unknown:
            raise ConfigError(f"unknown equation(s) in wave_dummies: {sorted(unknown)}")
        object.__setattr__(self, "wave_dummies", dummies)
        if self.weight_mode not in ("unweighted", "per-person"):
            raise ConfigError(f"weight_mode must be 'unweighted' or 'per-person', got {self.weight_mode!r}")
        if not self.allow_nonlinear_identification:
            w = set(self.w_vars)
            missing = [
                label
                for label, vars_ in (("attrition (z_vars)", self.z_vars), ("employment (x_vars)", self.x_vars))
                if not set(vars_) - w
            ]
            if missing:
                raise ConfigError(
                    "no exclusion restriction for " + " and ".join(missing)
                    + "; add a variable absent from w_vars or set allow_nonlinear_identification"
                )

    @property
    def variables(self) -> tuple[str, ...]:
        seen = dict.fromkeys(self.z_vars + self.x_vars + self.w_vars)
        return tuple(seen)


@dataclass(frozen=True)
class PanelDataset:
    frame: pd.DataFrame
    covariate_names: tuple[str, ...]

    @property
    def T_max(self) -> int:
        return int(self.frame["wave"].max()) if len(self.frame) else 0

    @property
    def n_persons(self) -> int:
        return int(self.frame["person_id"].nunique())

    def __len__(self) -> int:
        return len(self.frame)

    def persons(self) -> np.ndarray:
        return self.frame["person_id"].unique()

    def subset(self, person_ids: Iterable[str]) -> "PanelDataset":
        keep = self.frame["person_id"].isin(list(person_ids))
        return PanelDataset(self.frame.loc[keep].reset_index(drop=True), self.covariate_names)


def make_dataset(frame: pd.DataFrame, covariate_names: Sequence[str] | None = None) -> PanelDataset:
    """Wrap a frame into a canonical dataset (typed columns, sorted rows)."""
    if covariate_names is None:
        covariate_names = [c for c in frame.columns if c not in FIXED_COLUMNS]
    cols = list(FIXED_COLUMNS) + list(covariate_names)
    missing = [c for c in cols if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    df = frame.loc[:, cols].copy()
    df["person_id"] = df["person_id"].astype(str)
    df["wave"] = df["wave"].astype(np.int64)
    df["responded"] = df["responded"].astype(np.int64)
    for c in ["employed", "log_wage", "weight", *covariate_names]:
        df[c] = df[c].astype(np.float64)
    df = df.sort_values(["person_id", "wave"], kind="mergesort").reset_index(drop=True)
    dup = df.duplicated(["person_id", "wave"])
    if dup.any():
        row = df.loc[dup.idxmax()]
        raise IntegrityError(f"duplicate record for person {row['person_id']} at wave {row['wave']}")
    return PanelDataset(df, tuple(covariate_names))


def _parse_float(text: str) -> float:
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        return math.nan
    # "nan" spelled out is not a valid cell; empty means missing
    return math.nan if math.isnan(value) else value


def load_panel_csv(path, spec: ModelSpec | None = None) -> PanelDataset:
    """Read a panel CSV; with ``spec``, also require every model variable."""
    path = Path(path)
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    required = ["person_id", "wave", "responded"]
    if spec is not None:
        required += list(spec.variables)
    for c in required:
        if c not in raw.columns:
            raise SchemaError(f"{path}: missing column {c!r}")
    for c in ("employed", "log_wage", "weight"):
        if c not in raw.columns:
            raw[c] = "1" if c == "weight" else ""

    covariates = [c for c in raw.columns if c not in FIXED_COLUMNS]
    parsed = {"person_id": raw["person_id"]}
    for c in ["wave", "responded", "employed", "log_wage", "weight", *covariates]:
        text = raw[c].str.strip()
        # float() is correctly rounded, unlike pandas' fast parser, so
        # written values read back bit for bit
        values = pd.Series([_parse_float(v) for v in text], index=text.index, dtype=np.float64)
        bad = values.isna() & (text != "")
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            # +2: header line, 1-based numbering
            raise ParseError(f"{path}: line {i + 2}: column {c!r}: cannot parse {raw[c].iloc[i]!r}")
        if c in ("wave", "responded"):
            if values.isna().any():
                i = int(np.flatnonzero(values.isna().to_numpy())[0])
                raise ParseError(f"{path}: line {i + 2}: column {c!r} is empty")
            if (values != np.round(values)).any():
                i = int(np.flatnonzero((values != np.round(values)).to_numpy())[0])
                raise ParseError(f"{path}: line {i + 2}: column {c!r} must be an integer")
        parsed[c] = values
    return make_dataset(pd.DataFrame(parsed), covariates)


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def write_panel_csv(ds: PanelDataset, path=None) -> str:
    """Write the canonical CSV form; returns the text (and writes it if ``path``)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(FIXED_COLUMNS) + list(ds.covariate_names))
    f = ds.frame
    cols = [f[c].to_numpy() for c in ds.covariate_names]
    emp = f["employed"].to_numpy()
    for i, (pid, wave, resp, wage, weight) in enumerate(
        zip(f["person_id"], f["wave"], f["responded"], f["log_wage"], f["weight"])
    ):
        e = emp[i]
        writer.writerow(
            [pid, int(wave), int(resp), "" if math.isnan(e) else int(e), _fmt(wage), _fmt(weight)]
            + [_fmt(col[i]) for col in cols]
        )
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


@dataclass(frozen=True)
class Violation:
    person_id: str
    wave: int
    kind: str

    def __str__(self) -> str:
        return f"person {self.person_id}: {self.kind} at wave {self.wave}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]


def validate_panel(ds: PanelDataset, spec: ModelSpec | None = None) -> ValidationReport:
    """List every breach of the panel invariants.

    Checks: 0/1 coding, nonnegative weights, contiguous waves from 1, response
    at wave 1, absorbing non-response, no employment status under
    non-response, no wage unless responding and employed, and (given a
    ``spec``) no missing model covariate on a responding row.

    A responding row without an employment status is reported as a
    ``partial response``; ``normalize_panel`` recodes it as non-response.
    """
    f = ds.frame
    n = len(f)
    if n == 0:
        return ValidationReport(())
    pid = f["person_id"].to_numpy()
    wave = f["wave"].to_numpy()
    resp = f["responded"].to_numpy()
    emp = f["employed"].to_numpy()
    wage = f["log_wage"].to_numpy()
    weight = f["weight"].to_numpy()

    first = np.r_[True, pid[1:] != pid[:-1]]
    start = np.maximum.accumulate(np.where(first, np.arange(n), 0))
    pos = np.arange(n) - start
    gaps = wave != pos + 1
    # only the first gap of each person is reported
    gaps_before = np.cumsum(gaps) - gaps
    first_gap = gaps & (gaps_before == gaps_before[start])

    nonresp = (resp == 0).astype(int)
    left_before = np.cumsum(nonresp) - nonresp
    left_before = left_before - left_before[start]
    coded = np.isin(resp, (0, 1))
    has_emp = ~np.isnan(emp)
    has_wage = ~np.isnan(wage)
    r1 = coded & (resp == 1)
    r0 = coded & (resp == 0)

    checks = [
        (first_gap, "non-contiguous waves"),
        (~coded, "responded not 0/1"),
        (coded & has_emp & ~np.isin(emp, (0.0, 1.0)), "employed not 0/1"),
        (coded & (np.isnan(weight) | (weight < 0)), "negative or missing weight"),
        (r0 & (wave == 1), "wave-1 non-response"),
        (r1 & (left_before > 0), None),
        (r0 & has_emp, "employment under non-response"),
        (r0 & has_wage, "wage under censoring"),
        (r1 & ~has_emp, "partial response (employment missing)"),
        (r1 & (emp == 0) & has_wage, "wage under censoring"),
    ]
    if spec is not None:
        for c in spec.variables:
            checks.append((r1 & f[c].isna().to_numpy(), f"missing covariate {c}"))

    found = []
    for order, (mask, kind) in enumerate(checks):
        for i in np.flatnonzero(mask):
            t = int(wave[i])
            found.append((i, order, Violation(str(pid[i]), t, kind or f"non-absorbing response at wave {t}")))
    found.sort(key=lambda item: item[:2])
    out = [v for _, _, v in found]
    return ValidationReport(tuple(out))


def normalize_panel(ds: PanelDataset) -> PanelDataset:
    """Impose the absorbing-attrition convention.

    Responding rows without an employment status are recoded as
    non-response; persons whose wave-1 record is not a full response are
    removed; rows after the first non-response are dropped. Each change is
    reported through ``warnings``.
    """
    f = ds.frame.copy()
    partial = (f["responded"] == 1) & f["employed"].isna()
    if partial.any():
        warnings.warn(f"{int(partial.sum())} partial response row(s) recoded as non-response", stacklevel=2)
        f.loc[partial, "responded"] = 0
        f.loc[partial, "log_wage"] = np.nan
    first = f.groupby("person_id", sort=False)["responded"].transform("first")
    wave1 = f.groupby("person_id", sort=False)["wave"].transform("min")
    bad_start = (first != 1) | (wave1 != 1)
    if bad_start.any():
        n = f.loc[bad_start, "person_id"].nunique()
        warnings.warn(f"{n} person(s) without a wave-1 response removed", stacklevel=2)
        f = f.loc[~bad_start]
    # cumulative count of non-response rows strictly before this one
    gone_before = f.groupby("person_id", sort=False)["responded"].transform(
        lambda r: (1 - r).cumsum().shift(1, fill_value=0)
    )
    after = gone_before > 0
    if after.any():
        warnings.warn(f"{int(after.sum())} row(s) after attrition dropped (absorbing state)", stacklevel=2)
        f = f.loc[~after]
    return PanelDataset(f.reset_index(drop=True), ds.covariate_names)


@dataclass(frozen=True)
class EquationDesign:
    """Stacked rows of one binary equation."""

    X: np.ndarray
    y: np.ndarray
    person: np.ndarray  # index into DesignSet.person_ids
    wave: np.ndarray
    names: tuple[str, ...]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class WageDesign(EquationDesign):
    """Wage rows plus the selection covariates needed for correction terms.

    ``z_lagged`` holds the attrition design of the same person at wave t-1
    (NaN at wave 1) and ``x_current`` the employment design at wave t.
    """

    z_lagged: np.ndarray = None
    x_current: np.ndarray = None


@dataclass(frozen=True)
class DesignSet:
    person_ids: np.ndarray
    person_weight: np.ndarray
    attrition: EquationDesign
    employment: EquationDesign
    wage: WageDesign
    T_max: int
    spec: ModelSpec

    @property
    def n_persons(self) -> int:
        return len(self.person_ids)

    def person(self, index: int) -> "PersonDesign":
        a = self.attrition.person == index
        e = self.employment.person == index
        return PersonDesign(
            self.attrition.X[a], self.attrition.y[a], self.attrition.wave[a],
            self.employment.X[e], self.employment.y[e], self.employment.wave[e],
        )

    def z_lagged(self, index: int, wave: int) -> np.ndarray:
        """Attrition covariate row used for the decision at ``wave``."""
        if wave < 2:
            raise ContractError("the attrition equation has no lagged covariates at wave 1")
        hit = (self.attrition.person == index) & (self.attrition.wave == wave)
        if not hit.any():
            raise ContractError(f"person {self.person_ids[index]} has no attrition record at wave {wave}")
        return self.attrition.X[np.flatnonzero(hit)[0]]

    def take(self, persons: np.ndarray) -> "DesignSet":
        """Design for a resample of persons (duplicates become distinct persons)."""
        persons = np.asarray(persons)

        def pick(eq):
            order = np.argsort(eq.person, kind="stable")
            starts = np.searchsorted(eq.person[order], np.arange(self.n_persons))
            ends = np.searchsorted(eq.person[order], np.arange(self.n_persons), side="right")
            rows = [order[starts[p]:ends[p]] for p in persons]
            idx = np.concatenate(rows) if rows else np.array([], dtype=int)
            new_person = np.repeat(np.arange(len(persons)), [len(r) for r in rows])
            return idx, new_person

        parts = {}
        for name in ("attrition", "employment", "wage"):
            eq = getattr(self, name)
            idx, newp = pick(eq)
            kw = dict(X=eq.X[idx], y=eq.y[idx], person=newp, wave=eq.wave[idx], names=eq.names)
            if name == "wage":
                kw.update(z_lagged=eq.z_lagged[idx], x_current=eq.x_current[idx])
                parts[name] = WageDesign(**kw)
            else:
                parts[name] = EquationDesign(**kw)
        ids = np.array([f"{self.person_ids[p]}#{j}" for j, p in enumerate(persons)], dtype=object)
        return DesignSet(ids, self.person_weight[persons], parts["attrition"], parts["employment"],
                         parts["wage"], self.T_max, self.spec)


@dataclass(frozen=True)
class PersonDesign:
    z: np.ndarray
    a: np.ndarray
    a_wave: np.ndarray
    x: np.ndarray
    e: np.ndarray
    e_wave: np.ndarray


def _design(frame: pd.DataFrame, variables: Sequence[str], dummy_waves: Sequence[int], wave: np.ndarray):
    names = ["const", *variables, *(f"wave{t}" for t in dummy_waves)]
    X = np.empty((len(frame), len(names)))
    X[:, 0] = 1.0
    for j, v in enumerate(variables, start=1):
        X[:, j] = frame[v].to_numpy(dtype=float)
    for j, t in enumerate(dummy_waves, start=1 + len(variables)):
        X[:, j] = (wave == t).astype(float)
    return X, tuple(names)


def build_design_matrices(ds: PanelDataset, spec: ModelSpec) -> DesignSet:
    """Stack the attrition, employment and wage rows.

    Attrition rows are waves t >= 2 of persons still in the sample at t-1;
    their covariates are those observed at t-1. Employment rows are the
    responding waves, wage rows the responding, employed waves with a wage.
    Wave dummies use wave 1 as reference for employment and wages and wave 2
    for attrition (whose first decision happens at wave 2).
    """
    missing = [v for v in spec.variables if v not in ds.covariate_names]
    if missing:
        raise SchemaError(f"dataset lacks model variable(s): {', '.join(missing)}")
    f = ds.frame
    T = ds.T_max
    pid = f["person_id"].to_numpy()
    person_ids, person_idx = np.unique(pid, return_inverse=True)
    wave = f["wave"].to_numpy()
    resp = f["responded"].to_numpy()
    emp = f["employed"].to_numpy()
    wage = f["log_wage"].to_numpy()

    first = np.r_[True, pid[1:] != pid[:-1]]
    lag = f[list(spec.z_vars)].shift(1)
    lag_resp = np.r_[0, resp[:-1]]
    attr_rows = (~first) & (wave >= 2) & (lag_resp == 1)
    emp_rows = resp == 1
    wage_rows = emp_rows & (emp == 1) & ~np.isnan(wage)

    def dummy_waves(eq, lo, rows):
        if not spec.wave_dummies[eq]:
            return []
        present = set(np.unique(wave[rows]).tolist())
        out = []
        for t in range(lo + 1, T + 1):
            if t in present:
                out.append(t)
            else:
                warnings.warn(f"{eq} design: no rows at wave {t}; dummy omitted", stacklevel=3)
        return out

    z_dummies = dummy_waves("attrition", 2, attr_rows)
    x_dummies = dummy_waves("employment", 1, emp_rows)
    w_dummies = dummy_waves("wage", 1, wage_rows)

    # lagged attrition covariates for every row; wave dummies refer to the current wave
    Z_all, z_names = _design(lag, spec.z_vars, z_dummies, wave)
    X_all, x_names = _design(f, spec.x_vars, x_dummies, wave)
    W_all, w_names = _design(f, spec.w_vars, w_dummies, wave)

    if np.isnan(Z_all[attr_rows]).any() or np.isnan(X_all[emp_rows]).any() or np.isnan(W_all[wage_rows]).any():
        raise ContractError("missing covariates on rows entering the likelihood; run validate_panel first")

    attrition = EquationDesign(Z_all[attr_rows], resp[attr_rows].astype(float), person_idx[attr_rows],
                               wave[attr_rows], z_names)
    employment = EquationDesign(X_all[emp_rows], emp[emp_rows].astype(float), person_idx[emp_rows],
                                wave[emp_rows], x_names)
    z_lag = Z_all[wage_rows].copy()
    z_lag[wave[wage_rows] == 1] = np.nan
    wage_design = WageDesign(W_all[wage_rows], wage[wage_rows], person_idx[wage_rows], wave[wage_rows], w_names,
                             z_lagged=z_lag, x_current=X_all[wage_rows])

    w = f["weight"].to_numpy()[first]
    if spec.weight_mode == "unweighted":
        w = np.ones_like(w)
    return DesignSet(person_ids.astype(object), w.astype(float), attrition, employment, wage_design, T, spec)

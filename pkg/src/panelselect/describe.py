"""Weighted group means by next-wave response status, with replicate SEs.

For each wave t < T, respondents at t are split by their response status
at t + 1. Standard errors come from replicate weights when the data carry
them (columns sharing a prefix, e.g. ``bsw1 .. bsw200``), otherwise from a
person-cluster bootstrap expressed as replicate weights. In both cases

    se = sqrt(scale * mean_b (estimate_b - estimate)^2)

with ``scale`` a user-set factor (1 for bootstrap-type replicate weights).
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from .data import PanelDataset
from .errors import ConfigError
from .normal import STREAM_BOOTSTRAP, philox_uniforms

# offset into the bootstrap stream so descriptive replicates never coincide
# with the estimation bootstrap for the same seed
_DESCRIBE_OFFSET = 1 << 40


def weighted_mean(values, weights) -> float:
    values = np.asarray(values, float)
    weights = np.asarray(weights, float)
    return float(weights @ values / weights.sum())


def replicate_se(replicates, estimate, scale: float = 1.0):
    """Replicate-weight standard error (mean of squared deviations form)."""
    replicates = np.asarray(replicates, float)
    dev = replicates - np.asarray(estimate, float)
    return np.sqrt(scale * np.mean(dev * dev, axis=0))


def bootstrap_replicate_weights(person_index, weights, B: int, seed: int) -> np.ndarray:
    """Rows x B matrix: row weight times the resampling multiplicity of its person."""
    person_index = np.asarray(person_index)
    n = int(person_index.max()) + 1
    out = np.empty((len(person_index), B))
    for b in range(B):
        u = philox_uniforms(seed, STREAM_BOOTSTRAP, n, offset=_DESCRIBE_OFFSET + b * n)
        counts = np.bincount(np.minimum((u * n).astype(np.int64), n - 1), minlength=n)
        out[:, b] = weights * counts[person_index]
    return out


def describe_panel(ds: PanelDataset, variables, replicate_prefix: str | None = None, B: int = 200,
                   seed: int = 0, scale: float = 1.0, z_crit: float = 1.959963984540054) -> pd.DataFrame:
    """Table of weighted means at each wave t, split by response status at t + 1."""
    f = ds.frame
    allowed = set(ds.covariate_names) | {"employed", "log_wage"}
    unknown = [v for v in variables if v not in allowed]
    if unknown:
        raise ConfigError(f"unknown variable(s) for describe: {', '.join(unknown)}")

    rep_cols = []
    if replicate_prefix:
        rep_cols = sorted((c for c in f.columns if c.startswith(replicate_prefix) and c[len(replicate_prefix):].isdigit()),
                          key=lambda c: int(c[len(replicate_prefix):]))
        if not rep_cols:
            raise ConfigError(f"no replicate weight columns with prefix {replicate_prefix!r}")

    nxt = f.groupby("person_id", sort=False)["responded"].shift(-1)
    base = (f["responded"] == 1) & nxt.notna()
    person_idx = pd.factorize(f["person_id"])[0]
    weight = f["weight"].to_numpy()
    if rep_cols:
        reps = f[rep_cols].to_numpy(dtype=float)
    else:
        reps = bootstrap_replicate_weights(person_idx, weight, B, seed)

    rows = []
    for t in range(1, ds.T_max):
        at_t = base & (f["wave"] == t)
        for v in variables:
            x = f[v].to_numpy(dtype=float)
            ok = at_t.to_numpy() & ~np.isnan(x)
            stay = ok & (nxt.to_numpy() == 1)
            leave = ok & (nxt.to_numpy() == 0)
            if not stay.any() or not leave.any():
                continue
            m1 = weighted_mean(x[stay], weight[stay])
            m0 = weighted_mean(x[leave], weight[leave])
            with np.errstate(invalid="ignore", divide="ignore"):
                r1 = reps[stay].T @ x[stay] / reps[stay].sum(axis=0)
                r0 = reps[leave].T @ x[leave] / reps[leave].sum(axis=0)
            good = np.isfinite(r1) & np.isfinite(r0)
            se1 = float(replicate_se(r1[good], m1, scale))
            se0 = float(replicate_se(r0[good], m0, scale))
            se_d = float(replicate_se((r1 - r0)[good], m1 - m0, scale))
            diff = m1 - m0
            sig = bool(se_d > 0 and abs(diff) / se_d > z_crit) if se_d > 0 else bool(diff != 0)
            rows.append({
                "wave": t, "variable": v,
                "mean_respondents": m1, "se_respondents": se1, "n_respondents": int(stay.sum()),
                "mean_attritors": m0, "se_attritors": se0, "n_attritors": int(leave.sum()),
                "difference": diff, "se_difference": se_d, "significant_5pct": sig,
            })
    return pd.DataFrame(rows)

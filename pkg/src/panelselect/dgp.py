"""Synthetic panels from the three-equation selection process.

Each person carries random effects ``(u1, u2, u3)``. The first two follow
the two-factor form ``u1 = s1*eta1 + s2*eta2``, ``u2 = s3*eta2``; the wage
effect is ``u3 = a*eta1 + b*eta2 + c*eta3`` with ``(a, b, c)`` solved by
forward substitution so that ``cov(u3, u1) = sigma13``, ``cov(u3, u2) =
sigma23`` and ``var(u3) = sd_u3**2``.

Per wave:

* wave 1 is always a response;
* for t >= 2, while still in the sample, the person responds iff
  ``Z[t-1] @ theta + u1 + v1 >= 0``; the first failure ends the record;
* a respondent is employed iff ``X[t] @ alpha + u2 + v2 >= 0``;
* an employed respondent earns ``W[t] @ beta + u3 + sd_v3 * v3``.

``v1, v2, v3`` are iid N(0, 1). The covariate generator is a stand-in with
no claim to realism: iid normals and Bernoulli variables, documented in
``DEFAULT_COVARIATES``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from .data import FIXED_COLUMNS, ModelSpec, PanelDataset, make_dataset
from .errors import ParameterError
from .normal import STREAM_DGP, philox_uniforms

_STREAM_REPLICATE_WEIGHTS = 4


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = "normal"  # "normal" or "binary"
    mean: float = 0.0
    sd: float = 1.0
    p: float = 0.5
    time_varying: bool = True

    def __post_init__(self):
        if self.kind not in ("normal", "binary"):
            raise ParameterError(f"covariate {self.name}: unknown kind {self.kind!r}")
        if self.kind == "binary" and not 0.0 <= self.p <= 1.0:
            raise ParameterError(f"covariate {self.name}: p must lie in [0, 1]")


@dataclass(frozen=True)
class CovariateGen:
    covariates: tuple[CovariateSpec, ...]
    z_vars: tuple[str, ...]
    x_vars: tuple[str, ...]
    w_vars: tuple[str, ...]

    def __post_init__(self):
        for name in ("covariates", "z_vars", "x_vars", "w_vars"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        known = {c.name for c in self.covariates}
        unknown = [v for v in self.z_vars + self.x_vars + self.w_vars if v not in known]
        if unknown:
            raise ParameterError(f"equation uses undefined covariate(s): {unknown}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)


# "moved" only shifts attrition and "nonlabor" only shifts employment, so the
# corrected wage equation has an exclusion restriction for each selection rule.
DEFAULT_COVARIATES = CovariateGen(
    covariates=(
        CovariateSpec("x1"),
        CovariateSpec("female", kind="binary", p=0.5, time_varying=False),
        CovariateSpec("moved", kind="binary", p=0.2),
        CovariateSpec("nonlabor"),
        CovariateSpec("exper"),
    ),
    z_vars=("x1", "moved"),
    x_vars=("x1", "female", "nonlabor"),
    w_vars=("x1", "female", "exper"),
)


def _loadings_u3(s1, s2, s3, sigma13, sigma23, sd_u3, tol=1e-10):
    """Coefficients (a, b, c) of u3 on (eta1, eta2, eta3).

    Raises ``ParameterError`` when no such triple exists, i.e. when the
    implied covariance matrix is not positive semidefinite.
    """
    if abs(s3) > tol:
        b = sigma23 / s3
    elif abs(sigma23) > tol:
        raise ParameterError("sigma23 must be 0 when var(u2) = 0")
    else:
        b = 0.0
    rest = sigma13 - b * s2
    if abs(s1) > tol:
        a = rest / s1
    elif abs(rest) > tol * max(1.0, abs(sigma13)):
        raise ParameterError("implied covariance matrix is not positive semidefinite")
    else:
        a = 0.0
    c2 = sd_u3**2 - a * a - b * b
    if c2 < -tol * max(1.0, sd_u3**2):
        raise ParameterError("implied covariance matrix is not positive semidefinite")
    return a, b, math.sqrt(max(c2, 0.0))


@dataclass(frozen=True)
class TrueParams:
    """Full parameterization of the synthetic process.

    Coefficient vectors start with the intercept and follow the order of
    ``covariates.z_vars`` / ``x_vars`` / ``w_vars``.
    """

    theta: tuple[float, ...]
    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    s1: float
    s2: float
    s3: float
    sigma13: float = 0.0
    sigma23: float = 0.0
    sd_u3: float = 0.0
    sd_v3: float = 1.0
    T: int = 6
    covariates: CovariateGen = DEFAULT_COVARIATES

    def __post_init__(self):
        for name in ("theta", "alpha", "beta"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        cg = self.covariates
        for name, vec, vars_ in (("theta", self.theta, cg.z_vars), ("alpha", self.alpha, cg.x_vars),
                                 ("beta", self.beta, cg.w_vars)):
            if len(vec) != 1 + len(vars_):
                raise ParameterError(f"{name} needs {1 + len(vars_)} entries (intercept + {list(vars_)})")
        if self.T < 2:
            raise ParameterError("T must be at least 2")
        if self.sd_u3 < 0 or self.sd_v3 <= 0:
            raise ParameterError("need sd_u3 >= 0 and sd_v3 > 0")
        _loadings_u3(self.s1, self.s2, self.s3, self.sigma13, self.sigma23, self.sd_u3)

    @property
    def sigma(self) -> np.ndarray:
        return implied_sigma(self)

    def model_spec(self, **kwargs) -> ModelSpec:
        cg = self.covariates
        return ModelSpec(cg.z_vars, cg.x_vars, cg.w_vars, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covariates"]["covariates"] = [asdict(c) for c in self.covariates.covariates]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrueParams":
        d = dict(d)
        cov = d.pop("covariates", None)
        if cov is not None:
            cov = dict(cov)
            cov["covariates"] = tuple(CovariateSpec(**c) for c in cov["covariates"])
            d["covariates"] = CovariateGen(**cov)
        return cls(**d)


DEFAULT_PARAMS = TrueParams(
    theta=(1.5, 0.3, -0.5),
    alpha=(0.4, 0.5, -0.4, -0.5),
    beta=(2.0, 0.1, -0.2, 0.05),
    s1=0.3, s2=0.4, s3=1.0,
    sigma13=0.1, sigma23=0.2, sd_u3=0.4, sd_v3=0.3,
    T=6,
)


def implied_sigma(params: TrueParams) -> np.ndarray:
    """3x3 covariance of (u1, u2, u3)."""
    s1, s2, s3 = params.s1, params.s2, params.s3
    return np.array([
        [s1 * s1 + s2 * s2, s2 * s3, params.sigma13],
        [s2 * s3, s3 * s3, params.sigma23],
        [params.sigma13, params.sigma23, params.sd_u3**2],
    ])


def _block_layout(params: TrueParams):
    T = params.T
    offsets = {"eta": 0, "v": 3}
    pos = 3 + 3 * T
    for c in params.covariates.covariates:
        offsets[c.name] = pos
        pos += T if c.time_varying else 1
    return offsets, pos


def simulate_panel(params: TrueParams, n: int, seed: int, return_latent: bool = False,
                   replicate_weights: int = 0):
    """Simulate ``n`` persons; returns a ``PanelDataset``.

    Person ``i`` uses a fixed block of the (seed-keyed) Philox stream, so
    its record does not depend on ``n``. With ``return_latent`` the result
    is ``(dataset, latent)`` where ``latent`` holds, for every person and
    every wave 1..T, the random effects, the counterfactual log wage and
    whether the wave was observed. ``replicate_weights > 0`` appends that
    many person-level bootstrap replicate weight columns ``bsw1, bsw2, ...``.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    T = params.T
    cg = params.covariates
    offsets, K = _block_layout(params)
    u = philox_uniforms(seed, STREAM_DGP, n * K).reshape(n, K)
    z = special.ndtri(u)

    eta = z[:, 0:3]
    a, b, c = _loadings_u3(params.s1, params.s2, params.s3, params.sigma13, params.sigma23, params.sd_u3)
    u1 = params.s1 * eta[:, 0] + params.s2 * eta[:, 1]
    u2 = params.s3 * eta[:, 1]
    u3 = a * eta[:, 0] + b * eta[:, 1] + c * eta[:, 2]
    v = z[:, 3:3 + 3 * T].reshape(n, T, 3)

    cov = {}
    for spec in cg.covariates:
        lo = offsets[spec.name]
        width = T if spec.time_varying else 1
        block = u[:, lo:lo + width] if spec.kind == "binary" else z[:, lo:lo + width]
        vals = (block < spec.p).astype(float) if spec.kind == "binary" else spec.mean + spec.sd * block
        cov[spec.name] = np.broadcast_to(vals, (n, T)).copy()

    def index(coefs, vars_):
        out = np.full((n, T), coefs[0])
        for coef, name in zip(coefs[1:], vars_):
            out = out + coef * cov[name]
        return out

    z_idx = index(params.theta, cg.z_vars)
    x_idx = index(params.alpha, cg.x_vars)
    w_idx = index(params.beta, cg.w_vars)

    alive = np.zeros((n, T), dtype=bool)
    alive[:, 0] = True
    for t in range(1, T):
        alive[:, t] = alive[:, t - 1] & (z_idx[:, t - 1] + u1 + v[:, t, 0] >= 0)
    employed = x_idx + u2[:, None] + v[:, :, 1] >= 0
    y_star = w_idx + u3[:, None] + params.sd_v3 * v[:, :, 2]

    # a person's record runs through the first non-response wave
    n_alive = alive.sum(axis=1)
    last = np.minimum(n_alive + 1, T)
    keep = np.arange(T)[None, :] < last[:, None]

    width = len(str(n))
    ids = np.array([str(i + 1).zfill(width) for i in range(n)], dtype=object)
    pid_grid = np.broadcast_to(ids[:, None], (n, T))
    wave_grid = np.broadcast_to(np.arange(1, T + 1)[None, :], (n, T))
    resp = alive
    emp = np.where(resp, employed.astype(float), np.nan)
    wage = np.where(resp & employed, y_star, np.nan)

    frame = {
        "person_id": pid_grid[keep],
        "wave": wave_grid[keep],
        "responded": resp[keep].astype(np.int64),
        "employed": emp[keep],
        "log_wage": wage[keep],
        "weight": np.ones(int(keep.sum())),
    }
    extra = []
    if replicate_weights:
        ru = philox_uniforms(seed, _STREAM_REPLICATE_WEIGHTS, replicate_weights * n).reshape(replicate_weights, n)
        for r in range(replicate_weights):
            counts = np.bincount(np.minimum((ru[r] * n).astype(np.int64), n - 1), minlength=n).astype(float)
            name = f"bsw{r + 1}"
            frame[name] = np.broadcast_to(counts[:, None], (n, T))[keep]
            extra.append(name)
    for name in cg.names:
        frame[name] = np.where(resp, cov[name], np.nan)[keep]
    ds = make_dataset(pd.DataFrame(frame), list(cg.names) + extra)
    if not return_latent:
        return ds
    latent = pd.DataFrame({
        "person_id": pid_grid.ravel(),
        "wave": wave_grid.ravel(),
        "u1": np.repeat(u1, T),
        "u2": np.repeat(u2, T),
        "u3": np.repeat(u3, T),
        "observed": resp.ravel(),
        "employed_star": employed.ravel(),
        "y_star": y_star.ravel(),
        "w_index": w_idx.ravel(),
    })
    return ds, latent

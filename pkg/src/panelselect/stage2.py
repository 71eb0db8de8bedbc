"""Selection-corrected pooled wage regression.

For a wage observation at wave t >= 2 both selection rules bind. With the
scaled indexes ``z1 = Z[t-1] @ theta / sqrt(1 + sigma11)`` and ``z2 =
X[t] @ alpha / sqrt(1 + sigma22)`` and the composite-error correlation rho,
the correction terms are::

    P       = F(z1, z2, rho)
    lambda1 = phi(z1) * Phi((z2 - rho*z1) / sqrt(1 - rho^2)) / P
    lambda2 = phi(z2) * Phi((z1 - rho*z2) / sqrt(1 - rho^2)) / P

At wave 1 only employment selects: ``lambda1 = 0`` and ``lambda2`` is the
inverse Mills ratio of ``z2``. Log wages are then regressed on
``[W, lambda1, lambda2]`` by pooled (weighted) least squares. The
coefficients on the correction terms are reported as estimated. The wage
equation is written with minus signs on both terms, so the derived
covariances are ``sigma13_hat = -coef_lambda1`` and ``sigma23_hat =
-coef_lambda2``. In the simulator, where ``sigma13 = cov(u1, u3)``, the
coefficient on lambda1 is close to ``+sigma13 / sqrt(1 + sigma11)`` (exact for
a single period; survival to wave t shifts u1 slightly), and likewise for
lambda2.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np
from scipy import special

from .data import DesignSet
from .errors import BootstrapError, NumericalError, PanelSelectError, RankDeficiencyError
from .normal import (RHO_CLAMP, STREAM_BOOTSTRAP, RhoClampWarning, bivariate_normal_cdf, generate_draws,
                     inverse_mills, philox_uniforms, std_normal_cdf, std_normal_pdf)
from .stage1 import Stage1Config, Stage1Fit, Stage1Params, fit_stage1, implied_error_correlation

logger = logging.getLogger(__name__)

P_FLOOR = 1e-300


@dataclass(frozen=True)
class CorrectionTerms:
    lambda1: np.ndarray
    lambda2: np.ndarray
    p_joint: np.ndarray
    wave: np.ndarray
    z1: np.ndarray  # NaN at wave 1
    z2: np.ndarray
    rho: float
    clamp_events: int = 0


def selection_terms(z1, z2, rho: float):
    """(lambda1, lambda2, P) for scaled indexes ``z1``, ``z2`` and correlation ``rho``.

    Swapping ``z1`` and ``z2`` swaps the two terms exactly.
    """
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    rho = min(max(float(rho), -RHO_CLAMP), RHO_CLAMP)
    root = math.sqrt(1.0 - rho * rho)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RhoClampWarning)
        p = np.asarray(bivariate_normal_cdf(z1, z2, rho), dtype=float).reshape(z1.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam1 = std_normal_pdf(z1) * std_normal_cdf((z2 - rho * z1) / root) / p
        lam2 = std_normal_pdf(z2) * std_normal_cdf((z1 - rho * z2) / root) / p
    return lam1, lam2, p


def correction_terms(design: DesignSet, params: Stage1Params, rho: float | None = None) -> CorrectionTerms:
    """Double-selection correction terms for every wage observation.

    ``rho`` overrides the correlation implied by ``params`` (e.g. 0 to
    switch off the dependence between the two selection rules).
    """
    wd = design.wage
    z1 = wd.z_lagged @ params.theta / math.sqrt(1.0 + params.sigma11)
    z2 = wd.x_current @ params.alpha / math.sqrt(1.0 + params.sigma22)
    r = implied_error_correlation(params) if rho is None else float(rho)
    first = wd.wave == 1
    later = ~first
    clamp_events = 0
    if abs(r) > RHO_CLAMP:
        clamp_events = int(later.sum())
        logger.warning("rho=%.6f clamped to +/-%s for %d observation(s)", r, RHO_CLAMP, clamp_events)
        r = math.copysign(RHO_CLAMP, r)

    lam1 = np.zeros(len(wd))
    lam2 = np.empty(len(wd))
    p = np.empty(len(wd))
    lam2[first] = inverse_mills(z2[first])
    p[first] = std_normal_cdf(z2[first])
    l1, l2, pj = selection_terms(z1[later], z2[later], r)
    low = pj < P_FLOOR
    if low.any():
        i = np.flatnonzero(later)[np.flatnonzero(low)[0]]
        pid = design.person_ids[wd.person[i]]
        raise NumericalError(f"joint selection probability below {P_FLOOR} for person {pid} at wave {wd.wave[i]}")
    lam1[later], lam2[later], p[later] = l1, l2, pj
    return CorrectionTerms(lam1, lam2, p, wd.wave.copy(), np.where(first, np.nan, z1), z2, r, clamp_events)


class SelectionGap(NamedTuple):
    log_points: float
    percent: float


def selection_gap(coef: float, mean_term: float) -> SelectionGap:
    """Wage gap attributed to one selection rule: minus the coefficient times the mean term."""
    gap = -coef * mean_term
    return SelectionGap(gap, 100.0 * gap)


@dataclass(frozen=True)
class Stage2Fit:
    names: tuple[str, ...]
    coef: np.ndarray
    se_naive: np.ndarray  # heteroskedasticity-robust (HC1)
    se_cluster: np.ndarray  # clustered by person (CR1)
    r_squared: float
    r_squared_adj: float
    residual_variance: float  # absorbs var(u3) + var(v3)
    n_by_wave: dict
    mean_lambda1: float = float("nan")
    mean_lambda2: float = float("nan")
    se_bootstrap: np.ndarray | None = None
    corrected: bool = True

    @property
    def n(self) -> int:
        return int(sum(self.n_by_wave.values()))

    @property
    def se(self) -> np.ndarray:
        """Two-stage-aware SEs when a bootstrap was run, else person-clustered SEs."""
        return self.se_bootstrap if self.se_bootstrap is not None else self.se_cluster

    @property
    def se_kind(self) -> str:
        return "bootstrap" if self.se_bootstrap is not None else "cluster"

    @property
    def beta(self) -> np.ndarray:
        k = len(self.coef) - (2 if self.corrected else 0)
        return self.coef[:k]

    @property
    def coef_lambda1(self) -> float:
        return float(self.coef[-2]) if self.corrected else float("nan")

    @property
    def coef_lambda2(self) -> float:
        return float(self.coef[-1]) if self.corrected else float("nan")

    def gaps(self) -> tuple[SelectionGap, SelectionGap]:
        return (selection_gap(self.coef_lambda1, self.mean_lambda1),
                selection_gap(self.coef_lambda2, self.mean_lambda2))


def _check_rank(X, names):
    norms = np.linalg.norm(X, axis=0)
    zero = norms == 0
    if zero.any():
        cols = [names[j] for j in np.flatnonzero(zero)]
        raise RankDeficiencyError(f"regressor(s) identically zero: {', '.join(cols)}", cols)
    Xs = X / norms
    _, sv, vt = np.linalg.svd(Xs, full_matrices=False)
    tol = sv[0] * max(X.shape) * 1e-12
    null = sv <= tol
    if null.any():
        cols = sorted({names[j] for v in vt[null] for j in np.flatnonzero(np.abs(v) > 0.05)}, key=names.index)
        raise RankDeficiencyError(f"collinear regressors: {', '.join(cols)}", cols)


def fit_stage2(design: DesignSet, terms: CorrectionTerms | None, weights=None, corrected: bool = True) -> Stage2Fit:
    """Pooled least squares of log wages on W and (if ``corrected``) both correction terms.

    ``weights`` are per wage observation; by default the design's person
    weights are used.
    """
    wd = design.wage
    if len(wd) == 0:
        raise NumericalError("wage sample is empty")
    if corrected:
        X = np.column_stack([wd.X, terms.lambda1, terms.lambda2])
        names = wd.names + ("lambda1", "lambda2")
    else:
        X = wd.X
        names = wd.names
    y = wd.y
    w = design.person_weight[wd.person] if weights is None else np.asarray(weights, float)
    _check_rank(X * np.sqrt(w)[:, None], list(names))

    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = y - X @ coef
    n, k = X.shape
    XtWX_inv = np.linalg.inv((X * w[:, None]).T @ X)
    score = X * (w * resid)[:, None]

    meat = score.T @ score
    cov_hc1 = XtWX_inv @ meat @ XtWX_inv * (n / max(n - k, 1))

    groups = wd.person
    G = len(np.unique(groups))
    cl = np.zeros((groups.max() + 1, k))
    np.add.at(cl, groups, score)
    cov_cr1 = XtWX_inv @ (cl.T @ cl) @ XtWX_inv
    if G > 1:
        cov_cr1 *= G / (G - 1) * (n - 1) / max(n - k, 1)

    ybar = np.average(y, weights=w)
    ssr = float(w @ resid**2)
    sst = float(w @ (y - ybar) ** 2)
    r2 = 1.0 - ssr / sst if sst > 0 else float("nan")
    r2_adj = 1.0 - (1.0 - r2) * (n - 1) / max(n - k, 1)
    waves, counts = np.unique(wd.wave, return_counts=True)
    return Stage2Fit(
        names=tuple(names),
        coef=coef,
        se_naive=np.sqrt(np.diag(cov_hc1)),
        se_cluster=np.sqrt(np.diag(cov_cr1)),
        r_squared=r2,
        r_squared_adj=r2_adj,
        residual_variance=ssr / w.sum() * n / max(n - k, 1),
        n_by_wave={int(t): int(c) for t, c in zip(waves, counts)},
        mean_lambda1=float(np.average(terms.lambda1, weights=w)) if corrected else float("nan"),
        mean_lambda2=float(np.average(terms.lambda2, weights=w)) if corrected else float("nan"),
        corrected=corrected,
    )


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 100
    seed: int = 0
    max_drop_share: float = 0.10
    n_jobs: int = 1


@dataclass(frozen=True)
class BootstrapResult:
    se: np.ndarray  # stage-2 coefficients
    covariance: np.ndarray
    replicates: np.ndarray  # kept replicates x stage-2 coefficients
    stage1_replicates: np.ndarray  # kept replicates x stage-1 parameters
    indices: np.ndarray  # kept replicates x n (resampled person positions)
    dropped: int
    names: tuple[str, ...] = ()
    stage1_se: np.ndarray = field(default=None)


def resample_indices(seed: int, b: int, n: int) -> np.ndarray:
    """Person positions for bootstrap replicate ``b`` (with replacement)."""
    u = philox_uniforms(seed, STREAM_BOOTSTRAP, n, offset=b * n)
    return np.minimum((u * n).astype(np.int64), n - 1)


def two_stage_bootstrap_se(design: DesignSet, stage1: Stage1Fit, config: BootstrapConfig,
                           stage1_config: Stage1Config = Stage1Config(),
                           statistic: Callable | None = None) -> BootstrapResult:
    """Person-cluster bootstrap of the full two-stage estimator.

    Every replicate resamples persons with replacement, refits stage 1
    (warm-started at ``stage1.params``, with the same draw matrix assigned
    by position) and stage 2. Replicates that fail or do not converge are
    dropped; more than ``max_drop_share`` dropped raises ``BootstrapError``.

    ``statistic(design_b, fit1_b, fit2_b)`` may return extra quantities; by
    default the stage-2 coefficient vector is collected.
    """
    if config.B < 50:
        raise ValueError(f"bootstrap needs B >= 50, got {config.B}")
    n = design.n_persons
    draws = generate_draws(stage1.seed, n, stage1.R_used, antithetic=stage1_config.antithetic)
    cfg1 = replace(stage1_config, start=stage1.params, start_covariance=stage1.covariance, polish=False,
                   R=stage1.R_used, seed=stage1.seed)

    def one(b):
        idx = resample_indices(config.seed, b, n)
        rep = design.take(idx)
        try:
            f1 = _fit_stage1_quiet(rep, cfg1, draws)
            if f1.convergence != "converged" and f1.gradient_norm > 10 * cfg1.gtol:
                return b, idx, None, None
            f2 = fit_stage2(rep, correction_terms(rep, f1.params))
            stat = f2.coef if statistic is None else np.asarray(statistic(rep, f1, f2), float)
        except PanelSelectError as exc:
            logger.info("bootstrap replicate %d dropped: %s", b, exc)
            return b, idx, None, None
        return b, idx, stat, f1.params.vector()

    if config.n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(config.n_jobs) as pool:
            results = list(pool.map(one, range(config.B)))
    else:
        results = [one(b) for b in range(config.B)]

    kept = [r for r in results if r[2] is not None]
    dropped = config.B - len(kept)
    if dropped > config.max_drop_share * config.B:
        raise BootstrapError(f"{dropped} of {config.B} bootstrap replicates failed")
    reps = np.array([r[2] for r in kept])
    s1 = np.array([r[3] for r in kept])
    cov = np.atleast_2d(np.cov(reps, rowvar=False, ddof=1))
    s1_cov = np.atleast_2d(np.cov(s1, rowvar=False, ddof=1))
    names = ()
    if statistic is None:
        names = design.wage.names + ("lambda1", "lambda2")
    return BootstrapResult(
        se=np.sqrt(np.clip(np.diag(cov), 0, None)),
        covariance=cov,
        replicates=reps,
        stage1_replicates=s1,
        indices=np.array([r[1] for r in kept]),
        dropped=dropped,
        names=names,
        stage1_se=np.sqrt(np.clip(np.diag(s1_cov), 0, None)),
    )


def _fit_stage1_quiet(design, cfg, draws):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit_stage1(design, replace(cfg, compute_covariance=False), draws=draws)

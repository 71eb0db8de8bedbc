"""Joint attrition/employment probit with correlated random effects.

The person-level likelihood conditional on the random effects
``u = (u1, u2)`` is a product of univariate probit terms: one employment
term per responding wave and one attrition term per wave t >= 2 at which
the person was still in the sample (``P(a=1 | u) = Phi(Z[t-1] @ theta +
u1)``). Integrating over ``u1 = s1*eta1 + s2*eta2``, ``u2 = s3*eta2`` is
done by simulation with draws held fixed for the whole fit, and the
simulated log-likelihood is maximized by BFGS with an analytic gradient.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, sparse, special

from .data import DesignSet, EquationDesign, PersonDesign
from .errors import NonIdentifiedError, NumericalError, SingularHessianError, StartPointError
from .normal import DrawMatrix, generate_draws

logger = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
LOADINGS = ("s1", "s2", "s3")


@dataclass(frozen=True)
class Stage1Params:
    theta: np.ndarray
    alpha: np.ndarray
    s1: float = 0.0
    s2: float = 0.0
    s3: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        for s in LOADINGS:
            object.__setattr__(self, s, float(getattr(self, s)))

    @property
    def sigma11(self) -> float:
        return self.s1**2 + self.s2**2

    @property
    def sigma12(self) -> float:
        return self.s2 * self.s3

    @property
    def sigma22(self) -> float:
        return self.s3**2

    def vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.alpha, [self.s1, self.s2, self.s3]])

    @classmethod
    def from_vector(cls, vec, k_theta: int) -> "Stage1Params":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:k_theta], vec[k_theta:-3], *vec[-3:])

    def normalized(self) -> "Stage1Params":
        """Representative with s3 >= 0; (s1, s2, s3) and its negation are observationally equivalent."""
        if self.s3 < 0:
            return replace(self, s1=-self.s1, s2=-self.s2, s3=-self.s3)
        return self


def implied_error_correlation(params: Stage1Params) -> float:
    """Correlation of the standardized composite errors of the two selection rules."""
    s1, s2, s3 = params.s1, params.s2, params.s3
    return (s2 * s3) / math.sqrt((1.0 + s1 * s1 + s2 * s2) * (1.0 + s3 * s3))


def random_effects_correlation(params: Stage1Params) -> float:
    """corr(u1, u2) implied by the loadings (NaN if either variance is 0)."""
    denom = math.sqrt(params.sigma11 * params.sigma22)
    return params.sigma12 / denom if denom > 0 else float("nan")


def parameter_names(design: DesignSet) -> list[str]:
    return ([f"attrition:{n}" for n in design.attrition.names]
            + [f"employment:{n}" for n in design.employment.names] + list(LOADINGS))


# -- single-person reference path -------------------------------------------------


def conditional_person_likelihood(person: PersonDesign, u, params: Stage1Params) -> float:
    """Likelihood of one person's selection history given ``u = (u1, u2)``."""
    u1, u2 = u
    qa = 2.0 * person.a - 1.0
    qe = 2.0 * person.e - 1.0
    log_l = (special.log_ndtr(qa * (person.z @ params.theta + u1)).sum()
             + special.log_ndtr(qe * (person.x @ params.alpha + u2)).sum())
    return float(math.exp(log_l))


def simulated_person_likelihood(person: PersonDesign, draws: np.ndarray, params: Stage1Params) -> float:
    """Average of the conditional likelihood over ``draws`` of shape (R, 2)."""
    p = params.normalized()
    draws = np.asarray(draws, dtype=float).reshape(-1, 2)
    vals = [
        conditional_person_likelihood(person, (p.s1 * e1 + p.s2 * e2, p.s3 * e2), p)
        for e1, e2 in draws
    ]
    return math.fsum(vals) / len(vals)


# -- vectorized objective ----------------------------------------------------------


@dataclass
class _Block:
    """Rows of one equation belonging to a contiguous range of persons."""

    X: np.ndarray
    q: np.ndarray
    person: np.ndarray  # local person index
    agg: sparse.csr_matrix  # persons x rows, ones


def _blocks(eq: EquationDesign, bounds):
    order = np.argsort(eq.person, kind="stable")
    person = eq.person[order]
    out = []
    for p0, p1 in bounds:
        lo, hi = np.searchsorted(person, p0), np.searchsorted(person, p1)
        rows = order[lo:hi]
        local = person[lo:hi] - p0
        agg = sparse.csr_matrix((np.ones(len(rows)), (local, np.arange(len(rows)))), shape=(p1 - p0, len(rows)))
        out.append(_Block(eq.X[rows], 2.0 * eq.y[rows] - 1.0, local, agg))
    return out


class SimulatedLikelihood:
    """Simulated log-likelihood of a design with a fixed set of draws.

    Persons are processed in fixed-size chunks whose results are combined
    in chunk order, so values do not depend on ``n_jobs``.
    """

    def __init__(self, design: DesignSet, draws: DrawMatrix, weights=None, chunk_size: int = 1024,
                 n_jobs: int = 1):
        if draws.n < design.n_persons:
            raise ValueError(f"draws cover {draws.n} persons, design has {design.n_persons}")
        self.design = design
        self.draws = draws
        self.n = design.n_persons
        self.R = draws.R
        self.k_theta = design.attrition.k
        self.k_alpha = design.employment.k
        w = design.person_weight if weights is None else np.broadcast_to(np.asarray(weights, float), (self.n,))
        self.weights = np.asarray(w, dtype=float)
        self.n_jobs = n_jobs
        self.bounds = [(p0, min(p0 + chunk_size, self.n)) for p0 in range(0, self.n, chunk_size)]
        self._attr = _blocks(design.attrition, self.bounds)
        self._emp = _blocks(design.employment, self.bounds)

    @property
    def dim(self) -> int:
        return self.k_theta + self.k_alpha + 3

    def _map(self, fn):
        idx = range(len(self.bounds))
        if self.n_jobs > 1 and len(self.bounds) > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                return list(pool.map(fn, idx))
        return [fn(i) for i in idx]

    @staticmethod
    def _terms(block: _Block, coef, shift):
        m = (block.X @ coef)[:, None] + shift[block.person]
        qm = block.q[:, None] * m
        return qm, special.log_ndtr(qm)

    def _chunk(self, c, theta, alpha, s, want_grad):
        p0, p1 = self.bounds[c]
        eta = self.draws.values[p0:p1]
        u1 = s[0] * eta[:, :, 0] + s[1] * eta[:, :, 1]
        u2 = s[2] * eta[:, :, 1]
        ba, be = self._attr[c], self._emp[c]
        qa, la = self._terms(ba, theta, u1)
        qe, le = self._terms(be, alpha, u2)
        ell = ba.agg @ la + be.agg @ le
        top = ell.max(axis=1)
        lse = top + np.log(np.exp(ell - top[:, None]).sum(axis=1))
        log_l = lse - math.log(self.R)
        if not want_grad:
            return log_l, None
        w = self.weights[p0:p1]
        post = np.exp(ell - lse[:, None]) * w[:, None]  # weighted draw posteriors
        ga = ba.q[:, None] * np.exp(-0.5 * qa * qa - _LOG_SQRT_2PI - la)
        ge = be.q[:, None] * np.exp(-0.5 * qe * qe - _LOG_SQRT_2PI - le)
        g_theta = ba.X.T @ (post[ba.person] * ga).sum(axis=1)
        g_alpha = be.X.T @ (post[be.person] * ge).sum(axis=1)
        GA = ba.agg @ ga
        GE = be.agg @ ge
        g_s = np.array([
            (post * eta[:, :, 0] * GA).sum(),
            (post * eta[:, :, 1] * GA).sum(),
            (post * eta[:, :, 1] * GE).sum(),
        ])
        return log_l, np.concatenate([g_theta, g_alpha, g_s])

    def _split(self, vec):
        vec = np.asarray(vec, dtype=float)
        theta, alpha, s = vec[:self.k_theta], vec[self.k_theta:self.k_theta + self.k_alpha], vec[-3:].copy()
        flip = s[2] < 0
        if flip:
            s = -s
        return theta, alpha, s, flip

    def person_loglik(self, vec) -> np.ndarray:
        theta, alpha, s, _ = self._split(vec)
        parts = self._map(lambda c: self._chunk(c, theta, alpha, s, False)[0])
        out = np.concatenate(parts)
        self._check(out)
        return out

    def _check(self, log_l):
        bad = ~np.isfinite(log_l)
        if bad.any():
            pid = self.design.person_ids[np.flatnonzero(bad)[0]]
            raise NumericalError(f"simulated likelihood is zero or non-finite for person {pid}")

    def loglik(self, vec) -> float:
        return math.fsum(self.weights * self.person_loglik(vec))

    def loglik_and_grad(self, vec):
        theta, alpha, s, flip = self._split(vec)
        parts = self._map(lambda c: self._chunk(c, theta, alpha, s, True))
        log_l = np.concatenate([p[0] for p in parts])
        self._check(log_l)
        grad = np.zeros(self.dim)
        for _, g in parts:
            grad += g
        if flip:
            grad[-3:] = -grad[-3:]
        return math.fsum(self.weights * log_l), grad


def simulated_loglik(design: DesignSet, draws: DrawMatrix, params: Stage1Params, weights=None,
                     n_jobs: int = 1) -> float:
    """Sum over persons of weight * log(simulated likelihood)."""
    return SimulatedLikelihood(design, draws, weights=weights, n_jobs=n_jobs).loglik(params.vector())


# -- estimation --------------------------------------------------------------------


def fit_probit(X, y, weights=None, max_iter: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Pooled probit by Newton-Raphson with step halving."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    q = 2.0 * y - 1.0
    b = np.zeros(X.shape[1])

    def ll(b):
        return float(w @ special.log_ndtr(q * (X @ b)))

    cur = ll(b)
    for _ in range(max_iter):
        qm = q * (X @ b)
        lam = np.exp(-0.5 * qm * qm - _LOG_SQRT_2PI - special.log_ndtr(qm))
        g = X.T @ (w * q * lam)
        hdiag = lam * (lam + qm)
        H = (X * (w * hdiag)[:, None]).T @ X
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while t > 1e-8:
            new = ll(b + t * step)
            if new >= cur:
                break
            t *= 0.5
        b = b + t * step
        done = abs(new - cur) < tol * (1.0 + abs(cur))
        cur = new
        if done:
            break
    return b


@dataclass(frozen=True)
class Stage1Config:
    R: int = 50
    seed: int = 0
    max_iter: int = 500
    gtol: float = 1e-6
    start: Stage1Params | None = None
    # covariance of the free parameters at ``start``; seeds the BFGS inverse Hessian
    start_covariance: np.ndarray | None = None
    freeze_loadings: bool = False
    antithetic: bool = False
    polish: bool = True
    compute_covariance: bool = True
    n_jobs: int = 1
    # a coefficient beyond this bound on a flat direction marks non-identification
    coef_bound: float = 5.0


@dataclass(frozen=True)
class Stage1Fit:
    params: Stage1Params
    loglik: float
    covariance: np.ndarray  # over free parameters
    names: tuple[str, ...]  # all parameters
    free: np.ndarray  # boolean mask over all parameters
    R_used: int
    seed: int
    convergence: str  # "converged" | "max-iter" | "line-search-failure"
    iterations: int
    gradient_norm: float
    trace: tuple[float, ...] = field(default=(), repr=False)
    n_persons: int = 0

    @property
    def se(self) -> np.ndarray:
        out = np.full(len(self.names), np.nan)
        out[self.free] = np.sqrt(np.diag(self.covariance))
        return out

    @property
    def rho(self) -> float:
        return implied_error_correlation(self.params)

    def table(self):
        """Rows of (name, estimate, se)."""
        return list(zip(self.names, self.params.vector(), self.se))


def starting_values(design: DesignSet, freeze_loadings: bool = False) -> Stage1Params:
    """Separate pooled probits for the two equations, then s1 = s2 = 0.1, s3 = 0.5."""
    w_a = design.person_weight[design.attrition.person]
    w_e = design.person_weight[design.employment.person]
    theta = (fit_probit(design.attrition.X, design.attrition.y, w_a) if len(design.attrition)
             else np.zeros(design.attrition.k))
    alpha = fit_probit(design.employment.X, design.employment.y, w_e)
    if freeze_loadings:
        return Stage1Params(theta, alpha, 0.0, 0.0, 0.0)
    has_attr = len(design.attrition) > 0
    return Stage1Params(theta, alpha, 0.1 if has_attr else 0.0, 0.1 if has_attr else 0.0, 0.5)


def _free_mask(design: DesignSet, freeze_loadings: bool) -> np.ndarray:
    k_t, k_a = design.attrition.k, design.employment.k
    free = np.ones(k_t + k_a + 3, dtype=bool)
    if len(design.attrition) == 0:
        # no attrition decisions observed: theta, s1 and s2 do not enter
        free[:k_t] = False
        free[-3:-1] = False
    if freeze_loadings:
        free[-3:] = False
    return free


def numerical_hessian(fun_grad, x, step: float = 1e-4) -> np.ndarray:
    """Central differences of an analytic gradient; symmetrized."""
    x = np.asarray(x, float)
    k = len(x)
    H = np.empty((k, k))
    for j in range(k):
        h = step * max(1.0, abs(x[j]))
        e = np.zeros(k)
        e[j] = h
        H[:, j] = (fun_grad(x + e)[1] - fun_grad(x - e)[1]) / (2.0 * h)
    return 0.5 * (H + H.T)


def _covariance_from_hessian(H_loglik, names, n_persons):
    info = -H_loglik
    vals, vecs = np.linalg.eigh(info)
    tol = 1e-7 * max(n_persons, 1)
    flat = vals <= tol
    if flat.any():
        dirs = []
        for j in np.flatnonzero(flat):
            v = vecs[:, j]
            dirs.append("+".join(names[i] for i in np.flatnonzero(np.abs(v) > 0.2)) or names[int(np.argmax(np.abs(v)))])
        raise SingularHessianError("information matrix is singular along: " + "; ".join(dirs), dirs)
    cov = (vecs / vals) @ vecs.T
    cov = 0.5 * (cov + cov.T)
    cvals, cvecs = np.linalg.eigh(cov)
    if (cvals < 0).any():
        warnings.warn("covariance projected onto the PSD cone", RuntimeWarning, stacklevel=3)
        cov = (cvecs * np.clip(cvals, 0, None)) @ cvecs.T
    return cov


def stage1_standard_errors(design: DesignSet, draws: DrawMatrix, params: Stage1Params, free=None,
                           gtol: float = 1e-4, n_jobs: int = 1) -> np.ndarray:
    """Inverse of the negative numerical Hessian of the simulated log-likelihood.

    Returns the covariance over the parameters selected by ``free`` (all by
    default), in the order of ``parameter_names``.
    """
    obj = SimulatedLikelihood(design, draws, n_jobs=n_jobs)
    x = params.normalized().vector()
    free = np.ones(len(x), dtype=bool) if free is None else np.asarray(free, bool)
    names = [n for n, f in zip(parameter_names(design), free) if f]

    def sub(xf):
        full = x.copy()
        full[free] = xf
        ll, g = obj.loglik_and_grad(full)
        return ll, g[free]

    g = sub(x[free])[1]
    scale = float(obj.weights.sum())
    if np.max(np.abs(g), initial=0.0) / scale > gtol:
        warnings.warn("standard errors evaluated away from a stationary point", RuntimeWarning, stacklevel=2)
    H = numerical_hessian(sub, x[free])
    return _covariance_from_hessian(H, names, scale)


def fit_stage1(design: DesignSet, config: Stage1Config = Stage1Config(), draws: DrawMatrix | None = None) -> Stage1Fit:
    """Maximize the simulated log-likelihood.

    Draws are generated once from ``config.seed`` (unless given) and reused
    at every iteration. ``config.gtol`` bounds the largest component of the
    gradient of the mean (per unit weight) log-likelihood.
    """
    if draws is None:
        draws = generate_draws(config.seed, design.n_persons, config.R, antithetic=config.antithetic)
    names = parameter_names(design)
    free = _free_mask(design, config.freeze_loadings)
    start = config.start if config.start is not None else starting_values(design, config.freeze_loadings)
    x_full = start.vector()
    if config.freeze_loadings and config.start is None:
        x_full[-3:] = 0.0
    eval_draws = draws
    if config.freeze_loadings and not np.any(x_full[~free]):
        # zero loadings: every draw gives the same contribution
        eval_draws = DrawMatrix(draws.values[:, :1], draws.seed, draws.antithetic)
    obj = SimulatedLikelihood(design, eval_draws, n_jobs=config.n_jobs)
    scale = float(obj.weights.sum())

    def f(xf):
        full = x_full.copy()
        full[free] = xf
        ll, g = obj.loglik_and_grad(full)
        return -ll / scale, -g[free] / scale

    x0 = x_full[free]
    try:
        f0, g0 = f(x0)
    except NumericalError as exc:
        raise StartPointError(f"objective not finite at the starting values: {exc}") from exc
    if not np.isfinite(f0) or not np.all(np.isfinite(g0)):
        raise StartPointError("objective not finite at the starting values")

    trace = [f0]

    def record(intermediate_result):
        trace.append(float(intermediate_result.fun))

    options = {"gtol": config.gtol, "maxiter": config.max_iter}
    if config.start_covariance is not None and np.all(np.isfinite(config.start_covariance)):
        # f is -loglik / scale, so its inverse Hessian is the covariance times scale
        options["hess_inv0"] = np.asarray(config.start_covariance, float) * scale
    res = optimize.minimize(f, x0, jac=True, method="BFGS", callback=record, options=options)
    x, fx, gx = res.x, res.fun, res.jac
    iterations = int(res.nit)

    H = None
    if config.polish and x.size:
        for _ in range(4):
            if iterations >= config.max_iter or np.max(np.abs(gx)) <= config.gtol * 1e-3:
                break
            H = numerical_hessian(f, x)
            try:
                np.linalg.cholesky(H)
            except np.linalg.LinAlgError:
                break
            step = np.linalg.solve(H, gx)
            cand = x - step
            fc, gc = f(cand)
            if not (np.isfinite(fc) and fc <= fx):
                break
            x, fx, gx = cand, fc, gc
            trace.append(fx)
            H = None
            iterations += 1

    gnorm = float(np.max(np.abs(gx), initial=0.0))
    if gnorm <= config.gtol:
        status = "converged"
    elif res.status == 1 or iterations >= config.max_iter:
        status = "max-iter"
    else:
        status = "line-search-failure"

    full = x_full.copy()
    full[free] = x
    params = Stage1Params.from_vector(full, design.attrition.k).normalized()
    full = params.vector()
    free_names = [n for n, m in zip(names, free) if m]

    def sub(xf):
        z = full.copy()
        z[free] = xf
        ll, g = obj.loglik_and_grad(z)
        return ll, g[free]

    cov = np.full((int(free.sum()),) * 2, np.nan)
    if config.compute_covariance:
        H_ll = numerical_hessian(sub, full[free]) if x.size else np.zeros((0, 0))
        try:
            cov = _covariance_from_hessian(H_ll, free_names, scale)
        except SingularHessianError as exc:
            big = [n for n, v in zip(free_names, full[free]) if abs(v) > config.coef_bound]
            if big and gnorm <= max(config.gtol, 1e-4):
                raise NonIdentifiedError(
                    "estimates diverge along a flat likelihood direction (perfect prediction?): "
                    + ", ".join(big), big) from exc
            raise

    return Stage1Fit(
        params=params,
        loglik=-fx * scale,
        covariance=cov,
        names=tuple(names),
        free=free,
        R_used=draws.R,
        seed=draws.seed,
        convergence=status,
        iterations=iterations,
        gradient_norm=gnorm,
        trace=tuple(trace),
        n_persons=design.n_persons,
    )

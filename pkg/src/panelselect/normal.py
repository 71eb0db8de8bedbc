"""Normal-distribution primitives and reproducible draw generation.

All functions accept scalars or numpy arrays and are pure.

Random numbers come from the Philox4x64-10 counter-based generator as
shipped with numpy. Raw 64-bit outputs are mapped to uniforms on the open
interval (0, 1) by keeping the top 53 bits and centering, and uniforms are
mapped to normals with the inverse CDF (``scipy.special.ndtri``). The raw
stream is consumed in a fixed person-major order, so the values assigned to
person ``i`` never depend on how many persons are generated or on threading.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .errors import DomainError

__all__ = [
    "DrawMatrix",
    "RhoClampWarning",
    "RHO_CLAMP",
    "bivariate_normal_cdf",
    "generate_draws",
    "inverse_mills",
    "philox_uniforms",
    "std_normal_cdf",
    "std_normal_pdf",
]

RHO_CLAMP = 0.9999
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_TWO_PI = 2.0 * math.pi

# Philox keys are 128 bit: the low word carries the user seed, the high word
# separates independent streams that share a seed.
STREAM_DRAWS = 1
STREAM_DGP = 2
STREAM_BOOTSTRAP = 3


class RhoClampWarning(RuntimeWarning):
    """Correlation was clamped to +/-RHO_CLAMP."""


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x - _LOG_SQRT_2PI)
    return out[()] if out.ndim == 0 else out


def std_normal_cdf(x):
    out = special.ndtr(np.asarray(x, dtype=float))
    return out[()] if np.ndim(out) == 0 else out


def log_std_normal_cdf(x):
    out = special.log_ndtr(np.asarray(x, dtype=float))
    return out[()] if np.ndim(out) == 0 else out


def inverse_mills(x):
    """phi(x) / Phi(x), evaluated in log space.

    Stable far into the left tail, where both numerator and denominator
    underflow (the ratio behaves like ``-x - 1/x``).
    """
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x - _LOG_SQRT_2PI - special.log_ndtr(x))
    return out[()] if out.ndim == 0 else out


@lru_cache(maxsize=None)
def _legendre(order: int):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    # shift to (0, 2): the integrands below are written for 1 + t
    return 1.0 + nodes, weights


def _bvn_upper(h, k, r):
    """P(X > h, Y > k) for standard bivariate normal with correlation r.

    Drezner-Wesolowsky as refined by Genz: Gauss-Legendre quadrature over
    the correlation integral for |r| < 0.925, and the asymptotic expansion
    around r = +/-1 otherwise. Inputs are finite 1-d arrays of equal length.
    """
    out = np.empty_like(h)
    ar = np.abs(r)

    zero = r == 0.0
    out[zero] = special.ndtr(-h[zero]) * special.ndtr(-k[zero])

    for lo, hi, order in ((0.0, 0.3, 6), (0.3, 0.75, 12), (0.75, 0.925, 20)):
        m = (~zero) & (ar >= lo) & (ar < hi)
        if not m.any():
            continue
        x, w = _legendre(order)
        hm, km, rm = h[m], k[m], r[m]
        hk = hm * km
        hs = 0.5 * (hm * hm + km * km)
        asr = 0.5 * np.arcsin(rm)
        sn = np.sin(asr[:, None] * x[None, :])
        vals = np.exp((sn * hk[:, None] - hs[:, None]) / (1.0 - sn * sn)) @ w
        out[m] = vals * asr / _TWO_PI + special.ndtr(-hm) * special.ndtr(-km)

    m = ar >= 0.925
    if m.any():
        x, w = _legendre(20)
        hm, rm = h[m], r[m]
        km = np.where(rm < 0, -k[m], k[m])
        hk = hm * km
        bvn = np.zeros_like(hm)
        inner = np.abs(rm) < 1.0
        if inner.any():
            hi_, ki, hki, ri = hm[inner], km[inner], hk[inner], rm[inner]
            as_ = 1.0 - ri * ri
            a = np.sqrt(as_)
            bs = (hi_ - ki) ** 2
            c = (4.0 - hki) / 8.0
            d = (12.0 - hki) / 80.0
            with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
                asr = -(bs / as_ + hki) / 2.0
                v = np.where(
                    asr > -100.0,
                    a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_),
                    0.0,
                )
                b = np.sqrt(bs)
                sp = math.sqrt(_TWO_PI) * special.ndtr(-b / a)
                v = v - np.where(
                    hki > -100.0,
                    np.exp(-hki / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0),
                    0.0,
                )
                a2 = a / 2.0
                xs = (a2[:, None] * x[None, :]) ** 2
                asr2 = -(bs[:, None] / xs + hki[:, None]) / 2.0
                sp2 = 1.0 + c[:, None] * xs * (1.0 + 5.0 * d[:, None] * xs)
                rs = np.sqrt(1.0 - xs)
                ep = np.exp(-(hki[:, None] / 2.0) * xs / (1.0 + rs) ** 2) / rs
                terms = np.where(asr2 > -100.0, np.exp(asr2) * (sp2 - ep), 0.0) @ w
            bvn[inner] = (a2 * terms - v) / _TWO_PI
        pos = rm > 0
        bvn[pos] += special.ndtr(-np.maximum(hm[pos], km[pos]))
        neg = ~pos
        if neg.any():
            hn, kn, bn = hm[neg], km[neg], bvn[neg]
            span = np.where(hn < 0, special.ndtr(kn) - special.ndtr(hn), special.ndtr(-hn) - special.ndtr(-kn))
            bvn[neg] = np.where(hn >= kn, -bn, span - bn)
        out[m] = bvn

    return np.clip(out, 0.0, 1.0)


def bivariate_normal_cdf(a, b, rho):
    """P(U <= a, V <= b) for a standard bivariate normal with correlation rho.

    ``rho`` is clamped to [-RHO_CLAMP, RHO_CLAMP]; a ``RhoClampWarning`` is
    issued when that happens. Infinite limits are allowed.
    """
    a, b, rho = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(rho, dtype=float)
    )
    shape = a.shape
    a, b, rho = a.ravel(), b.ravel(), rho.ravel().copy()
    if np.isnan(a).any() or np.isnan(b).any() or np.isnan(rho).any():
        raise DomainError("bivariate_normal_cdf: NaN input")
    clamped = np.abs(rho) > RHO_CLAMP
    if clamped.any():
        warnings.warn(
            f"correlation clamped to +/-{RHO_CLAMP} for {int(clamped.sum())} value(s)",
            RhoClampWarning,
            stacklevel=2,
        )
        rho = np.clip(rho, -RHO_CLAMP, RHO_CLAMP)

    # fixed argument order makes F(a, b) == F(b, a) bit for bit
    h, k = -np.minimum(a, b), -np.maximum(a, b)
    out = np.empty_like(h)
    fin = np.isfinite(h) & np.isfinite(k)
    out[fin] = _bvn_upper(h[fin], k[fin], rho[fin])
    if (~fin).any():
        hi, ki = h[~fin], k[~fin]
        v = np.where(
            (hi == np.inf) | (ki == np.inf),
            0.0,
            np.where(hi == -np.inf, special.ndtr(-ki), special.ndtr(-hi)),
        )
        out[~fin] = v
    out = out.reshape(shape)
    return out[()] if out.ndim == 0 else out


def philox_uniforms(seed: int, stream: int, size: int, offset: int = 0) -> np.ndarray:
    """Uniforms on (0, 1) from the Philox stream keyed by (seed, stream).

    ``offset`` skips that many raw outputs, so any slice of the stream can
    be regenerated without producing the prefix.
    """
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    bitgen = np.random.Philox(key=seed + (stream << 64))
    if offset:
        # Philox emits 4 words per counter increment
        blocks, rem = divmod(offset, 4)
        bitgen.advance(blocks)
        if rem:
            bitgen.random_raw(rem)
    raw = bitgen.random_raw(size)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


@dataclass(frozen=True)
class DrawMatrix:
    """Standard normal draws, shape (n, R, 2): (eta1, eta2) per person and draw."""

    values: np.ndarray
    seed: int
    antithetic: bool = False

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def R(self) -> int:
        return self.values.shape[1]

    def take(self, index) -> "DrawMatrix":
        vals = self.values[np.asarray(index)]
        vals.setflags(write=False)
        return DrawMatrix(vals, self.seed, self.antithetic)


def generate_draws(seed: int, n: int, R: int, antithetic: bool = False) -> DrawMatrix:
    """Draw an n x R x 2 matrix of independent standard normals.

    With ``antithetic=True`` (R must be even) the second half of each
    person's draws is the negation of the first half.
    """
    if n < 1 or R < 1:
        raise ValueError(f"need n >= 1 and R >= 1, got n={n}, R={R}")
    if antithetic:
        if R % 2:
            raise ValueError("antithetic draws need an even R")
        half = special.ndtri(philox_uniforms(seed, STREAM_DRAWS, n * R)).reshape(n, R // 2, 2)
        vals = np.concatenate([half, -half], axis=1)
    else:
        vals = special.ndtri(philox_uniforms(seed, STREAM_DRAWS, n * R * 2)).reshape(n, R, 2)
    vals.setflags(write=False)
    return DrawMatrix(vals, seed, antithetic)

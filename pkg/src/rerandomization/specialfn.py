"""Special functions and the elementary samplers built on them.

All functions accept scalars or numpy arrays and broadcast; scalar inputs
return Python floats.
"""

from __future__ import annotations

import math
from typing import Union

import numpy as np

from .errors import DomainError

ArrayLike = Union[float, np.ndarray]

_EPS = 1e-16
_FPMIN = 1e-300
_MAX_ITER = 5000
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


class SeededGenerator:
    """Reproducible random stream identified by ``(seed, stream_index)``.

    Streams with different indices are derived through numpy's
    ``SeedSequence`` spawn keys, so they are statistically independent and
    do not depend on how many other streams exist or which thread uses
    them.  Instances are meant to have a single owner.
    """

    def __init__(self, seed: int, stream_index: int = 0, _path: tuple[int, ...] = ()):
        if seed < 0 or stream_index < 0:
            raise DomainError("seed and stream_index must be non-negative")
        self.seed = int(seed)
        self.stream_index = int(stream_index)
        self._path = tuple(int(p) for p in _path)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_index, *self._path))
        self.rng = np.random.Generator(np.random.PCG64(seq))

    def child(self, index: int) -> "SeededGenerator":
        """Independent sub-stream, e.g. one per tier or per model component."""
        return SeededGenerator(self.seed, self.stream_index, (*self._path, index))

    def __repr__(self) -> str:
        path = f", path={self._path}" if self._path else ""
        return f"SeededGenerator(seed={self.seed}, stream_index={self.stream_index}{path})"


def as_rng(g: "SeededGenerator | np.random.Generator | int | None") -> np.random.Generator:
    if isinstance(g, SeededGenerator):
        return g.rng
    if isinstance(g, np.random.Generator):
        return g
    if g is None or isinstance(g, (int, np.integer)):
        return SeededGenerator(0 if g is None else int(g)).rng
    raise TypeError(f"cannot use {type(g).__name__} as a random generator")


def _out(value: np.ndarray, scalar: bool):
    return float(value) if scalar else value


# ---------------------------------------------------------------------------
# log-gamma pieces


def _lgamma(s: np.ndarray) -> np.ndarray:
    flat = s.ravel()
    uniq, inv = np.unique(flat, return_inverse=True)
    vals = np.array([math.lgamma(v) for v in uniq])
    return vals[inv].reshape(s.shape)


def _stirling_tail(s: np.ndarray) -> np.ndarray:
    # lgamma(s) - [(s - 1/2) log s - s + log(2 pi)/2], valid for s >= 10
    r = 1.0 / s
    r2 = r * r
    return r * (1 / 12 - r2 * (1 / 360 - r2 * (1 / 1260 - r2 * (1 / 1680 - r2 / 1188))))


def _t_minus_1_minus_log(t: np.ndarray) -> np.ndarray:
    """t - 1 - log(t), with a series near t = 1."""
    d = t - 1.0
    out = np.empty_like(d)
    small = np.abs(d) < 0.3
    ds = d[small]
    acc = np.zeros_like(ds)
    power = ds * ds
    for j in range(2, 40):
        acc += (power / j) if j % 2 == 0 else (-power / j)
        power = power * ds
    out[small] = acc
    tl = t[~small]
    out[~small] = (tl - 1.0) - np.log(tl)
    return out


def _log_prefactor(s: np.ndarray, x: np.ndarray) -> np.ndarray:
    """log(x**s * exp(-x) / Gamma(s)), accurate for large s and x near s."""
    out = np.empty(np.broadcast(s, x).shape)
    s, x = np.broadcast_arrays(s, x)
    with np.errstate(divide="ignore"):
        big = s >= 10.0
        sm = ~big
        out[sm] = s[sm] * np.log(x[sm]) - x[sm] - _lgamma(s[sm])
        sb, xb = s[big], x[big]
        if sb.size:
            out[big] = (
                -sb * _t_minus_1_minus_log(xb / sb) + 0.5 * np.log(sb) - _HALF_LOG_2PI - _stirling_tail(sb)
            )
    return out


# ---------------------------------------------------------------------------
# regularized incomplete gamma


def _gamma_series(s: np.ndarray, x: np.ndarray) -> np.ndarray:
    """log of sum_{n>=0} x^n / (s (s+1) ... (s+n))."""
    ap = s.copy()
    term = 1.0 / s
    total = term.copy()
    active = np.ones(s.shape, dtype=bool)
    for _ in range(_MAX_ITER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ap[idx] += 1.0
        term[idx] *= x[idx] / ap[idx]
        total[idx] += term[idx]
        active[idx] = np.abs(term[idx]) > np.abs(total[idx]) * _EPS
    return np.log(total)


def _gamma_cfrac(s: np.ndarray, x: np.ndarray) -> np.ndarray:
    """log of the continued fraction for Q(s, x), modified Lentz."""
    b = x + 1.0 - s
    c = np.full(s.shape, 1.0 / _FPMIN)
    d = 1.0 / b
    h = d.copy()
    active = np.ones(s.shape, dtype=bool)
    for i in range(1, _MAX_ITER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        an = -i * (i - s[idx])
        b[idx] += 2.0
        di = an * d[idx] + b[idx]
        di[np.abs(di) < _FPMIN] = _FPMIN
        ci = b[idx] + an / c[idx]
        ci[np.abs(ci) < _FPMIN] = _FPMIN
        di = 1.0 / di
        delta = di * ci
        d[idx] = di
        c[idx] = ci
        h[idx] *= delta
        active[idx] = np.abs(delta - 1.0) > _EPS
    return np.log(h)


def _gamma_pq(s: np.ndarray, x: np.ndarray):
    """Return (log P, P, Q) for the regularized incomplete gamma function."""
    s, x = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(x, dtype=float))
    log_p = np.empty(s.shape)
    p = np.empty(s.shape)
    q = np.empty(s.shape)

    zero = x <= 0.0
    inf = np.isinf(x)
    log_p[zero], p[zero], q[zero] = -np.inf, 0.0, 1.0
    log_p[inf], p[inf], q[inf] = 0.0, 1.0, 0.0

    finite = ~zero & ~inf
    series = finite & (x < s + 1.0)
    frac = finite & ~series
    if series.any():
        ss, xs = s[series], x[series]
        lp = _log_prefactor(ss, xs) + _gamma_series(ss, xs)
        log_p[series] = lp
        p[series] = np.exp(lp)
        q[series] = -np.expm1(lp)
    if frac.any():
        sf, xf = s[frac], x[frac]
        lq = _log_prefactor(sf, xf) + _gamma_cfrac(sf, xf)
        qf = np.exp(lq)
        q[frac] = qf
        p[frac] = 1.0 - qf
        log_p[frac] = np.log1p(-qf)
    return log_p, p, q


def regularized_lower_gamma(s: ArrayLike, x: ArrayLike) -> ArrayLike:
    """P(s, x) = gamma(s, x) / Gamma(s) for s > 0, x >= 0."""
    scalar = np.ndim(s) == 0 and np.ndim(x) == 0
    s_arr = np.asarray(s, dtype=float)
    x_arr = np.asarray(x, dtype=float)
    if np.any(s_arr <= 0) or np.any(x_arr < 0) or np.any(np.isnan(x_arr)):
        raise DomainError("regularized_lower_gamma needs s > 0 and x >= 0")
    return _out(_gamma_pq(s_arr, x_arr)[1], scalar)


def _check_dof(k) -> np.ndarray:
    k_arr = np.asarray(k, dtype=float)
    if np.any(k_arr < 1) or np.any(k_arr != np.floor(k_arr)):
        raise DomainError(f"degrees of freedom must be positive integers, got {k!r}")
    return k_arr


def chi2_cdf(x: ArrayLike, k) -> ArrayLike:
    """P(chi^2_k <= x)."""
    scalar = np.ndim(x) == 0 and np.ndim(k) == 0
    x_arr = np.asarray(x, dtype=float)
    k_arr = _check_dof(k)
    if np.any(x_arr < 0) or np.any(np.isnan(x_arr)):
        raise DomainError("chi2_cdf needs x >= 0")
    return _out(_gamma_pq(k_arr / 2.0, x_arr / 2.0)[1], scalar)


def chi2_sf(x: ArrayLike, k) -> ArrayLike:
    """P(chi^2_k > x), without cancellation in the upper tail."""
    scalar = np.ndim(x) == 0 and np.ndim(k) == 0
    x_arr = np.asarray(x, dtype=float)
    k_arr = _check_dof(k)
    if np.any(x_arr < 0) or np.any(np.isnan(x_arr)):
        raise DomainError("chi2_sf needs x >= 0")
    return _out(_gamma_pq(k_arr / 2.0, x_arr / 2.0)[2], scalar)


def chi2_pdf(x: ArrayLike, k) -> ArrayLike:
    scalar = np.ndim(x) == 0 and np.ndim(k) == 0
    x_arr, k_arr = np.broadcast_arrays(np.asarray(x, dtype=float), _check_dof(k))
    out = np.zeros(x_arr.shape)
    pos = x_arr > 0
    s = k_arr[pos] / 2.0
    half = x_arr[pos] / 2.0
    out[pos] = 0.5 * np.exp(_log_prefactor(s, half)) / half
    at_zero = (x_arr == 0) & (k_arr == 2)
    out[at_zero] = 0.5
    out[(x_arr == 0) & (k_arr == 1)] = np.inf
    return _out(out, scalar)


def _gaussian_quantile_rough(p: np.ndarray) -> np.ndarray:
    # Abramowitz & Stegun 26.2.23, |error| < 4.5e-4
    q = np.minimum(p, 1.0 - p)
    t = np.sqrt(-2.0 * np.log(q))
    num = 2.515517 + t * (0.802853 + t * 0.010328)
    den = 1.0 + t * (1.432788 + t * (0.189269 + t * 0.001308))
    x = t - num / den
    return np.where(p < 0.5, -x, x)


def chi2_quantile(p: ArrayLike, k) -> ArrayLike:
    """Inverse of :func:`chi2_cdf` in its first argument.

    Safeguarded Newton iteration on ``log F`` as a function of ``log x``.
    The leading series term gives a guaranteed lower bracket, which keeps
    tiny probabilities (down to ~1e-300) well conditioned.
    """
    scalar = np.ndim(p) == 0 and np.ndim(k) == 0
    p_arr = np.asarray(p, dtype=float)
    k_arr = _check_dof(k)
    if np.any(~((p_arr > 0) & (p_arr < 1))):
        raise DomainError("chi2_quantile needs 0 < p < 1")
    p_arr, k_arr = np.broadcast_arrays(p_arr, k_arr)
    shape = p_arr.shape
    p_arr = p_arr.astype(float).ravel()
    k_arr = k_arr.astype(float).ravel()
    s = k_arr / 2.0
    log_p = np.log(p_arr)

    # P(s, x/2) <= (x/2)^s / Gamma(s+1), so this x never overshoots
    y_lo = np.log(2.0) + (log_p + _lgamma(s + 1.0)) / s
    y_hi = np.log(k_arr + 20.0 * np.sqrt(k_arr) + 200.0)
    z = _gaussian_quantile_rough(p_arr)
    c = 2.0 / (9.0 * k_arr)
    wh = k_arr * (1.0 - c + z * np.sqrt(c)) ** 3
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(wh > np.exp(y_lo), np.log(np.maximum(wh, _FPMIN)), y_lo)
    y = np.clip(y, y_lo, y_hi)

    active = np.ones(p_arr.shape, dtype=bool)
    for _ in range(200):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        yi, si = y[idx], s[idx]
        half = np.exp(yi) / 2.0
        lp = _gamma_pq(si, half)[0]
        g = lp - log_p[idx]
        lo, hi = y_lo[idx], y_hi[idx]
        lo = np.where(g < 0, yi, lo)
        hi = np.where(g > 0, yi, hi)
        slope = np.exp(_log_prefactor(si, half) - lp)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = g / slope
            y_new = yi - step
        bad = ~np.isfinite(y_new) | (y_new < lo) | (y_new > hi)
        y_new = np.where(bad, 0.5 * (lo + hi), y_new)
        y_new = np.where(g == 0, yi, y_new)
        y_lo[idx], y_hi[idx] = lo, hi
        y[idx] = y_new
        done = (np.abs(y_new - yi) <= 4e-16 * np.maximum(1.0, np.abs(yi))) | (g == 0)
        done |= (hi - lo) <= 4e-16 * np.maximum(1.0, np.abs(yi))
        active[idx] = ~done
    return _out(np.exp(y).reshape(shape), scalar)


def chi2_isf(q: ArrayLike, k) -> ArrayLike:
    """Inverse of :func:`chi2_sf`: the x with ``P(chi2_k > x) = q``.

    Accurate where ``1 - q`` would round away the information, which
    :func:`chi2_quantile` cannot recover.
    """
    scalar = np.ndim(q) == 0 and np.ndim(k) == 0
    q_arr = np.asarray(q, dtype=float)
    k_arr = _check_dof(k)
    if np.any(~((q_arr > 0) & (q_arr < 1))):
        raise DomainError("chi2_isf needs 0 < q < 1")
    q_arr, k_arr = np.broadcast_arrays(q_arr, k_arr)
    shape = q_arr.shape
    q_arr = q_arr.astype(float).ravel()
    k_arr = k_arr.astype(float).ravel()
    out = np.empty(q_arr.shape)
    lower = q_arr >= 0.5
    if np.any(lower):
        # 1 - q is exact here
        out[lower] = chi2_quantile(1.0 - q_arr[lower], k_arr[lower])
    idx_up = np.flatnonzero(~lower)
    if idx_up.size:
        s = k_arr[idx_up] / 2.0
        log_q = np.log(q_arr[idx_up])
        # the median exceeds k/3, so upper-tail solutions do too
        y_lo = np.log(k_arr[idx_up] / 3.0)
        y_hi = np.log(k_arr[idx_up] + 20.0 * np.sqrt(k_arr[idx_up]) + 200.0)
        for _ in range(60):
            qh = _gamma_pq(s, np.exp(y_hi) / 2.0)[2]
            grow = qh > q_arr[idx_up]
            if not grow.any():
                break
            y_hi = np.where(grow, y_hi + np.log(2.0), y_hi)
        y = 0.5 * (y_lo + y_hi)
        active = np.ones(idx_up.size, dtype=bool)
        for _ in range(200):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            yi, si = y[idx], s[idx]
            half = np.exp(yi) / 2.0
            Q = _gamma_pq(si, half)[2]
            with np.errstate(divide="ignore"):
                lq = np.log(Q)
            g = lq - log_q[idx]
            lo, hi = y_lo[idx], y_hi[idx]
            lo = np.where(g > 0, yi, lo)
            hi = np.where(g < 0, yi, hi)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                slope = -np.exp(_log_prefactor(si, half) - lq)
                y_new = yi - g / slope
            bad = ~np.isfinite(y_new) | (y_new < lo) | (y_new > hi)
            y_new = np.where(bad, 0.5 * (lo + hi), y_new)
            y_new = np.where(g == 0, yi, y_new)
            y_lo[idx], y_hi[idx] = lo, hi
            y[idx] = y_new
            done = (np.abs(y_new - yi) <= 4e-16 * np.maximum(1.0, np.abs(yi))) | (g == 0)
            done |= (hi - lo) <= 4e-16 * np.maximum(1.0, np.abs(yi))
            active[idx] = ~done
        out[idx_up] = np.exp(y)
    return _out(out.reshape(shape), scalar)


# ---------------------------------------------------------------------------
# Gaussian


_erfc_obj = np.frompyfunc(math.erfc, 1, 1)


def _erfc(x: np.ndarray) -> np.ndarray:
    return np.asarray(_erfc_obj(x), dtype=float)


def gaussian_cdf(x: ArrayLike) -> ArrayLike:
    scalar = np.ndim(x) == 0
    if scalar:
        return 0.5 * math.erfc(-float(x) / _SQRT2)
    x_arr = np.asarray(x, dtype=float)
    return 0.5 * _erfc(-x_arr / _SQRT2)


def gaussian_pdf(x: ArrayLike) -> ArrayLike:
    x_arr = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x_arr * x_arr - _HALF_LOG_2PI)
    return _out(out, np.ndim(x) == 0)


def gaussian_quantile(p: ArrayLike) -> ArrayLike:
    """Standard normal quantile: rational start plus two Halley steps."""
    scalar = np.ndim(p) == 0
    p_arr = np.asarray(p, dtype=float)
    if np.any(~((p_arr > 0) & (p_arr < 1))):
        raise DomainError("gaussian_quantile needs 0 < p < 1")
    x = _gaussian_quantile_rough(p_arr)
    lower = p_arr < 0.5
    q = 1.0 - p_arr
    for _ in range(2):
        # residual F(x) - p evaluated in whichever tail keeps precision
        e = np.where(
            lower,
            0.5 * _erfc(-x / _SQRT2) - p_arr,
            q - 0.5 * _erfc(x / _SQRT2),
        )
        u = e * math.sqrt(2.0 * math.pi) * np.exp(0.5 * x * x)
        x = x - u / (1.0 + 0.5 * x * u)
    return _out(x, scalar)


# ---------------------------------------------------------------------------
# samplers


def sample_trunc_chi(k: int, a: float, g, size=None) -> ArrayLike:
    """Draw chi_{k,a}: the square root of chi^2_k conditioned on chi^2_k <= a.

    Inverse-CDF sampling, so the cost does not grow as the acceptance
    probability P(chi^2_k <= a) shrinks.
    """
    _check_dof(k)
    if not a > 0:
        raise DomainError(f"truncation point must be positive, got {a!r}")
    rng = as_rng(g)
    if math.isinf(a):
        return np.sqrt(rng.chisquare(k, size)) if size is not None else math.sqrt(rng.chisquare(k))
    p_a = chi2_cdf(a, k)
    u = 1.0 - rng.random(size)  # in (0, 1]
    target = u * p_a
    if p_a >= 1.0:
        target = np.minimum(target, np.nextafter(1.0, 0.0))
    x = np.minimum(chi2_quantile(target, k), a)
    return np.sqrt(x) if size is not None else math.sqrt(float(x))


def sample_beta_half(k: int, g, size=None) -> ArrayLike:
    """Draw Beta(1/2, (k-1)/2), the squared first coordinate of a uniform
    point on the unit sphere in R^k; exactly 1 when k == 1."""
    _check_dof(k)
    rng = as_rng(g)
    if k == 1:
        return np.ones(size) if size is not None else 1.0
    x = rng.standard_gamma(0.5, size)
    y = rng.standard_gamma((k - 1) / 2.0, size)
    out = x / (x + y)
    return out if size is not None else float(out)

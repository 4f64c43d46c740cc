"""Regularized incomplete beta function: parameter derivatives and inverse.

``betainc_grad`` evaluates I_x(a, b) together with dI/da and dI/db by
carrying tangents through the classic continued fraction (forward mode),
using the reflection I_x(a, b) = 1 - I_{1-x}(b, a) outside the fast
convergence region. ``betaincinv`` solves F(z) = u with a bracketed
Newton iteration that falls back to bisection.
"""

from __future__ import annotations

import numpy as np
from numba import njit
from scipy import special as sp

from ervae.errors import NumericError

_TINY = 1e-300
# quantiles below this are reported as-is: the true root is not representable
_UNDERFLOW = 1e-300


@njit(cache=True)
def _cf_kernel(x, a, b, max_iter, tol):
    """Per-element loop; status[i] is 1 once element i has converged."""
    n = x.shape[0]
    f_out = np.empty(n)
    fa_out = np.empty(n)
    fb_out = np.empty(n)
    status = np.zeros(n, dtype=np.int8)
    for i in range(n):
        xi, ai, bi = x[i], a[i], b[i]
        apb = ai + bi
        # previous/current numerators and denominators after the first convergent
        A0, A1, B0 = 0.0, 1.0, 1.0
        aA0 = aA1 = aB0 = aB1 = 0.0
        bA0 = bA1 = bB0 = bB1 = 0.0
        f, fa, fb = 1.0, 0.0, 0.0
        for k in range(1, max_iter + 1):
            m = k // 2
            if k % 2 == 1:
                p = (ai + m) * (apb + m)
                q = (ai + 2 * m) * (ai + 2 * m + 1)
                d = -xi * p / q
                dd_a = -xi * ((apb + ai + 2 * m) * q - p * (2 * ai + 4 * m + 1)) / (q * q)
                dd_b = -xi * (ai + m) / q
            else:
                p = m * (bi - m)
                q = (ai + 2 * m - 1) * (ai + 2 * m)
                d = xi * p / q
                dd_a = -d * (2 * ai + 4 * m - 1) / q
                dd_b = xi * m / q
            A2 = A1 + d * A0
            B2 = 1.0 + d * B0
            if abs(B2) < _TINY:
                B2 = _TINY
            s = 1.0 / B2
            aA2 = aA1 + dd_a * A0 + d * aA0
            aB2 = aB1 + dd_a * B0 + d * aB0
            bA2 = bA1 + dd_b * A0 + d * bA0
            bB2 = bB1 + dd_b * B0 + d * bB0
            A0, A1, B0 = A1 * s, A2 * s, s
            aA0, aA1, aB0, aB1 = aA1 * s, aA2 * s, aB1 * s, aB2 * s
            bA0, bA1, bB0, bB1 = bA1 * s, bA2 * s, bB1 * s, bB2 * s
            f_new = A1
            fa_new = aA1 - A1 * aB1
            fb_new = bA1 - A1 * bB1
            if (k > 2 and abs(f_new - f) <= tol * abs(f_new)
                    and abs(fa_new - fa) <= tol * abs(fa_new) + 1e-300
                    and abs(fb_new - fb) <= tol * abs(fb_new) + 1e-300):
                f_out[i], fa_out[i], fb_out[i] = f_new, fa_new, fb_new
                status[i] = 1
                break
            f, fa, fb = f_new, fa_new, fb_new
    return f_out, fa_out, fb_out, status


def _cf_with_tangents(x, a, b, max_iter=1000, tol=1e-14):
    """Continued fraction K(x; a, b) and its partials in a and b.

    K is 1 / (1 + d1 / (1 + d2 / (1 + ...))) with the usual d_k coefficients,
    evaluated through the fundamental recurrences and rescaled every step so
    the current denominator is 1. Tangents in ``a`` and ``b`` ride along.
    """
    shape = x.shape
    flat = [np.ascontiguousarray(v, dtype=np.float64).reshape(-1) for v in (x, a, b)]
    f, fa, fb, status = _cf_kernel(*flat, max_iter, tol)
    if not status.all():
        raise NumericError(f"incomplete beta continued fraction did not converge in {max_iter} terms")
    return f.reshape(shape), np.stack([fa.reshape(shape), fb.reshape(shape)])


def _betainc_direct(x, a, b):
    log_pre = a * np.log(x) + b * np.log1p(-x) - np.log(a) - sp.betaln(a, b)
    pre = np.exp(log_pre)
    cf, dcf = _cf_with_tangents(x, a, b)
    dpsi_ab = sp.digamma(a + b)
    dlog_da = np.log(x) - 1.0 / a - sp.digamma(a) + dpsi_ab
    dlog_db = np.log1p(-x) - sp.digamma(b) + dpsi_ab
    val = pre * cf
    return val, val * dlog_da + pre * dcf[0], val * dlog_db + pre * dcf[1]


def betainc_grad(x, a, b):
    """Return ``(I_x(a,b), dI/da, dI/db)`` elementwise."""
    x, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, a, b)))
    val = np.where(x >= 1.0, 1.0, 0.0)
    d_a, d_b = np.zeros(x.shape), np.zeros(x.shape)
    inner = (x > 0.0) & (x < 1.0)
    if not np.any(inner):
        return val, d_a, d_b
    xi, ai, bi = x[inner], a[inner], b[inner]
    flip = xi > (ai + 1.0) / (ai + bi + 2.0)
    # reflected elements are evaluated as I_{1-x}(b, a) in the same pass
    xs, as_, bs = np.where(flip, 1.0 - xi, xi), np.where(flip, bi, ai), np.where(flip, ai, bi)
    w, g1, g2 = _betainc_direct(xs, as_, bs)
    v = np.where(flip, 1.0 - w, w)
    ga = np.where(flip, -g2, g1)
    gb = np.where(flip, -g1, g2)
    val[inner], d_a[inner], d_b[inner] = v, ga, gb
    return val, d_a, d_b


def beta_logpdf_raw(z, a, b):
    return (a - 1.0) * np.log(z) + (b - 1.0) * np.log1p(-z) - sp.betaln(a, b)


def betaincinv(u, a, b, tol=1e-12, max_iter=100):
    """Solve I_z(a, b) = u for z, elementwise.

    Starts from scipy's estimate and refines with Newton steps kept inside a
    shrinking bracket; a step leaving the bracket is replaced by bisection.
    Converged when |F(z) - u| <= tol * max(min(u, 1-u), 1e-300) or the
    bracket is narrower than float resolution around z. Roots below 1e-300
    (tiny alpha with tiny u) are returned at the bracket's upper end.
    """
    u, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (u, a, b)))
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise ValueError("uniform noise must lie strictly inside (0, 1)")
    z = np.clip(sp.betaincinv(a, b, u), 0.0, 1.0)
    z = np.where(np.isfinite(z), z, 0.5)
    lo, hi = np.zeros(u.shape), np.ones(u.shape)
    target = tol * np.maximum(np.minimum(u, 1.0 - u), 1e-300)
    active = np.ones(u.shape, dtype=bool)
    for _ in range(max_iter):
        F = sp.betainc(a, b, z)
        r = F - u
        active = ((np.abs(r) > target) & (hi - lo > 4 * np.spacing(np.maximum(z, 1e-300)))
                  & (hi > _UNDERFLOW))
        if not np.any(active):
            return z
        hi = np.where(active & (r > 0), z, hi)
        lo = np.where(active & (r < 0), z, lo)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            pdf = np.exp(beta_logpdf_raw(z, a, b))
            step = z - r / pdf
        bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
        # with no positive lower bound, descend by decades so underflow-scale roots are reachable
        mid = np.where(lo > 0, np.sqrt(lo * hi), np.where(hi > 0.25, 0.5 * hi, hi * 1e-6))
        mid = np.where(hi / np.maximum(lo, 1e-300) < 4.0, 0.5 * (lo + hi), mid)
        z = np.where(active, np.where(bad, mid, step), z)
    F = sp.betainc(a, b, z)
    if np.any((np.abs(F - u) > 1e3 * target) & (z > _UNDERFLOW)):
        raise NumericError("inverse Beta CDF did not converge")
    return z

"""Factorized Beta posterior, unit-box uniform prior and diagonal Gaussian.

Functions that feed a training loss take and return :class:`Tensor` so
gradients flow; the rest work on plain arrays. Per-dimension terms are
summed over the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as sp

from ervae.errors import NumericError
from ervae.nn.tensor import Tensor, as_tensor, custom_op, unbroadcast
from ervae.special import beta_logpdf_raw, betainc_grad, betaincinv

ALPHA_BETA_FLOOR = 0.01
SAMPLE_CLAMP = 1e-6
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class BetaParams:
    alpha: object
    beta: object

    def __post_init__(self):
        a, b = _data(self.alpha), _data(self.beta)
        if np.any(a <= 0) or np.any(b <= 0):
            raise ValueError("Beta parameters must be positive")


@dataclass
class DiagGaussianParams:
    mean: object
    log_std: object


@dataclass(frozen=True)
class UniformUnitBox:
    dim: int

    def log_pdf(self, z):
        z = np.asarray(z, dtype=np.float64)
        inside = np.all((z >= 0.0) & (z <= 1.0), axis=-1)
        return np.where(inside, 0.0, -np.inf)

    def sample(self, n, rng):
        return rng.uniform(size=(n, self.dim))


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def beta_params_from_raw(raw_alpha, raw_beta, floor=ALPHA_BETA_FLOOR, link="softplus"):
    """Map unconstrained encoder outputs to (alpha, beta): link(raw) + floor.

    ``link`` is ``"softplus"`` or ``"exp"``.
    """
    ra, rb = as_tensor(raw_alpha), as_tensor(raw_beta)
    if link == "softplus":
        return BetaParams(ra.softplus() + floor, rb.softplus() + floor)
    if link == "exp":
        return BetaParams(ra.exp() + floor, rb.exp() + floor)
    raise ValueError(f"unknown concentration link {link!r}")


def beta_sample_reparam(p, u):
    """Inverse-CDF Beta sample z = F^{-1}(u; alpha, beta).

    Gradients w.r.t. alpha and beta follow from implicit differentiation of
    F(z; alpha, beta) = u, i.e. dz/dtheta = -(dF/dtheta) / pdf(z).
    """
    alpha, beta = as_tensor(p.alpha), as_tensor(p.beta)
    u = np.asarray(u, dtype=np.float64)
    a, b, u = np.broadcast_arrays(alpha.data, beta.data, u)
    z = betaincinv(u, a, b)
    if not (alpha.requires_grad or beta.requires_grad):
        return Tensor(z)

    inner = (z > 0.0) & (z < 1.0)
    dz_da, dz_db = np.zeros(z.shape), np.zeros(z.shape)
    if np.any(inner):
        zi, ai, bi = z[inner], a[inner], b[inner]
        _, dF_da, dF_db = betainc_grad(zi, ai, bi)
        pdf = np.exp(beta_logpdf_raw(zi, ai, bi))
        dz_da[inner] = -dF_da / pdf
        dz_db[inner] = -dF_db / pdf
    if not (np.all(np.isfinite(dz_da)) and np.all(np.isfinite(dz_db))):
        raise NumericError("non-finite implicit Beta reparameterization gradient")

    def vjp(g):
        return unbroadcast(g * dz_da, alpha.shape), unbroadcast(g * dz_db, beta.shape)

    return custom_op(z, (alpha, beta), vjp)


def beta_log_pdf(p, z):
    z = np.asarray(_data(z), dtype=np.float64)
    if np.any((z <= 0.0) | (z >= 1.0)):
        raise ValueError("Beta log-density requires z strictly inside (0, 1)")
    return np.sum(beta_logpdf_raw(z, _data(p.alpha), _data(p.beta)), axis=-1)


def beta_entropy(a, b):
    return (sp.betaln(a, b) - (a - 1.0) * sp.digamma(a) - (b - 1.0) * sp.digamma(b)
            + (a + b - 2.0) * sp.digamma(a + b))


def kl_beta_uniform(p):
    """KL(Beta(alpha, beta) || Uniform[0,1]) summed over dimensions (negative entropy)."""
    alpha, beta = as_tensor(p.alpha), as_tensor(p.beta)
    a, b = np.broadcast_arrays(alpha.data, beta.data)
    kl = np.sum(-beta_entropy(a, b), axis=-1)
    if not (alpha.requires_grad or beta.requires_grad):
        return Tensor(kl)
    tri_ab = sp.polygamma(1, a + b)
    dk_da = (a - 1.0) * sp.polygamma(1, a) - (a + b - 2.0) * tri_ab
    dk_db = (b - 1.0) * sp.polygamma(1, b) - (a + b - 2.0) * tri_ab

    def vjp(g):
        g = np.expand_dims(g, -1)
        return unbroadcast(g * dk_da, alpha.shape), unbroadcast(g * dk_db, beta.shape)

    return custom_op(kl, (alpha, beta), vjp)


def gaussian_log_pdf_diag(p, x):
    mean, log_std = as_tensor(p.mean), as_tensor(p.log_std)
    x = as_tensor(x)
    if mean.shape[-1:] != x.shape[-1:] and mean.size != 1:
        raise ValueError(f"dimension mismatch: mean {mean.shape} vs x {x.shape}")
    if log_std.size != 1 and log_std.shape[-1:] != x.shape[-1:]:
        raise ValueError(f"dimension mismatch: log_std {log_std.shape} vs x {x.shape}")
    resid = x - mean
    per_dim = -HALF_LOG_2PI - log_std - resid * resid * (log_std * -2.0).exp() * 0.5
    return per_dim.sum(axis=-1)


def kl_gaussian_standard(p):
    """KL(N(mean, exp(log_std)^2) || N(0, I)), summed over the last axis."""
    mean, log_std = as_tensor(p.mean), as_tensor(p.log_std)
    per_dim = ((log_std * 2.0).exp() + mean * mean - 1.0 - log_std * 2.0) * 0.5
    return per_dim.sum(axis=-1)


def gaussian_sample_reparam(p, eps):
    return as_tensor(p.mean) + as_tensor(p.log_std).exp() * np.asarray(eps, dtype=np.float64)


def gaussian_log_pdf_numpy(mean, log_std, x):
    mean, log_std, x = (np.asarray(v, dtype=np.float64) for v in (mean, log_std, x))
    resid = x - mean
    return np.sum(-HALF_LOG_2PI - log_std - 0.5 * resid * resid * np.exp(-2.0 * log_std), axis=-1)

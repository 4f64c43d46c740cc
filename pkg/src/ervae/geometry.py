"""Jacobians, induced metrics and densities of distributions pushed onto a manifold.

A distribution with density p on the hidden box, pushed through an
embedding f into a higher-dimensional space, has density
p(z) / sqrt(det G(z)) with respect to the manifold's volume measure, where
G = J^T J is the metric the ambient inner product induces through f.
For square diffeomorphisms the same role is played by |det J|.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ervae.distributions import BetaParams, UniformUnitBox, beta_log_pdf, beta_sample_reparam, kl_beta_uniform
from ervae.errors import NumericError
from ervae.nn.tensor import Tensor

log = logging.getLogger(__name__)

IMMERSION_MIN_EIG = 1e-10


def jacobian_batch(f, z):
    """Jacobians of ``f`` at each row of ``z``: array (batch, m, n).

    One reverse sweep per output coordinate; rows of a batch do not interact,
    so summing an output over the batch yields every per-row gradient at once.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    zt = Tensor(z, requires_grad=True)
    out = f(zt)
    jac = np.empty((len(z), out.shape[-1], z.shape[1]))
    for j in range(out.shape[-1]):
        if j > 0:
            # the previous sweep freed the tape
            zt = Tensor(z, requires_grad=True)
            out = f(zt)
        out[:, j].sum().backward()
        jac[:, j, :] = zt.grad
    if not np.all(np.isfinite(jac)):
        raise NumericError("non-finite Jacobian entries")
    return jac


def jacobian(f, z_hid):
    """m x n Jacobian of ``f`` at a single point."""
    return jacobian_batch(f, np.reshape(z_hid, (1, -1)))[0]


def det_small(a):
    """Determinant of a stack of square matrices; closed forms for n <= 2, LU otherwise."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    if n == 1:
        return a[..., 0, 0]
    if n == 2:
        return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    return np.linalg.det(a)


@dataclass
class MetricTensor:
    g: np.ndarray
    z_hid: np.ndarray
    min_eig: float
    immersion_ok: bool


def metric_from_jacobian(jac):
    g = np.einsum("...ki,...kj->...ij", jac, jac)
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def metric_tensor(f, z_hid):
    z = np.reshape(np.asarray(z_hid, dtype=np.float64), (-1,))
    g = metric_from_jacobian(jacobian(f, z))
    min_eig = float(np.min(np.linalg.eigvalsh(g)))
    ok = min_eig > IMMERSION_MIN_EIG
    if not ok:
        log.warning("embedding is not an immersion at %s (min eigenvalue %.3g)", z, min_eig)
    return MetricTensor(g, z, min_eig, ok)


def metric_tensor_batch(f, z):
    g = metric_from_jacobian(jacobian_batch(f, z))
    return g, np.linalg.eigvalsh(g)[..., 0]


@dataclass
class ManifoldDensityValue:
    log_density: np.ndarray
    z_hid: np.ndarray
    log_det_g_half: np.ndarray


def hidden_log_pdf(dist, z):
    """Log-density on the hidden box of a BetaParams or any object with ``log_pdf``."""
    if isinstance(dist, BetaParams):
        return beta_log_pdf(dist, z)
    return dist.log_pdf(z)


def manifold_log_density(prior_hid, f, z_hid):
    """log p_M(f(z)) = log p(z) - 1/2 log det G(z), evaluated row-wise."""
    z = np.atleast_2d(np.asarray(z_hid, dtype=np.float64))
    g, min_eig = metric_tensor_batch(f, z)
    if np.any(min_eig <= IMMERSION_MIN_EIG):
        raise NumericError("embedding is not an immersion at some evaluation points")
    half = 0.5 * np.log(np.abs(det_small(g)))
    return ManifoldDensityValue(hidden_log_pdf(prior_hid, z) - half, z, half)


def newton_inverse(f_square, x, z0, tol=1e-12, max_iter=100):
    """Solve f(z) = x row-wise by Newton's method starting from ``z0``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = np.array(np.broadcast_to(np.atleast_2d(z0), x.shape), dtype=np.float64)
    for _ in range(max_iter):
        r = f_square(Tensor(z)).data - x
        if np.max(np.abs(r)) < tol:
            return z
        jac = jacobian_batch(f_square, z)
        if np.any(np.abs(det_small(jac)) < 1e-300):
            raise NumericError("singular Jacobian during inversion")
        z = z - np.linalg.solve(jac, r[..., None])[..., 0]
    raise NumericError("Newton inversion did not converge")


def monotone_inverse_1d(f_square, x, lo, hi, tol=1e-13, max_iter=200):
    """Invert an increasing scalar map on [lo, hi] by bisection then Newton polish."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    a, b = np.full(x.shape, float(lo)), np.full(x.shape, float(hi))
    for _ in range(60):
        mid = 0.5 * (a + b)
        above = f_square(Tensor(mid[:, None])).data[:, 0] > x
        b = np.where(above, mid, b)
        a = np.where(above, a, mid)
    z = 0.5 * (a + b)
    return newton_inverse(f_square, x[:, None], z[:, None], tol=tol, max_iter=max_iter)


def change_of_variables_log_density(p_hid, f_square, x, inverse=None, z0=None):
    """log p(f^{-1}(x)) - log |det J_f(f^{-1}(x))| for a square map f."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if inverse is not None:
        z = np.atleast_2d(inverse(x))
    else:
        if z0 is None:
            raise ValueError("supply an inverse or a Newton starting point")
        z = newton_inverse(f_square, x, z0)
    jac = jacobian_batch(f_square, z)
    det = det_small(jac)
    if np.any(np.abs(det) < 1e-300):
        raise NumericError("singular Jacobian")
    return hidden_log_pdf(p_hid, z) - np.log(np.abs(det))


@dataclass
class KlCheck:
    kl_latent: float
    kl_manifold_mc: float
    abs_diff: float
    std_err: float
    n_samples: int
    embedding_kind: str
    posterior_params: dict

    def within(self, floor=0.02, n_se=3.0):
        return self.abs_diff < max(floor, n_se * self.std_err)

    def as_dict(self):
        return asdict(self)


def _posterior_dict(q):
    return {"alpha": np.asarray(q.alpha, dtype=float).tolist(), "beta": np.asarray(q.beta, dtype=float).tolist()}


def _sample_beta(q, n, rng):
    a = np.atleast_1d(np.asarray(q.alpha, dtype=np.float64))
    b = np.atleast_1d(np.asarray(q.beta, dtype=np.float64))
    u = rng.uniform(size=(n, len(a)))
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    z = beta_sample_reparam(BetaParams(a, b), u).data
    # float underflow at the endpoints for tiny concentrations
    return np.clip(z, 1e-300, 1.0 - 1e-16), BetaParams(a, b)


def kl_equivalence_check(q_hid, p_hid, f, n_samples, rng, chunk=20000):
    """Closed-form hidden-space KL vs a Monte-Carlo KL of the manifold densities.

    The manifold estimate evaluates log q_M and log p_M separately through
    :func:`manifold_log_density`, each carrying its own 1/2 log det G term.
    """
    if n_samples < 1000:
        raise ValueError("use at least 1000 samples")
    z, q = _sample_beta(q_hid, n_samples, rng)
    if p_hid is None:
        p_hid = UniformUnitBox(z.shape[1])
    terms = np.empty(n_samples)
    for s in range(0, n_samples, chunk):
        zc = z[s:s + chunk]
        log_q = manifold_log_density(q, f, zc).log_density
        log_p = manifold_log_density(p_hid, f, zc).log_density
        terms[s:s + chunk] = log_q - log_p
    kl_latent = float(kl_beta_uniform(q).data)
    est = float(terms.mean())
    se = float(terms.std(ddof=1) / np.sqrt(n_samples))
    return KlCheck(kl_latent, est, abs(est - kl_latent), se, n_samples,
                   getattr(f, "kind", "custom"), _posterior_dict(q))


def flow_kl_cancellation_check(q_hid, p_hid, f_square, n_samples, rng, inverse=None, support=(0.0, 1.0)):
    """Same comparison for a square diffeomorphism, through the |det J| change of variables.

    Pushed samples x = f(z) are mapped back with ``inverse`` when given,
    otherwise by monotone bisection/Newton (scalar maps only).
    """
    if n_samples < 1000:
        raise ValueError("use at least 1000 samples")
    z, q = _sample_beta(q_hid, n_samples, rng)
    if p_hid is None:
        p_hid = UniformUnitBox(z.shape[1])
    x = f_square(Tensor(z)).data
    if inverse is None:
        if z.shape[1] != 1:
            raise ValueError("automatic inversion is only implemented for scalar maps")
        inverse = lambda xs: monotone_inverse_1d(f_square, xs, *support)  # noqa: E731
    z_back = np.clip(np.atleast_2d(inverse(x)), 1e-300, 1.0 - 1e-16)
    log_q = change_of_variables_log_density(q, f_square, x, inverse=lambda _: z_back)
    log_p = change_of_variables_log_density(p_hid, f_square, x, inverse=lambda _: z_back)
    terms = log_q - log_p
    kl_latent = float(kl_beta_uniform(q).data)
    est = float(terms.mean())
    se = float(terms.std(ddof=1) / np.sqrt(n_samples))
    return KlCheck(kl_latent, est, abs(est - kl_latent), se, n_samples, "flow", _posterior_dict(q))


def gauss_legendre(fn, lo, hi, n_nodes=256, n_panels=1):
    """Composite Gauss-Legendre quadrature of a vectorized scalar function."""
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    edges = np.linspace(lo, hi, n_panels + 1)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        t = half * nodes + 0.5 * (a + b)
        total += half * np.sum(weights * fn(t))
    return float(total)


def manifold_total_mass(prior_hid, f, eps=1e-9, n_nodes=256, n_panels=1):
    """Integral of exp(log p_M) * sqrt(det G) over the hidden interval."""

    def integrand(t):
        dens = manifold_log_density(prior_hid, f, t[:, None])
        return np.exp(dens.log_density + dens.log_det_g_half)

    return gauss_legendre(integrand, eps, 1.0 - eps, n_nodes, n_panels)

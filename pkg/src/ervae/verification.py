"""Numerical verification suites: geometry identities, KL cancellation grids, gradient checks."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ervae.distributions import (
    ALPHA_BETA_FLOOR,
    BetaParams,
    DiagGaussianParams,
    UniformUnitBox,
    beta_sample_reparam,
    gaussian_log_pdf_diag,
    kl_beta_uniform,
)
from ervae.embedding import EmbeddingFn, injectivity_score, mmd_tensor, projection_embedding
from ervae.errors import NumericError
from ervae.geometry import (
    flow_kl_cancellation_check,
    jacobian_batch,
    kl_equivalence_check,
    manifold_log_density,
    manifold_total_mass,
    metric_tensor_batch,
)
from ervae.models import LEARNED_F_ACTION, build_model, draw_noise, elbo_terms
from ervae.nn.mlp import init_mlp, mlp_forward
from ervae.nn.optim import AdamState, adam_step, zero_grad
from ervae.nn.tensor import Tensor, atan2, concat, linear, matmul

log = logging.getLogger(__name__)

FOUR_PI_SQ = 4.0 * np.pi ** 2


def softplus_floor(raw):
    return float(np.logaddexp(0.0, raw) + ALPHA_BETA_FLOOR)


# posterior grid for the KL identity; the floor cases are encoder outputs near the softplus floor
POSTERIOR_GRID = {
    "beta(1,1)": (1.0, 1.0),
    "beta(2,2)": (2.0, 2.0),
    "beta(5,1)": (5.0, 1.0),
    "beta(0.5,0.5)": (0.5, 0.5),
    "floor(-8,0)": (softplus_floor(-8.0), softplus_floor(0.0)),
    "floor(-8,2)": (softplus_floor(-8.0), softplus_floor(2.0)),
    "floor(-1,-1)": (softplus_floor(-1.0), softplus_floor(-1.0)),
    "floor(-3,0)": (softplus_floor(-3.0), softplus_floor(0.0)),
}

# the flow grid drops posteriors whose mass sits below 1e-16: 1 + 2z cannot carry such z
FLOW_POSTERIOR_GRID = ("beta(1,1)", "beta(2,2)", "beta(5,1)", "beta(0.5,0.5)", "floor(-1,-1)")


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: value={self.value:.4g} threshold={self.threshold:.4g}"


def _beta(a, b):
    return BetaParams(np.array([a]), np.array([b]))


# -- geometry ---------------------------------------------------------------------

def geometry_checks(learned=None):
    checks = []
    f = projection_embedding()
    z = np.linspace(0.0, 1.0, 100)[:, None]
    g, _ = metric_tensor_batch(f, z)
    err = float(np.max(np.abs(g[:, 0, 0] - FOUR_PI_SQ)))
    checks.append(Check("metric f_proj = 4 pi^2", err < 1e-9, err, 1e-9))
    dens = manifold_log_density(UniformUnitBox(1), f, z)
    err = float(np.max(np.abs(np.exp(dens.log_density) - 1.0 / (2 * np.pi))))
    checks.append(Check("uniform density under f_proj = 1/(2 pi)", err < 1e-9, err, 1e-9))
    for name, prior in (("uniform", UniformUnitBox(1)), ("beta(2,2)", _beta(2.0, 2.0))):
        mass = manifold_total_mass(prior, f)
        checks.append(Check(f"total mass {name} under f_proj", abs(mass - 1) < 1e-8, abs(mass - 1), 1e-8))
    rng = np.random.default_rng(11)
    maps = {"f_proj": f}
    if learned is not None:
        maps["learned"] = learned
    for name, fn in maps.items():
        zs = rng.uniform(0.01, 0.99, size=(100, 1))
        jac = jacobian_batch(fn, zs)
        h = 1e-5
        fd = (fn.numpy(zs + h) - fn.numpy(zs - h)) / (2 * h)
        rel = float(np.max(np.linalg.norm(jac[:, :, 0] - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), 1e-8)))
        checks.append(Check(f"jacobian vs finite differences ({name})", rel < 1e-5, rel, 1e-5))
        gm, _ = metric_tensor_batch(fn, zs)
        asym = float(np.max(np.abs(gm - np.swapaxes(gm, -1, -2))))
        checks.append(Check(f"metric symmetric ({name})", asym < 1e-12, asym, 1e-12))
    if learned is not None:
        grid = np.linspace(1e-6, 1 - 1e-6, 2001)[:, None]
        _, min_eig = metric_tensor_batch(learned, grid)
        worst = float(np.min(min_eig))
        checks.append(Check("learned f is an immersion on a 2001-point grid", worst > 1e-10, worst, 1e-10))
        viol = injectivity_score(learned, 10000, np.random.default_rng(12))
        checks.append(Check("learned f injectivity violations", viol == 0, viol, 0))
        mass = manifold_total_mass(UniformUnitBox(1), learned, n_panels=8)
        checks.append(Check("total mass uniform under learned f", abs(mass - 1) < 1e-8, abs(mass - 1), 1e-8))
    return checks


# -- KL identity grids ----------------------------------------------------------------

def kl_grid_checks(learned=None, n_samples=100000, seed=0, posteriors=None):
    maps = {"f_proj": projection_embedding()}
    if learned is not None:
        maps["learned"] = learned
    checks = []
    for i, (pname, (a, b)) in enumerate(POSTERIOR_GRID.items()):
        if posteriors is not None and pname not in posteriors:
            continue
        for j, (fname, fn) in enumerate(maps.items()):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 101, i, j]))
            res = kl_equivalence_check(_beta(a, b), UniformUnitBox(1), fn, n_samples, rng)
            tol = max(0.02, 3 * res.std_err)
            checks.append(Check(f"KL identity {pname} x {fname}", res.within(), res.abs_diff, tol, res.as_dict()))
    return checks


def monotone_target(z):
    return z + 0.15 * np.sin(2 * np.pi * z)


def fit_monotone_map(seed=0, steps=3000, hidden=16):
    """Fit a 1 -> hidden -> 1 Tanh network to an increasing target on [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 55]))
    params = init_mlp([1, hidden, 1], "tanh", rng)
    opt = AdamState(lr=1e-2)
    z = np.linspace(0.0, 1.0, 256)[:, None]
    y = monotone_target(z)
    for _ in range(steps):
        r = mlp_forward(params, z) - y
        loss = (r * r).mean()
        zero_grad(params.parameters)
        loss.backward()
        adam_step(opt, params.parameters)
    params.freeze()
    fn = lambda t: mlp_forward(params, t)  # noqa: E731
    grid = np.linspace(0.0, 1.0, 4001)[:, None]
    slope = jacobian_batch(fn, grid)[:, 0, 0]
    if np.min(slope) <= 0:
        raise NumericError("fitted map is not monotone on [0, 1]")
    return fn, params, float(np.min(slope))


def flow_grid_checks(n_samples=100000, seed=0, monotone=None):
    affine = lambda t: t * 2.0 + 1.0  # noqa: E731
    identity = lambda t: t * 1.0  # noqa: E731
    if monotone is None:
        monotone, _, _ = fit_monotone_map(seed)
    maps = {
        "identity": (identity, lambda x: x),
        "affine 2z+1": (affine, lambda x: (x - 1.0) / 2.0),
        "monotone network": (monotone, None),
    }
    checks = []
    for i, pname in enumerate(FLOW_POSTERIOR_GRID):
        a, b = POSTERIOR_GRID[pname]
        for j, (fname, (fn, inv)) in enumerate(maps.items()):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 202, i, j]))
            res = flow_kl_cancellation_check(_beta(a, b), UniformUnitBox(1), fn, n_samples, rng, inverse=inv)
            tol = max(0.02, 3 * res.std_err)
            checks.append(Check(f"flow cancellation {pname} x {fname}", res.within(), res.abs_diff, tol,
                                res.as_dict()))
    return checks


# -- gradient checks -----------------------------------------------------------------------

def finite_difference_grad(fn, arrays, h=1e-5):
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = g.reshape(-1)
        for idx in range(arr.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].reshape(-1)[idx] += h
            minus[k].reshape(-1)[idx] -= h
            flat[idx] = (fn(*[Tensor(p) for p in plus]).item() - fn(*[Tensor(m) for m in minus]).item()) / (2 * h)
        grads.append(g)
    return grads


def autodiff_grad(fn, arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*ts).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def relative_error(ad, fd):
    ad = np.concatenate([g.reshape(-1) for g in ad])
    fd = np.concatenate([g.reshape(-1) for g in fd])
    return float(np.linalg.norm(ad - fd) / max(np.linalg.norm(fd), 1e-7))


def _primitive_cases():
    """name -> (function of Tensors returning a scalar, sampler of input arrays)."""
    w3 = np.random.default_rng(7).normal(size=(4, 3))

    def beta_reparam(a, b):
        u = np.linspace(0.05, 0.95, a.shape[0])
        return (beta_sample_reparam(BetaParams(a, b), u) * np.arange(1, a.shape[0] + 1)).sum()

    pos = lambda r: r.uniform(0.5, 3.0, size=(4,))  # noqa: E731
    anyv = lambda r: r.normal(size=(4,))  # noqa: E731
    weights = np.arange(1.0, 5.0)
    return {
        "add": (lambda x, y: ((x + y) * weights).sum(), lambda r: [anyv(r), anyv(r)]),
        "sub": (lambda x, y: ((x - y) * weights).sum(), lambda r: [anyv(r), anyv(r)]),
        "mul": (lambda x, y: (x * y).sum(), lambda r: [anyv(r), anyv(r)]),
        "div": (lambda x, y: (x / y).sum(), lambda r: [anyv(r), pos(r)]),
        "pow": (lambda x: (x ** 3).sum(), lambda r: [anyv(r)]),
        "exp": (lambda x: (x.exp() * weights).sum(), lambda r: [anyv(r)]),
        "log": (lambda x: (x.log() * weights).sum(), lambda r: [pos(r)]),
        "tanh": (lambda x: (x.tanh() * weights).sum(), lambda r: [anyv(r)]),
        "relu": (lambda x: (x.relu() * weights).sum(), lambda r: [anyv(r)]),
        "sin": (lambda x: (x.sin() * weights).sum(), lambda r: [anyv(r)]),
        "cos": (lambda x: (x.cos() * weights).sum(), lambda r: [anyv(r)]),
        "sqrt": (lambda x: (x.sqrt() * weights).sum(), lambda r: [pos(r)]),
        "softplus": (lambda x: (x.softplus() * weights).sum(), lambda r: [anyv(r)]),
        "mean": (lambda x: (x * x).mean(), lambda r: [anyv(r)]),
        "getitem": (lambda x: (x[1:3] * x[0:2]).sum(), lambda r: [anyv(r)]),
        "reshape": (lambda x: (x.reshape(2, 2) @ np.array([[1.0], [2.0]])).sum(), lambda r: [anyv(r)]),
        "matmul": (lambda a, b: (matmul(a, b) ** 2).sum(), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
        "linear": (lambda x, w, b: linear(x, w, b).tanh().sum(),
                   lambda r: [r.normal(size=(5, 3)), r.normal(size=(4, 3)), r.normal(size=(4,))]),
        "concat": (lambda x, y: (concat([x, y]) * np.arange(8.0)).sum(), lambda r: [anyv(r), anyv(r)]),
        "atan2": (lambda y, x: (atan2(y, x) * weights).sum(), lambda r: [anyv(r), pos(r)]),
        "mlp": (lambda x: (linear(x, Tensor(w3), Tensor(np.zeros(4))).tanh() ** 2).sum(),
                lambda r: [r.normal(size=(2, 3))]),
        "gaussian_log_pdf": (lambda m, s, x: gaussian_log_pdf_diag(DiagGaussianParams(m, s), x).sum(),
                             lambda r: [anyv(r), 0.3 * anyv(r), anyv(r)]),
        "kl_beta_uniform": (lambda a, b: kl_beta_uniform(BetaParams(a, b)), lambda r: [pos(r), pos(r)]),
        "beta_sample_reparam": (beta_reparam, lambda r: [pos(r), pos(r)]),
        "mmd": (lambda a: mmd_tensor(a, np.linspace(0, 1, 6)[:, None]), lambda r: [r.uniform(size=(5, 1))]),
    }


def primitive_gradient_checks(n_probes=100, seed=0, tol=1e-4):
    checks = []
    for i, (name, (fn, sampler)) in enumerate(_primitive_cases().items()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 303, i]))
        worst = 0.0
        for _ in range(n_probes):
            arrays = sampler(rng)
            worst = max(worst, relative_error(autodiff_grad(fn, arrays), finite_difference_grad(fn, arrays)))
        checks.append(Check(f"gradient {name}", worst < tol, worst, tol, {"n_probes": n_probes}))
    return checks


def _small_model(variant, rng, data_dim=6):
    emb = None
    if variant != "vanilla":
        dec = init_mlp([1, 8, 2], "tanh", rng).freeze()
        emb = EmbeddingFn("learned_wae", 1, 2, dec) if variant != "manifold_proj_f" else projection_embedding()
    return build_model(variant, rng, latent_dim=1, data_dim=data_dim, embedding=emb, hidden=(8,))


def _coordinate_fd(loss, p, idx, h=1e-5):
    old = p.data[idx]
    vals = []
    for sgn in (1.0, -1.0):
        p.data[idx] = old + sgn * h
        vals.append(loss().item())
    p.data[idx] = old
    return (vals[0] - vals[1]) / (2 * h)


def model_gradient_checks(n_probes=10, seed=0, tol=1e-3, coords=12):
    """FD vs autodiff on the negative ELBO for each variant at random parameter coordinates.

    For the action variant the coordinates come from the action encoder, so
    the check covers the path through the rotation.
    """
    checks = []
    for vi, variant in enumerate(("vanilla", "manifold_learned_f", "manifold_proj_f", LEARNED_F_ACTION)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 404, vi]))
        model = _small_model(variant, rng)
        x = rng.normal(size=(4, model.data_dim))
        noise = draw_noise(model, len(x), rng)
        pool = model.action_encoder.parameters if variant == LEARNED_F_ACTION else model.parameters
        pool = [p for p in pool if p.data.ndim > 0]

        def loss():
            return -elbo_terms(model, x, noise)[0].mean()

        worst = 0.0
        for _ in range(n_probes):
            zero_grad(model.parameters)
            loss().backward()
            ad, fd = [], []
            for _ in range(coords):
                p = pool[rng.integers(len(pool))]
                idx = tuple(int(rng.integers(s)) for s in p.data.shape)
                ad.append(0.0 if p.grad is None else float(p.grad[idx]))
                fd.append(_coordinate_fd(loss, p, idx))
            worst = max(worst, relative_error([np.array(ad)], [np.array(fd)]))
        checks.append(Check(f"model loss gradient ({variant})", worst < tol, worst, tol))
    return checks


def run_all(learned=None, n_samples=100000, n_grad_probes=100, seed=0):
    checks = geometry_checks(learned)
    checks += kl_grid_checks(learned, n_samples, seed)
    checks += flow_grid_checks(n_samples, seed)
    checks += primitive_gradient_checks(n_grad_probes, seed)
    checks += model_gradient_checks(seed=seed)
    return checks

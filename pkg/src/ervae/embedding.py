"""Embeddings of the hidden latent box into the ambient latent space.

Two kinds: the analytic circle map ``f_proj`` and the decoder of a
Wasserstein autoencoder (MMD penalty) trained on samples from the target
manifold prior. Before a learned map is used downstream it is certified by
a pushforward MMD test and a pairwise injectivity test.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from ervae.distributions import UniformUnitBox
from ervae.errors import CertificationError, TrainingError
from ervae.nn.checkpoint import arrays_digest, load_checkpoint, save_checkpoint
from ervae.nn.mlp import MlpParams, init_mlp, mlp_forward, mlp_forward_numpy
from ervae.nn.optim import AdamState, adam_step, zero_grad
from ervae.nn.tensor import Tensor, as_tensor, concat, custom_op

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
IMQ_SCALES = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)

# certification thresholds
PUSHFORWARD_MMD_MAX = 0.05
INJECTIVITY_DELTA_IN = 0.01
INJECTIVITY_DELTA_OUT = 1e-4


# -- kernels and MMD ----------------------------------------------------------

@dataclass(frozen=True)
class Kernel:
    kind: str = "imq"
    scales: tuple = IMQ_SCALES

    def __post_init__(self):
        if self.kind not in ("imq", "rbf"):
            raise ValueError(f"unknown kernel {self.kind!r}")

    def from_sqdist(self, d2):
        """Kernel values for an array of squared distances, averaged over scales so k(x, x) = 1."""
        out = np.zeros_like(d2)
        for c in self.scales:
            if self.kind == "imq":
                out += c / (c + d2)
            else:
                out += np.exp(-d2 / (2.0 * c * c))
        return out / len(self.scales)

    def from_sqdist_tensor(self, d2):
        out = None
        for c in self.scales:
            term = c / (d2 + c) if self.kind == "imq" else (d2 * (-1.0 / (2.0 * c * c))).exp()
            out = term if out is None else out + term
        return out * (1.0 / len(self.scales))


@njit(cache=True)
def _pair_kernel_sum(a, b, imq, scales):
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            d2 = 0.0
            for k in range(a.shape[1]):
                diff = a[i, k] - b[j, k]
                d2 += diff * diff
            for c in scales:
                total += c / (c + d2) if imq else np.exp(-d2 / (2.0 * c * c))
    return total


@njit(cache=True)
def _self_kernel_sum(a, imq, scales):
    # k is symmetric with k(x, x) = 1 per scale: off-diagonal pairs count twice
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(i + 1, a.shape[0]):
            d2 = 0.0
            for k in range(a.shape[1]):
                diff = a[i, k] - a[j, k]
                d2 += diff * diff
            for c in scales:
                total += c / (c + d2) if imq else np.exp(-d2 / (2.0 * c * c))
    return 2.0 * total + a.shape[0] * len(scales)


def _mean_kernel(a, b, kernel):
    scales = np.asarray(kernel.scales, dtype=np.float64)
    if a is b:
        total = _self_kernel_sum(np.ascontiguousarray(a), kernel.kind == "imq", scales)
        return total / (len(a) * len(a) * len(scales))
    total = _pair_kernel_sum(np.ascontiguousarray(a), np.ascontiguousarray(b), kernel.kind == "imq", scales)
    return total / (len(a) * len(b) * len(scales))


def mmd(sample_a, sample_b, kernel=Kernel()):
    """Biased (V-statistic) estimate of squared MMD between two samples."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("MMD needs non-empty samples")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    val = _mean_kernel(a, a, kernel) + _mean_kernel(b, b, kernel) - 2.0 * _mean_kernel(a, b, kernel)
    return max(float(val), 0.0)


def _kernel_and_slope(kernel, d2):
    """Kernel values and their derivative w.r.t. squared distance."""
    k, dk = np.zeros_like(d2), np.zeros_like(d2)
    for c in kernel.scales:
        if kernel.kind == "imq":
            r = 1.0 / (c + d2)
            k += c * r
            dk -= c * r * r
        else:
            e = np.exp(-d2 / (2.0 * c * c))
            k += e
            dk -= e / (2.0 * c * c)
    n = len(kernel.scales)
    return k / n, dk / n


def mmd_tensor(a, b, kernel=Kernel()):
    """V-statistic MMD^2 as one tape node, differentiable in ``a`` only.

    ``b`` is treated as a constant (a prior sample in WAE training).
    """
    a = as_tensor(a)
    x = a.data.reshape(len(a.data), -1)
    y = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(len(b), -1)
    n, m = len(x), len(y)
    dxx = x[:, None, :] - x[None, :, :]
    dxy = x[:, None, :] - y[None, :, :]
    kxx, sxx = _kernel_and_slope(kernel, np.sum(dxx * dxx, axis=-1))
    kxy, sxy = _kernel_and_slope(kernel, np.sum(dxy * dxy, axis=-1))
    yy = y[:, None, :] - y[None, :, :]
    kyy = kernel.from_sqdist(np.sum(yy * yy, axis=-1))
    val = kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
    # d/dx_i of mean_jk K(x_j, x_k) = (4 / n^2) sum_j s_ij (x_i - x_j)
    grad = (4.0 / (n * n)) * np.einsum("ij,ijd->id", sxx, dxx) \
        - (4.0 / (n * m)) * np.einsum("ij,ijd->id", sxy, dxy)
    grad = grad.reshape(a.shape)
    return custom_op(val, (a,), lambda g: (g * grad,))


# -- embedding maps -----------------------------------------------------------

def f_proj(z_hid):
    """(cos 2 pi z, sin 2 pi z) for scalar, array or Tensor input with a trailing dim of 1."""
    if isinstance(z_hid, Tensor):
        t = z_hid * TWO_PI
        return concat([t.cos(), t.sin()], axis=-1)
    z = np.asarray(z_hid, dtype=np.float64)
    if z.ndim == 0:
        z = z.reshape(1)
    t = TWO_PI * z
    return np.concatenate([np.cos(t), np.sin(t)], axis=-1)


@dataclass
class EmbeddingFn:
    kind: str
    dim_hid: int
    dim_ambient: int
    params: MlpParams = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("projection", "learned_wae", "constant"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if self.dim_ambient <= self.dim_hid and self.kind != "constant":
            raise ValueError("an embedding needs dim_ambient > dim_hid")
        if self.kind == "projection" and (self.dim_hid, self.dim_ambient) != (1, 2):
            raise ValueError("the projection embedding maps [0,1] onto the unit circle only")
        if self.kind == "learned_wae" and self.params is None:
            raise ValueError("a learned embedding needs decoder parameters")

    @property
    def periodic(self):
        return self.kind == "projection"

    def __call__(self, z_hid):
        """Forward pass on a Tensor of shape (batch, dim_hid); records on the tape."""
        z = as_tensor(z_hid)
        if self.kind == "projection":
            return f_proj(z)
        if self.kind == "constant":
            c = np.asarray(self.metadata.get("point", np.zeros(self.dim_ambient)), dtype=np.float64)
            return z @ np.zeros((self.dim_hid, self.dim_ambient)) + c
        return mlp_forward(self.params, z)

    def numpy(self, z_hid):
        z = np.asarray(z_hid, dtype=np.float64).reshape(-1, self.dim_hid)
        if self.kind == "projection":
            return f_proj(z)
        if self.kind == "constant":
            c = np.asarray(self.metadata.get("point", np.zeros(self.dim_ambient)), dtype=np.float64)
            return np.broadcast_to(c, (len(z), self.dim_ambient)).copy()
        return mlp_forward_numpy(self.params, z)

    def freeze(self):
        if self.params is not None:
            self.params.freeze()
        return self

    def digest(self):
        if self.params is None:
            return self.kind
        return arrays_digest(self.params.named_arrays())

    def save(self, path, extra_metadata=None):
        meta = {"kind": self.kind, "dim_hid": self.dim_hid, "dim_ambient": self.dim_ambient}
        if self.params is not None:
            meta["mlp"] = self.params.spec()
        meta.update(self.metadata)
        meta.update(extra_metadata or {})
        arrays = self.params.named_arrays() if self.params is not None else {}
        return save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        params = None
        if meta["kind"] == "learned_wae":
            spec = meta["mlp"]
            params = init_mlp(spec["layer_sizes"], spec["activations"], np.random.default_rng(0))
            params.load_arrays(arrays)
            params.freeze()
        extra = {k: v for k, v in meta.items() if k not in ("kind", "dim_hid", "dim_ambient", "mlp")}
        return cls(meta["kind"], meta["dim_hid"], meta["dim_ambient"], params, extra)


def projection_embedding():
    return EmbeddingFn("projection", 1, 2)


def constant_embedding(point=(1.0, 0.0)):
    return EmbeddingFn("constant", 1, len(point), metadata={"point": list(point)})


# -- WAE training ---------------------------------------------------------------

@dataclass
class WaeConfig:
    latent_dim: int = 1
    feature_dim: int = 2
    encoder_hidden: tuple = (64, 64)
    decoder_hidden: tuple = (64, 64)
    encoder_activation: str = "relu"
    decoder_activation: str = "relu"
    mmd_weight: float = 70.0
    kernel: str = "imq"
    kernel_scales: tuple = IMQ_SCALES
    epochs: int = 150
    batch_size: int = 128
    lr: float = 3e-3
    lr_schedule: str = "cosine"
    lr_min: float = 1e-5
    seed: int = 0
    n_prior_samples: int = 10000
    n_cert_samples: int = 2000
    n_cert_pairs: int = 10000

    def __post_init__(self):
        if self.mmd_weight <= 0:
            raise ValueError("mmd_weight must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.latent_dim >= self.feature_dim:
            raise ValueError("latent_dim must be smaller than feature_dim")
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        self.kernel_scales = tuple(self.kernel_scales)

    @property
    def kernel_obj(self):
        return Kernel(self.kernel, self.kernel_scales)


def init_wae(cfg, rng):
    enc = init_mlp([cfg.feature_dim, *cfg.encoder_hidden, cfg.latent_dim], cfg.encoder_activation, rng)
    dec = init_mlp([cfg.latent_dim, *cfg.decoder_hidden, cfg.feature_dim], cfg.decoder_activation, rng)
    return enc, dec


def lr_at(cfg, epoch):
    if cfg.lr_schedule == "constant" or cfg.epochs <= 1:
        return cfg.lr
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + np.cos(np.pi * frac))


def train_wae(prior_samples, cfg, return_encoder=False):
    """Fit a deterministic-encoder WAE-MMD on ``prior_samples``; return its decoder as an embedding.

    Loss per batch: mean squared reconstruction error plus ``mmd_weight``
    times MMD(encoded batch, uniform draws on the hidden box). The per-epoch
    log is stored under ``embedding.metadata["training_log"]``.
    """
    data = np.asarray(prior_samples, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 31]))
    enc, dec = init_wae(cfg, rng)
    params = enc.parameters + dec.parameters
    opt = AdamState(lr=cfg.lr)
    kernel = cfg.kernel_obj
    prior = UniformUnitBox(cfg.latent_dim)
    history = []
    n = len(data)
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(cfg, epoch)
        perm = rng.permutation(n)
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            batch = data[perm[start:start + cfg.batch_size]]
            code = mlp_forward(enc, batch)
            recon = mlp_forward(dec, code)
            resid = recon - batch
            rec_loss = (resid * resid).sum(axis=1).mean()
            mmd_loss = mmd_tensor(code, prior.sample(cfg.batch_size, rng), kernel)
            loss = rec_loss + mmd_loss * cfg.mmd_weight
            if not np.isfinite(loss.item()):
                snapshot = {**enc.named_arrays("enc."), **dec.named_arrays("dec.")}
                raise TrainingError("WAE loss became non-finite", checkpoint=snapshot, epoch=epoch)
            zero_grad(params)
            loss.backward()
            adam_step(opt, params)
            sums += (loss.item(), rec_loss.item(), mmd_loss.item())
            n_batches += 1
        row = dict(zip(("epoch", "loss", "recon", "mmd"), (epoch, *(sums / max(n_batches, 1)))))
        history.append(row)
        if epoch % 25 == 0 or epoch == cfg.epochs - 1:
            log.info("wae epoch %d loss %.5f recon %.5f mmd %.5f", epoch, row["loss"], row["recon"], row["mmd"])
    dec.freeze()
    emb = EmbeddingFn("learned_wae", cfg.latent_dim, cfg.feature_dim, dec,
                      {"training_log": history, "wae_config": _config_dict(cfg)})
    if return_encoder:
        return emb, enc
    return emb


def untrained_embedding(cfg):
    """The decoder a WAE run would start from (used as a negative control)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 31]))
    _, dec = init_wae(cfg, rng)
    return EmbeddingFn("learned_wae", cfg.latent_dim, cfg.feature_dim, dec.freeze())


def _config_dict(cfg):
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def reconstruction_error(encoder, embedding, samples):
    """Mean squared distance between samples and their WAE reconstructions."""
    code = mlp_forward_numpy(encoder, samples)
    recon = embedding.numpy(code)
    return float(np.mean(np.sum((recon - samples) ** 2, axis=1)))


# -- certification --------------------------------------------------------------

def pushforward_mmd(f, prior_hid, target_samples, rng, n_samples=None, kernel=Kernel()):
    """MMD between f applied to draws from ``prior_hid`` and ``target_samples``."""
    target = np.asarray(target_samples, dtype=np.float64)
    n = n_samples or len(target)
    pushed = f.numpy(prior_hid.sample(n, rng))
    return mmd(pushed, target, kernel)


def injectivity_score(f, n_pairs, rng, delta_in=INJECTIVITY_DELTA_IN, delta_out=INJECTIVITY_DELTA_OUT):
    """Count pairs that are far apart in the hidden box but collide in the ambient space.

    For the periodic projection the hidden distance wraps around (0 == 1).
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    z1 = rng.uniform(size=(n_pairs, f.dim_hid))
    z2 = rng.uniform(size=(n_pairs, f.dim_hid))
    diff = np.abs(z1 - z2)
    if f.periodic:
        diff = np.minimum(diff, 1.0 - diff)
    d_in = np.linalg.norm(diff, axis=1)
    d_out = np.linalg.norm(f.numpy(z1) - f.numpy(z2), axis=1)
    return int(np.sum((d_in > delta_in) & (d_out < delta_out)))


@dataclass
class Certification:
    pushforward_mmd: float
    injectivity_violations: int
    n_pairs: int
    n_samples: int
    mmd_threshold: float = PUSHFORWARD_MMD_MAX

    @property
    def passed(self):
        return self.pushforward_mmd < self.mmd_threshold and self.injectivity_violations == 0

    def as_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d


def certify(f, target_samples, rng, n_pairs=10000, kernel=Kernel()):
    prior = UniformUnitBox(f.dim_hid)
    target = np.asarray(target_samples, dtype=np.float64)
    score = pushforward_mmd(f, prior, target, rng, kernel=kernel)
    viol = injectivity_score(f, n_pairs, rng)
    return Certification(score, viol, n_pairs, len(target))


def require_certified(f, target_samples, rng, n_pairs=10000):
    cert = certify(f, target_samples, rng, n_pairs)
    if not cert.passed:
        raise CertificationError("embedding failed certification", cert.as_dict())
    return cert


def load_embedding(path):
    return EmbeddingFn.load(Path(path))

"""VAE variants for the circle benchmark: Gaussian baseline and manifold-latent models.

Manifold variants sample z_hid from a Beta posterior on [0,1]^n, map it
through a frozen embedding f and, optionally, rotate the result by an
angle predicted from x. Their KL term is computed in the hidden space
against the uniform prior.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from ervae.distributions import (
    SAMPLE_CLAMP,
    BetaParams,
    DiagGaussianParams,
    beta_log_pdf,
    beta_params_from_raw,
    beta_sample_reparam,
    gaussian_log_pdf_diag,
    gaussian_log_pdf_numpy,
    gaussian_sample_reparam,
    kl_beta_uniform,
    kl_gaussian_standard,
)
from ervae.embedding import EmbeddingFn, Kernel, mmd
from ervae.errors import NumericError, TrainingError
from ervae.nn.mlp import MlpParams, init_mlp, mlp_forward
from ervae.nn.optim import AdamState, adam_step, zero_grad
from ervae.nn.tensor import Tensor, atan2, concat, no_grad

log = logging.getLogger(__name__)

VANILLA = "vanilla"
LEARNED_F = "manifold_learned_f"
PROJ_F = "manifold_proj_f"
LEARNED_F_ACTION = "manifold_learned_f_action"
VARIANTS = (VANILLA, LEARNED_F, PROJ_F, LEARNED_F_ACTION)

# uniform noise is kept away from 0 and 1 so the inverse CDF is defined
_U_EPS = 1e-12


@dataclass
class VaeModel:
    variant: str
    latent_dim: int
    data_dim: int
    encoder: MlpParams
    decoder: MlpParams
    log_std: Tensor
    embedding: EmbeddingFn = None
    action_encoder: MlpParams = None
    train_embedding: bool = False
    concentration_link: str = "softplus"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.manifold and self.embedding is None:
            raise ValueError("manifold variants need an embedding")
        if self.variant == LEARNED_F_ACTION:
            if self.action_encoder is None:
                raise ValueError("the group-action variant needs an action encoder")
            if self.embedding.dim_ambient != 2:
                raise ValueError("the SO(2) action needs a 2-dimensional ambient latent space")

    @property
    def manifold(self):
        return self.variant != VANILLA

    @property
    def has_action(self):
        return self.action_encoder is not None

    @property
    def parameters(self):
        out = self.encoder.parameters + self.decoder.parameters + [self.log_std]
        if self.action_encoder is not None:
            out += self.action_encoder.parameters
        if self.train_embedding and self.embedding is not None and self.embedding.params is not None:
            out += self.embedding.params.parameters
        return out

    def named_arrays(self):
        arrays = {**self.encoder.named_arrays("encoder."), **self.decoder.named_arrays("decoder."),
                  "likelihood_log_std": self.log_std.data}
        if self.action_encoder is not None:
            arrays.update(self.action_encoder.named_arrays("action."))
        if self.train_embedding and self.embedding is not None and self.embedding.params is not None:
            arrays.update(self.embedding.params.named_arrays("embedding."))
        return arrays

    def load_arrays(self, arrays):
        self.encoder.load_arrays(arrays, "encoder.")
        self.decoder.load_arrays(arrays, "decoder.")
        self.log_std.data = np.array(arrays["likelihood_log_std"], dtype=np.float64).reshape(())
        if self.action_encoder is not None:
            self.action_encoder.load_arrays(arrays, "action.")
        if self.train_embedding and self.embedding is not None and self.embedding.params is not None:
            self.embedding.params.load_arrays(arrays, "embedding.")


def build_model(variant, rng, latent_dim=1, data_dim=100, embedding=None, hidden=(128, 128),
                activation="tanh", train_embedding=False, concentration_link="softplus"):
    if variant == VANILLA:
        embedding = None
        dec_in = latent_dim
    else:
        if embedding is None:
            raise ValueError(f"{variant} needs an embedding")
        if embedding.dim_hid != latent_dim:
            raise ValueError("embedding input dimension must equal latent_dim")
        dec_in = embedding.dim_ambient
    encoder = init_mlp([data_dim, *hidden, 2 * latent_dim], activation, rng)
    decoder = init_mlp([dec_in, *hidden, data_dim], activation, rng)
    action = None
    if variant == LEARNED_F_ACTION:
        action = init_mlp([data_dim, *hidden, 2], activation, rng)
    return VaeModel(variant, latent_dim, data_dim, encoder, decoder, Tensor(0.0, requires_grad=True),
                    embedding, action, train_embedding, concentration_link)


# -- forward pieces -------------------------------------------------------------

def posterior(model, x):
    raw = mlp_forward(model.encoder, x)
    n = model.latent_dim
    if model.manifold:
        return beta_params_from_raw(raw[:, :n], raw[:, n:], link=model.concentration_link)
    return DiagGaussianParams(raw[:, :n], raw[:, n:])


def _rotate(z, theta):
    c, s = theta.cos().reshape(-1, 1), theta.sin().reshape(-1, 1)
    z1, z2 = z[:, 0:1], z[:, 1:2]
    return concat([c * z1 - s * z2, s * z1 + c * z2], axis=-1)


def action_angle(action_params, x):
    raw = mlp_forward(action_params, x)
    if np.any(np.hypot(raw.data[:, 0], raw.data[:, 1]) < 1e-12):
        raise NumericError("action encoder output is degenerate (norm ~ 0); angle undefined")
    return atan2(raw[:, 1], raw[:, 0])


def apply_group_action(action_params, x, z, angle_shift=0.0):
    """Rotate each row of ``z`` by the angle atan2 of the action encoder output, plus a shift."""
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
    z = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
    if z.shape[-1] != 2:
        raise ValueError("the SO(2) action needs points in R^2")
    theta = action_angle(action_params, x)
    if angle_shift:
        theta = theta + angle_shift
    return _rotate(z, theta)


def rotate(z, angle):
    """Rotate rows of a plain array by a fixed angle."""
    c, s = np.cos(angle), np.sin(angle)
    z = np.asarray(z, dtype=np.float64)
    return np.stack([c * z[..., 0] - s * z[..., 1], s * z[..., 0] + c * z[..., 1]], axis=-1)


def draw_noise(model, n, rng):
    if model.manifold:
        return np.clip(rng.uniform(size=(n, model.latent_dim)), _U_EPS, 1.0 - _U_EPS)
    return rng.standard_normal(size=(n, model.latent_dim))


def sample_hidden(model, post, noise):
    if model.manifold:
        return beta_sample_reparam(post, noise)
    return gaussian_sample_reparam(post, noise)


def to_decoder_input(model, z_hid, x, angle_shift=0.0):
    """Hidden sample -> decoder input (embedding, then the optional group action)."""
    if not model.manifold:
        return z_hid
    z = model.embedding(z_hid.clip(SAMPLE_CLAMP, 1.0 - SAMPLE_CLAMP))
    if model.has_action:
        z = apply_group_action(model.action_encoder, x, z, angle_shift)
    return z


def elbo_terms(model, x, noise):
    """Per-point single-sample ELBO, reconstruction log-likelihood and KL (Tensors)."""
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
    post = posterior(model, x)
    z_hid = sample_hidden(model, post, noise)
    mean = mlp_forward(model.decoder, to_decoder_input(model, z_hid, x))
    recon = gaussian_log_pdf_diag(DiagGaussianParams(mean, model.log_std), x)
    kl = kl_beta_uniform(post) if model.manifold else kl_gaussian_standard(post)
    return recon - kl, recon, kl


def elbo(model, x, n_mc, rng):
    """Monte-Carlo ELBO per data point, averaged over ``n_mc`` posterior draws."""
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    total = np.zeros(len(x))
    with no_grad():
        for _ in range(n_mc):
            val, recon, kl = elbo_terms(model, x, draw_noise(model, len(x), rng))
            if not np.all(np.isfinite(val.data)):
                term = "reconstruction" if not np.all(np.isfinite(recon.data)) else "KL"
                raise NumericError(f"non-finite ELBO ({term} term)")
            total += val.data
    return total / n_mc


def iwae_estimate(model, x, k, rng, chunk=1000):
    """Importance-weighted bound log (1/k) sum_i p(x|z_i) p(z_i) / q(z_i|x), per data point.

    Densities are those of the hidden variable; for Beta posteriors the
    uniform prior contributes log p = 0.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty(len(x))
    with no_grad():
        xt = Tensor(x)
        post = posterior(model, xt)
        for i in range(len(x)):
            logw = []
            for start in range(0, k, chunk):
                m = min(chunk, k - start)
                xi = np.repeat(x[i:i + 1], m, axis=0)
                noise = draw_noise(model, m, rng)
                if model.manifold:
                    pi = BetaParams(np.repeat(post.alpha.data[i:i + 1], m, 0), np.repeat(post.beta.data[i:i + 1], m, 0))
                    z_hid = beta_sample_reparam(pi, noise)
                    zq = np.clip(z_hid.data, 1e-300, 1.0 - 1e-16)
                    log_q = beta_log_pdf(pi, zq)
                    log_p = 0.0
                else:
                    mu = np.repeat(post.mean.data[i:i + 1], m, 0)
                    ls = np.repeat(post.log_std.data[i:i + 1], m, 0)
                    z_hid = Tensor(mu + np.exp(ls) * noise)
                    log_q = gaussian_log_pdf_numpy(mu, ls, z_hid.data)
                    log_p = gaussian_log_pdf_numpy(0.0, 0.0, z_hid.data)
                mean = mlp_forward(model.decoder, to_decoder_input(model, z_hid, Tensor(xi)))
                log_lik = gaussian_log_pdf_numpy(mean.data, model.log_std.data, xi)
                logw.append(log_lik + log_p - log_q)
            logw = np.concatenate(logw)
            out[i] = logsumexp(logw) - np.log(k)
    return out


# -- symmetry of the posterior family -----------------------------------------------

def posterior_samples(model, x, n, rng, angle_shift=0.0, alpha_beta=None):
    """Decoder-input samples z ~ q(z|x) for a single data point."""
    x1 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xs = np.repeat(x1, n, axis=0)
    with no_grad():
        if alpha_beta is None:
            post = posterior(model, Tensor(x1))
            p = BetaParams(np.repeat(post.alpha.data, n, 0), np.repeat(post.beta.data, n, 0))
        else:
            a, b = alpha_beta
            p = BetaParams(np.full((n, model.latent_dim), a), np.full((n, model.latent_dim), b))
        z_hid = beta_sample_reparam(p, draw_noise(model, n, rng))
        return to_decoder_input(model, z_hid, Tensor(xs), angle_shift).data


def _closest_family_member(model, target, grid_size=4096):
    """Moment-matched Beta in the hidden space whose pushforward best explains ``target``.

    Targets are pulled back to the hidden interval by nearest neighbour on a
    dense grid of the embedding's image.
    """
    grid = (np.arange(grid_size) + 0.5) / grid_size
    image = model.embedding.numpy(grid[:, None])
    d2 = np.sum(target ** 2, 1)[:, None] + np.sum(image ** 2, 1)[None, :] - 2 * target @ image.T
    z = grid[np.argmin(d2, axis=1)]
    m, v = z.mean(), max(z.var(), 1e-12)
    common = max(m * (1 - m) / v - 1.0, 1e-3)
    return max(m * common, 0.01), max((1 - m) * common, 0.01)


def posterior_symmetry_check(model, g, n_samples, rng, x, kernel=Kernel()):
    """MMD between rotated posterior samples and the family member meant to match them.

    With an action encoder the matching member shifts the predicted angle by
    ``g``. Without one, the best moment-matched Beta pushed through the
    embedding stands in. ``x`` may hold several probe points; the largest MMD
    is returned together with the per-probe values.
    """
    if model.embedding is None or model.embedding.dim_ambient != 2:
        raise ValueError("the symmetry check needs a manifold variant with a 2-D ambient space")
    probes = np.atleast_2d(np.asarray(x, dtype=np.float64))
    values = []
    for xi in probes:
        rotated = rotate(posterior_samples(model, xi, n_samples, rng), g)
        if model.has_action:
            other = posterior_samples(model, xi, n_samples, rng, angle_shift=g)
        else:
            ab = _closest_family_member(model, rotated)
            other = posterior_samples(model, xi, n_samples, rng, alpha_beta=ab)
        values.append(mmd(rotated, other, kernel))
    return max(values), values


# -- training -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_mc_train: int = 1
    n_mc_eval: int = 64
    train_embedding: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid training configuration")


@dataclass
class TrainResult:
    model: VaeModel
    history: list = field(default_factory=list)


def train(model, train_x, cfg, rng, batches=None):
    """Maximize the Monte-Carlo ELBO with Adam; one log row per epoch.

    ``batches`` optionally supplies fresh data per step (streaming mode); it
    must expose ``batch(size)``.
    """
    model.train_embedding = cfg.train_embedding
    params = model.parameters
    opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    n = len(train_x)
    steps = max(n // cfg.batch_size, 1)
    history = []
    last_good = {k: v.copy() for k, v in model.named_arrays().items()}
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for step in range(steps):
            if batches is not None:
                xb = batches.batch(cfg.batch_size)
            else:
                xb = train_x[perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]]
            loss_terms = []
            for _ in range(cfg.n_mc_train):
                val, recon, kl = elbo_terms(model, xb, draw_noise(model, len(xb), rng))
                loss_terms.append((val.mean(), recon.data.mean(), kl.data.mean()))
            obj = loss_terms[0][0]
            for extra in loss_terms[1:]:
                obj = obj + extra[0]
            obj = obj * (1.0 / cfg.n_mc_train)
            if not np.isfinite(obj.item()):
                raise TrainingError(f"ELBO became non-finite at epoch {epoch}", checkpoint=last_good, epoch=epoch)
            zero_grad(params)
            (-obj).backward()
            adam_step(opt, params)
            sums += (obj.item(), np.mean([t[1] for t in loss_terms]), np.mean([t[2] for t in loss_terms]))
        row = {"epoch": epoch, "elbo": sums[0] / steps, "recon": sums[1] / steps, "kl": sums[2] / steps}
        history.append(row)
        last_good = {k: v.copy() for k, v in model.named_arrays().items()}
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.info("%s epoch %d elbo %.2f recon %.2f kl %.3f", model.variant, epoch,
                     row["elbo"], row["recon"], row["kl"])
    return TrainResult(model, history)


def model_metadata(model):
    meta = {"variant": model.variant, "latent_dim": model.latent_dim, "data_dim": model.data_dim,
            "encoder": model.encoder.spec(), "decoder": model.decoder.spec(),
            "train_embedding": model.train_embedding, "concentration_link": model.concentration_link}
    if model.action_encoder is not None:
        meta["action_encoder"] = model.action_encoder.spec()
    if model.embedding is not None:
        meta["embedding_kind"] = model.embedding.kind
        meta["embedding_hash"] = model.embedding.digest()
    return meta


def config_dict(cfg):
    return asdict(cfg)

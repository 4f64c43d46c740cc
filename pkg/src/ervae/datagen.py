"""Toy data: uniform points on the unit circle pushed through a frozen random MLP."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ervae.nn.mlp import MlpParams, mlp_forward_numpy, xavier_uniform_init
from ervae.nn.tensor import Tensor

# independent rng streams derived from one seed
_STREAM_TRANSFORM, _STREAM_TRAIN, _STREAM_EVAL, _STREAM_NOISE = range(4)


@dataclass
class DatasetSpec:
    seed: int = 0
    n_train: int = 10000
    n_eval: int = 2000
    ambient_dim: int = 100
    hidden_size: int = 100
    noise_std: float = 0.0
    output_init: str = "xavier"
    streaming: bool = False

    def __post_init__(self):
        if self.ambient_dim < 2:
            raise ValueError("ambient_dim must be at least 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("dataset sizes must be positive")
        if self.output_init not in ("xavier", "uniform_fan_in"):
            raise ValueError(f"unknown output_init {self.output_init!r}")


@dataclass
class Dataset:
    x: np.ndarray
    angles: np.ndarray

    def __len__(self):
        return len(self.x)


def stream_rng(seed, stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


def circle_points(angles):
    angles = np.asarray(angles, dtype=np.float64)
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def sample_circle(n, rng, return_angles=False):
    """``n`` points (cos t, sin t) with t ~ Uniform[0, 2 pi)."""
    if n < 1:
        raise ValueError("n must be positive")
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = circle_points(angles)
    return (pts, angles) if return_angles else pts


def build_fixed_transform(seed, hidden_size=100, ambient_dim=100, output_init="xavier"):
    """Frozen 2 -> hidden (ReLU) -> ambient (identity) MLP.

    Weights of both layers are Xavier-uniform by default; ``output_init=
    "uniform_fan_in"`` switches the output layer to U(+-1/sqrt(fan_in)).
    Biases are U(+-1/sqrt(fan_in)), the usual dense-layer default.
    """
    rng = stream_rng(seed, _STREAM_TRANSFORM)
    w0 = xavier_uniform_init(2, hidden_size, rng)
    b0 = rng.uniform(-1 / np.sqrt(2), 1 / np.sqrt(2), size=hidden_size)
    if output_init == "xavier":
        w1 = xavier_uniform_init(hidden_size, ambient_dim, rng)
    else:
        bound = 1.0 / np.sqrt(hidden_size)
        w1 = rng.uniform(-bound, bound, size=(ambient_dim, hidden_size))
    b1 = rng.uniform(-1 / np.sqrt(hidden_size), 1 / np.sqrt(hidden_size), size=ambient_dim)
    params = MlpParams(
        [2, hidden_size, ambient_dim],
        ["relu", "identity"],
        [Tensor(w0), Tensor(w1)],
        [Tensor(b0), Tensor(b1)],
    )
    return params.freeze()


def apply_transform(transform, points):
    return mlp_forward_numpy(transform, points)


def generate_dataset(spec, split="train", transform=None):
    """Generate the ``train`` or ``eval`` split; each split has its own rng stream."""
    n, stream = {"train": (spec.n_train, _STREAM_TRAIN), "eval": (spec.n_eval, _STREAM_EVAL)}[split]
    if transform is None:
        transform = build_fixed_transform(spec.seed, spec.hidden_size, spec.ambient_dim, spec.output_init)
    pts, angles = sample_circle(n, stream_rng(spec.seed, stream), return_angles=True)
    x = apply_transform(transform, pts)
    if spec.noise_std > 0:
        noise_rng = stream_rng(spec.seed, _STREAM_NOISE * 10 + stream)
        x = x + spec.noise_std * noise_rng.standard_normal(x.shape)
    return Dataset(x, angles)


def generate_splits(spec):
    transform = build_fixed_transform(spec.seed, spec.hidden_size, spec.ambient_dim, spec.output_init)
    return generate_dataset(spec, "train", transform), generate_dataset(spec, "eval", transform)


class StreamingBatches:
    """Fresh batches drawn per step instead of a fixed pre-generated set."""

    def __init__(self, spec, seed_offset=0):
        self.spec = spec
        self.transform = build_fixed_transform(spec.seed, spec.hidden_size, spec.ambient_dim, spec.output_init)
        self.rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _STREAM_TRAIN, 1000 + seed_offset]))

    def batch(self, size):
        pts = sample_circle(size, self.rng)
        x = apply_transform(self.transform, pts)
        if self.spec.noise_std > 0:
            x = x + self.spec.noise_std * self.rng.standard_normal(x.shape)
        return x


def lipschitz_estimate(transform, n_pairs, rng, max_sep=1e-2):
    """Largest |T(p) - T(q)| / |p - q| over nearby pairs on the circle."""
    t = rng.uniform(0.0, 2.0 * np.pi, size=n_pairs)
    dt = rng.uniform(1e-6, max_sep, size=n_pairs)
    p, q = circle_points(t), circle_points(t + dt)
    num = np.linalg.norm(apply_transform(transform, p) - apply_transform(transform, q), axis=1)
    den = np.linalg.norm(p - q, axis=1)
    return float(np.max(num / den))


def export_csv(dataset, spec, path):
    """Write ``path`` (x_0..x_{m-1}, angle) and a JSON sidecar with the generation settings.

    Values use 17 significant digits, which round-trips float64 exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = dataset.x.shape[1]
    header = ",".join([f"x_{i}" for i in range(m)] + ["angle"])
    table = np.column_stack([dataset.x, dataset.angles])
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")
    Path(str(path) + ".json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True))
    return path


def load_csv(path):
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    spec = None
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        spec = DatasetSpec(**json.loads(sidecar.read_text()))
    return Dataset(table[:, :-1], table[:, -1]), spec

import numpy as np
import pytest
from scipy import stats

from ervae.datagen import DatasetSpec, generate_splits
from ervae.embedding import projection_embedding
from ervae.errors import NumericError, TrainingError
from ervae.models import (
    LEARNED_F,
    LEARNED_F_ACTION,
    PROJ_F,
    VANILLA,
    TrainConfig,
    apply_group_action,
    build_model,
    elbo,
    elbo_terms,
    iwae_estimate,
    posterior_symmetry_check,
    rotate,
    train,
)
from ervae.nn import MlpParams, Tensor, init_mlp

D = 6


def _small(variant, seed=0, embedding=None, latent_dim=1):
    if embedding is None and variant != VANILLA:
        embedding = projection_embedding()
    return build_model(variant, np.random.default_rng(seed), latent_dim=latent_dim, data_dim=D,
                       embedding=embedding, hidden=(8, 8))


def _data(n=64, seed=0):
    tr, _ = generate_splits(DatasetSpec(seed=seed, n_train=n, n_eval=1, ambient_dim=D, hidden_size=16))
    return tr.x


def _oracle(x):
    """Vanilla model whose posterior is the prior and whose decoder always returns ``x``."""
    m = _small(VANILLA)
    m.encoder = init_mlp([D, 8, 2], "tanh", np.random.default_rng(0), init="zeros")
    m.decoder = MlpParams([1, D], ["identity"], [Tensor(np.zeros((D, 1)))], [Tensor(x.copy())])
    m.log_std.data = np.array(-0.7)
    return m


def test_oracle_elbo_equals_zero_residual_likelihood(rng):
    x = _data(1)[0]
    expected = D * (-0.5 * np.log(2 * np.pi) + 0.7)
    assert elbo(_oracle(x), x, 8, rng)[0] == pytest.approx(expected, abs=1e-12)
    assert iwae_estimate(_oracle(x), x, 50, rng)[0] == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("variant", [VANILLA, PROJ_F, LEARNED_F_ACTION])
def test_iwae_upper_bounds_elbo(variant, rng):
    m = _small(variant)
    x = _data(10)
    iw = iwae_estimate(m, x, 5000, rng)
    el = elbo(m, x, 500, rng)
    se = np.std(el - iw, ddof=1) / np.sqrt(len(x))
    assert iw.mean() >= el.mean() - 3 * se


def test_iwae_monotone_in_k(rng):
    m = _small(PROJ_F)
    x = _data(300)
    means = [iwae_estimate(m, x, k, rng) for k in (1, 10, 100)]
    for lo, hi in zip(means, means[1:]):
        diff = hi - lo
        assert diff.mean() >= -3 * diff.std(ddof=1) / np.sqrt(len(x))


def test_iwae_k1_matches_single_sample_elbo(rng):
    m = _small(VANILLA)
    x = _data(1000)
    a, b = iwae_estimate(m, x, 1, rng), elbo(m, x, 1, rng)
    assert stats.ttest_rel(a, b).pvalue > 0.01
    with pytest.raises(ValueError):
        iwae_estimate(m, x, 0, rng)


def test_elbo_seeds_differ_but_agree_in_expectation():
    m = _small(LEARNED_F_ACTION)
    x = _data(1000)
    a = elbo(m, x, 1, np.random.default_rng(1))
    b = elbo(m, x, 1, np.random.default_rng(2))
    assert not np.array_equal(a, b)
    assert stats.ttest_rel(a, b).pvalue > 0.01


def test_elbo_names_bad_term(rng):
    m = _small(PROJ_F)
    m.log_std.data = np.array(np.nan)
    with pytest.raises(NumericError, match="reconstruction"):
        elbo(m, _data(4), 1, rng)
    with pytest.raises(ValueError):
        elbo(m, _data(4), 0, rng)


def test_elbo_terms_shapes_and_sign(rng):
    m = _small(PROJ_F)
    val, recon, kl = elbo_terms(m, _data(5), rng.uniform(size=(5, 1)))
    assert val.shape == recon.shape == kl.shape == (5,)
    assert np.all(kl.data >= 0)
    assert np.allclose(val.data, recon.data - kl.data)


def test_group_action_rotation():
    z = np.array([[1.0, 0.0]])
    assert np.allclose(rotate(z, 0.0), z)
    assert np.allclose(rotate(z, np.pi / 2), [[0.0, 1.0]], atol=1e-15)
    rng = np.random.default_rng(0)
    zz, th = rng.normal(size=(1000, 2)), rng.uniform(0, 2 * np.pi, 1000)
    rotated = np.stack([rotate(zz[i], th[i]) for i in range(1000)])
    assert np.max(np.abs(np.linalg.norm(rotated, axis=1) - np.linalg.norm(zz, axis=1))) < 1e-12


def test_group_action_uses_encoder_angle():
    # raw output (1, 0) -> angle 0, raw (0, 1) -> angle pi/2
    enc = MlpParams([D, 2], ["identity"], [Tensor(np.zeros((2, D)))], [Tensor(np.array([1.0, 0.0]))])
    z = np.array([[1.0, 0.0]])
    assert np.allclose(apply_group_action(enc, np.zeros((1, D)), z).data, z)
    enc.biases[0].data = np.array([0.0, 1.0])
    assert np.allclose(apply_group_action(enc, np.zeros((1, D)), z).data, [[0.0, 1.0]], atol=1e-15)
    enc.biases[0].data = np.zeros(2)
    with pytest.raises(NumericError):
        apply_group_action(enc, np.zeros((1, D)), z)


def test_build_model_validation(rng):
    with pytest.raises(ValueError):
        build_model(PROJ_F, rng, data_dim=D)
    with pytest.raises(ValueError):
        build_model("mystery", rng, data_dim=D)
    with pytest.raises(ValueError):
        build_model(PROJ_F, rng, latent_dim=2, data_dim=D, embedding=projection_embedding())


@pytest.mark.parametrize("variant, dim", [(VANILLA, 1), (VANILLA, 2), (LEARNED_F, 1), (PROJ_F, 1),
                                          (LEARNED_F_ACTION, 1)])
def test_training_improves_elbo(variant, dim, learned_embedding):
    emb = learned_embedding if variant in (LEARNED_F, LEARNED_F_ACTION) else None
    m = _small(variant, embedding=emb, latent_dim=dim)
    before = emb.digest() if emb is not None else None
    res = train(m, _data(256), TrainConfig(epochs=30, batch_size=32, lr=3e-3), np.random.default_rng(0))
    h = [r["elbo"] for r in res.history]
    assert len(h) == 30
    assert np.mean(h[-10:]) > np.mean(h[:10])
    if emb is not None:
        assert emb.digest() == before


def test_training_is_deterministic():
    runs = [train(_small(PROJ_F), _data(128), TrainConfig(epochs=2, batch_size=32), np.random.default_rng(5))
            for _ in range(2)]
    a, b = (r.model.named_arrays() for r in runs)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_training_nan_aborts_with_snapshot():
    m = _small(PROJ_F)
    m.log_std.data = np.array(np.nan)
    with pytest.raises(TrainingError) as info:
        train(m, _data(64), TrainConfig(epochs=3, batch_size=32), np.random.default_rng(0))
    assert info.value.epoch == 0
    assert set(info.value.checkpoint) == set(m.named_arrays())


def test_checkpoint_arrays_round_trip():
    a, b = _small(LEARNED_F_ACTION, seed=1), _small(LEARNED_F_ACTION, seed=2)
    b.load_arrays(a.named_arrays())
    x = _data(5)
    noise = np.full((5, 1), 0.3)
    assert np.array_equal(elbo_terms(a, x, noise)[0].data, elbo_terms(b, x, noise)[0].data)


def test_symmetry_zero_shift_is_tiny(rng):
    m = _small(LEARNED_F_ACTION)
    worst, vals = posterior_symmetry_check(m, 0.0, 2000, rng, _data(2))
    assert len(vals) == 2 and worst < 1e-3


def test_symmetry_requires_manifold(rng):
    with pytest.raises(ValueError):
        posterior_symmetry_check(_small(VANILLA), 0.5, 100, rng, _data(1))

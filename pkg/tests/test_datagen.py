import hashlib

import numpy as np
import pytest

from ervae.datagen import (
    DatasetSpec,
    StreamingBatches,
    apply_transform,
    build_fixed_transform,
    circle_points,
    export_csv,
    generate_dataset,
    generate_splits,
    lipschitz_estimate,
    load_csv,
    sample_circle,
)


def test_circle_points_exact():
    assert np.allclose(circle_points(0.0), [1.0, 0.0])
    assert np.allclose(circle_points(np.pi / 2), [0.0, 1.0], atol=1e-15)


def test_circle_sample_statistics(rng):
    pts = sample_circle(10**5, rng)
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0)
    assert np.all(np.abs(pts.mean(axis=0)) < 0.02)
    with pytest.raises(ValueError):
        sample_circle(0, rng)


def test_transform_deterministic_and_zero_input():
    a, b = build_fixed_transform(3), build_fixed_transform(3)
    grid = circle_points(np.linspace(0, 2 * np.pi, 50))
    assert np.array_equal(apply_transform(a, grid), apply_transform(b, grid))
    w1 = a.weights[1].data
    b0, b1 = a.biases[0].data, a.biases[1].data
    assert np.allclose(apply_transform(a, np.zeros((1, 2)))[0], w1 @ np.maximum(b0, 0) + b1, atol=1e-14)
    assert not np.array_equal(apply_transform(build_fixed_transform(4), grid), apply_transform(a, grid))


def test_transform_is_frozen():
    t = build_fixed_transform(0)
    assert not any(p.requires_grad for p in t.parameters)


def test_lipschitz_bound_on_nearby_points(rng):
    t = build_fixed_transform(0)
    lip = lipschitz_estimate(t, 10**4, rng)
    assert np.isfinite(lip) and lip > 0
    ds = generate_dataset(DatasetSpec(n_train=3000))
    order = np.argsort(ds.angles)
    th, x = ds.angles[order], ds.x[order]
    close = np.diff(th) < 1e-3
    dist = np.linalg.norm(np.diff(x, axis=0), axis=1)[close]
    assert close.sum() > 100
    assert np.all(dist < lip * 1e-3)


def test_dataset_is_exact_image_of_circle():
    spec = DatasetSpec(n_train=500, n_eval=100)
    tr, ev = generate_splits(spec)
    assert tr.x.shape == (500, 100) and ev.x.shape == (100, 100)
    t = build_fixed_transform(spec.seed)
    assert np.array_equal(tr.x, apply_transform(t, circle_points(tr.angles)))
    assert not np.array_equal(tr.x[:100], ev.x)


def test_generation_deterministic_and_noise_changes_it():
    spec = DatasetSpec(n_train=200)
    assert np.array_equal(generate_dataset(spec).x, generate_dataset(spec).x)
    noisy = generate_dataset(DatasetSpec(n_train=200, noise_std=0.1))
    assert not np.array_equal(noisy.x, generate_dataset(spec).x)


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(noise_std=-1)
    with pytest.raises(ValueError):
        DatasetSpec(n_train=0)
    with pytest.raises(ValueError):
        DatasetSpec(output_init="normal")


def test_streaming_batches_fresh():
    s = StreamingBatches(DatasetSpec())
    a, b = s.batch(64), s.batch(64)
    assert a.shape == (64, 100) and not np.array_equal(a, b)


def test_csv_round_trip_is_exact(tmp_path):
    spec = DatasetSpec(n_train=300)
    ds = generate_dataset(spec)
    path = export_csv(ds, spec, tmp_path / "train.csv")
    back, spec_back = load_csv(path)
    assert spec_back == spec
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.angles, ds.angles)
    assert path.read_text().splitlines()[0].split(",")[-1] == "angle"
    again = export_csv(generate_dataset(spec), spec, tmp_path / "again.csv")
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()  # noqa: E731
    assert digest(path) == digest(again)

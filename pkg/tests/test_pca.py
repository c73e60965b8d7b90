import numpy as np
import pytest

from epicalib import pca


def orthonormality_defect(basis):
    gram = basis.components @ basis.components.T
    return np.max(np.abs(gram - np.eye(basis.k)))


def test_orthonormal_rows(small_basis):
    assert orthonormality_defect(small_basis) < 1e-8


def test_rank_one_data(rng):
    direction = rng.standard_normal(28)
    weights = rng.standard_normal(50)
    data = np.outer(weights, direction)
    basis = pca.fit(data, k=5)
    assert np.all(basis.explained_variance[1:] < 1e-10 * basis.explained_variance[0])


def test_training_reconstruction_tolerance(small_dataset, small_basis):
    mask = small_dataset.record_mask(split="TRAIN")
    rmse = pca.reconstruction_rmse(small_basis, small_dataset.normalized[mask])
    assert rmse < 1e-3


def test_project_mean_is_zero(small_basis):
    assert np.max(np.abs(pca.project(small_basis, small_basis.mean))) < 1e-12


def test_project_reconstruct_identity_on_codes(small_basis, rng):
    for _ in range(10):
        z = rng.standard_normal(small_basis.k)
        z_back = pca.project(small_basis, pca.reconstruct(small_basis, z))
        assert np.max(np.abs(z_back - z)) < 1e-10


def test_projection_linearity(small_basis, rng):
    c1 = rng.standard_normal(28)
    c2 = rng.standard_normal(28)
    a, b = 0.7, -1.3
    combo = a * c1 + b * c2 - (a + b - 1) * small_basis.mean
    lhs = pca.project(small_basis, combo)
    rhs = a * pca.project(small_basis, c1) + b * pca.project(small_basis, c2)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_explained_variance_sorted(small_basis):
    assert np.all(np.diff(small_basis.explained_variance) <= 1e-12)


def test_reconstruction_error_nonincreasing_in_k(small_dataset):
    mask = small_dataset.record_mask(split="TRAIN")
    curves = small_dataset.normalized[mask]
    errors = [pca.reconstruction_rmse(pca.fit(curves, k=k), curves)
              for k in range(1, 11)]
    for lo, hi in zip(errors[1:], errors[:-1]):
        assert lo <= hi + 1e-12


def test_sign_convention_deterministic(small_dataset):
    mask = small_dataset.record_mask(split="TRAIN")
    a = pca.fit(small_dataset.normalized[mask], k=10)
    b = pca.fit(small_dataset.normalized[mask], k=10)
    assert np.array_equal(a.components, b.components)
    for row in a.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_too_few_curves_rejected(rng):
    with pytest.raises(ValueError):
        pca.fit(rng.standard_normal((5, 28)), k=10)


def test_serialization_roundtrip(small_basis, tmp_path):
    path = tmp_path / "basis.json"
    pca.save(small_basis, path)
    loaded = pca.load(path)
    assert np.array_equal(loaded.mean, small_basis.mean)
    assert np.array_equal(loaded.components, small_basis.components)
    assert np.array_equal(loaded.explained_variance, small_basis.explained_variance)

    corrupted = path.read_text().replace('"k": 10', '"k": 9')
    path.write_text(corrupted)
    with pytest.raises(ValueError):
        pca.load(path)

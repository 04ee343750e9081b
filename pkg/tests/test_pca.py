import numpy as np
import pytest

from crica.encoder import GlobalDescriptor
from crica.errors import DimMismatch, TooFewSamples
from crica.pca import (
    PcaModel,
    RankDeficientWarning,
    load_pca,
    pca_fit,
    pca_transform,
    save_pca,
    transform_matrix,
)

RNG = np.random.default_rng(71)


class TestFit:
    def test_points_on_x_axis(self):
        pts = np.zeros((10, 2))
        pts[:, 0] = np.arange(10.0)
        with pytest.warns(RankDeficientWarning):
            model = pca_fit(pts, 2)
        np.testing.assert_allclose(np.abs(model.basis[0]), [1.0, 0.0], atol=1e-9)
        assert model.eigenvalues[1] == pytest.approx(0.0, abs=1e-9)

    def test_isotropic_cloud_equal_eigenvalues(self):
        pts = RNG.standard_normal((10000, 6))
        model = pca_fit(pts, 6)
        assert model.eigenvalues[0] / model.eigenvalues[-1] < 1.2

    def test_complete_basis_reconstruction(self):
        pts = RNG.standard_normal((50, 8))
        model = pca_fit(pts, 8)
        proj = (pts - model.mean) @ model.basis.T
        back = proj @ model.basis + model.mean
        np.testing.assert_allclose(back, pts, atol=1e-5)

    def test_basis_orthonormal(self):
        pts = RNG.standard_normal((200, 12))
        model = pca_fit(pts, 5)
        gram = model.basis @ model.basis.T
        np.testing.assert_allclose(gram, np.eye(5), atol=1e-6)

    def test_eigenvalues_nonincreasing_nonnegative(self):
        pts = RNG.standard_normal((100, 10)) * np.linspace(3, 0.1, 10)
        model = pca_fit(pts, 10)
        assert np.all(np.diff(model.eigenvalues) <= 1e-12)
        assert np.all(model.eigenvalues >= 0)

    def test_fitting_set_projection_has_diagonal_covariance(self):
        pts = RNG.standard_normal((300, 8)) @ RNG.standard_normal((8, 8))
        model = pca_fit(pts, 8)
        proj = (pts - model.mean) @ model.basis.T
        cov = proj.T @ proj / (len(pts) - 1)
        off = cov - np.diag(np.diag(cov))
        assert np.max(np.abs(off)) < 1e-4 * max(1.0, np.max(np.diag(cov)))

    def test_sign_convention_deterministic(self):
        pts = RNG.standard_normal((80, 6))
        m1 = pca_fit(pts, 4)
        m2 = pca_fit(pts.copy(), 4)
        np.testing.assert_array_equal(m1.basis, m2.basis)
        for row in m1.basis:
            assert row[np.abs(row).argmax()] > 0

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            pca_fit(RNG.standard_normal((5, 8)), 5)

    def test_bad_out_dim(self):
        with pytest.raises(DimMismatch):
            pca_fit(RNG.standard_normal((20, 8)), 9)


class TestTransform:
    def test_full_dim_preserves_cosine(self):
        pts = RNG.standard_normal((60, 10))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        model = pca_fit(pts, 10)
        # consistent renormalization: compare centered-and-normalized originals
        centered = pts - model.mean
        centered /= np.linalg.norm(centered, axis=1, keepdims=True)
        proj = transform_matrix(pts, model)
        before = centered @ centered.T
        after = proj @ proj.T
        np.testing.assert_allclose(after, before, atol=1e-5)

    def test_zero_variance_direction_dropped(self):
        pts = RNG.standard_normal((40, 3))
        pts[:, 2] = 0.0
        model = pca_fit(pts, 2)  # keep only the live directions
        a = np.array([1.0, 2.0, 0.0])
        b = np.array([1.0, 2.0, 5.0])  # differs only along the dead direction
        np.testing.assert_allclose(transform_matrix(a, model),
                                   transform_matrix(b, model), atol=1e-9)

    def test_dim_mismatch(self):
        model = pca_fit(RNG.standard_normal((30, 6)), 3)
        with pytest.raises(DimMismatch):
            transform_matrix(np.ones(7), model)

    def test_global_descriptor_wrapper(self):
        pts = RNG.standard_normal((30, 8))
        model = pca_fit(pts, 4)
        desc = GlobalDescriptor("img", pts[0].astype(np.float32))
        out = pca_transform(desc, model)
        assert out.image_id == "img"
        assert out.vector.shape == (4,)
        assert np.linalg.norm(out.vector) == pytest.approx(1.0, abs=1e-5)

    def test_whitening_unit_variance(self):
        pts = RNG.standard_normal((500, 6)) * np.array([5.0, 3.0, 2.0, 1.0, 0.5, 0.2])
        model = pca_fit(pts, 6)
        proj = transform_matrix(pts, model, whiten=True, renormalize=False)
        np.testing.assert_allclose(proj.std(axis=0), 1.0, rtol=0.15)

    def test_transform_deterministic_after_round_trip(self, tmp_path):
        pts = RNG.standard_normal((50, 8))
        model = pca_fit(pts, 4)
        path = tmp_path / "m.cpca"
        save_pca(path, model)
        loaded = load_pca(path)
        a = transform_matrix(pts, loaded)
        b = transform_matrix(pts, loaded)
        np.testing.assert_array_equal(a, b)
        c = transform_matrix(pts, model)
        np.testing.assert_allclose(a, c, atol=1e-5)


class TestFileFormat:
    def test_round_trip_fields(self, tmp_path):
        model = pca_fit(RNG.standard_normal((40, 6)), 3)
        path = tmp_path / "m.cpca"
        save_pca(path, model)
        loaded = load_pca(path)
        assert loaded.dim == 6 and loaded.out_dim == 3
        np.testing.assert_allclose(loaded.mean, model.mean, atol=1e-6)
        np.testing.assert_allclose(loaded.basis, model.basis, atol=1e-6)
        np.testing.assert_allclose(loaded.eigenvalues, model.eigenvalues, atol=1e-6)

    def test_header_layout(self, tmp_path):
        model = pca_fit(RNG.standard_normal((40, 6)), 3)
        path = tmp_path / "m.cpca"
        save_pca(path, model)
        raw = path.read_bytes()
        assert raw[:4] == b"CPCA"
        assert len(raw) == 4 + 8 + 4 * (6 + 3 * 6 + 3)

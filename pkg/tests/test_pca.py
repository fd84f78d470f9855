"""PCA tests: orthonormality, selection, projection oracles, patch banks."""

import numpy as np
import pytest

from patchpca.errors import ParameterError
from patchpca.patching import hanning_window, make_layout
from patchpca.pca import (
    PcaBasis,
    decode,
    decode_fields,
    encode,
    encode_field,
    encode_fields,
    fit_patch_bank,
    fit_pca,
    latent_dim,
    reconstruct_fields,
)


def orthonormality_defect(basis):
    k = basis.k
    return np.max(np.abs(basis.components @ basis.components.T - np.eye(k)))


class TestFitPca:
    @pytest.mark.parametrize("shape", [(8, 40), (40, 8), (30, 30)])
    def test_orthonormal_both_gram_routes(self, shape):
        rng = np.random.default_rng(shape[0])
        basis = fit_pca(rng.standard_normal(shape), variance_target=1.0)
        assert orthonormality_defect(basis) <= 1e-10
        assert basis.k <= min(shape[0] - 1, shape[1])

    def test_singular_values_non_increasing(self):
        rng = np.random.default_rng(0)
        basis = fit_pca(rng.standard_normal((25, 12)), variance_target=1.0)
        assert np.all(np.diff(basis.singular_values) <= 0)

    def test_matches_numpy_svd(self):
        # spectrum and subspace against the dense SVD oracle
        rng = np.random.default_rng(4)
        x = rng.standard_normal((20, 9))
        basis = fit_pca(x, variance_target=1.0)
        xc = x - x.mean(axis=0)
        _, s_ref, vt_ref = np.linalg.svd(xc, full_matrices=False)
        k = basis.k
        assert np.allclose(basis.singular_values, s_ref[:k], rtol=1e-10)
        # same subspace: projectors agree even if signs and order differ
        proj = basis.components.T @ basis.components
        proj_ref = vt_ref[:k].T @ vt_ref[:k]
        assert np.max(np.abs(proj - proj_ref)) < 1e-9

    def test_degenerate_constant_samples(self):
        basis = fit_pca(np.full((5, 7), 3.0))
        assert basis.k == 1
        assert basis.singular_values[0] == 0.0
        assert basis.variance_ratio_retained == 1.0
        assert np.array_equal(basis.components, np.eye(1, 7))
        assert np.allclose(encode(basis, np.full(7, 3.0)), 0.0)
        assert np.allclose(decode(basis, np.zeros(1)), 3.0)

    def test_rank_one_construction(self):
        rng = np.random.default_rng(9)
        v = rng.standard_normal(15)
        v /= np.linalg.norm(v)
        coeff = rng.standard_normal(12)
        x = np.outer(coeff, v)
        basis = fit_pca(x, variance_target=0.99)
        assert basis.k == 1
        assert abs(abs(basis.components[0] @ v) - 1.0) < 1e-10
        recon = decode(basis, encode(basis, x))
        assert np.max(np.abs(recon - x)) < 1e-10

    def test_minimal_k_for_variance_target(self):
        # two dominant directions carrying 98 percent of the variance,
        # verified against an explicit cumulative-ratio oracle
        rng = np.random.default_rng(21)
        m, d = 400, 10
        z = rng.standard_normal((m, d)) * np.array([10.0, 6.0] + [0.2] * 8)
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        x = z @ q
        for target in (0.5, 0.9, 0.99, 0.999):
            basis = fit_pca(x, variance_target=target)
            s = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
            ratios = np.cumsum(s**2) / np.sum(s**2)
            k_oracle = int(np.argmax(ratios >= target - 1e-12) + 1)
            assert basis.k == k_oracle, f"target {target}"
            assert basis.variance_ratio_retained >= target - 1e-12
            if basis.k > 1:
                assert ratios[basis.k - 2] < target

    def test_fixed_k_selection(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((30, 20))
        basis = fit_pca(x, fixed_k=5)
        assert basis.k == 5
        assert fit_pca(x, fixed_k=500).k == min(29, 20)

    def test_sign_canonicalization_reproducible(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((40, 16))
        b1 = fit_pca(x, variance_target=0.95)
        b2 = fit_pca(np.array(x, copy=True), variance_target=0.95)
        assert np.array_equal(b1.components, b2.components)
        lead = np.abs(b1.components).argmax(axis=1)
        assert np.all(b1.components[np.arange(b1.k), lead] > 0)

    def test_validation(self):
        with pytest.raises(ParameterError):
            fit_pca(np.zeros((1, 4)))
        with pytest.raises(ParameterError):
            fit_pca(np.zeros((4, 4)), variance_target=0.0)
        with pytest.raises(ParameterError):
            fit_pca(np.full((4, 4), np.nan))


class TestEncodeDecode:
    def make_basis(self, seed=3, m=24, d=10):
        rng = np.random.default_rng(seed)
        return fit_pca(rng.standard_normal((m, d)), variance_target=1.0)

    def test_mean_encodes_to_zero(self):
        basis = self.make_basis()
        assert np.max(np.abs(encode(basis, basis.mean))) < 1e-12

    def test_first_component_direction(self):
        basis = self.make_basis()
        x = basis.mean + basis.singular_values[0] * basis.components[0]
        z = encode(basis, x)
        expect = np.zeros(basis.k)
        expect[0] = basis.singular_values[0]
        assert np.allclose(z, expect, atol=1e-10)

    def test_projection_matches_least_squares_oracle(self):
        # decode(encode(x)) must equal the affine projection onto the span,
        # checked against numpy's lstsq on the component rows
        rng = np.random.default_rng(17)
        x_train = rng.standard_normal((8, 20))
        basis = fit_pca(x_train, variance_target=1.0)
        for _ in range(5):
            x = rng.standard_normal(20)
            recon = decode(basis, encode(basis, x))
            coef, *_ = np.linalg.lstsq(basis.components.T, x - basis.mean, rcond=None)
            oracle = basis.mean + basis.components.T @ coef
            assert np.max(np.abs(recon - oracle)) < 1e-8

    def test_full_variance_round_trip_on_training_rows(self):
        rng = np.random.default_rng(23)
        x = rng.standard_normal((12, 30))
        basis = fit_pca(x, variance_target=1.0)
        recon = decode(basis, encode(basis, x))
        assert np.max(np.abs(recon - x)) < 1e-8

    def test_decode_is_affine(self):
        basis = self.make_basis()
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((2, basis.k))
        lhs = decode(basis, a + b) - decode(basis, np.zeros(basis.k))
        rhs = (decode(basis, a) - decode(basis, np.zeros(basis.k))) + (
            decode(basis, b) - decode(basis, np.zeros(basis.k))
        )
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_adjointness(self):
        basis = self.make_basis()
        rng = np.random.default_rng(8)
        for _ in range(5):
            x = rng.standard_normal(basis.dim)
            z = rng.standard_normal(basis.k)
            lhs = encode(basis, x) @ z
            rhs = (x - basis.mean) @ (decode(basis, z) - basis.mean)
            assert abs(lhs - rhs) < 1e-10

    def test_eckart_young_dominance(self):
        # the fitted rank-k basis beats 20 random orthonormal projections
        rng = np.random.default_rng(31)
        x = rng.standard_normal((60, 25)) * np.linspace(3.0, 0.1, 25)
        basis = fit_pca(x, fixed_k=4)
        xc = x - x.mean(axis=0)
        pca_err = np.sum((xc - encode(basis, x) @ basis.components) ** 2)
        for trial in range(20):
            q, _ = np.linalg.qr(rng.standard_normal((25, 4)))
            rand_err = np.sum((xc - xc @ q @ q.T) ** 2)
            assert pca_err <= rand_err + 1e-9, f"trial {trial}"

    def test_length_validation(self):
        basis = self.make_basis()
        with pytest.raises(ParameterError):
            encode(basis, np.zeros(basis.dim + 1))
        with pytest.raises(ParameterError):
            decode(basis, np.zeros(basis.k + 1))


class TestPatchBank:
    def fields(self, m=30, d=32, seed=12):
        rng = np.random.default_rng(seed)
        return rng.standard_normal((m, d, d))

    def test_one_basis_per_origin(self):
        layout = make_layout(32, 8, 8)
        bank = fit_patch_bank(self.fields(), layout, variance_target=0.9)
        assert len(bank.bases) == 16
        assert len(bank.fit_seconds) == 16
        assert latent_dim(bank) == sum(b.k for b in bank.bases)

    def test_constant_fields_degenerate_everywhere(self):
        layout = make_layout(32, 8, 8)
        bank = fit_patch_bank(np.full((5, 32, 32), 2.0), layout)
        assert all(b.k == 1 and b.singular_values[0] == 0.0 for b in bank.bases)

    def test_threads_do_not_change_result(self):
        layout = make_layout(32, 8, 4)
        fields = self.fields()
        b1 = fit_patch_bank(fields, layout, variance_target=0.9, threads=1)
        b2 = fit_patch_bank(fields, layout, variance_target=0.9, threads=3)
        for a, b in zip(b1.bases, b2.bases):
            assert np.array_equal(a.components, b.components)
            assert np.array_equal(a.mean, b.mean)

    def test_encode_decode_field_round_trip_mosaic(self):
        layout = make_layout(32, 8, 8)
        fields = self.fields(m=20)
        bank = fit_patch_bank(fields, layout, variance_target=1.0)
        recon = decode_fields(bank, encode_fields(bank, fields))
        assert np.max(np.abs(recon - fields)) < 1e-8

    def test_encode_decode_field_round_trip_blend(self):
        layout = make_layout(32, 8, 4)
        fields = self.fields(m=20)
        bank = fit_patch_bank(fields, layout, variance_target=1.0)
        recon = reconstruct_fields(bank, fields, window=hanning_window(8))
        assert np.max(np.abs(recon - fields)) < 1e-7

    def test_zero_latent_decodes_to_stitched_means(self):
        layout = make_layout(32, 8, 8)
        fields = self.fields(m=10)
        bank = fit_patch_bank(fields, layout, variance_target=0.9)
        out = decode_fields(bank, np.zeros((1, bank.total_latent_dim)))[0]
        for i, (r, c) in enumerate(layout.origins):
            assert np.allclose(out[r : r + 8, c : c + 8].ravel(), bank.bases[i].mean)

    def test_global_encode_matches_flat_encode(self):
        rng = np.random.default_rng(5)
        fields = rng.standard_normal((15, 16, 16))
        basis = fit_pca(fields.reshape(15, -1), variance_target=0.95)
        assert isinstance(basis, PcaBasis)
        lat = encode_fields(basis, fields)
        assert lat.shape == (15, basis.k)
        assert np.allclose(lat[3], encode_field(basis, fields[3]))
        assert np.allclose(lat[3], encode(basis, fields[3].ravel()))

    def test_latent_width_checked(self):
        layout = make_layout(32, 8, 8)
        bank = fit_patch_bank(self.fields(m=6), layout, variance_target=0.9)
        with pytest.raises(ParameterError):
            decode_fields(bank, np.zeros((1, bank.total_latent_dim + 1)))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coxmeta.errors import EmbeddingError
from coxmeta.grid import build_grid
from coxmeta.kernel import (base_vector, correlation_apply, drho_apply, make_kernel,
                            rho_quotient, spectrum, sqrt_apply, SpectralKernel)
from oracles import dense_correlation, dense_sqrt


@pytest.fixture(scope="module")
def torus8():
    """4^3 box whose embedding torus is 8^3, with a 512x512 dense oracle."""
    g = build_grid({"dims": [4, 4, 4], "voxel_size_mm": 1.0, "origin_mm": [0, 0, 0]})
    C = dense_correlation(g.ext_dims, 1.0, 0.5)
    R, w = dense_sqrt(C)
    return g, C, R, w


def identity_kernel(shape):
    base = np.zeros(shape)
    base[0, 0, 0] = 1.0
    phi, mn = spectrum(base)
    return SpectralKernel(rho=1.0, delta=2.0, shape=shape, phi=phi, psi=np.zeros_like(phi),
                          min_phi=mn)


def test_identity_base_gives_unit_spectrum():
    k = identity_kernel((4, 4, 4))
    assert np.array_equal(k.phi, np.ones_like(k.phi))
    g = np.random.default_rng(0).standard_normal(64)
    assert np.array_equal(sqrt_apply(k, g), g) or np.allclose(sqrt_apply(k, g), g, atol=1e-15)
    assert np.array_equal(sqrt_apply(k, np.zeros(64)), np.zeros(64))
    # degenerate base: zero derivative spectrum
    assert np.array_equal(drho_apply(k, g), np.zeros(64))


def test_spectrum_matches_dense_eigenvalues(torus8):
    g, C, _, w = torus8
    k = make_kernel(g, 0.5)
    ours = np.sort(k.eigenvalues())
    assert np.allclose(ours, np.sort(w), rtol=0, atol=1e-8 * w.max())
    assert k.phi.flat[0] == pytest.approx(base_vector(g, 0.5).sum(), rel=1e-12)


def test_full_eigenvalues_match_complex_fft(torus8):
    g = torus8[0]
    k = make_kernel(g, 0.6)
    full = np.fft.fftn(base_vector(g, 0.6)).real.ravel()
    assert np.allclose(k.eigenvalues(), full, atol=1e-12)


def test_sqrt_and_correlation_match_dense(torus8, rng):
    g, C, R, _ = torus8
    k = make_kernel(g, 0.5)
    gamma = rng.standard_normal(g.n_ext)
    assert np.max(np.abs(sqrt_apply(k, gamma) - R @ gamma)) <= 1e-8
    two = sqrt_apply(k, sqrt_apply(k, gamma))
    assert np.max(np.abs(two - C @ gamma)) <= 1e-8
    assert np.max(np.abs(correlation_apply(k, gamma) - C @ gamma)) <= 1e-8


def fd_check(grid, rho, gamma, h=1e-5):
    k = make_kernel(grid, rho)
    analytic = -0.5 * drho_apply(k, gamma)
    fd = (sqrt_apply(make_kernel(grid, rho + h), gamma)
          - sqrt_apply(make_kernel(grid, rho - h), gamma)) / (2 * h)
    return np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), 1.0))


def test_drho_matches_finite_difference_1d(rng):
    # 4 x 1 x 1 box with an 8 x 1 x 1 torus is a 1D circulant of size 8
    g = build_grid({"dims": [4, 1, 1], "voxel_size_mm": 1.0}, ext_dims=(8, 2, 2))
    g1 = build_grid({"dims": [4, 1, 1], "voxel_size_mm": 1.0}, ext_dims=(8, 2, 2))
    assert g1.ext_dims == (8, 2, 2)
    gamma = np.zeros(g.n_ext)
    gamma.reshape(g.ext_shape)[0, 0, :] = rng.standard_normal(8)
    assert fd_check(g, 1.0, gamma) <= 1e-5


def test_drho_matches_finite_difference_3d(torus8, rng):
    g = torus8[0]
    assert fd_check(g, 0.5, rng.standard_normal(g.n_ext)) <= 1e-5
    assert np.array_equal(drho_apply(make_kernel(g, 0.5), np.zeros(g.n_ext)), np.zeros(g.n_ext))


def test_rho_quotient_zero_where_phi_clamped():
    k = identity_kernel((2, 2, 2))
    k.phi[0, 0, 0] = 0.0
    k.psi[0, 0, 0] = 3.0
    assert rho_quotient(k)[0, 0, 0] == 0.0


def test_non_psd_embedding_raises():
    # long correlation range on a small torus
    g = build_grid({"dims": [6, 6, 6], "voxel_size_mm": 2.0})
    with pytest.raises(EmbeddingError, match="enlarge"):
        make_kernel(g, 1e-3)


def test_tiny_negative_eigenvalues_are_clamped():
    base = np.zeros((4, 4, 4))
    base[0, 0, 0] = 1.0
    base[1, 0, 0] = base[3, 0, 0] = 0.5 + 1e-9
    phi, mn = spectrum(base)
    assert mn < 0 and phi.min() == 0.0


def test_invalid_rho():
    g = build_grid({"dims": [2, 2, 2], "voxel_size_mm": 1.0})
    with pytest.raises(ValueError):
        base_vector(g, 0.0)


@pytest.fixture(scope="module")
def kern8():
    g = build_grid({"dims": [4, 4, 4], "voxel_size_mm": 1.0})
    return g, make_kernel(g, 0.7)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-5, 5))
def test_sqrt_is_linear_and_self_adjoint(kern8, seed, a):
    _, k = kern8
    x, y = np.random.default_rng(seed).standard_normal((2, 512)) * 10
    lhs = sqrt_apply(k, a * x + y)
    assert np.allclose(lhs, a * sqrt_apply(k, x) + sqrt_apply(k, y), atol=1e-9)
    assert np.dot(sqrt_apply(k, x), y) == pytest.approx(np.dot(x, sqrt_apply(k, y)), abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(rho=st.floats(0.05, 5.0), a=st.floats(0.5, 4.0))
def test_phi_valid_or_rejected(rho, a):
    g = build_grid({"dims": [3, 2, 4], "voxel_size_mm": a})
    base = base_vector(g, rho)
    full = np.fft.fftn(base)
    assert np.abs(full.imag).max() < 1e-8 * np.abs(full.real).max()
    try:
        k = make_kernel(g, rho)
    except EmbeddingError:
        assert full.real.min() < -1e-6 * full.real.max()
        return
    assert k.phi.min() >= 0
    assert k.phi.flat[0] == pytest.approx(base.sum(), rel=1e-12)


@pytest.mark.parametrize("rho", [0.5, 0.9, 3.0])
def test_separable_path_matches_generic_fft(rho):
    g = build_grid({"dims": [3, 4, 2], "voxel_size_mm": 1.5})
    k = make_kernel(g, rho)
    phi, _ = spectrum(base_vector(g, rho))
    assert np.allclose(k.phi, phi, rtol=0, atol=1e-12 * phi.max())
    generic = make_kernel(g, rho, delta=2.0000000001)
    assert np.allclose(k.psi, generic.psi, rtol=1e-6, atol=1e-9 * np.abs(generic.psi).max())


def test_non_gaussian_exponent_uses_generic_path(rng):
    g = build_grid({"dims": [4, 4, 4], "voxel_size_mm": 1.0})
    k = make_kernel(g, 0.8, delta=1.5)
    C = dense_correlation(g.ext_dims, 1.0, 0.8, delta=1.5)
    x = rng.standard_normal(g.n_ext)
    assert np.max(np.abs(correlation_apply(k, x) - C @ x)) <= 1e-8

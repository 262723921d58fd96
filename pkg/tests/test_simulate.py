import numpy as np
import pytest

from unrollct.operators import Geometry, build_projector
from unrollct.simulate import (MeasurementSimConfig, SplitStream, disc_phantom,
                               fbp, fbp_transpose, metrics_row, poisson_sample,
                               psnr, ramp_kernel, shepp_logan,
                               simulate_measurements, ssim)


# ---------------------------------------------------------------------------
# phantom


def test_phantom_center_regression():
    # pixel centers adjacent to the origin sit inside the two outer
    # ellipses only: 1.0 - 0.8 (frozen regression value)
    img = shepp_logan(64)
    for idx in ((31, 31), (31, 32), (32, 31), (32, 32)):
        assert img[idx] == pytest.approx(0.2, abs=1e-12)


def test_phantom_range():
    img = shepp_logan(128)
    assert img.min() >= 0.0
    assert img.max() <= 1.02


def test_phantom_mirror_symmetry():
    """Left-right flip symmetry away from the asymmetric structures (the
    unequal tilted pair in the middle band and the small bottom trio)."""
    img = shepp_logan(128)
    c = (2.0 * np.arange(128) + 1.0 - 128) / 128
    y = -c
    rows = (y > 0.45) | (y < -0.75)
    assert rows.sum() > 40
    assert np.array_equal(img[rows], img[rows][:, ::-1])


def test_phantom_size_guard():
    with pytest.raises(ValueError):
        shepp_logan(8)


# ---------------------------------------------------------------------------
# portable noise


def test_poisson_mean_at_i0():
    geo = Geometry(96, 95, detector_spacing=2.0 / 64)
    projector = build_projector(geo, (64, 64), pixel_size=2.0 / 64)
    cfg = MeasurementSimConfig(i0=1e4, noise="poisson", seed=42)
    counts, _ = simulate_measurements(np.zeros((64, 64)), projector, cfg)
    se = counts.std() / np.sqrt(counts.size)
    assert abs(counts.mean() - 1e4) <= 3 * se


def test_poisson_variance_matches_mean():
    lam = np.full(10000, 100.0)
    draws = poisson_sample(lam, SplitStream(7, lam.size))
    assert abs(draws.var() - draws.mean()) <= 0.05 * draws.mean()
    lam = np.full(10000, 8.0)
    draws = poisson_sample(lam, SplitStream(9, lam.size))
    assert abs(draws.var() - draws.mean()) <= 0.05 * draws.mean()


def test_simulation_bit_reproducible(proj16):
    cfg = MeasurementSimConfig(i0=5e4, noise="poisson", seed=31)
    x = shepp_logan(16)
    c1, b1 = simulate_measurements(x, proj16, cfg)
    c2, b2 = simulate_measurements(x, proj16, cfg)
    assert np.array_equal(c1, c2) and np.array_equal(b1, b2)
    c3, _ = simulate_measurements(x, proj16,
                                  MeasurementSimConfig(i0=5e4, seed=32))
    assert not np.array_equal(c1, c3)


def test_noiseless_mode_exact(proj16):
    x = shepp_logan(16)
    cfg = MeasurementSimConfig(i0=1e5, noise="none", seed=0)
    counts, b = simulate_measurements(x, proj16, cfg)
    assert np.array_equal(b, proj16.forward(x))


def test_zero_count_clamp():
    # enormous attenuation drives counts to zero; log data stays finite
    geo = Geometry(4, 3, detector_spacing=1.0)
    projector = build_projector(geo, (1, 1), pixel_size=1.0)
    cfg = MeasurementSimConfig(i0=10.0, noise="poisson", seed=0)
    counts, b = simulate_measurements(np.full((1, 1), 50.0), projector, cfg)
    assert np.isfinite(b).all()
    assert (counts >= 0).all()


# ---------------------------------------------------------------------------
# filtered backprojection


def test_fbp_zero(proj16):
    assert np.array_equal(fbp(np.zeros((16, 23)), proj16), np.zeros((16, 16)))


def test_fbp_linear(proj16, rng):
    b1 = rng.standard_normal((16, 23))
    b2 = rng.standard_normal((16, 23))
    lhs = fbp(1.3 * b1 - 0.7 * b2, proj16)
    rhs = 1.3 * fbp(b1, proj16) - 0.7 * fbp(b2, proj16)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-14)


def test_ramp_kernel_taps():
    h = ramp_kernel(4, 0.5)
    center = 3
    assert h[center] == pytest.approx(1.0 / (4 * 0.25), rel=1e-15)
    assert h[center + 1] == pytest.approx(-1.0 / (np.pi ** 2 * 0.25), rel=1e-15)
    assert h[center + 2] == 0.0
    assert np.array_equal(h, h[::-1])


def test_fbp_disc_recovery():
    size = 128
    px = 2.0 / size
    geo = Geometry(180, 371, detector_spacing=px / 2)
    projector = build_projector(geo, (size, size), pixel_size=px)
    disc = disc_phantom(size, radius=0.4, value=1.0)
    rec = fbp(projector.forward(disc), projector)
    rel = np.linalg.norm(rec - disc) / np.linalg.norm(disc)
    assert rel <= 0.10
    assert rec[size // 2, size // 2] == pytest.approx(1.0, abs=0.05)


def test_fbp_transpose_dot(proj16, rng):
    for _ in range(5):
        y = rng.standard_normal((16, 23))
        g = rng.standard_normal((16, 16))
        lhs = np.vdot(fbp(y, proj16), g)
        rhs = np.vdot(y, fbp_transpose(g, proj16))
        assert lhs == pytest.approx(rhs, rel=1e-12)


# ---------------------------------------------------------------------------
# metrics


def test_psnr_examples(rng):
    ref = shepp_logan(32)
    assert psnr(ref, ref) == np.inf
    assert psnr(ref + 0.1, ref, data_range=1.0) == pytest.approx(20.0,
                                                                 abs=1e-12)


def test_psnr_decreases_with_noise(rng):
    ref = shepp_logan(32)
    values = [psnr(ref + amp * rng.standard_normal(ref.shape), ref)
              for amp in (0.01, 0.05, 0.2)]
    assert values[0] > values[1] > values[2]


def test_ssim_examples():
    ref = shepp_logan(32)
    assert ssim(ref, ref) == pytest.approx(1.0, abs=1e-12)
    # anti-correlated patch with (near) zero mean in every window:
    # the covariance factor is negative and dominates
    i, j = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    patch = ((i + j) % 2 * 2.0 - 1.0)
    assert ssim(-patch, patch, data_range=2.0) < 0.0


def test_metrics_row(rng):
    ref = shepp_logan(32)
    row = metrics_row(ref, ref)
    assert row.ssim == pytest.approx(1.0, abs=1e-12)
    assert row.data_range == pytest.approx(1.0)

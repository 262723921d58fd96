"""Phantoms, portable measurement simulation, filtered backprojection and
image-quality metrics.

The noise path is fully pinned down so that simulated measurements are
bit-reproducible across platforms: a splitmix64 stream per detector ray,
Poisson sampling by inversion for small means and by a rounded
normal approximation for large means.
"""

from dataclasses import dataclass

import numpy as np

# 10-ellipse head phantom, contrast-reduced variant with values in [0, 1]:
# (intensity, half-axis a, half-axis b, x0, y0, rotation degrees)
_ELLIPSES = [
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
]


def shepp_logan(size):
    """Head phantom on a size x size grid, evaluated at pixel centers.

    Pixel-center coordinates are computed as exact integer ratios so the
    grid is bitwise symmetric under flips; mirror-pair ellipses then cancel
    exactly.
    """
    if size < 16:
        raise ValueError("size must be >= 16")
    c = (2.0 * np.arange(size) + 1.0 - size) / size
    x = c[None, :]
    y = (-c)[:, None]
    img = np.zeros((size, size))
    for val, a, b, x0, y0, phi_deg in _ELLIPSES:
        phi = np.deg2rad(phi_deg)
        xr = (x - x0) * np.cos(phi) + (y - y0) * np.sin(phi)
        yr = -(x - x0) * np.sin(phi) + (y - y0) * np.cos(phi)
        img += val * ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0)
    # cancellation of nested intensities can leave -1e-17 residue
    return np.maximum(img, 0.0)


def disc_phantom(size, radius=0.4, value=1.0):
    """Centered disc; radius in units of the [-1, 1] image frame."""
    c = (2.0 * np.arange(size) + 1.0 - size) / size
    x = c[None, :]
    y = (-c)[:, None]
    return value * (x ** 2 + y ** 2 <= radius ** 2).astype(np.float64)


# ---------------------------------------------------------------------------
# portable pseudo-randomness

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1 & _U64
    z = (z ^ (z >> np.uint64(27))) * _MIX2 & _U64
    return z ^ (z >> np.uint64(31))


class SplitStream:
    """Vector of independent splitmix64 streams (one per element).

    Stream r is seeded with mix64(seed + GOLDEN * (r + 1)); each draw
    advances the state by GOLDEN and finalizes with mix64.  Uniforms take
    the top 53 bits.
    """

    def __init__(self, seed, n):
        base = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        idx = (np.arange(n, dtype=np.uint64) + np.uint64(1)) * _GOLDEN & _U64
        self.state = _mix64(base + idx & _U64)

    def next_u64(self):
        self.state = (self.state + _GOLDEN) & _U64
        return _mix64(self.state)

    def next_uniform(self):
        return (self.next_u64() >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def next_normal(self):
        """Box-Muller from two uniform draws (cosine branch)."""
        u1 = self.next_uniform()
        u2 = self.next_uniform()
        u1 = np.maximum(u1, 2.0 ** -53)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


_POISSON_SWITCH = 50.0


def poisson_sample(mean, stream):
    """Poisson draws, one per element of ``mean``.

    mean < 50: inversion by cumulative search (one uniform per element);
    otherwise round(mean + sqrt(mean) * normal) clipped at zero (two
    uniforms).  Every element consumes its own stream, so the output does
    not depend on evaluation order.
    """
    mean = np.asarray(mean, dtype=np.float64)
    flat = mean.ravel()
    out = np.zeros(flat.size, dtype=np.float64)

    small = flat < _POISSON_SWITCH
    u = stream.next_uniform()
    norm = stream.next_normal()

    if small.any():
        lam = flat[small]
        target = u[small]
        k = np.zeros(lam.size)
        p = np.exp(-lam)
        cdf = p.copy()
        active = cdf < target
        step = 0
        while active.any() and step < 200:
            step += 1
            p = np.where(active, p * lam / step, p)
            cdf = np.where(active, cdf + p, cdf)
            k = np.where(active, step, k)
            active = cdf < target
        out[small] = k
    big = ~small
    if big.any():
        lam = flat[big]
        draw = np.rint(lam + np.sqrt(lam) * norm[big])
        out[big] = np.maximum(draw, 0.0)
    return out.reshape(mean.shape)


@dataclass
class MeasurementSimConfig:
    i0: float = 7e4
    noise: str = "poisson"       # "poisson" | "none"
    seed: int = 0

    def __post_init__(self):
        if not self.i0 > 0:
            raise ValueError("i0 must be positive")
        if self.noise not in ("poisson", "none"):
            raise ValueError("noise must be poisson or none")


def simulate_measurements(x_true, projector, config, trace=None):
    """Transmission counts and log-linearized data for a phantom.

    counts ~ Poisson(i0 * exp(-A x)); the log data is
    -log(max(counts, 1) / i0) (zero counts are clamped to one photon).
    With noise="none" the log data equals A x exactly.
    """
    line_integrals = projector.forward(x_true)
    if trace is not None:
        trace.add("forward", tag="simulate")
    if config.noise == "none":
        return line_integrals.copy(), line_integrals
    mean = config.i0 * np.exp(-line_integrals)
    stream = SplitStream(config.seed, mean.size)
    counts = poisson_sample(mean, stream)
    log_data = -np.log(np.maximum(counts, 1.0) / config.i0)
    return counts, log_data


# ---------------------------------------------------------------------------
# filtered backprojection


def ramp_kernel(n_detectors, spacing):
    """Spatial-domain ramp filter taps over all 2*n-1 lags.

    h(0) = 1/(4 s^2), h(k) = -1/(pi^2 k^2 s^2) for odd k, 0 for even k != 0.
    """
    k = np.arange(-(n_detectors - 1), n_detectors)
    h = np.zeros(k.size)
    h[k == 0] = 1.0 / (4.0 * spacing ** 2)
    odd = (k % 2) != 0
    h[odd] = -1.0 / (np.pi ** 2 * k[odd].astype(np.float64) ** 2 * spacing ** 2)
    return h


def _filter_rows(sino, kernel, spacing):
    # kernel covers all lags -(n-1)..(n-1); take the aligned n samples
    n = sino.shape[1]
    out = np.empty_like(sino)
    for a in range(sino.shape[0]):
        out[a] = np.convolve(sino[a], kernel, mode="full")[n - 1:2 * n - 1]
    return out * spacing


def fbp(sinogram, projector, trace=None):
    """Ramp-filtered backprojection via the exact adjoint.

    The angle sum over the full circle covers every line twice, so the
    quadrature weight per view is pi/n_angles; the adjoint spreads each
    filtered sample over a pixel column of area pixel_size^2 per
    detector_spacing, which the scale divides back out.
    """
    geo = projector.geometry
    kernel = ramp_kernel(geo.n_detectors, geo.detector_spacing)
    filtered = _filter_rows(np.asarray(sinogram, dtype=np.float64), kernel,
                            geo.detector_spacing)
    back = projector.adjoint(filtered)
    if trace is not None:
        trace.add("adjoint", tag="fbp")
    scale = (np.pi / geo.n_angles) * geo.detector_spacing / projector.pixel_size ** 2
    return back * scale


def fbp_transpose(g_image, projector, trace=None):
    """Transpose of :func:`fbp` as a linear map on sinograms.

    The ramp convolution matrix is symmetric (even kernel), so the
    transpose is forward projection followed by the same row filter.
    """
    geo = projector.geometry
    proj = projector.forward(np.asarray(g_image, dtype=np.float64))
    if trace is not None:
        trace.add("forward", tag="fbp")
    kernel = ramp_kernel(geo.n_detectors, geo.detector_spacing)
    filtered = _filter_rows(proj, kernel, geo.detector_spacing)
    scale = (np.pi / geo.n_angles) * geo.detector_spacing / projector.pixel_size ** 2
    return filtered * scale


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    psnr: float
    ssim: float
    data_range: float


def psnr(x, ref, data_range=None):
    """Peak signal-to-noise ratio in dB; range defaults to ref max - min."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError("shape mismatch")
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return np.inf
    return 10.0 * np.log10(data_range ** 2 / mse)


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_means(img, window):
    from scipy.signal import fftconvolve
    return fftconvolve(img, window[::-1, ::-1], mode="valid")


def ssim(x, ref, data_range=None):
    """Mean structural similarity over fully-overlapping 11x11 windows
    (Gaussian weights, sigma 1.5)."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError("shape mismatch")
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    w = _gaussian_window()
    mu_x = _window_means(x, w)
    mu_y = _window_means(ref, w)
    xx = _window_means(x * x, w) - mu_x ** 2
    yy = _window_means(ref * ref, w) - mu_y ** 2
    xy = _window_means(x * ref, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def metrics_row(x, ref, data_range=None):
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    return MetricsRow(psnr=psnr(x, ref, data_range),
                      ssim=ssim(x, ref, data_range),
                      data_range=data_range)

"""Minimal convolutional subnet with hand-written forward and reverse passes.

Each subnet is a short stack of zero-padded 2D convolutions with a leaky
rectifier (slope 0.1) between layers, a linear final layer, and an optional
skip connection that adds the first input channel to the output.  The
reverse pass computes exact derivatives of the forward pass; at a
pre-activation of exactly zero the rectifier subgradient 0.1 is used.
"""

from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.1


@dataclass
class ConvLayer:
    kernels: np.ndarray   # (out_ch, in_ch, k, k), k odd
    biases: np.ndarray    # (out_ch,)


@dataclass
class ConvSubnetParams:
    layers: list
    skip: bool = True

    def n_inputs(self):
        return self.layers[0].kernels.shape[1]


@dataclass
class Tape:
    """Intermediate activations recorded by :func:`subnet_forward`."""
    inputs: list = field(default_factory=list)   # per-layer input (C, H, W)
    pre: list = field(default_factory=list)      # per-layer pre-activation


def init_subnet(n_inputs, n_layers=2, hidden_channels=8, kernel_size=3,
                skip=True, seed=0, scale=1.0):
    """Seeded subnet; weights and biases uniform in +-scale/sqrt(fan_in).

    Nonzero biases keep pre-activations off the rectifier kink for inputs
    with structurally zero regions.
    """
    if kernel_size % 2 == 0:
        raise ValueError("kernel size must be odd")
    rng = np.random.default_rng(seed)
    layers = []
    c_in = n_inputs
    for li in range(n_layers):
        c_out = 1 if li == n_layers - 1 else hidden_channels
        fan_in = c_in * kernel_size * kernel_size
        bound = scale / np.sqrt(fan_in)
        k = rng.uniform(-bound, bound, size=(c_out, c_in, kernel_size, kernel_size))
        b = rng.uniform(-bound, bound, size=c_out)
        layers.append(ConvLayer(k, b))
        c_in = c_out
    return ConvSubnetParams(layers, skip=skip)


def zeros_like_subnet(params):
    return ConvSubnetParams(
        [ConvLayer(np.zeros_like(l.kernels), np.zeros_like(l.biases))
         for l in params.layers],
        skip=params.skip)


def _conv2d(x, kernels, biases):
    """Zero-padded 'same' cross-correlation: (Cin,H,W) -> (Cout,H,W)."""
    c_out, c_in, kh, kw = kernels.shape
    _, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.broadcast_to(biases[:, None, None], (c_out, h, w)).copy()
    for dy in range(kh):
        for dx in range(kw):
            out += np.tensordot(kernels[:, :, dy, dx],
                                xp[:, dy:dy + h, dx:dx + w], axes=([1], [0]))
    return out


def _conv2d_backward(x, kernels, g_out):
    """Cotangents of _conv2d w.r.t. input, kernels and biases."""
    c_out, c_in, kh, kw = kernels.shape
    _, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    g_xp = np.zeros_like(xp)
    g_k = np.zeros_like(kernels)
    for dy in range(kh):
        for dx in range(kw):
            g_xp[:, dy:dy + h, dx:dx + w] += np.tensordot(
                kernels[:, :, dy, dx].T, g_out, axes=([1], [0]))
            g_k[:, :, dy, dx] = np.tensordot(
                g_out, xp[:, dy:dy + h, dx:dx + w], axes=([1, 2], [1, 2]))
    g_b = g_out.sum(axis=(1, 2))
    g_x = g_xp[:, ph:ph + h, pw:pw + w]
    return g_x, g_k, g_b


def subnet_forward(params, channels):
    """Run the subnet on stacked input channels.

    channels: (C, H, W) with C matching the first layer.  Returns
    (output (H, W), tape).
    """
    x = np.asarray(channels, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != params.n_inputs():
        raise ValueError("expected %d input channels, got shape %s"
                         % (params.n_inputs(), x.shape))
    tape = Tape()
    a = x
    last = len(params.layers) - 1
    for li, layer in enumerate(params.layers):
        tape.inputs.append(a)
        pre = _conv2d(a, layer.kernels, layer.biases)
        tape.pre.append(pre)
        a = pre if li == last else np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    out = a[0]
    if params.skip:
        out = out + x[0]
    return out, tape


def subnet_backward(params, tape, g_out):
    """Exact reverse pass; returns (input cotangents, parameter cotangents)."""
    if len(tape.inputs) != len(params.layers):
        raise ValueError("tape does not match subnet depth")
    g_out = np.asarray(g_out, dtype=np.float64)
    grads = zeros_like_subnet(params)
    g = g_out[None]
    last = len(params.layers) - 1
    for li in range(last, -1, -1):
        if li != last:
            slope = np.where(tape.pre[li] > 0, 1.0, LEAKY_SLOPE)
            g = g * slope
        g, g_k, g_b = _conv2d_backward(tape.inputs[li], params.layers[li].kernels, g)
        grads.layers[li].kernels += g_k
        grads.layers[li].biases += g_b
    if params.skip:
        g = g.copy()
        g[0] += g_out
    return g, grads


def subnet_param_arrays(params):
    """Flat list of the subnet's parameter arrays (stable order)."""
    out = []
    for layer in params.layers:
        out.append(layer.kernels)
        out.append(layer.biases)
    return out

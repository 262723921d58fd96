"""Supervised training of unrolled networks and self-supervised
instance adaptation with a rotation-equivariance regularizer.

Training runs plain Adam with batch size one over (measurement, reference)
pairs.  Adaptation fine-tunes a trained network on a single measurement by
minimizing data fidelity plus the mean, over the four quarter-turn group
elements, of the equivariance defect of the reconstruction.
"""

from dataclasses import dataclass, field

import numpy as np

from .operators import CallTrace
from .simulate import fbp, fbp_transpose
from .unrolling import (Problem, arrays_to_params, params_to_arrays,
                        unroll_backward, unroll_forward)


@dataclass
class DatasetItem:
    b: np.ndarray          # log-linearized measurement
    x_ref: np.ndarray      # reference image
    x0: np.ndarray         # starting point (filtered backprojection)


@dataclass
class Dataset:
    projector: object
    items: list

    def __post_init__(self):
        if not self.items:
            raise ValueError("dataset needs at least one item")


def make_dataset(projector, phantoms, sim_config_factory):
    """Simulate one measurement per phantom and precompute starting points."""
    from .simulate import simulate_measurements
    items = []
    for idx, x_true in enumerate(phantoms):
        cfg = sim_config_factory(idx)
        _, b = simulate_measurements(x_true, projector, cfg)
        items.append(DatasetItem(b=b, x_ref=x_true, x0=fbp(b, projector)))
    return Dataset(projector, items)


# ---------------------------------------------------------------------------
# supervised objective


def supervised_loss(params, item, config, projector, trace=None):
    """Squared reconstruction error of one item and its exact gradients."""
    problem = Problem(projector, item.b)
    traj = unroll_forward(problem, config, params, item.x0, trace=trace)
    resid = traj.x_final - item.x_ref
    loss = float(np.vdot(resid, resid))
    grads, _, _ = unroll_backward(traj, config, params, 2.0 * resid, trace=trace)
    return loss, grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        arrays = params_to_arrays(params)
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
                   m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays])


def adam_step(state, params, grads):
    """One bias-corrected Adam update; returns the updated parameters."""
    p_arrays = params_to_arrays(params)
    g_arrays = params_to_arrays(grads)
    if len(p_arrays) != len(state.m):
        raise ValueError("state does not match parameter structure")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    out = []
    for idx, (p, g) in enumerate(zip(p_arrays, g_arrays)):
        if p.shape != g.shape:
            raise ValueError("gradient %d shape %s != parameter %s"
                             % (idx, g.shape, p.shape))
        state.m[idx] = b1 * state.m[idx] + (1 - b1) * g
        state.v[idx] = b2 * state.v[idx] + (1 - b2) * g * g
        m_hat = state.m[idx] / bc1
        v_hat = state.v[idx] / bc2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return arrays_to_params(params, out)


def train(dataset, config, params, epochs, lr=1e-3, seed=0, trace=None,
          callback=None):
    """Per-item Adam (batch size one) over the dataset.

    Items are visited in a seeded shuffled order per epoch.  Returns the
    trained parameters and the loss curve as a list of
    (epoch, item_index, loss) triples.
    """
    rng = np.random.default_rng(seed)
    state = AdamState.for_params(params, lr=lr)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset.items))
        for pos in order:
            item = dataset.items[int(pos)]
            loss, grads = supervised_loss(params, item, config,
                                          dataset.projector, trace=trace)
            params = adam_step(state, params, grads)
            curve.append((epoch, int(pos), loss))
        if callback is not None:
            callback(epoch, params, curve)
    return params, curve


# ---------------------------------------------------------------------------
# quarter-turn group action


def rotate90(image, r):
    """Rotate the image grid counterclockwise by r quarter turns."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] != image.shape[1]:
        raise ValueError("rotation requires a square image")
    return np.rot90(image, r % 4).copy()


def shift_angles(sinogram, shift):
    """Circular shift of the view axis; the sinogram-space group action.

    Rotating the image by r quarter turns equals shifting the views by
    r * n_angles / 4, which requires 4 | n_angles.
    """
    sinogram = np.asarray(sinogram, dtype=np.float64)
    return np.roll(sinogram, int(shift), axis=0)


# ---------------------------------------------------------------------------
# instance adaptation


@dataclass
class AdaptConfig:
    lam: float = 1.0
    steps: int = 30
    lr: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


def adaptation_objective(params, b_in, config, projector, lam,
                         trace=None):
    """Self-supervision objective for one measurement and its gradients.

    value = ||b_in - A F(b_in)||^2
            + lam * mean_r ||T_r F(b_in) - F(T_r(A F(b_in)))||^2

    where T_r acts as a quarter-turn rotation on images and as the matching
    circular view shift on sinograms (the two actions commute with A
    exactly).  Inner reconstructions start from the filtered backprojection
    of their own input sinogram.
    """
    n_angles = projector.geometry.n_angles
    if n_angles % 4:
        raise ValueError("equivariance objective needs 4 | n_angles")
    if trace is None:
        trace = CallTrace()
    problem = Problem(projector, b_in)
    x0 = fbp(b_in, projector, trace=trace)
    traj = unroll_forward(problem, config, params, x0, trace=trace)
    x_out = traj.x_final

    s = projector.forward(x_out)
    trace.add("forward", tag="fidelity")
    resid = s - b_in
    value = float(np.vdot(resid, resid))
    g_s = 2.0 * resid                      # d value / d s
    g_x_out = np.zeros_like(x_out)
    grad_total = None

    shifts = [r * (n_angles // 4) for r in range(4)]
    inner = []
    if lam > 0:
        for r, shift in enumerate(shifts):
            b_r = shift_angles(s, shift)
            x0_r = fbp(b_r, projector, trace=trace)
            traj_r = unroll_forward(Problem(projector, b_r), config, params,
                                    x0_r, trace=trace)
            rot_x = rotate90(x_out, r)
            diff = rot_x - traj_r.x_final
            value += lam * 0.25 * float(np.vdot(diff, diff))
            inner.append((r, shift, traj_r, diff))

    # reverse pass: inner reconstructions first
    for r, shift, traj_r, diff in inner:
        scale = lam * 0.25 * 2.0
        g_x_out += rotate90(scale * diff, -r)
        g_inner = -scale * diff
        grads_r, g_x0_r, g_b_r = unroll_backward(traj_r, config, params,
                                                 g_inner, trace=trace)
        g_b_total = g_b_r + fbp_transpose(g_x0_r, projector, trace=trace)
        g_s += shift_angles(g_b_total, -shift)
        grad_total = grads_r if grad_total is None else _add_grads(grad_total, grads_r)

    g_x_out += projector.adjoint(g_s)
    trace.add("adjoint", tag="fidelity")
    grads_outer, _, _ = unroll_backward(traj, config, params, g_x_out,
                                        trace=trace)
    grad_total = (grads_outer if grad_total is None
                  else _add_grads(grad_total, grads_outer))
    return value, grad_total, x_out, trace


def _add_grads(a, b):
    arrays = [x + y for x, y in zip(params_to_arrays(a), params_to_arrays(b))]
    return arrays_to_params(a, arrays)


def adapt_instance(params, b_in, config, adapt_config, projector):
    """Fine-tune trained parameters on one out-of-distribution measurement.

    Runs ``adapt_config.steps`` Adam steps on the adaptation objective
    starting from ``params``; returns (adapted params, reconstruction,
    objective curve, call trace).
    """
    state = AdamState.for_params(params, lr=adapt_config.lr)
    trace = CallTrace()
    curve = []
    for _ in range(adapt_config.steps):
        value, grads, _, _ = adaptation_objective(
            params, b_in, config, projector, adapt_config.lam, trace=trace)
        curve.append(value)
        params = adam_step(state, params, grads)
    problem = Problem(projector, b_in)
    x0 = fbp(b_in, projector, trace=trace)
    x_a = unroll_forward(problem, config, params, x0, trace=trace).x_final
    final_value, _, _, _ = adaptation_objective(
        params, b_in, config, projector, adapt_config.lam, trace=CallTrace())
    curve.append(final_value)
    return params, x_a, curve, trace

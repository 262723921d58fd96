"""Unrolled primal-dual iteration engine.

One parametric engine covers the whole family: classic primal-dual hybrid
gradient (PDHG), the learned primal-dual network, its angle-subset variant,
the SGD-style variant with a residual dual step, coarse-grid (sketched)
versions of each, and the light-weight variant whose dual step is the
closed-form prox of a weighted least-squares fit.  Layer slots (dual update,
primal update) are selected by a variant tag; the engine records everything
needed to run an exact reverse-mode pass over the whole unrolled
computation.

Variant tags:
    pdhg                      prox dual + prox primal + over-relaxation
    lpd                       conv dual + conv primal, full batch
    subset-lpd                conv dual + conv primal, angle subsets
    subset-sgd                residual dual + 1-channel conv primal
    sketch-lpd                lpd with coarse-grid early layers
    sketch-subset-lpd         subset-lpd with coarse-grid early layers
    sketch-subset-lpd-coarse  like sketch-subset-lpd, but the primal subnet
                              runs on the coarse grid and its output is
                              upsampled
    sketch-subset-wls         weighted-least-squares prox dual + shared
                              primal slot, sketchable
    sketch-subset-sgd         residual dual + shared primal slot, sketchable
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .operators import (CallTrace, SubsetScheme, downsample2,
                        downsample2_transpose, grid_cost_fraction,
                        default_k_switch, upsample2, upsample2_transpose)
from .proximal import All, ManifoldPrior, apply_prior


_VARIANTS = {
    "pdhg":                     dict(dual="wls", primal="prox", subsets=False, sketch=False),
    "lpd":                      dict(dual="conv", primal="conv2", subsets=False, sketch=False),
    "subset-lpd":               dict(dual="conv", primal="conv2", subsets=True, sketch=False),
    "subset-sgd":               dict(dual="residual", primal="conv1", subsets=True, sketch=False),
    "sketch-lpd":               dict(dual="conv", primal="conv2", subsets=False, sketch=True),
    "sketch-subset-lpd":        dict(dual="conv", primal="conv2", subsets=True, sketch=True),
    "sketch-subset-lpd-coarse": dict(dual="conv", primal="coarse_conv2", subsets=True, sketch=True),
    "sketch-subset-wls":        dict(dual="wls", primal="conv1", subsets=True, sketch=True, shared_primal=True),
    "sketch-subset-sgd":        dict(dual="residual", primal="conv1", subsets=True, sketch=True, shared_primal=True),
}

PRIMAL_CHANNELS = {"conv2": 2, "coarse_conv2": 2, "conv1": 1}
DUAL_CHANNELS = 3


class ConfigError(ValueError):
    """Variant/scheme/parameter combination is not valid."""


@dataclass
class Problem:
    """Linear inverse problem: operator, data, optional ground truth."""
    op: object
    b: np.ndarray
    x_true: np.ndarray = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.b.shape != self.op.data_shape:
            raise ValueError("data shape %s != operator %s"
                             % (self.b.shape, self.op.data_shape))


@dataclass
class UnrollConfig:
    n_layers: int
    variant: str = "lpd"
    m: int = 1
    subset_order: str = "cyclic"        # "cyclic" | "random"
    subset_seed: int = 0
    sketch_factor: int = 1
    k_switch: int = None                # layers < k_switch run on the coarse grid
    sketch: object = None               # optional SketchScheme descriptor
    per_subset_dual: bool = False       # one dual state per subset
    primal_slot: str = "conv"           # "conv" | "prior"
    prior: ManifoldPrior = None
    prox_r: object = None               # pdhg primal prox: callable (v, tau) -> v'

    def __post_init__(self):
        if self.sketch is not None:
            self.sketch_factor = self.sketch.factor
            self.k_switch = self.sketch.k_switch
        if self.variant not in _VARIANTS:
            raise ConfigError("unknown variant %r" % self.variant)
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        spec = _VARIANTS[self.variant]
        if not spec["subsets"] and self.m != 1:
            raise ConfigError("%s requires m = 1" % self.variant)
        if not spec["sketch"] and self.sketch_factor != 1:
            raise ConfigError("%s does not sketch" % self.variant)
        if self.sketch_factor > 1 and self.k_switch is None:
            self.k_switch = default_k_switch(self.n_layers)
        if self.k_switch is None:
            self.k_switch = 0
        if not 0 <= self.k_switch <= self.n_layers:
            raise ConfigError("k_switch must lie in [0, n_layers]")
        if self.subset_order not in ("cyclic", "random"):
            raise ConfigError("subset_order must be cyclic or random")
        if self.primal_slot not in ("conv", "prior"):
            raise ConfigError("primal_slot must be conv or prior")
        if self.primal_slot == "prior" and spec["primal"] == "conv2":
            raise ConfigError("prior slot only fits step-form primal updates")

    def dual_kind(self):
        return _VARIANTS[self.variant]["dual"]

    def primal_kind(self):
        if self.variant == "pdhg":
            return "prox"
        if self.primal_slot == "prior":
            return "prior"
        return _VARIANTS[self.variant]["primal"]

    def shared_primal(self):
        return _VARIANTS[self.variant].get("shared_primal", False)

    def sketched_layer(self, k):
        return self.sketch_factor > 1 and k < self.k_switch


@dataclass
class UnrollParams:
    """Learnable quantities of one unrolled network.

    ``primal_nets`` / ``dual_nets`` are either a list with one subnet per
    layer or a single shared subnet.  ``dual_weights`` holds one row of
    nonnegative weights per subset for prox-dual variants.
    """
    taus: np.ndarray
    sigmas: np.ndarray
    beta: float = 0.0
    primal_nets: object = None
    dual_nets: object = None
    dual_weights: np.ndarray = None

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if (self.taus <= 0).any() or (self.sigmas <= 0).any():
            raise ValueError("step sizes must be positive")
        if self.dual_weights is not None:
            self.dual_weights = np.atleast_2d(
                np.asarray(self.dual_weights, dtype=np.float64))

    def primal_net(self, k):
        if isinstance(self.primal_nets, list):
            return self.primal_nets[k]
        return self.primal_nets

    def dual_net(self, k):
        if isinstance(self.dual_nets, list):
            return self.dual_nets[k]
        return self.dual_nets


@dataclass
class LayerRecord:
    k: int
    i: int
    sketched: bool
    primal_kind: str
    op: object            # operator applied this layer (subset, maybe coarse)
    row_fraction: float
    grid_fraction: float
    x_in: np.ndarray = None
    y_in: np.ndarray = None
    xbar: np.ndarray = None       # pdhg only
    z: np.ndarray = None
    y_out: np.ndarray = None
    a: np.ndarray = None          # term multiplied by tau in the primal step
    u: np.ndarray = None          # step-form primal input
    xc: np.ndarray = None         # coarse x (option-2 layers)
    tape_d: object = None
    tape_p: object = None
    h: np.ndarray = None
    j: np.ndarray = None
    b_i: np.ndarray = None
    rows: object = None           # flat rows of this subset in the full data


@dataclass
class Trajectory:
    """Per-layer states plus the bookkeeping needed for the reverse pass."""
    xs: list
    ys: list                      # dual state after each layer
    subset_indices: list
    sketched_flags: list
    trace: CallTrace
    data_shape: tuple = None
    records: list = field(repr=False, default_factory=list)

    @property
    def x_final(self):
        return self.xs[-1]

    def error_norms(self, x_true):
        return [float(np.linalg.norm(x - x_true)) for x in self.xs]


def expected_operator_calls(config):
    """Closed-form full-operator-equivalent calls of one unrolled run."""
    k_sk = config.k_switch if config.sketch_factor > 1 else 0
    per_row = 1.0 / config.m
    coarse = grid_cost_fraction(config.sketch_factor)
    return 2.0 * (k_sk * per_row * coarse + (config.n_layers - k_sk) * per_row)


# ---------------------------------------------------------------------------
# parameter initialization and flattening


def init_unroll_params(config, problem, seed=0, step_scale=None,
                       conv_layers=2, hidden_channels=8, kernel_size=3,
                       beta=1.0):
    """Seeded parameters sized for ``config`` on ``problem``.

    Step sizes default to 1/||A|| so the first unrolled layers are stable.
    """
    K = config.n_layers
    if step_scale is None:
        norm = problem.op.norm_estimate()
        step_scale = 1.0 / norm if norm > 0 else 1.0
    taus = np.full(K, step_scale)
    sigmas = np.full(K, step_scale)
    rng = np.random.default_rng(seed)

    def make_net(n_in):
        return nnet.init_subnet(n_in, n_layers=conv_layers,
                                hidden_channels=hidden_channels,
                                kernel_size=kernel_size,
                                seed=int(rng.integers(1 << 31)))

    primal_nets = dual_nets = None
    dual_weights = None
    kind = config.primal_kind()
    if kind in PRIMAL_CHANNELS:
        n_in = PRIMAL_CHANNELS[kind]
        if config.shared_primal():
            primal_nets = make_net(n_in)
        else:
            primal_nets = [make_net(n_in) for _ in range(K)]
    if config.dual_kind() == "conv":
        dual_nets = [make_net(DUAL_CHANNELS) for _ in range(K)]
    if config.dual_kind() == "wls":
        q = int(np.prod(problem.op.data_shape)) // config.m
        dual_weights = np.ones((config.m, q))
    return UnrollParams(taus, sigmas, beta=beta, primal_nets=primal_nets,
                        dual_nets=dual_nets, dual_weights=dual_weights)


def _zeros_like_params(params):
    out = UnrollParams.__new__(UnrollParams)
    out.taus = np.zeros_like(params.taus)
    out.sigmas = np.zeros_like(params.sigmas)
    out.beta = 0.0
    out.dual_weights = (None if params.dual_weights is None
                        else np.zeros_like(params.dual_weights))

    def z_nets(nets):
        if nets is None:
            return None
        if isinstance(nets, list):
            return [nnet.zeros_like_subnet(n) for n in nets]
        return nnet.zeros_like_subnet(nets)

    out.primal_nets = z_nets(params.primal_nets)
    out.dual_nets = z_nets(params.dual_nets)
    return out


def params_to_arrays(params):
    """Canonically ordered flat list of parameter arrays (views/scalars copied)."""
    arrays = [np.array(params.taus), np.array(params.sigmas),
              np.array([params.beta])]
    if params.dual_weights is not None:
        arrays.append(np.array(params.dual_weights))

    def push_nets(nets):
        if nets is None:
            return
        for net in nets if isinstance(nets, list) else [nets]:
            for layer in net.layers:
                arrays.append(np.array(layer.kernels))
                arrays.append(np.array(layer.biases))

    push_nets(params.primal_nets)
    push_nets(params.dual_nets)
    return arrays


def arrays_to_params(template, arrays):
    """Rebuild an UnrollParams structured like ``template`` from flat arrays."""
    arrays = list(arrays)
    out = UnrollParams.__new__(UnrollParams)
    out.taus = np.array(arrays.pop(0))
    out.sigmas = np.array(arrays.pop(0))
    out.beta = float(arrays.pop(0)[0])
    out.dual_weights = (np.array(arrays.pop(0))
                        if template.dual_weights is not None else None)

    def pull_nets(nets):
        if nets is None:
            return None
        single = not isinstance(nets, list)
        rebuilt = []
        for net in [nets] if single else nets:
            layers = []
            for layer in net.layers:
                k = np.array(arrays.pop(0)).reshape(layer.kernels.shape)
                b = np.array(arrays.pop(0)).reshape(layer.biases.shape)
                layers.append(nnet.ConvLayer(k, b))
            rebuilt.append(nnet.ConvSubnetParams(layers, skip=net.skip))
        return rebuilt[0] if single else rebuilt

    out.primal_nets = pull_nets(template.primal_nets)
    out.dual_nets = pull_nets(template.dual_nets)
    if arrays:
        raise ValueError("%d left-over arrays" % len(arrays))
    return out


# ---------------------------------------------------------------------------
# forward pass


class _Sampler:
    """Grid-transfer pair for one layer (identity when not sketched)."""

    def __init__(self, active):
        self.active = active

    def down(self, x):
        return downsample2(x) if self.active else x

    def down_t(self, g):
        return downsample2_transpose(g) if self.active else g

    def up(self, x):
        return upsample2(x) if self.active else x

    def up_t(self, g):
        return upsample2_transpose(g) if self.active else g


def _hj(w, sigma):
    h = w / (sigma + w)
    return h, sigma * h


def _subset_rows(op, scheme, i):
    if scheme.m == 1:
        return None
    if hasattr(op, "geometry"):
        return scheme.row_indices(i, op.geometry.n_detectors)
    return scheme.row_indices(i, op.group_size)


def _validate_run(problem, config, params):
    spec = _VARIANTS[config.variant]
    n_groups = (problem.op.geometry.n_angles if hasattr(problem.op, "geometry")
                else problem.op.n_groups)
    if n_groups % config.m:
        raise ConfigError("m=%d must divide %d row groups" % (config.m, n_groups))
    if config.sketch_factor > 1 and not hasattr(problem.op, "geometry"):
        raise ConfigError("sketching requires a grid-based operator")
    if len(params.taus) < config.n_layers or len(params.sigmas) < config.n_layers:
        raise ConfigError("need one tau/sigma per layer")
    if config.dual_kind() == "conv" and params.dual_nets is None:
        raise ConfigError("variant %s needs dual subnets" % config.variant)
    if config.primal_kind() in PRIMAL_CHANNELS and params.primal_nets is None:
        raise ConfigError("variant %s needs primal subnets" % config.variant)
    if config.primal_kind() == "prior" and config.prior is None:
        raise ConfigError("prior slot requires config.prior")
    if spec.get("shared_primal") and isinstance(params.primal_nets, list):
        raise ConfigError("variant %s shares one primal subnet" % config.variant)


def subset_sequence(config, rng=None):
    """Layer-to-subset assignment: cyclic by default, else uniform draws."""
    if config.subset_order == "cyclic" or config.m == 1:
        return [k % config.m for k in range(config.n_layers)]
    if rng is None:
        rng = np.random.default_rng(config.subset_seed)
    return [int(i) for i in rng.integers(0, config.m, size=config.n_layers)]


def _build_operator_table(problem, config):
    """Per-(subset, sketched) operators plus subset row indexing."""
    from .operators import build_sketched_projector
    scheme = SubsetScheme(config.m, problem.op.geometry.n_angles
                          if hasattr(problem.op, "geometry")
                          else problem.op.n_groups)
    full = problem.op
    coarse = None
    if config.sketch_factor > 1:
        coarse = build_sketched_projector(
            full.geometry, full.image_shape, full.pixel_size,
            factor=config.sketch_factor)
    table = {}
    rows = {}
    for i in range(config.m):
        rows[i] = _subset_rows(full, scheme, i)
        table[(i, False)] = full.restricted(scheme, i)
        if coarse is not None:
            table[(i, True)] = coarse.restricted(scheme, i)
    return scheme, table, rows


def _take_rows(b, rows, sub_shape):
    if rows is None:
        return b
    return b.ravel()[rows].reshape(sub_shape)


def unroll_forward(problem, config, params, x0, y0=None, trace=None, rng=None):
    """Run the configured unrolled network from x0; records a trajectory.

    The dual state starts at zero in the subset data space (full data space
    for full-batch variants) unless ``y0`` is given.
    """
    _validate_run(problem, config, params)
    if trace is None:
        trace = CallTrace()
    scheme, table, rows_by_subset = _build_operator_table(problem, config)
    K = config.n_layers
    i_seq = subset_sequence(config, rng)
    dual_kind = config.dual_kind()
    x = np.asarray(x0, dtype=np.float64)
    if x.shape != problem.op.image_shape:
        raise ConfigError("x0 shape %s != %s" % (x.shape, problem.op.image_shape))

    sub_data_shape = table[(0, False)].data_shape
    if y0 is None:
        y_init = np.zeros(sub_data_shape)
    else:
        y_init = np.asarray(y0, dtype=np.float64)
    if config.per_subset_dual:
        y_state = [y_init.copy() for _ in range(config.m)]
    else:
        y_state = y_init

    xs, ys, records = [x], [], []
    sketched_flags = []
    x_prev = None
    for k in range(K):
        i = i_seq[k]
        sketched = config.sketched_layer(k)
        sampler = _Sampler(sketched)
        op = table[(i, sketched)]
        row_frac = 1.0 / config.m
        grid_frac = grid_cost_fraction(config.sketch_factor if sketched else 1)
        rec = LayerRecord(k=k, i=i, sketched=sketched,
                          primal_kind=config.primal_kind(), op=op,
                          row_fraction=row_frac, grid_fraction=grid_frac)
        rec.rows = rows_by_subset[i]
        rec.x_in = x
        rec.b_i = _take_rows(problem.b, rec.rows, op.data_shape)
        tau, sigma = float(params.taus[k]), float(params.sigmas[k])

        # dual half step
        y_in = y_state[i] if config.per_subset_dual else y_state
        rec.y_in = y_in
        if config.variant == "pdhg" and x_prev is not None:
            xbar = x + params.beta * (x - x_prev)
        else:
            xbar = x
        rec.xbar = xbar
        z = op.forward(sampler.down(xbar))
        trace.add("forward", row_frac, grid_frac)
        rec.z = z
        if dual_kind == "conv":
            channels = np.stack([y_in, sigma * z, rec.b_i])
            y_out, rec.tape_d = nnet.subnet_forward(params.dual_net(k), channels)
        elif dual_kind == "residual":
            y_out = z - rec.b_i
        else:  # wls
            w = params.dual_weights[i].reshape(y_in.shape)
            h, j = _hj(w, sigma)
            rec.h, rec.j = h, j
            y_out = h * y_in + sigma * h * z - j * rec.b_i
        rec.y_out = y_out
        if config.per_subset_dual:
            y_state = list(y_state)
            y_state[i] = y_out
        else:
            y_state = y_out
        ys.append(y_out)

        # primal half step
        a_raw = op.adjoint(y_out)
        trace.add("adjoint", row_frac, grid_frac)
        kind = config.primal_kind()
        if kind == "coarse_conv2" and sketched:
            rec.a = a_raw                      # stays on the coarse grid
            rec.xc = sampler.down(x)
            channels = np.stack([rec.xc, tau * rec.a])
            out_c, rec.tape_p = nnet.subnet_forward(params.primal_net(k), channels)
            x_next = sampler.up(out_c)
        else:
            rec.a = sampler.up(a_raw)
            if kind == "conv2" or (kind == "coarse_conv2" and not sketched):
                rec.primal_kind = "conv2"
                channels = np.stack([x, tau * rec.a])
                x_next, rec.tape_p = nnet.subnet_forward(params.primal_net(k), channels)
            elif kind == "conv1":
                rec.u = x - tau * rec.a
                x_next, rec.tape_p = nnet.subnet_forward(params.primal_net(k),
                                                         rec.u[None])
            elif kind == "prior":
                rec.u = x - tau * rec.a
                x_next = apply_prior(config.prior, rec.u)
            else:  # prox (pdhg)
                rec.u = x - tau * rec.a
                prox = config.prox_r
                x_next = prox(rec.u, tau) if prox is not None else rec.u.copy()
        x_prev = x
        x = x_next
        xs.append(x)
        sketched_flags.append(sketched)
        records.append(rec)

    return Trajectory(xs=xs, ys=ys, subset_indices=i_seq,
                      sketched_flags=sketched_flags, trace=trace,
                      data_shape=problem.b.shape, records=records)


def pdhg_solve(problem, prox_r=None, weights=None, tau=1.0, sigma=1.0,
               beta=1.0, n_layers=100, x0=None, y0=None, trace=None,
               check_steps=True):
    """Primal-dual hybrid gradient on the weighted least-squares fit.

    Alternates the dual prox of the conjugate data fit, a primal prox step,
    and over-relaxation with factor ``beta``.  ``prox_r`` is a callable
    (v, tau) -> v', identity when None.  Warns when tau*sigma*||A||^2 > 1.
    """
    if check_steps:
        norm = problem.op.norm_estimate()
        if tau * sigma * norm ** 2 > 1.0 + 1e-9:
            warnings.warn("tau*sigma*||A||^2 = %.3g > 1; PDHG may diverge"
                          % (tau * sigma * norm ** 2), RuntimeWarning)
    config = UnrollConfig(n_layers=n_layers, variant="pdhg", prox_r=prox_r)
    q = int(np.prod(problem.op.data_shape))
    w = np.ones((1, q)) if weights is None else np.atleast_2d(weights)
    params = UnrollParams(taus=np.full(n_layers, float(tau)),
                          sigmas=np.full(n_layers, float(sigma)),
                          beta=float(beta), dual_weights=w)
    if x0 is None:
        x0 = np.zeros(problem.op.image_shape)
    return unroll_forward(problem, config, params, x0, y0=y0, trace=trace)


# ---------------------------------------------------------------------------
# reverse pass


def _accumulate_net_grads(grads_nets, shared, k, g_net):
    target = grads_nets if shared else grads_nets[k]
    for gl, l in zip(target.layers, g_net.layers):
        gl.kernels += l.kernels
        gl.biases += l.biases


def unroll_backward(trajectory, config, params, g_x_final, trace=None):
    """Exact reverse-mode pass through a recorded trajectory.

    Returns (grads, g_x0, g_b): cotangents for every parameter, for the
    starting point, and for the measurement data.  Subset draws are treated
    as constants (the recorded sequence is replayed).
    """
    if len(trajectory.records) != config.n_layers:
        raise ValueError("trajectory does not match config")
    if trace is None:
        trace = trajectory.trace
    grads = _zeros_like_params(params)
    dual_kind = config.dual_kind()

    g_b = np.zeros(trajectory.data_shape)

    if config.per_subset_dual:
        g_y_state = [np.zeros(trajectory.records[0].y_out.shape)
                     for _ in range(config.m)]
    else:
        g_y_state = np.zeros(trajectory.records[0].y_out.shape)

    g_x_by_index = {config.n_layers: np.asarray(g_x_final, dtype=np.float64)}

    for rec in reversed(trajectory.records):
        k = rec.k
        tau, sigma = float(params.taus[k]), float(params.sigmas[k])
        sampler = _Sampler(rec.sketched)
        g_x_out = g_x_by_index.pop(k + 1, None)
        if g_x_out is None:
            g_x_out = np.zeros_like(rec.x_in)
        g_x_in = np.zeros_like(rec.x_in)

        # --- primal step backward
        kind = rec.primal_kind
        if kind == "coarse_conv2" and rec.sketched:
            g_out_c = sampler.up_t(g_x_out)
            g_ch, g_net = nnet.subnet_backward(params.primal_net(k), rec.tape_p,
                                               g_out_c)
            g_x_in += sampler.down_t(g_ch[0])
            g_a = tau * g_ch[1]
            grads.taus[k] += np.vdot(g_ch[1], rec.a)
            _accumulate_net_grads(grads.primal_nets, config.shared_primal(),
                                  k, g_net)
        elif kind == "conv2":
            g_ch, g_net = nnet.subnet_backward(params.primal_net(k), rec.tape_p,
                                               g_x_out)
            g_x_in += g_ch[0]
            g_a = tau * g_ch[1]
            grads.taus[k] += np.vdot(g_ch[1], rec.a)
            _accumulate_net_grads(grads.primal_nets, config.shared_primal(),
                                  k, g_net)
        elif kind == "conv1":
            g_ch, g_net = nnet.subnet_backward(params.primal_net(k), rec.tape_p,
                                               g_x_out)
            g_u = g_ch[0]
            g_x_in += g_u
            g_a = -tau * g_u
            grads.taus[k] += -np.vdot(g_u, rec.a)
            _accumulate_net_grads(grads.primal_nets, config.shared_primal(),
                                  k, g_net)
        elif kind in ("prior", "prox"):
            if kind == "prior" and not isinstance(config.prior.descriptor, All):
                raise ConfigError("reverse pass through a non-identity "
                                  "projection slot is not supported")
            if kind == "prox" and config.prox_r is not None:
                raise ConfigError("reverse pass requires an identity prox_r")
            g_u = g_x_out
            g_x_in += g_u
            g_a = -tau * g_u
            grads.taus[k] += -np.vdot(g_u, rec.a)
        else:
            raise ConfigError("unknown primal kind %r" % kind)

        # --- adjoint-term backward: a = [up](op^T y_out)
        if kind == "coarse_conv2" and rec.sketched:
            g_y_from_a = rec.op.forward(g_a)
        else:
            g_y_from_a = rec.op.forward(sampler.up_t(g_a))
        trace.add("forward", rec.row_fraction, rec.grid_fraction)

        # --- dual step backward
        if config.per_subset_dual:
            g_y_out = g_y_state[rec.i] + g_y_from_a
        else:
            g_y_out = g_y_state + g_y_from_a
        if dual_kind == "conv":
            g_ch, g_net = nnet.subnet_backward(params.dual_net(k), rec.tape_d,
                                               g_y_out)
            g_y_in = g_ch[0]
            g_z = sigma * g_ch[1]
            grads.sigmas[k] += np.vdot(g_ch[1], rec.z)
            _accumulate_net_grads(grads.dual_nets, False, k, g_net)
            g_b_i = g_ch[2]
        elif dual_kind == "residual":
            g_y_in = np.zeros_like(g_y_out)
            g_z = g_y_out
            g_b_i = -g_y_out
        else:  # wls
            w = params.dual_weights[rec.i].reshape(rec.y_in.shape)
            h, j = rec.h, rec.j
            shifted = rec.y_in + sigma * rec.z
            g_y_in = h * g_y_out
            g_z = sigma * h * g_y_out
            denom = (sigma + w) ** 2
            dh_dsigma = -w / denom
            dj_dsigma = w ** 2 / denom
            grads.sigmas[k] += np.vdot(
                g_y_out, dh_dsigma * shifted + h * rec.z - dj_dsigma * rec.b_i)
            dh_dw = sigma / denom
            dj_dw = sigma ** 2 / denom
            gw = g_y_out * (dh_dw * shifted - dj_dw * rec.b_i)
            grads.dual_weights[rec.i] += gw.ravel()
            g_b_i = -j * g_y_out

        if rec.rows is None:
            g_b += g_b_i
        else:
            np.add.at(g_b.ravel(), rec.rows, g_b_i.ravel())

        if config.per_subset_dual:
            g_y_state[rec.i] = g_y_in
        else:
            g_y_state = g_y_in

        # --- forward-term backward: z = op([down](xbar))
        g_down = rec.op.adjoint(g_z)
        trace.add("adjoint", rec.row_fraction, rec.grid_fraction)
        g_xbar = sampler.down_t(g_down)
        if config.variant == "pdhg" and k > 0:
            grads.beta += float(np.vdot(g_xbar, rec.x_in - trajectory.xs[k - 1]))
            g_x_in += (1.0 + params.beta) * g_xbar
            g_prev = g_x_by_index.get(k - 1)
            extra = -params.beta * g_xbar
            g_x_by_index[k - 1] = extra if g_prev is None else g_prev + extra
        else:
            g_x_in += g_xbar

        g_prev = g_x_by_index.get(k)
        g_x_by_index[k] = g_x_in if g_prev is None else g_prev + g_x_in

    g_x0 = g_x_by_index.get(0)
    if g_x0 is None:
        g_x0 = np.zeros_like(trajectory.xs[0])
    return grads, g_x0, g_b

"""Brute-force verification of the estimation-error analysis on small
instances.

Everything here works on dense matrices and enumerable constraint sets:
restricted eigenvalue constants over descent cones, suprema of linear
functionals over cone caps, the noise and approximation terms entering the
error recursions, and Monte-Carlo contraction/bound checks of the unrolled
SGD-style and prox-dual networks.
"""

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .operators import MatrixOperator, SubsetScheme
from .proximal import All, ManifoldPrior, SparseSet, Subspace
from .unrolling import Problem, UnrollConfig, UnrollParams, unroll_forward

MAX_ENUM_DIM = 20
MAX_ENUM_SUPPORT = 6


class UnsupportedPriorError(ValueError):
    """The descent cone of this prior has no enumerable description here."""


def _cone_kind(prior):
    d = prior.descriptor
    if isinstance(d, SparseSet):
        return "sparse"
    if isinstance(d, Subspace):
        return "subspace"
    if isinstance(d, All):
        return "all"
    raise UnsupportedPriorError("no descent-cone oracle for %r" % (d,))


def _sparse_support_size(prior, dim):
    # differences of s-sparse points are at most 2s-sparse
    return min(2 * prior.descriptor.s, dim)


def _iter_supports(dim, size):
    if dim > MAX_ENUM_DIM or size > MAX_ENUM_SUPPORT:
        raise UnsupportedPriorError(
            "support enumeration limited to d <= %d, 2s <= %d"
            % (MAX_ENUM_DIM, MAX_ENUM_SUPPORT))
    return itertools.combinations(range(dim), size)


def _extremal_rayleigh(mat, prior, which):
    """Extremal eigenvalue of ``mat`` restricted to the prior's cone."""
    kind = _cone_kind(prior)
    if kind == "all":
        eig = np.linalg.eigvalsh(mat)
        return eig[0] if which == "min" else eig[-1]
    if kind == "subspace":
        basis = prior.descriptor.basis
        eig = np.linalg.eigvalsh(basis.T @ mat @ basis)
        return eig[0] if which == "min" else eig[-1]
    size = _sparse_support_size(prior, mat.shape[0])
    best = np.inf if which == "min" else -np.inf
    for support in _iter_supports(mat.shape[0], size):
        sub = mat[np.ix_(support, support)]
        eig = np.linalg.eigvalsh(sub)
        if which == "min":
            best = min(best, eig[0])
        else:
            best = max(best, eig[-1])
    return best


def restricted_constants(a_dense, prior, scheme, group_size=None):
    """Restricted eigenvalue constants (mu_c, L_c, L_s).

    mu_c:  min over cone directions of ||A v||^2 / (n ||v||^2)
    L_c:   max over cone directions and subsets of ||S_i A v||^2 / (q ||v||^2)
    L_s:   the same max over all of R^d
    """
    a = np.asarray(a_dense, dtype=np.float64)
    n = a.shape[0]
    if group_size is None:
        group_size = n // scheme.n_angles
    q = n // scheme.m
    mu_c = _extremal_rayleigh(a.T @ a, prior, "min") / n
    l_c = -np.inf
    l_s = -np.inf
    for i in range(scheme.m):
        rows = (slice(None) if scheme.m == 1
                else scheme.row_indices(i, group_size))
        sub = a[rows]
        gram = sub.T @ sub
        l_c = max(l_c, _extremal_rayleigh(gram, prior, "max") / q)
        l_s = max(l_s, np.linalg.eigvalsh(gram)[-1] / q)
    return float(mu_c), float(l_c), float(l_s)


def cone_sup(g, prior):
    """sup of <v, g> over unit vectors v in the prior's descent cone.

    Equals the norm of the cone projection of g.
    """
    g = np.asarray(g, dtype=np.float64).ravel()
    kind = _cone_kind(prior)
    if kind == "all":
        return float(np.linalg.norm(g))
    if kind == "subspace":
        return float(np.linalg.norm(prior.descriptor.basis.T @ g))
    size = _sparse_support_size(prior, g.size)
    mags = np.sort(np.abs(g))[::-1]
    return float(np.sqrt(np.sum(mags[:size] ** 2)))


def _subset_matrices(a, scheme, group_size):
    out = []
    for i in range(scheme.m):
        rows = (slice(None) if scheme.m == 1
                else scheme.row_indices(i, group_size))
        out.append(a[rows])
    return out


def estimate_delta(a_dense, w, scheme, dual_params=None, sigma=None,
                   tau=1.0, prior=None, n_samples=None, rng=None):
    """Noise term of the error recursion.

    With prox-dual parameters: 2*tau*sigma * E_i cone_sup(A^T S_i^T J_i S_i w);
    without them (plain residual dual): 2*tau * E_i cone_sup(A^T S_i^T S_i w).
    The expectation over the uniform subset index is exact by default; pass
    ``n_samples`` to estimate it from random draws instead.
    """
    a = np.asarray(a_dense, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64).ravel()
    group_size = a.shape[0] // scheme.n_angles
    subs = _subset_matrices(a, scheme, group_size)
    values = []
    for i, sub in enumerate(subs):
        wi = w[(slice(None) if scheme.m == 1
                else scheme.row_indices(i, group_size))]
        if dual_params is not None:
            weights = dual_params.row(i)
            s = dual_params.sigma if sigma is None else sigma
            j = s * weights / (s + weights)
            values.append(2.0 * tau * s * cone_sup(sub.T @ (j * wi), prior))
        else:
            values.append(2.0 * tau * cone_sup(sub.T @ wi, prior))
    values = np.asarray(values)
    if n_samples is None:
        return float(values.mean())
    if rng is None:
        rng = np.random.default_rng(0)
    draws = rng.integers(0, scheme.m, size=n_samples)
    return float(values[draws].mean())


# ---------------------------------------------------------------------------
# approximation terms measured on recorded trajectories


def _spectral_norm(mat):
    return float(np.linalg.norm(mat, 2))


def measure_epsilons(trajectories, problem, config, params, prior,
                     dual_params=None):
    """Approximation error terms, as suprema over recorded trajectories.

    eps0: declared projection error budget of the prior.
    eps1, eps2: prox-dual bias terms (identically zero for residual duals).
    eps3, eps4: coarse-grid approximation errors of the forward/adjoint
    products (zero when nothing is sketched).
    Returns a dict with eps0..eps4, eps, eps_star.
    """
    if not isinstance(trajectories, (list, tuple)):
        trajectories = [trajectories]
    scheme = SubsetScheme(config.m, problem.op.geometry.n_angles
                          if hasattr(problem.op, "geometry")
                          else problem.op.n_groups)
    full_ops = [problem.op.restricted(scheme, i) for i in range(config.m)]
    eps0 = float(prior.epsilon0) if prior is not None else 0.0
    tau = float(np.max(params.taus[:config.n_layers]))
    sigma = float(np.max(params.sigmas[:config.n_layers]))

    eps1 = eps2 = 0.0
    if config.dual_kind() == "wls":
        weights = (dual_params.weights if dual_params is not None
                   else params.dual_weights)
        for i, op_i in enumerate(full_ops):
            w = weights[i].ravel()
            h = w / (sigma + w)
            j = sigma * h
            if problem.x_true is not None:
                sax = op_i.forward(
                    np.asarray(problem.x_true, dtype=np.float64)).ravel()
                term = op_i.adjoint(((h - j) * sax).reshape(op_i.data_shape))
                eps2 = max(eps2, 2.0 * tau * sigma * np.linalg.norm(term))
            for traj in trajectories:
                for y in [np.zeros(op_i.data_shape)] + list(traj.ys):
                    term = op_i.adjoint((h.reshape(y.shape) * y))
                    eps1 = max(eps1, 2.0 * tau * np.linalg.norm(term))

    eps3 = eps4 = 0.0
    any_sketch = any(f for traj in trajectories for f in traj.sketched_flags)
    if any_sketch:
        from .operators import build_sketched_projector, downsample2, upsample2
        coarse = build_sketched_projector(problem.op.geometry,
                                          problem.op.image_shape,
                                          problem.op.pixel_size,
                                          config.sketch_factor)
        coarse_ops = [coarse.restricted(scheme, i) for i in range(config.m)]
        norms = [_spectral_norm(op.materialize()) for op in coarse_ops]
        for traj in trajectories:
            for rec in traj.records:
                if not rec.sketched:
                    continue
                xk = rec.x_in
                yk = rec.y_out
                for i in range(config.m):
                    zc = coarse_ops[i].forward(downsample2(xk))
                    zf = full_ops[i].forward(xk)
                    eps3 = max(eps3, norms[i] * np.linalg.norm(zc - zf))
                    ac = upsample2(coarse_ops[i].adjoint(yk))
                    af = full_ops[i].adjoint(yk)
                    eps4 = max(eps4, np.linalg.norm(ac - af))

    eps = eps0 + eps1 + eps2 + tau * eps3 + tau * sigma * eps4
    eps_star = eps0 + tau * eps3 + tau * eps4
    return dict(eps0=eps0, eps1=eps1, eps2=float(eps2), eps3=float(eps3),
                eps4=float(eps4), eps=float(eps), eps_star=float(eps_star))


# ---------------------------------------------------------------------------
# bound checks


@dataclass
class TheoryReport:
    mu_c: float
    L_c: float
    L_s: float
    v_a: float
    v_b: float
    kappa: int
    alpha: float
    delta: float
    epsilons: dict
    observed: list          # mean error per layer index 0..K
    se: list                # standard error of each mean
    bound: list             # bound curve per layer index
    bound_is_lower: bool = False
    bound_vacuous: bool = False
    per_step_pass: bool = None
    bound_pass: bool = None
    plateau_pass: bool = None
    gamma: float = None
    notes: list = field(default_factory=list)

    def summary(self):
        lines = ["restricted constants: mu_c=%.6g L_c=%.6g L_s=%.6g"
                 % (self.mu_c, self.L_c, self.L_s),
                 "dual map diagonal range: [%.6g, %.6g]" % (self.v_a, self.v_b),
                 "kappa=%d alpha=%.6g delta=%.6g" % (self.kappa, self.alpha,
                                                     self.delta),
                 "eps terms: " + " ".join("%s=%.4g" % (k, v)
                                          for k, v in sorted(self.epsilons.items()))]
        if self.bound_vacuous:
            lines.append("bound vacuous (alpha >= 1); per-step check only")
        if self.gamma is not None:
            lines.append("gamma=%.3g" % self.gamma)
        for name in ("per_step_pass", "bound_pass", "plateau_pass"):
            val = getattr(self, name)
            if val is not None:
                lines.append("%s: %s" % (name, "PASS" if val else "FAIL"))
        lines.extend(self.notes)
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "observed_mean", "standard_error", "bound"])
            for k, (obs, se, bnd) in enumerate(zip(self.observed, self.se,
                                                   self.bound)):
                writer.writerow([k, repr(float(obs)), repr(float(se)),
                                 repr(float(bnd))])


def _kappa(prior):
    return 1 if prior.is_convex() else 2


def _monte_carlo_errors(problem, config, params, x0, n_runs, seed):
    """Error norms per layer over seeded random-subset runs."""
    errors = np.zeros((n_runs, config.n_layers + 1))
    trajectories = []
    for run in range(n_runs):
        rng = np.random.default_rng([seed, run])
        traj = unroll_forward(problem, config, params, x0, rng=rng)
        errors[run] = traj.error_norms(problem.x_true)
        if run < 64:
            trajectories.append(traj)
    return errors, trajectories


def enforce_step_rule(config, params, q, l_s):
    """Step sizes required by the error analysis.

    Residual-dual variants: tau = 1/(q L_s).  Prox-dual variants:
    tau * sigma = 1/(q L_s), split evenly.
    """
    K = config.n_layers
    if config.dual_kind() == "wls":
        step = 1.0 / np.sqrt(q * l_s)
        taus = np.full(K, step)
        sigmas = np.full(K, step)
    else:
        taus = np.full(K, 1.0 / (q * l_s))
        sigmas = np.full(K, 1.0)
    return UnrollParams(taus=taus, sigmas=sigmas, beta=params.beta,
                        primal_nets=params.primal_nets,
                        dual_nets=params.dual_nets,
                        dual_weights=params.dual_weights)


def upper_bound_check(problem, config, params, prior, n_runs=1000, seed=0,
                      x0=None, enforce_steps=True):
    """Monte-Carlo check of the estimation-error upper bound.

    Runs the configured network with uniformly random subset draws, compares
    mean error norms against the geometric bound curve, and checks the
    one-step recursion  E e_{k+1} <= alpha e_k + eps + delta  at every layer
    (each within three standard errors).  When alpha >= 1 the cumulative
    bound is marked vacuous and only the per-step form is asserted.
    """
    a = problem.op.materialize()
    n = a.shape[0]
    scheme = SubsetScheme(config.m, problem.op.geometry.n_angles
                          if hasattr(problem.op, "geometry")
                          else problem.op.n_groups)
    group_size = n // scheme.n_angles
    q = n // config.m
    mu_c, l_c, l_s = restricted_constants(a, prior, scheme, group_size)
    if enforce_steps:
        params = enforce_step_rule(config, params, q, l_s)
    tau = float(params.taus[0])
    sigma = float(params.sigmas[0])

    if config.dual_kind() == "wls":
        w = params.dual_weights
        h = w / (sigma + w)
        v_a, v_b = float(h.min()), float(h.max())
    else:
        v_a = v_b = 1.0
    kappa = _kappa(prior)
    alpha = kappa * (1.0 - (v_b * mu_c) / (v_a * l_s))

    x_true = np.asarray(problem.x_true, dtype=np.float64)
    w_noise = problem.b - problem.op.forward(x_true)
    if config.dual_kind() == "wls":
        from .proximal import DualProxParams
        dp = DualProxParams(sigma=sigma, weights=params.dual_weights)
        delta = estimate_delta(a, w_noise, scheme, dual_params=dp, sigma=sigma,
                               tau=tau, prior=prior)
    else:
        delta = estimate_delta(a, w_noise, scheme, tau=tau, prior=prior)

    if x0 is None:
        x0 = np.zeros(problem.op.image_shape)
    errors, trajs = _monte_carlo_errors(problem, config, params, x0,
                                        n_runs, seed)
    eps_terms = measure_epsilons(trajs, problem, config, params, prior)
    eps = eps_terms["eps"] if config.dual_kind() == "wls" else eps_terms["eps_star"]

    mean = errors.mean(axis=0)
    se = errors.std(axis=0, ddof=1) / np.sqrt(n_runs) if n_runs > 1 \
        else np.zeros_like(mean)

    # per-step recursion
    per_step = True
    for k in range(config.n_layers):
        diff = errors[:, k + 1] - alpha * errors[:, k]
        dmean = diff.mean()
        dse = diff.std(ddof=1) / np.sqrt(n_runs) if n_runs > 1 else 0.0
        if dmean > eps + delta + 3.0 * dse + 1e-12:
            per_step = False

    vacuous = alpha >= 1.0
    bound = []
    e0 = float(np.linalg.norm(x0 - x_true))
    for k in range(config.n_layers + 1):
        if vacuous:
            bound.append(np.inf)
        elif alpha == 1.0:
            bound.append(e0 + k * (eps + delta))
        else:
            bound.append(alpha ** k * e0
                         + (1.0 - alpha ** k) / (1.0 - alpha) * (eps + delta))
    bound_pass = None if vacuous else bool(
        all(mean[k] <= bound[k] + 3.0 * se[k] + 1e-12
            for k in range(config.n_layers + 1)))
    plateau_pass = None
    if not vacuous and np.linalg.norm(w_noise) > 0:
        floor = (eps + delta) / (1.0 - alpha)
        plateau_pass = bool(mean[-1] <= floor + 3.0 * se[-1] + 1e-12)

    return TheoryReport(mu_c=mu_c, L_c=l_c, L_s=l_s, v_a=v_a, v_b=v_b,
                        kappa=kappa, alpha=float(alpha), delta=float(delta),
                        epsilons=eps_terms, observed=list(mean), se=list(se),
                        bound=bound, bound_vacuous=vacuous,
                        per_step_pass=bool(per_step), bound_pass=bound_pass,
                        plateau_pass=plateau_pass)


def lower_bound_check(problem, config, params, prior, gamma, n_runs=1,
                      seed=0, x0=None, enforce_steps=True):
    """Check that observed errors dominate the lower-bound curve.

    Requires a convex prior.  The curve is
    (1-gamma)^k (1 - L_c/L_s)^k ||x0 - x_true|| - (L_s/L_c) eps_star,
    valid for starts close enough to the truth (the start is the caller's
    choice; the required radius is not constructive).
    """
    if not prior.is_convex():
        raise UnsupportedPriorError("lower bound requires a convex prior")
    a = problem.op.materialize()
    n = a.shape[0]
    scheme = SubsetScheme(config.m, problem.op.geometry.n_angles
                          if hasattr(problem.op, "geometry")
                          else problem.op.n_groups)
    group_size = n // scheme.n_angles
    q = n // config.m
    mu_c, l_c, l_s = restricted_constants(a, prior, scheme, group_size)
    if enforce_steps:
        params = enforce_step_rule(config, params, q, l_s)

    if x0 is None:
        x0 = np.zeros(problem.op.image_shape)
    x_true = np.asarray(problem.x_true, dtype=np.float64)
    if config.m == 1 or config.subset_order == "cyclic":
        traj = unroll_forward(problem, config, params, x0)
        errors = np.asarray(traj.error_norms(x_true))[None, :]
        trajs = [traj]
    else:
        errors, trajs = _monte_carlo_errors(problem, config, params, x0,
                                            n_runs, seed)
    eps_terms = measure_epsilons(trajs, problem, config, params, prior)
    eps_star = eps_terms["eps_star"]

    e0 = float(np.linalg.norm(np.asarray(x0) - x_true))
    rate = (1.0 - gamma) * (1.0 - l_c / l_s)
    bound = [rate ** k * e0 - (l_s / l_c) * eps_star
             for k in range(config.n_layers + 1)]
    mean = errors.mean(axis=0)
    se = (errors.std(axis=0, ddof=1) / np.sqrt(errors.shape[0])
          if errors.shape[0] > 1 else np.zeros_like(mean))
    bound_pass = bool(all(mean[k] >= bound[k] - 3.0 * se[k] - 1e-12
                          for k in range(config.n_layers + 1)))
    kappa = _kappa(prior)
    return TheoryReport(mu_c=mu_c, L_c=l_c, L_s=l_s, v_a=1.0, v_b=1.0,
                        kappa=kappa,
                        alpha=kappa * (1.0 - mu_c / l_s), delta=0.0,
                        epsilons=eps_terms, observed=list(mean), se=list(se),
                        bound=bound, bound_is_lower=True, gamma=gamma,
                        bound_pass=bound_pass)


# ---------------------------------------------------------------------------
# canonical instances


def stacked_orthogonal_problem(d=8, s=1, scale=1.0, seed=0):
    """A = two stacked copies of a scaled orthogonal map; subsets = blocks.

    All restricted constants coincide (scale^2 / d), so the contraction
    factor vanishes and one layer recovers any sparse truth exactly.
    """
    rng = np.random.default_rng(seed)
    qmat, _ = np.linalg.qr(rng.standard_normal((d, d)))
    a = np.vstack([scale * qmat, scale * qmat])
    op = MatrixOperator(a, group_size=d)       # 2 row groups
    x_true = np.zeros(d)
    support = rng.choice(d, size=s, replace=False)
    x_true[support] = rng.uniform(1.0, 2.0, size=s) * rng.choice([-1, 1], size=s)
    b = a @ x_true
    prior = ManifoldPrior(SparseSet(s))
    return Problem(op, b, x_true), prior


def gaussian_sparse_problem(d=16, n=32, s=1, m=2, noise_std=0.0, seed=0):
    """Dense Gaussian measurements of an s-sparse truth, interleaved rows."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, d))
    op = MatrixOperator(a, group_size=1)
    x_true = np.zeros(d)
    support = rng.choice(d, size=s, replace=False)
    x_true[support] = rng.uniform(1.0, 2.0, size=s) * rng.choice([-1, 1], size=s)
    w = noise_std * rng.standard_normal(n) if noise_std > 0 else np.zeros(n)
    b = a @ x_true + w
    prior = ManifoldPrior(SparseSet(s))
    return Problem(op, b, x_true), prior


def diag_line_problem(t0=0.5):
    """diag(2, 1) with the truth on the e2 axis and the start offset along it.

    The iteration contracts along e2 by exactly 3/4 per layer when the step
    rule is enforced, giving a closed-form error curve for lower-bound tests.
    """
    a = np.array([[2.0, 0.0], [0.0, 1.0]])
    op = MatrixOperator(a, group_size=1)
    x_true = np.array([0.0, 1.0])
    b = a @ x_true
    basis = np.array([[0.0], [1.0]])
    prior = ManifoldPrior(Subspace(basis))
    x0 = x_true + np.array([0.0, t0])
    return Problem(op, b, x_true), prior, x0


def sgd_network_config(n_layers, m, prior, subset_order="random", seed=0,
                       sketch_factor=1, k_switch=None):
    """Residual-dual network with an exact projection slot (analysis form)."""
    return UnrollConfig(n_layers=n_layers, variant="sketch-subset-sgd", m=m,
                        subset_order=subset_order, subset_seed=seed,
                        sketch_factor=sketch_factor, k_switch=k_switch,
                        primal_slot="prior", prior=prior)


def wls_network_config(n_layers, m, prior, subset_order="random", seed=0,
                       sketch_factor=1, k_switch=None):
    """Prox-dual network with an exact projection slot (analysis form)."""
    return UnrollConfig(n_layers=n_layers, variant="sketch-subset-wls", m=m,
                        subset_order=subset_order, subset_seed=seed,
                        sketch_factor=sketch_factor, k_switch=k_switch,
                        primal_slot="prior", prior=prior)


def sgd_network_params(config, problem, q=None, l_s=None):
    """Parameters for the analysis-form networks with enforced step sizes."""
    a = problem.op.materialize()
    scheme = SubsetScheme(config.m, problem.op.n_groups
                          if hasattr(problem.op, "n_groups")
                          else problem.op.geometry.n_angles)
    if l_s is None:
        n = a.shape[0]
        q = n // config.m
        l_s = max(np.linalg.eigvalsh(sub.T @ sub)[-1] / q
                  for sub in _subset_matrices(a, scheme, n // scheme.n_angles))
    K = config.n_layers
    dual_weights = None
    if config.dual_kind() == "wls":
        dual_weights = np.ones((config.m, q))
    base = UnrollParams(taus=np.ones(K), sigmas=np.ones(K),
                        dual_weights=dual_weights)
    return enforce_step_rule(config, base, q, l_s)

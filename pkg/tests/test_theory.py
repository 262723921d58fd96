import itertools

import numpy as np
import pytest

from unrollct.operators import MatrixOperator, SubsetScheme
from unrollct.proximal import (All, DualProxParams, L1Ball, ManifoldPrior,
                               SparseSet, Subspace)
from unrollct.theory import (UnsupportedPriorError, cone_sup,
                             diag_line_problem, estimate_delta,
                             gaussian_sparse_problem, lower_bound_check,
                             measure_epsilons, restricted_constants,
                             sgd_network_config, sgd_network_params,
                             stacked_orthogonal_problem, upper_bound_check,
                             wls_network_config)
from unrollct.unrolling import Problem, UnrollParams, unroll_forward


# ---------------------------------------------------------------------------
# restricted constants


def test_constants_identity():
    scheme = SubsetScheme(1, 4)
    mu, lc, ls = restricted_constants(np.eye(4), ManifoldPrior(All()), scheme)
    assert (mu, lc, ls) == (0.25, 0.25, 0.25)


def test_constants_diag_eigendecomposition():
    scheme = SubsetScheme(1, 2)
    mu, lc, ls = restricted_constants(np.diag([2.0, 1.0]),
                                      ManifoldPrior(All()), scheme)
    assert mu == pytest.approx(0.5, abs=1e-14)
    assert lc == pytest.approx(2.0, abs=1e-14)
    assert ls == pytest.approx(2.0, abs=1e-14)


def test_constants_stacked_orthogonal():
    problem, prior = stacked_orthogonal_problem(d=8, s=1, scale=1.3, seed=1)
    scheme = SubsetScheme(2, 2)
    mu, lc, ls = restricted_constants(problem.op.materialize(), prior, scheme,
                                      group_size=8)
    expect = 1.3 ** 2 / 8
    assert mu == pytest.approx(expect, rel=1e-12)
    assert lc == pytest.approx(expect, rel=1e-12)
    assert ls == pytest.approx(expect, rel=1e-12)


def test_constants_ordering_random_instances(rng):
    for _ in range(5):
        a = rng.standard_normal((12, 6))
        scheme = SubsetScheme(3, 12)
        prior = ManifoldPrior(SparseSet(1))
        mu, lc, ls = restricted_constants(a, prior, scheme)
        assert mu <= lc + 1e-12
        assert lc <= ls + 1e-12


def test_constants_sparse_matches_exhaustive(rng):
    a = rng.standard_normal((10, 6))
    scheme = SubsetScheme(2, 10)
    prior = ManifoldPrior(SparseSet(1))
    mu, lc, ls = restricted_constants(a, prior, scheme)
    # brute-force over all 2-sparse supports
    n, q = 10, 5
    mu_ref = min(np.linalg.eigvalsh(a[:, s].T @ a[:, s])[0] / n
                 for s in itertools.combinations(range(6), 2))
    assert mu == pytest.approx(mu_ref, rel=1e-12)


def test_constants_reject_l1ball():
    scheme = SubsetScheme(1, 4)
    with pytest.raises(UnsupportedPriorError):
        restricted_constants(np.eye(4), ManifoldPrior(L1Ball(1.0)), scheme)


def test_constants_enumeration_limits():
    scheme = SubsetScheme(1, 4)
    big = np.eye(30)[:4]
    with pytest.raises(UnsupportedPriorError):
        restricted_constants(big, ManifoldPrior(SparseSet(2)), scheme)


# ---------------------------------------------------------------------------
# cone suprema


def test_cone_sup_examples():
    assert cone_sup(np.array([3.0, 4.0]), ManifoldPrior(All())) == 5.0
    # 1-sparse set on d=3: difference cone is the 2-sparse union
    prior = ManifoldPrior(SparseSet(1))
    assert cone_sup(np.array([3.0, -4.0, 1.0]), prior) == 5.0
    basis = np.array([[1.0], [0.0]])
    assert cone_sup(np.array([3.0, -4.0]),
                    ManifoldPrior(Subspace(basis))) == 3.0


def test_cone_sup_dominates_monte_carlo(rng):
    """Any sampled unit cone vector gives a lower value (sampling can only
    undershoot the supremum, and 1e5 draws come within one percent)."""
    g = rng.standard_normal(8)
    prior = ManifoldPrior(SparseSet(2))   # cone = 4-sparse vectors
    sup = cone_sup(g, prior)
    n = 10 ** 5
    supports = np.argsort(rng.random((n, 8)), axis=1)[:, :4]
    vals = rng.standard_normal((n, 4))
    vals /= np.linalg.norm(vals, axis=1, keepdims=True)
    samples = (np.take(g, supports) * vals).sum(axis=1)
    best = float(samples.max())
    assert best <= sup + 1e-12
    assert best >= 0.99 * sup


# ---------------------------------------------------------------------------
# delta


def test_delta_noiseless_zero(rng):
    a = rng.standard_normal((8, 4))
    scheme = SubsetScheme(2, 8)
    d = estimate_delta(a, np.zeros(8), scheme, tau=0.3,
                       prior=ManifoldPrior(All()))
    assert d == 0.0


def test_delta_full_batch_reduction(rng):
    a = rng.standard_normal((8, 4))
    w = rng.standard_normal(8)
    scheme = SubsetScheme(1, 8)
    d = estimate_delta(a, w, scheme, tau=0.3, prior=ManifoldPrior(All()))
    assert d == pytest.approx(2 * 0.3 * np.linalg.norm(a.T @ w), rel=1e-12)


def test_delta_support_enumeration_cross_check(rng):
    a = rng.standard_normal((8, 5))
    w = rng.standard_normal(8)
    scheme = SubsetScheme(2, 8)
    prior = ManifoldPrior(SparseSet(1))
    d = estimate_delta(a, w, scheme, tau=0.5, prior=prior)
    # independent enumeration: sup over 2-sparse unit v of v.g per subset
    vals = []
    for i in range(2):
        rows = scheme.row_indices(i, 1)
        g = a[rows].T @ w[rows]
        best = max(np.linalg.norm(g[list(s)])
                   for s in itertools.combinations(range(5), 2))
        vals.append(2 * 0.5 * best)
    assert d == pytest.approx(np.mean(vals), rel=1e-12)


def test_delta_prox_dual_form(rng):
    a = rng.standard_normal((6, 3))
    w = rng.standard_normal(6)
    scheme = SubsetScheme(1, 6)
    sigma = 2.0
    dp = DualProxParams(sigma=sigma, weights=np.ones(6))
    d = estimate_delta(a, w, scheme, dual_params=dp, sigma=sigma, tau=0.25,
                       prior=ManifoldPrior(All()))
    j = sigma * 1.0 / (sigma + 1.0)
    expect = 2 * 0.25 * sigma * np.linalg.norm(a.T @ (j * w))
    assert d == pytest.approx(expect, rel=1e-12)


# ---------------------------------------------------------------------------
# epsilon measurement


def _run_sgd(problem, prior, m, n_layers=4, sketch_factor=1, k_switch=None,
             order="cyclic"):
    cfg = sgd_network_config(n_layers, m, prior, subset_order=order,
                             sketch_factor=sketch_factor, k_switch=k_switch)
    params = sgd_network_params(cfg, problem)
    x0 = np.zeros(problem.op.image_shape)
    return cfg, params, unroll_forward(problem, cfg, params, x0)


def test_epsilons_zero_without_sketch():
    problem, prior = gaussian_sparse_problem(d=8, n=16, s=1, m=2, seed=3)
    cfg, params, traj = _run_sgd(problem, prior, m=2)
    eps = measure_epsilons(traj, problem, cfg, params, prior)
    assert eps["eps3"] == 0.0 and eps["eps4"] == 0.0
    assert eps["eps1"] == 0.0 and eps["eps2"] == 0.0   # residual dual
    assert eps["eps0"] == 0.0                          # exact projection
    assert eps["eps"] == 0.0 and eps["eps_star"] == 0.0


def test_eps2_zero_at_sigma_one(rng):
    """The two prox-dual diagonal maps coincide at sigma = 1, so the data
    bias term vanishes there."""
    problem, prior = gaussian_sparse_problem(d=8, n=16, s=1, m=2, seed=3)
    cfg = wls_network_config(2, 2, prior, subset_order="cyclic")
    q = 8
    params = UnrollParams(taus=np.full(2, 0.01), sigmas=np.ones(2),
                          dual_weights=rng.uniform(0.5, 2.0, size=(2, q)))
    traj = unroll_forward(problem, cfg, params, np.zeros(8))
    eps = measure_epsilons(traj, problem, cfg, params, prior)
    assert eps["eps2"] == pytest.approx(0.0, abs=1e-14)


def test_eps1_vanishes_for_large_sigma(rng):
    """The dual-state carry-over term shrinks as sigma/tau grows with
    tau*sigma fixed (the retained fraction h goes to zero)."""
    problem, prior = gaussian_sparse_problem(d=8, n=16, s=1, m=2, seed=3)
    q = 8
    values = []
    for sigma in (1.0, 1e3, 1e6):
        tau = 1e-2 / sigma                 # fixed tau*sigma
        cfg = wls_network_config(3, 2, prior, subset_order="cyclic")
        params = UnrollParams(taus=np.full(3, tau), sigmas=np.full(3, sigma),
                              dual_weights=np.ones((2, q)))
        traj = unroll_forward(problem, cfg, params, np.zeros(8))
        eps = measure_epsilons(traj, problem, cfg, params, prior)
        values.append(eps["eps1"])
    assert values[2] < 1e-5
    assert values[2] < values[1] < values[0]


def test_prior_budget_enters_eps0():
    problem, prior = gaussian_sparse_problem(d=8, n=16, s=1, m=2, seed=3)
    budget = ManifoldPrior(SparseSet(1), epsilon0=0.01)
    cfg, params, traj = _run_sgd(problem, budget, m=2)
    eps = measure_epsilons(traj, problem, cfg, params, budget)
    assert eps["eps0"] == 0.01
    assert eps["eps_star"] == pytest.approx(0.01, abs=1e-15)


# ---------------------------------------------------------------------------
# upper bound


def test_one_step_recovery_report():
    problem, prior = stacked_orthogonal_problem(d=8, s=1, scale=1.2, seed=2)
    cfg = sgd_network_config(1, 2, prior, subset_order="random", seed=0)
    params = sgd_network_params(cfg, problem)
    rep = upper_bound_check(problem, cfg, params, prior, n_runs=100, seed=0)
    assert abs(rep.alpha) <= 1e-12
    assert rep.observed[1] <= 1e-10
    assert rep.per_step_pass and rep.bound_pass
    assert not rep.bound_vacuous


def test_gaussian_per_step_contraction():
    problem, prior = gaussian_sparse_problem(d=16, n=32, s=1, m=2, seed=5)
    cfg = sgd_network_config(8, 2, prior, subset_order="random", seed=7)
    params = sgd_network_params(cfg, problem)
    rep = upper_bound_check(problem, cfg, params, prior, n_runs=1000, seed=11)
    assert rep.kappa == 2
    assert rep.bound_vacuous          # alpha >= 1 on this instance
    assert rep.per_step_pass
    assert rep.observed[-1] < rep.observed[0]


def test_gradient_descent_contraction_and_plateau(rng):
    """m=1, unconstrained: the update is plain gradient descent with the
    enforced step, error contracts by (1 - mu/L) per step, and with noise
    the error plateaus below (eps + delta)/(1 - alpha)."""
    a = rng.standard_normal((12, 6))
    x_true = rng.standard_normal(6)
    prior = ManifoldPrior(All())
    for noise in (np.zeros(12), 0.05 * rng.standard_normal(12)):
        problem = Problem(MatrixOperator(a), a @ x_true + noise, x_true)
        cfg = sgd_network_config(40, 1, prior, subset_order="cyclic")
        params = sgd_network_params(cfg, problem)
        rep = upper_bound_check(problem, cfg, params, prior, n_runs=1,
                                seed=0)
        assert rep.kappa == 1 and rep.alpha < 1
        assert rep.per_step_pass and rep.bound_pass
        if noise.any():
            assert rep.plateau_pass


def test_noisy_stacked_plateau():
    problem, prior = stacked_orthogonal_problem(d=8, s=2, scale=1.1, seed=4)
    w = 0.02 * np.random.default_rng(9).standard_normal(16)
    noisy = Problem(problem.op, problem.op.forward(problem.x_true) + w,
                    problem.x_true)
    cfg = sgd_network_config(6, 2, prior, subset_order="random", seed=1)
    params = sgd_network_params(cfg, noisy)
    rep = upper_bound_check(noisy, cfg, params, prior, n_runs=1000, seed=2)
    assert rep.per_step_pass and rep.bound_pass and rep.plateau_pass


def test_wls_one_step_behavior():
    """Prox-dual network on the stacked instance: the first layer contracts
    the error by exactly sigma/(sigma+1) before projection (the retained
    dual fraction shifts the effective step), pinned here as the actual
    behavior of the prox-dual update."""
    problem, prior = stacked_orthogonal_problem(d=6, s=1, scale=1.0, seed=8)
    cfg = wls_network_config(1, 2, prior, subset_order="random", seed=0)
    params = sgd_network_params(cfg, problem)
    sigma = float(params.sigmas[0])
    rng = np.random.default_rng(3)
    x0 = problem.x_true + rng.standard_normal(6)
    traj = unroll_forward(problem, cfg, params, x0,
                          rng=np.random.default_rng(0))
    # pre-projection factor: 1 - tau*sigma*h*q*L_s = 1 - h = sigma_frac
    frac = sigma / (sigma + 1.0)
    pre = x0 - frac * (x0 - problem.x_true)
    from unrollct.proximal import project_sparse
    expect = project_sparse(pre, 1)
    assert np.allclose(traj.x_final, expect, atol=1e-12)


# ---------------------------------------------------------------------------
# lower bound


def test_lower_bound_gamma_one_vacuous():
    problem, prior, x0 = diag_line_problem()
    cfg = sgd_network_config(5, 1, prior, subset_order="cyclic")
    params = sgd_network_params(cfg, problem)
    rep = lower_bound_check(problem, cfg, params, prior, gamma=1.0, x0=x0)
    assert rep.bound_pass
    assert all(b <= 0 for b in rep.bound[1:])


def test_lower_bound_diag_line_exact():
    problem, prior, x0 = diag_line_problem(t0=0.5)
    cfg = sgd_network_config(6, 1, prior, subset_order="cyclic")
    params = sgd_network_params(cfg, problem)
    for gamma in (0.1, 0.5, 1.0):
        rep = lower_bound_check(problem, cfg, params, prior, gamma, x0=x0)
        assert rep.bound_pass
        assert rep.L_c == pytest.approx(0.5, abs=1e-14)
        assert rep.L_s == pytest.approx(2.0, abs=1e-14)
        for k, obs in enumerate(rep.observed):
            assert obs == pytest.approx(0.5 * 0.75 ** k, abs=1e-12)


def test_lower_bound_vacuous_when_lc_equals_ls(rng):
    """Cone = all of R^d makes L_c = L_s and the curve non-positive."""
    a = rng.standard_normal((8, 4))
    x_true = rng.standard_normal(4)
    problem = Problem(MatrixOperator(a), a @ x_true, x_true)
    prior = ManifoldPrior(All())
    cfg = sgd_network_config(4, 1, prior, subset_order="cyclic")
    params = sgd_network_params(cfg, problem)
    rep = lower_bound_check(problem, cfg, params, prior, gamma=0.5,
                            x0=x_true + 0.3 * rng.standard_normal(4))
    assert rep.bound_pass
    assert all(b <= 1e-12 for b in rep.bound[1:])


def test_lower_bound_rejects_nonconvex():
    problem, prior = gaussian_sparse_problem(d=8, n=16, s=1, m=1, seed=0)
    cfg = sgd_network_config(2, 1, prior, subset_order="cyclic")
    params = sgd_network_params(cfg, problem)
    with pytest.raises(UnsupportedPriorError):
        lower_bound_check(problem, cfg, params, prior, gamma=0.5)


# ---------------------------------------------------------------------------
# structural inequalities


def test_expected_smoothness_inequality(rng):
    problem, _ = gaussian_sparse_problem(d=16, n=32, s=1, m=4, seed=5)
    a = problem.op.materialize()
    scheme = SubsetScheme(4, 32)
    subs = [a[scheme.row_indices(i, 1)] for i in range(4)]
    n, q = 32, 8
    _, _, ls = restricted_constants(a, ManifoldPrior(All()), scheme)
    for _ in range(100):
        e = rng.standard_normal(16)
        lhs = np.mean([np.linalg.norm(s.T @ (s @ e)) ** 2 for s in subs])
        rhs = q ** 2 * ls / n * np.linalg.norm(a @ e) ** 2
        assert lhs <= rhs * (1 + 1e-12)


def test_report_csv_roundtrip(tmp_path):
    problem, prior, x0 = diag_line_problem()
    cfg = sgd_network_config(3, 1, prior, subset_order="cyclic")
    params = sgd_network_params(cfg, problem)
    rep = lower_bound_check(problem, cfg, params, prior, gamma=0.5, x0=x0)
    path = tmp_path / "report.csv"
    rep.write_csv(path)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "k,observed_mean,standard_error,bound"
    assert len(rows) == cfg.n_layers + 2
    assert "PASS" in rep.summary()

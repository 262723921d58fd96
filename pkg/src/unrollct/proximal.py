"""Closed-form proximal maps and Euclidean projections.

These serve as non-learned slot instances in the unrolled networks: the
dual-space proximal step of a weighted least-squares data fit, and exact
projections onto simple constraint sets (sparse supports, l1 balls, boxes,
subspaces).
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class DualProxParams:
    """Per-subset diagonal weights and dual step size.

    ``weights`` has one row per subset (shape (m, q)); ``shared=True`` stores
    a single row used for every subset.
    """

    sigma: float
    weights: np.ndarray
    shared: bool = False

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not np.isfinite(self.weights).all() or (self.weights < 0).any():
            raise ValueError("weights must be finite and >= 0")

    def row(self, i):
        return self.weights[0] if self.shared else self.weights[i]


def hj_diagonals(params, i, sigma=None):
    """Diagonals of the two maps defining the weighted-l2 dual prox.

    For weight w and step sigma:  h = w / (sigma + w),  j = sigma * h.
    h is the retained fraction of the shifted dual point, j scales the data
    term; 0 <= h <= 1 and j = sigma * h hold coordinate-wise.
    """
    w = params.row(i)
    s = params.sigma if sigma is None else sigma
    h = w / (s + w)
    return h, s * h


def dual_prox_step(y, z, b_i, params, i, sigma=None):
    """One dual update: prox of the conjugate weighted-l2 fit at y + sigma*z.

    Returns h*y + sigma*h*z - j*b_i coordinate-wise.  With w = 0 the
    coordinate is frozen at zero contribution.
    """
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    b_i = np.asarray(b_i, dtype=np.float64)
    if y.shape != z.shape or y.shape != b_i.shape:
        raise ValueError("y, z, b_i must share a shape")
    h, j = hj_diagonals(params, i, sigma)
    s = params.sigma if sigma is None else sigma
    h = h.reshape(y.shape)
    j = j.reshape(y.shape)
    return h * y + s * h * z - j * b_i


def soft_threshold(v, lam):
    """Componentwise shrinkage: sign(v) * max(|v| - lam, 0)."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


def project_sparse(v, s):
    """Keep the s largest-magnitude coordinates, zero the rest.

    Ties in magnitude keep the lowest index.
    """
    v = np.asarray(v, dtype=np.float64)
    flat = v.ravel()
    if not 1 <= s <= flat.size:
        raise ValueError("s must be in [1, %d]" % flat.size)
    if s == flat.size:
        return v.copy()
    # stable selection: sort by (-|v|, index) so equal magnitudes keep low index
    order = np.lexsort((np.arange(flat.size), -np.abs(flat)))
    out = np.zeros_like(flat)
    keep = order[:s]
    out[keep] = flat[keep]
    return out.reshape(v.shape)


def project_l1ball(v, radius):
    """Euclidean projection onto {x : ||x||_1 <= radius} (sorted threshold).

    Points within one part in 1e12 of the ball count as inside, which makes
    repeated projection exactly idempotent despite summation round-off.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    v = np.asarray(v, dtype=np.float64)
    a = np.abs(v.ravel())
    if a.sum() <= radius * (1.0 + 1e-12):
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u) - radius
    k = np.arange(1, a.size + 1)
    rho = np.nonzero(u > css / k)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return (np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)).astype(np.float64)


def project_box(v, lo, hi):
    """Clamp coordinates to [lo, hi]."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("requires lo <= hi")
    return np.clip(np.asarray(v, dtype=np.float64), lo, hi)


def project_subspace(v, basis):
    """Orthogonal projection onto span(basis); basis columns orthonormal."""
    basis = np.asarray(basis, dtype=np.float64)
    gram = basis.T @ basis
    if not np.allclose(gram, np.eye(basis.shape[1]), atol=1e-12):
        raise ValueError("basis must be orthonormal")
    v = np.asarray(v, dtype=np.float64)
    flat = v.ravel()
    return (basis @ (basis.T @ flat)).reshape(v.shape)


# ---------------------------------------------------------------------------
# constraint-set descriptors


@dataclass(frozen=True)
class SparseSet:
    s: int

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("s must be >= 1")


@dataclass(frozen=True)
class L1Ball:
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class Box:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError("requires lo <= hi")


class Subspace:
    def __init__(self, basis):
        self.basis = np.asarray(basis, dtype=np.float64)
        gram = self.basis.T @ self.basis
        if not np.allclose(gram, np.eye(self.basis.shape[1]), atol=1e-12):
            raise ValueError("basis must be orthonormal")


class All:
    """Unconstrained set; the projection is the identity."""


@dataclass
class ManifoldPrior:
    """Constraint set with its exact projection and an error budget.

    ``epsilon0`` is the declared projection error bound; built-in descriptors
    project exactly (epsilon0 = 0).  ``perturbation`` is a test hook: a
    callable whose output (clipped to norm <= epsilon0) is added to the exact
    projection.
    """

    descriptor: object
    epsilon0: float = 0.0
    perturbation: object = None

    def is_convex(self):
        return not isinstance(self.descriptor, SparseSet)

    def project(self, v):
        d = self.descriptor
        if isinstance(d, All):
            return np.array(v, dtype=np.float64, copy=True)
        if isinstance(d, SparseSet):
            return project_sparse(v, d.s)
        if isinstance(d, L1Ball):
            return project_l1ball(v, d.radius)
        if isinstance(d, Box):
            return project_box(v, d.lo, d.hi)
        if isinstance(d, Subspace):
            return project_subspace(v, d.basis)
        raise ValueError("unsupported descriptor %r" % (d,))


def apply_prior(prior, v):
    """Projection declared by ``prior``, plus its bounded test perturbation."""
    out = prior.project(v)
    if prior.perturbation is not None:
        e = np.asarray(prior.perturbation(v), dtype=np.float64)
        norm = np.linalg.norm(e)
        if norm > prior.epsilon0 > 0:
            e = e * (prior.epsilon0 / norm)
        elif prior.epsilon0 == 0:
            e = np.zeros_like(e)
        out = out + e.reshape(out.shape)
    return out

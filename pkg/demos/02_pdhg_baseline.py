"""Classic primal-dual hybrid gradient as the non-learned baseline.

Solves the weighted least-squares data fit with an l1 prox on a small
tomography instance and shows the monotone decay of the data residual and
the recovery error.
"""

import numpy as np

from unrollct import (Geometry, Problem, build_projector, pdhg_solve,
                      shepp_logan, soft_threshold)

size = 32
pixel = 2.0 / size
geometry = Geometry(n_angles=48, n_detectors=47, detector_spacing=pixel)
projector = build_projector(geometry, (size, size), pixel_size=pixel)
phantom = shepp_logan(size)
b = projector.forward(phantom)

norm = projector.norm_estimate()
tau = sigma = 0.95 / norm
lam = 1e-4

problem = Problem(projector, b, phantom)
traj = pdhg_solve(problem,
                  prox_r=lambda v, t: soft_threshold(v, lam * t),
                  tau=tau, sigma=sigma, beta=1.0, n_layers=200)

print("k    ||Ax - b||      ||x - truth||")
for k in (0, 1, 2, 5, 10, 20, 50, 100, 200):
    res = np.linalg.norm(projector.forward(traj.xs[k]) - b)
    err = np.linalg.norm(traj.xs[k] - phantom)
    print("%-4d %.6e  %.6e" % (k, res, err))

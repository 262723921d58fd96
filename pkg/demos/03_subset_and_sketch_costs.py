"""Operator-call accounting across the unrolled family.

Runs the full-batch network, the 4-subset network, and the coarse-grid
(sketched) variants on the same measurement with untrained parameters, and
tabulates the full-operator-equivalent calls each needs for 12 layers.
"""

import numpy as np

from unrollct import (Geometry, MeasurementSimConfig, Problem, UnrollConfig,
                      build_projector, count_operator_calls, fbp,
                      init_unroll_params, shepp_logan, simulate_measurements,
                      unroll_forward)

size = 64
pixel = 2.0 / size
geometry = Geometry(n_angles=64, n_detectors=95, detector_spacing=pixel)
projector = build_projector(geometry, (size, size), pixel_size=pixel)
phantom = shepp_logan(size)
_, b = simulate_measurements(phantom, projector,
                             MeasurementSimConfig(i0=7e4, seed=3))
problem = Problem(projector, b, phantom)
x0 = fbp(b, projector)

cases = [
    ("full batch", dict(variant="lpd")),
    ("4 subsets", dict(variant="subset-lpd", m=4)),
    ("4 subsets + sketch", dict(variant="sketch-subset-lpd", m=4,
                                sketch_factor=2, k_switch=8)),
    ("4 subsets + sketch, coarse primal",
     dict(variant="sketch-subset-lpd-coarse", m=4, sketch_factor=2,
          k_switch=8)),
    ("subset SGD form", dict(variant="subset-sgd", m=4)),
]

print("%-36s %8s %14s" % ("network (12 layers)", "calls", "final error"))
for name, kw in cases:
    config = UnrollConfig(n_layers=12, **kw)
    params = init_unroll_params(config, problem, seed=5, hidden_channels=4)
    traj = unroll_forward(problem, config, params, x0)
    err = np.linalg.norm(traj.x_final - phantom)
    print("%-36s %8.1f %14.4f" % (name, count_operator_calls(traj.trace), err))
print("\n(untrained parameters: the error column only shows the runs are "
      "stable; training is demo 04)")

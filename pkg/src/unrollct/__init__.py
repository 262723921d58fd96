"""Unrolled primal-dual reconstruction for tomographic inverse problems,
with angle-subset and coarse-grid (sketched) operator approximations,
end-to-end training, instance adaptation, and a numerical harness for the
estimation-error analysis."""

from .operators import (CallTrace, Geometry, Image, MatrixOperator, Projector,
                        Sinogram, SketchScheme, SubsetScheme, adjoint,
                        build_projector, build_sketched_projector,
                        count_operator_calls, downsample2, forward,
                        subset_adjoint, subset_forward, upsample2)
from .proximal import (All, Box, DualProxParams, L1Ball, ManifoldPrior,
                       SparseSet, Subspace, apply_prior, dual_prox_step,
                       hj_diagonals, project_box, project_l1ball,
                       project_sparse, project_subspace, soft_threshold)
from .nnet import ConvSubnetParams, init_subnet, subnet_backward, subnet_forward
from .unrolling import (Problem, Trajectory, UnrollConfig, UnrollParams,
                        expected_operator_calls, init_unroll_params,
                        pdhg_solve, unroll_backward, unroll_forward)
from .training import (AdamState, AdaptConfig, Dataset, DatasetItem,
                       adapt_instance, adam_step, make_dataset, rotate90,
                       shift_angles, supervised_loss, train)
from .simulate import (MeasurementSimConfig, MetricsRow, disc_phantom, fbp,
                       psnr, shepp_logan, simulate_measurements, ssim)
from .theory import (TheoryReport, cone_sup, estimate_delta,
                     lower_bound_check, measure_epsilons,
                     restricted_constants, upper_bound_check)

__version__ = "0.1.0"

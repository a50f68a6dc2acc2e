"""Heterogeneous mean-field FBSDEs: particle solver, smallness certificates and control."""
from .conditions import ConstantSheet, SmallnessReport, Witness, certify
from .control import (
    ControlField,
    check_maximum_principle,
    evaluate_cost,
    gateaux_check,
    hamiltonian,
    hamiltonian_gradient,
    optimize_control,
    solve_adjoint,
    solve_variational,
    verify_convexity_certificate,
)
from .measures import (
    MeasureKernel,
    TypeAtlas,
    WeightedCloud,
    build_type_atlas,
    empirical_kernel,
    wasserstein2,
    wasserstein2_m,
)
from .benchmark import benchmark_lq, run_benchmark
from .models import CoefficientModel, Dims, GraphonAffineModel, InitialLaw, StatePoint, graphon_linear, lq_forward
from .solver import KernelFlow, PicardOptions, TimeGrid, picard_solve, residual, simulate_noise

__version__ = "0.1.0"

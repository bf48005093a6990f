"""Numerical laboratory for mesoscopic eigenvalue statistics of random band matrices.

The package samples Hermitian band matrices on a d-dimensional discrete
torus, measures smoothed density-density correlations by Monte Carlo, and
compares them against the exact finite-size ladder resummation and its
closed-form power-law asymptotics.
"""

from .lattice import (
    StepProfile,
    CustomProfile,
    TorusGeometry,
    VarianceOperator,
    MomentTensors,
    build_geometry,
    variance_entry,
    dft_symbol,
    trace_power,
    moment_tensors,
    resolvent_entry,
    bound_audit,
)
from .ensemble import (
    BandMatrix,
    sample,
    apply,
    dense,
    nonbacktracking_direct,
    chebyshev_nb,
    nb_vector_stream,
)
from .kernels import (
    TestFunction,
    ExpansionParams,
    make_test_function,
    alpha_k,
    a_n,
    gamma_n,
    smoothed_gamma,
    gamma_tilde,
)
from .estimator import (
    Window,
    CorrelationEstimate,
    smoothed_density_exact,
    smoothed_density_chebyshev,
    mean_density,
    mc_covariance,
)
from .predictor import (
    PredictionReport,
    k_constant,
    v_d_form,
    v_main,
    resolvent_trace_form,
    theta_asymptotic,
    wigner_theta,
    poisson_baseline,
    semicircle_density,
)
from .harness import ExperimentConfig, RunRecord, run, sweep, compare

__version__ = "0.1.0"

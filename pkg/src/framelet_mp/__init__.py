"""Graph framelet transforms and framelet message passing, discrete and continuous."""

__version__ = "0.1.0"

from ._kernels import BACKEND, HAVE_NUMBA
from .chebyshev import ChebyshevFilter, apply_poly, build_approx_operators, fit_chebyshev, hop_reach
from .errors import ConvergenceError, DimensionError, DivergenceError, MaxStepsError, ParseError, StepSizeError
from .graph import (
    Graph,
    LaplacianBundle,
    build_laplacian_bundle,
    dirichlet_energy,
    dirichlet_energy_edges,
    generate_sbm,
    homophily,
    stratified_split,
)
from .io import load_graph_dir, write_graph_dir
from .layers import (
    FmpParams,
    StabilityReport,
    energy_sandwich_check,
    fmp_forward,
    fmp_ode_rhs,
    gcn_forward,
    project_psd,
    stability_probe,
)
from .ode import OdeConfig, Trajectory, convergence_order, integrate
from .spectral import (
    FilterBank,
    FrameletOperatorSet,
    SpectralDecomposition,
    build_exact_operators,
    eig_symmetric,
    get_bank,
    haar_bank,
    laplacian_decomposition,
    nu_bank,
    tightness_report,
)
from .train import ModelParams, TrainConfig, backward, fit, forward_loss, load_checkpoint, optimizer_step, save_checkpoint

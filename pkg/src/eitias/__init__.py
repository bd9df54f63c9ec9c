"""Conductivity imaging from electrode data: complete-electrode-model forward
solver and sparsity-promoting hierarchical Bayesian reconstruction."""

__version__ = "0.1.0"

from .cem import (
    CemSystem,
    CurrentBasis,
    FrameSolution,
    MeasurementSet,
    assemble_system,
    forward_map,
    resistance_matrix,
    solve_frame,
    trigonometric_basis,
)
from .errors import EitError, MeshError, NumericalError, ValidationError
from .hypermodel import GibbsBreakdown, HyperModel, gibbs_energy, hybrid_switch, update_theta
from .ias import (
    ComparisonReport,
    HybridConfig,
    IasConfig,
    IasState,
    compare_map_qmap,
    run_hybrid,
    run_ias,
)
from .lsq import (
    BACKENDS,
    LinearizedProblem,
    SolveReport,
    solve,
    solve_adjoint_direct,
    solve_cgls_early_stop,
    solve_lanczos,
    solve_normal_direct,
)
from .mesh import (
    ElectrodeLayout,
    IncrementOperator,
    Mesh,
    SubdomainMap,
    WeightedPseudoinverse,
    apply_pseudoinverse,
    build_disc_mesh,
    build_increment_operator,
    load_mesh,
    mark_subdomain,
    mesh_id,
    save_mesh,
)
from .phantom import (
    DiscInclusion,
    PhantomSpec,
    RectangleInclusion,
    rasterize_phantom,
    simulate_measurement,
)
from .sensitivity import (
    ConvexityReport,
    Jacobian,
    compute_vartheta,
    convexity_probe,
    jacobian_adjoint,
    second_directional_derivative,
)

__all__ = [name for name in dir() if not name.startswith("_")]

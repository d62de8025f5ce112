"""Two-module surface-trap geometry and electrostatics."""
from .electrostatics import BelowPlaneError, rectangle_basis, unit_potential
from .layout import (
    Electrode,
    LayoutError,
    LayoutParams,
    TrapLayout,
    build_two_module_layout,
    dumps_layout,
    loads_layout,
)
from .trap import (
    GAP_MODELS,
    YB171,
    YB174,
    cross_section_saddle,
    effective_rects,
    DepthResult,
    IonSpecies,
    NoMinimumError,
    NullProfile,
    RfDrive,
    SecularResult,
    TrapModel,
    field_and_hessian,
    frequencies_from_hessian,
    pseudopotential,
    pseudopotential_quadrature,
    rf_null_profile,
    secular_frequencies,
    trap_depth_and_barrier,
    two_rail_null_height,
    with_misalignment,
)

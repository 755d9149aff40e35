"""Numerical laboratory for the grand-canonical cubic Gibbs measure on dilated 2D tori."""

__version__ = "0.1.0"

from .lattice import (
    Field,
    FourierLattice,
    SeedSpec,
    build_lattice,
    load_field,
    lp_norm,
    project,
    rescale_down,
    rescale_up,
    sample_gff,
    save_field,
    sobolev_norm,
    tadpole,
    zero_field,
)
from .wick import (
    InteractionParams,
    PotentialValue,
    counterterm,
    drift_decomposition,
    hermite,
    interaction,
    recenter,
    wick_cube,
    wick_square,
)

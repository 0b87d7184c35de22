"""Numerical laboratory for finite-time degeneration of the normalized
Kahler-Ricci flow on cohomogeneity-one ruled surfaces and flat tori.

The package splits into an exact layer and a numerical layer.  The exact
layer (`picard`) does rational intersection theory on a small surface
catalog: nef thresholds, singular times, limit classes and contraction
types come out as exact fractions.  The numerical layer reduces the flow
to a parabolic scalar equation for an ansatz-invariant potential on a
one-dimensional grid (`profiles`, `ansatz`), integrates it (`flow`),
certifies the run against analytic barriers and identities
(`certificates`), and post-processes the terminal state into a
degeneration report (`singularity`).  The `cli` module wires those into
batch subcommands driven by TOML/JSON configs.
"""

from .picard import (
    DivisorClass,
    SurfaceModel,
    ContractionInfo,
    catalog,
    classify_contraction,
    intersect,
    is_ample,
    is_nef,
    maximal_time,
    nef_threshold,
)

__all__ = [
    "DivisorClass",
    "SurfaceModel",
    "ContractionInfo",
    "catalog",
    "classify_contraction",
    "intersect",
    "is_ample",
    "is_nef",
    "maximal_time",
    "nef_threshold",
]

__version__ = "0.1.0"

"""Terminal-state diagnostics: degeneracy locus, decay exponent, pushforward.

At the finite stopping time the metric determinant vanishes somewhere, and
where it vanishes identifies what got contracted.  In the fibered ansatz
the exceptional curve of a divisorial contraction sits at the rho -> -inf
end of the cylinder, so its node set clusters at the left edge; a
fiber-type collapse kills the fiber coefficient U'' at every node at once.
Ahead of the locus the determinant admits the comparison

    det(g(T)) / det(g0)  >~  B' e^{alpha rho}    (rho -> -inf),

where alpha is the discrepancy of the contracted divisor (the section norm
of the exceptional divisor grows like e^rho in these coordinates).  A
bounded reweighting of the section metric moves the constant B', never the
exponent, so the slope of log det-ratio against rho is the quantity worth
fitting; the intercept and residual are reported, not asserted.

For divisorial contractions the flow metric should converge, away from the
exceptional set, to something that lives on the blown-down surface: the
probe samples late snapshots and certifies that det(g(t))/det(g0(t)) stays
inside a positive interval while the downstream potential keeps bounded
first and second difference quotients on rho >= rho_cut.  Finite
differences certify low-order regularity only; no smoothness claim beyond
second differences is made.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ansatz import Scenario, det_ratio
from .flow import FlowRun, FlowState

LOCUS_THRESHOLD_FACTOR = 1e-3
# fraction of flagged nodes that upgrades the classification to "everywhere"
EVERYWHERE_FRACTION = 0.9
# edge quarter of the grid counts as "near" that end
EDGE_FRACTION = 0.25

SLOPE_HALF_WIDTH = 0.2
RESIDUAL_TOL = 0.05


@dataclass(frozen=True)
class LocusReport:
    """Nodes where the terminal determinant has effectively vanished."""

    t: float
    nodes: tuple
    classification: str     # empty | near -R end | near +R end | interior
    #                         | everywhere
    threshold: float
    det_ratio_min: float

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "nodes": list(self.nodes),
            "classification": self.classification,
            "threshold": self.threshold,
            "det_ratio_min": self.det_ratio_min,
        }


@dataclass(frozen=True)
class DecayFit:
    """Least-squares exponent of the determinant decay at the left end."""

    window: tuple
    slope: float
    intercept: float
    residual: float          # rms deviation of the fit, never hidden
    predicted_exponent: float
    nodes_used: int

    @property
    def passed(self) -> bool:
        return (abs(self.slope - self.predicted_exponent) <= SLOPE_HALF_WIDTH
                and self.residual <= RESIDUAL_TOL)

    def as_dict(self) -> dict:
        return {
            "window": list(self.window),
            "slope": self.slope,
            "intercept": self.intercept,
            "residual": self.residual,
            "predicted_exponent": self.predicted_exponent,
            "nodes_used": self.nodes_used,
            "passed": self.passed,
        }


@dataclass(frozen=True)
class PushforwardProbe:
    """Downstream boundedness evidence across late snapshots."""

    t_samples: tuple
    bounds: tuple            # [B0, B1] of det(g(t))/det(g0(t)) over samples
    rho_cut: float
    d1_sup: float
    d2_sup: float

    @property
    def passed(self) -> bool:
        return (self.bounds[0] > 0.0 and math.isfinite(self.bounds[1])
                and math.isfinite(self.d1_sup)
                and math.isfinite(self.d2_sup))

    def as_dict(self) -> dict:
        return {
            "t_samples": list(self.t_samples),
            "bounds": list(self.bounds),
            "rho_cut": self.rho_cut,
            "d1_sup": self.d1_sup,
            "d2_sup": self.d2_sup,
            "passed": self.passed,
        }


def _terminal_state(run: FlowRun, t: Optional[float]) -> FlowState:
    return run.final if t is None else run.snapshot_at(t)


def terminal_det_ratio(scenario: Scenario, state: FlowState) -> np.ndarray:
    """det(g)/det(g0) against the fixed initial metric, nodewise."""
    return det_ratio(state.g, scenario.reference)


def locate_S0(run: FlowRun, threshold: Optional[float] = None,
              t: Optional[float] = None) -> LocusReport:
    """Nodes of the (near-)vanishing terminal determinant, classified.

    The default threshold is relative, 1e-3 times the median ratio, so a
    healthy mid-flow state reports an empty locus while a collapsed end
    stands out by orders of magnitude.
    """
    state = _terminal_state(run, t)
    ratio = terminal_det_ratio(run.scenario, state)
    if threshold is None:
        threshold = LOCUS_THRESHOLD_FACTOR * float(np.median(ratio))
    flagged = np.flatnonzero(ratio < threshold)
    n = run.scenario.grid.n
    if flagged.size == 0:
        kind = "empty"
    elif flagged.size >= EVERYWHERE_FRACTION * n:
        kind = "everywhere"
    elif flagged.max() < EDGE_FRACTION * n:
        kind = "near -R end"
    elif flagged.min() >= (1.0 - EDGE_FRACTION) * n:
        kind = "near +R end"
    else:
        kind = "interior"
    return LocusReport(
        t=state.t,
        nodes=tuple(int(i) for i in flagged),
        classification=kind,
        threshold=float(threshold),
        det_ratio_min=float(np.min(ratio)),
    )


def fit_decay(run: FlowRun, window: tuple = (-12.0, -6.0),
              t: Optional[float] = None) -> DecayFit:
    """Fit log det-ratio ~ slope * rho + intercept on the left window.

    The window must sit inside [-R, -R/3]: close enough to the contracted
    end for the comparison regime, far enough from the truncation boundary
    that the one-sided stencil rows do not pollute the sample.  Nodes whose
    determinant has been driven nonpositive (frozen terminal states carry
    at most a few) are dropped with a warning rather than poisoning the
    logarithm.
    """
    scenario = run.scenario
    if scenario.contraction.kind != "divisorial":
        raise ValueError(
            f"decay fit expects a divisorial contraction, got "
            f"{scenario.contraction.kind!r}"
        )
    half_width = scenario.grid.half_width
    lo, hi = float(window[0]), float(window[1])
    if not (-half_width <= lo < hi <= -half_width / 3.0):
        raise ValueError(
            f"fit window {window} must sit inside "
            f"[{-half_width}, {-half_width / 3.0}]"
        )
    state = _terminal_state(run, t)
    ratio = terminal_det_ratio(scenario, state)
    rho = scenario.grid.nodes
    mask = (rho >= lo) & (rho <= hi)
    good = mask & (ratio > 0.0)
    dropped = int(np.count_nonzero(mask) - np.count_nonzero(good))
    if dropped:
        warnings.warn(
            f"decay window dropped {dropped} nonpositive node(s)",
            RuntimeWarning, stacklevel=2,
        )
    x = rho[good]
    y = np.log(ratio[good])
    if x.size < 8:
        raise ValueError(f"only {x.size} usable nodes in window {window}")
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.sqrt(np.mean((slope * x + intercept - y) ** 2)))
    alpha = scenario.contraction.discrepancy
    return DecayFit(
        window=(lo, hi),
        slope=float(slope),
        intercept=float(intercept),
        residual=residual,
        predicted_exponent=float(alpha),
        nodes_used=int(x.size),
    )


def probe_pushforward(run: FlowRun, rho_cut: float = 0.0,
                      t_samples: Optional[tuple] = None) -> PushforwardProbe:
    """Boundedness of the late-time metric against the moving reference.

    Only the divisorial case pushes forward to a smooth downstream model;
    a fiber-type collapse degenerates along every fiber and is rejected.
    By default the probe takes every clean snapshot in the last 0.25 of
    the lifespan, so the sample times are set by the checkpoint cadence
    and match across resolutions.
    """
    scenario = run.scenario
    if scenario.contraction.kind != "divisorial":
        raise ValueError(
            f"pushforward probe expects a divisorial contraction, got "
            f"{scenario.contraction.kind!r}"
        )
    if t_samples is None:
        t_lo = scenario.singular_time - 0.25
        states = [s for s in run.snapshots
                  if s.t >= t_lo and not s.degenerate]
    else:
        states = [run.snapshot_at(float(t)) for t in t_samples]
    if not states:
        raise ValueError("no clean snapshots in the probe window")
    mask = scenario.grid.nodes >= rho_cut
    if not np.any(mask):
        raise ValueError(f"rho_cut = {rho_cut} leaves no downstream nodes")
    b0, b1 = math.inf, -math.inf
    d1_sup = d2_sup = 0.0
    grid = scenario.grid
    for s in states:
        ref_b, ref_f = scenario.reference_coefficients(s.t)
        ratio = s.g.det() / (ref_b * ref_f)
        b0 = min(b0, float(np.min(ratio)))
        b1 = max(b1, float(np.max(ratio)))
        pot = s.g.potential.values
        d1_sup = max(d1_sup, float(np.max(np.abs(grid.d1(pot)[mask]))))
        d2_sup = max(d2_sup, float(np.max(np.abs(grid.d2(pot)[mask]))))
    return PushforwardProbe(
        t_samples=tuple(s.t for s in states),
        bounds=(b0, b1),
        rho_cut=float(rho_cut),
        d1_sup=d1_sup,
        d2_sup=d2_sup,
    )

"""Cohomogeneity-one (1,1)-geometry reduced to profiles of one variable.

On a Hirzebruch surface every U(2)-invariant (1,1)-form is determined by two
profiles of the fiber log-norm coordinate rho,

    alpha = p(rho) * (k omega_base) + q(rho) * drho ^ dc rho,

and alpha is closed exactly when q = p'.  Kahler metrics in this ansatz come
from a momentum potential U: the metric coefficients are (U', U'') and
positivity of the pair is positivity of the metric.  Two classical pairings
read the cohomology class off the profile ends,

    <alpha, negative section> = k p(-R),      <alpha, fiber> = p(R) - p(-R),

and inverting the exact intersection pairing against those two rays recovers
rational class coefficients from measured endpoint data.  The volume form is
proportional to U' U'' and a direct coordinate computation gives

    log det g = log(U' U'') - rho + (k - 2) log(1 + |z|^2) + const,

so the invariant Ricci form has base coefficient

    p_Ric = -d/drho [ log(U' U'') - rho ] - (k - 2)/k,

whose endpoint limits reproduce the anticanonical pairings (2 - k against the
negative section once multiplied by k, and 2 across the fiber).

The flat-torus scenario reuses the same plumbing in degenerate form: both
reference coefficients are the constant polarization scale, the drift form is
minus the metric (K = 0 makes the reference family a pure rescaling), the
scalar source vanishes identically, and perturbation potentials act through
the plain second derivative on the base coefficient only.

Scenario construction packages a catalog surface and an ample class into the
data the parabolic solver consumes: an analytic reference metric whose
endpoint slopes match the class pairings, an exactly closed semipositive
representative of the limit class, the drift form eta with
g0(t) = g0 + a(t) eta, the scalar source f with -g0 - Ric(g0) = eta + ddc f
gauged to volume-weighted mean zero, and the base volume weight integrating
to the cohomological volume A^2/2.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.special import expit

from .picard import (
    ContractionInfo,
    DivisorClass,
    SurfaceModel,
    classify_contraction,
    intersect,
    is_ample,
    self_intersection,
)
from .profiles import Profile, RhoGrid

CLOSEDNESS_TOL = 1e-6


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class InvariantForm:
    """Closed invariant (1,1)-form stored as (base, fiber) profiles.

    Forms built through from_base / from_potential satisfy fiber = d1(base)
    exactly, so the discrete closedness defect is zero by construction.
    """

    base: Profile
    fiber: Profile

    def __post_init__(self):
        self.base._check_grid(self.fiber)

    @property
    def grid(self) -> RhoGrid:
        return self.base.grid

    @classmethod
    def from_base(cls, base: Profile) -> "InvariantForm":
        return cls(base, base.derivative())

    @classmethod
    def from_potential(cls, potential: Profile) -> "InvariantForm":
        return cls.from_base(potential.derivative())

    @classmethod
    def zero(cls, grid: RhoGrid) -> "InvariantForm":
        z = Profile.constant(grid, 0.0)
        return cls(z, z)

    def closedness_defect(self) -> float:
        return self.fiber.sup_diff(self.base.derivative())

    def is_closed(self, tol: float = CLOSEDNESS_TOL) -> bool:
        return self.closedness_defect() <= tol

    def is_nonnegative(self, floor: float = 0.0) -> bool:
        return self.base.min >= floor and self.fiber.min >= floor

    def __add__(self, other: "InvariantForm") -> "InvariantForm":
        return InvariantForm(self.base + other.base, self.fiber + other.fiber)

    def __sub__(self, other: "InvariantForm") -> "InvariantForm":
        return InvariantForm(self.base - other.base, self.fiber - other.fiber)

    def scaled(self, factor: float) -> "InvariantForm":
        return InvariantForm(self.base.scaled(factor), self.fiber.scaled(factor))


@dataclass(frozen=True)
class MetricProfile:
    """Invariant Kahler metric: momentum potential plus coefficient arrays.

    ``base`` and ``fiber`` hold U' and U''.  Constructors may supply them
    analytically (preferred when the potential comes from a closed-form
    family; the pair then carries no differencing error), otherwise they are
    filled with grid derivatives of the potential values.
    """

    geometry: str  # "hirzebruch" | "torus"
    index: int     # Hirzebruch index k (0 for the torus)
    potential: Profile
    base: Profile
    fiber: Profile

    def __post_init__(self):
        self.potential._check_grid(self.base)
        self.potential._check_grid(self.fiber)

    @classmethod
    def from_potential_values(cls, geometry: str, index: int,
                              potential: Profile) -> "MetricProfile":
        base = potential.derivative()
        return cls(geometry, index, potential, base, base.derivative())

    @property
    def grid(self) -> RhoGrid:
        return self.potential.grid

    def margin(self) -> float:
        """Smallest metric coefficient anywhere: positivity is margin > 0."""
        return min(self.base.min, self.fiber.min)

    def is_positive(self, floor: float = 0.0) -> bool:
        return self.margin() > floor

    def det(self) -> np.ndarray:
        return self.base.values * self.fiber.values

    def endpoint_slopes(self) -> tuple:
        return (float(self.base.values[0]), float(self.base.values[-1]))

    def as_form(self) -> InvariantForm:
        # The metric's own coefficient pair; closed only up to O(h^2) when
        # the fiber coefficient is analytic rather than d1(base).
        return InvariantForm(self.base, self.fiber)


def form_of_potential(grid: RhoGrid, values: np.ndarray) -> InvariantForm:
    """ddc of an invariant potential: base = DF, fiber = D(DF), exactly closed."""
    return InvariantForm.from_potential(Profile(grid, values))


def potential_of_form(form: InvariantForm, gauge: float = 0.0,
                      weight: Optional[np.ndarray] = None,
                      tol: float = CLOSEDNESS_TOL) -> Profile:
    """Invert ddc on a closed form (up to the additive gauge constant).

    The potential is the cumulative integral of the base coefficient shifted
    so its (optionally weighted) mean equals ``gauge``.  Rejects forms whose
    closedness defect exceeds ``tol``: a non-closed coefficient pair has no
    potential and silently integrating it would hide the inconsistency.
    """
    defect = form.closedness_defect()
    if defect > tol:
        raise ValueError(
            f"form is not closed: fiber coefficient differs from the "
            f"derivative of the base coefficient by {defect:.3e} (tol {tol:.1e})"
        )
    raw = form.base.antiderivative()
    return raw.shifted(gauge - raw.mean(weight))


def det_ratio(g: MetricProfile, ref: MetricProfile) -> np.ndarray:
    """Nodewise determinant ratio det(g) / det(ref) of two ansatz metrics."""
    g.potential._check_grid(ref.potential)
    return g.det() / ref.det()


def ricci_form(g: MetricProfile) -> InvariantForm:
    """Invariant Ricci form of an ansatz metric.

    Hirzebruch: p_Ric = -D[log(U'U'') - rho] - (k - 2)/k, fiber = D(p_Ric).
    Torus: the flat reference has constant coefficients and Ricci zero; for
    a general invariant perturbation the curvature potential is -log det and
    the form is its ddc image (base = -D2 log det, fiber = 0).
    """
    grid = g.grid
    log_det = np.log(g.det())
    if g.geometry == "torus":
        base = Profile(grid, -grid.d2(log_det))
        return InvariantForm(base, Profile.constant(grid, 0.0))
    k = g.index
    curvature_potential = log_det - grid.nodes
    p_ric = -grid.d1(curvature_potential) - (k - 2) / k
    return InvariantForm.from_base(Profile(grid, p_ric))


def _pairings(surface: SurfaceModel, base_values: np.ndarray) -> list:
    """Measured pairings against the catalog extremal rays, ray order."""
    k = surface.hirzebruch_index
    if surface.kind != "hirzebruch" or k < 1:
        raise ValueError(
            f"profile pairings need a ruled surface with a negative section, "
            f"got {surface.name}"
        )
    left = float(base_values[0])
    right = float(base_values[-1])
    # Ray order matches the catalog: negative section first, fiber second.
    return [k * left, right - left]


def class_of(obj, surface: SurfaceModel) -> list:
    """Float class coefficients of a form or metric, via endpoint pairings.

    The measured pairings against the extremal rays are paired back through
    the exact intersection matrix, so the only float error is the profile's
    own endpoint error (truncation e^-R plus differencing).
    """
    base_values = obj.base.values
    if surface.kind == "torus":
        return [0.5 * (float(np.mean(base_values))
                       + float(np.mean(obj.fiber.values)))]
    measured = _pairings(surface, base_values)
    rays = [ray for _, ray in surface.curve_rays]
    basis = [DivisorClass([1 if j == i else 0 for j in range(surface.rank)])
             for i in range(surface.rank)]
    gram = np.array(
        [[float(intersect(b, ray, surface)) for b in basis] for ray in rays]
    )
    return list(np.linalg.solve(gram, np.array(measured)))


@dataclass(frozen=True)
class Scenario:
    """Everything the parabolic solver needs about one flow problem.

    The reference family is g0(t) = g0 + a(t) * drift with a(t) = 1 - e^-t;
    for finite nef threshold r this splits as (1/r)(a(t) eta_L + b(t) g0)
    with b(t) = (r+1)e^-t - 1, so positivity of the family fails exactly at
    b(T) = 0.  ``source`` is the scalar f with -g0 - Ric(g0) = drift + ddc f,
    gauged to volume-weighted mean zero.
    """

    surface: SurfaceModel
    ample: DivisorClass
    grid: RhoGrid
    contraction: ContractionInfo
    reference: MetricProfile
    limit_form: Optional[InvariantForm]   # eta_L, None when r is infinite
    drift_base: np.ndarray
    drift_fiber: np.ndarray
    source: Profile
    volume_weight: np.ndarray
    dimension: int = 2

    @property
    def kind(self) -> str:
        return self.surface.kind

    def fingerprint(self) -> str:
        """Digest identifying the discrete problem, including the gauge.

        Ledgers and certificates carry this so that bound checks cannot be
        run against data from a different scenario; the source digest keeps
        gauge-shifted variants distinct even on the same class and grid.
        """
        payload = "|".join([
            self.surface.name,
            ",".join(self.ample.to_strings()),
            repr(self.grid.half_width),
            str(self.grid.n),
            str(self.dimension),
        ]).encode()
        digest = hashlib.sha256(payload + self.source.values.tobytes())
        return digest.hexdigest()[:16]

    @property
    def threshold(self) -> Optional[Fraction]:
        return self.contraction.r

    @property
    def singular_time(self) -> float:
        return self.contraction.time

    def initial_volume(self) -> float:
        return float(self_intersection(self.ample, self.surface)) / 2.0

    def cohomological_volume(self, t: float) -> float:
        """Volume A(t)^2 / 2 of the moving class, from the exact lattice."""
        a_t = path_coefficients(self, t)
        gram = [[float(x) for x in row] for row in self.surface.intersection]
        g = np.array(gram)
        v = np.array(a_t)
        return 0.5 * float(v @ g @ v)

    def reference_coefficients(self, t: float) -> tuple:
        """(base, fiber) arrays of the reference family g0(t)."""
        a = -math.expm1(-t)
        base = self.reference.base.values + a * self.drift_base
        fiber = self.reference.fiber.values + a * self.drift_fiber
        return base, fiber

    def coefficients(self, t: float, u: np.ndarray) -> tuple:
        """(base, fiber) arrays of g(t) = g0(t) + ddc u."""
        base, fiber = self.reference_coefficients(t)
        if self.kind == "torus":
            return base + self.grid.d2(u), fiber.copy()
        return base + self.grid.d1(u), fiber + self.grid.d2(u)

    def metric_at(self, t: float, u: np.ndarray) -> MetricProfile:
        base, fiber = self.coefficients(t, u)
        potential = self._potential_at(t, u)
        geometry = "torus" if self.kind == "torus" else "hirzebruch"
        return MetricProfile(geometry, self.surface.hirzebruch_index,
                             potential, Profile(self.grid, base),
                             Profile(self.grid, fiber))

    def _potential_at(self, t: float, u: np.ndarray) -> Profile:
        a = -math.expm1(-t)
        drift_potential = self.grid.cumulative(self.drift_base)
        vals = self.reference.potential.values + a * drift_potential + u
        return Profile(self.grid, vals)

    def log_reference_det_ratio(self, t: float) -> np.ndarray:
        """log det(g0(t)) - log det(g0), nodewise."""
        base, fiber = self.reference_coefficients(t)
        return np.log(base * fiber) - np.log(self.reference.det())

    def gauge_shifted(self, h: np.ndarray) -> "Scenario":
        """Replace the drift representative eta by eta - ddc h, f by f + h.

        The shift uses the solver's own derivative operators, so the two
        flows agree node-for-node up to time discretization alone.
        """
        grid = self.grid
        if self.kind == "torus":
            d_base = grid.d2(h)
            d_fiber = np.zeros(grid.n)
        else:
            d_base = grid.d1(h)
            d_fiber = grid.d2(h)
        return Scenario(
            surface=self.surface, ample=self.ample, grid=grid,
            contraction=self.contraction, reference=self.reference,
            limit_form=self.limit_form,
            drift_base=self.drift_base - d_base,
            drift_fiber=self.drift_fiber - d_fiber,
            source=Profile(grid, self.source.values + h),
            volume_weight=self.volume_weight,
            dimension=self.dimension,
        )


def path_coefficients(scenario: Scenario, t: float) -> list:
    """Float coefficients of the moving class A(t) = A + a(t)(K - A)."""
    a = -math.expm1(-t)
    return [
        float(c) + a * (float(k) - float(c))
        for c, k in zip(scenario.ample.coeffs, scenario.surface.canonical.coeffs)
    ]


def _hirzebruch_scenario(surface: SurfaceModel, ample: DivisorClass,
                         grid: RhoGrid) -> Scenario:
    k = surface.hirzebruch_index
    if k < 1:
        raise ValueError(
            "flow scenarios need a negative section: use F<k> with k >= 1"
        )
    info = classify_contraction(ample, surface)
    neg_ray = surface.curve_rays[0][1]
    fiber_ray = surface.curve_rays[1][1]

    # Endpoint slopes of the momentum potential are pinned by the class:
    # U'(-R) = A.C0 / k and U'(R) - U'(-R) = A.fiber.
    left = float(intersect(ample, neg_ray, surface)) / k
    across = float(intersect(ample, fiber_ray, surface))
    rho = grid.nodes
    sig = sigmoid(rho)
    dsig = sig * (1.0 - sig)
    u0_vals = left * rho + across * softplus(rho)
    reference = MetricProfile(
        "hirzebruch", k,
        Profile(grid, u0_vals),
        Profile(grid, left + across * sig),
        Profile(grid, across * dsig),
    )

    # Exactly closed canonical representative of the limit class L = A + rK:
    # its endpoint data come from the same two pairings.
    r = info.r
    limit = info.limit_class
    l_left = float(intersect(limit, neg_ray, surface)) / k
    l_across = float(intersect(limit, fiber_ray, surface))
    limit_base = Profile(grid, l_left + l_across * sig)
    limit_form = InvariantForm.from_base(limit_base)

    # Drift eta = (1/r)(eta_L - (r+1) g0): the split form of g0(t).
    rr = float(r)
    drift_base = (limit_form.base.values - (rr + 1.0) * reference.base.values) / rr
    drift_fiber = (limit_form.fiber.values - (rr + 1.0) * reference.fiber.values) / rr

    # Scalar source: -g0 - Ric(g0) = eta + ddc f, f of weighted mean zero.
    weight = k * reference.det()
    ric = ricci_form(reference)
    gap_base = -reference.base.values - ric.base.values - drift_base
    gap = InvariantForm.from_base(Profile(grid, gap_base))
    source = potential_of_form(gap, gauge=0.0, weight=weight)

    return Scenario(
        surface=surface, ample=ample, grid=grid, contraction=info,
        reference=reference, limit_form=limit_form,
        drift_base=drift_base, drift_fiber=drift_fiber,
        source=source, volume_weight=weight,
    )


def _torus_scenario(surface: SurfaceModel, ample: DivisorClass,
                    grid: RhoGrid) -> Scenario:
    info = classify_contraction(ample, surface)
    scale = float(ample.coeffs[0])
    const = Profile.constant(grid, scale)
    # Momentum language degenerates: the flat reference has constant
    # coefficients and the perturbation acts through D2 on the base slot.
    reference = MetricProfile("torus", 0, Profile.constant(grid, 0.0),
                              const, const)
    weight = np.full(grid.n, scale * scale / (2.0 * grid.half_width))
    return Scenario(
        surface=surface, ample=ample, grid=grid, contraction=info,
        reference=reference, limit_form=None,
        drift_base=-reference.base.values,
        drift_fiber=-reference.fiber.values,
        source=Profile.constant(grid, 0.0),
        volume_weight=weight,
    )


def build_scenario(surface: SurfaceModel, ample: DivisorClass,
                   grid: RhoGrid) -> Scenario:
    """Assemble the flow scenario for an ample class on a catalog surface."""
    if ample.rank != surface.rank:
        raise ValueError(
            f"ample class rank {ample.rank} does not match {surface.name}"
        )
    if not is_ample(ample, surface):
        raise ValueError(
            f"class {ample.to_strings()} is not ample on {surface.name}"
        )
    if surface.kind == "hirzebruch":
        return _hirzebruch_scenario(surface, ample, grid)
    if surface.kind == "torus":
        return _torus_scenario(surface, ample, grid)
    raise ValueError(
        f"no flow scenario on surface kind {surface.kind!r} "
        f"(the plane only supports exact classification)"
    )


def random_logistic_metric(grid: RhoGrid, index: int, seed: int,
                           terms: int = 3) -> MetricProfile:
    """Random positive ansatz metric from a logistic mixture, for tests.

    U' = w0 + sum_i w_i sigmoid(rho - c_i) with positive weights keeps both
    coefficients positive for every draw, and the analytic derivatives are
    attached so the profile carries no differencing error.
    """
    rng = np.random.default_rng(seed)
    w0 = rng.uniform(0.5, 2.0)
    weights = rng.uniform(0.2, 1.5, size=terms)
    centers = rng.uniform(-5.0, 5.0, size=terms)
    rho = grid.nodes
    base = np.full(grid.n, w0)
    fiber = np.zeros(grid.n)
    potential = w0 * rho
    for w, c in zip(weights, centers):
        s = sigmoid(rho - c)
        base = base + w * s
        fiber = fiber + w * s * (1.0 - s)
        potential = potential + w * softplus(rho - c)
    return MetricProfile("hirzebruch", index, Profile(grid, potential),
                         Profile(grid, base), Profile(grid, fiber))

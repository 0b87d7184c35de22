"""Exact intersection theory on a small catalog of projective surfaces.

Divisor classes live in the Neron-Severi lattice of a catalog surface and are
stored with exact rational coefficients, so nef thresholds, limit classes and
contraction types are decided with no floating-point tolerance at all.  The
catalog carries, per surface, the intersection matrix, the canonical class,
and the finitely many extremal curve rays that cut out the nef cone:

    P2             rank 1, basis (line),            K = -3 line
    Hirzebruch(1)  rank 2, basis (H, E),            K = -3H + E
    Hirzebruch(k)  rank 2, basis (C0, fiber), k!=1, K = -2 C0 - (k+2) fiber
    Torus(2)       rank 1, basis (theta),           K = 0

Hirzebruch(1) is the blowup of P2 at a point and uses the pulled-back
hyperplane H and the exceptional curve E, so its two extremal rays are E and
the fiber H - E.  Torus(2) is a product of two elliptic curves tracked through
its principal polarization ray theta with theta^2 = 2; the canonical class
vanishes, so the flow on it is global.

Along the normalized flow the Kahler class moves on the straight path

    A(t) = A + a(t) (K - A),        a(t) = 1 - exp(-t),

which stays ample exactly while a(t) < r / (r + 1) where r is the nef
threshold max{s >= 0 : A + s K nef}.  The maximal existence time is therefore
T = log(r + 1), the limit class is L = A + r K, and the ray L kills decides
the degeneration type: a curve of negative square contracts divisorially, a
square-zero ray collapses a fibration, and L = 0 shrinks the whole surface to
a point.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

Rational = Union[Fraction, int, str]


def _frac(x: Rational) -> Fraction:
    if isinstance(x, Fraction):
        return x
    return Fraction(x)


@dataclass(frozen=True)
class DivisorClass:
    """A divisor class with exact rational coefficients in the catalog basis."""

    coeffs: tuple

    def __init__(self, coeffs: Sequence[Rational]):
        object.__setattr__(self, "coeffs", tuple(_frac(c) for c in coeffs))

    @property
    def rank(self) -> int:
        return len(self.coeffs)

    def is_zero(self) -> bool:
        return all(c == 0 for c in self.coeffs)

    def __add__(self, other: "DivisorClass") -> "DivisorClass":
        self._check_rank(other)
        return DivisorClass([a + b for a, b in zip(self.coeffs, other.coeffs)])

    def __sub__(self, other: "DivisorClass") -> "DivisorClass":
        self._check_rank(other)
        return DivisorClass([a - b for a, b in zip(self.coeffs, other.coeffs)])

    def scaled(self, factor: Rational) -> "DivisorClass":
        f = _frac(factor)
        return DivisorClass([f * c for c in self.coeffs])

    def _check_rank(self, other: "DivisorClass") -> None:
        if self.rank != other.rank:
            raise ValueError(
                f"divisor classes live in different lattices "
                f"(rank {self.rank} vs {other.rank})"
            )

    def to_strings(self) -> list:
        return [str(c) for c in self.coeffs]

    @staticmethod
    def from_strings(parts: Sequence[str]) -> "DivisorClass":
        return DivisorClass([Fraction(p.strip()) for p in parts])

    def as_floats(self) -> list:
        return [float(c) for c in self.coeffs]


@dataclass(frozen=True)
class SurfaceModel:
    """Catalog surface: lattice, canonical class, extremal rays, model data.

    ``curve_rays`` lists (name, class) for the finitely many extremal curve
    rays; a class is nef exactly when it pairs >= 0 against every listed ray.
    ``discrepancies`` maps the name of a negative ray to the discrepancy of
    the divisorial contraction collapsing it.  ``hirzebruch_index`` is the
    self-intersection -k of the negative section for ruled entries (0 for P2
    and the torus), and ``kind`` picks the scenario geometry downstream.
    """

    name: str
    kind: str  # "plane" | "hirzebruch" | "torus"
    basis_names: tuple
    intersection: tuple  # tuple of tuples of Fraction
    canonical: DivisorClass
    curve_rays: tuple  # ((name, DivisorClass), ...)
    discrepancies: tuple  # ((ray name, Fraction), ...)
    hirzebruch_index: int = 0

    @property
    def rank(self) -> int:
        return len(self.basis_names)

    def discrepancy_of(self, ray_name: str) -> Optional[Fraction]:
        for name, value in self.discrepancies:
            if name == ray_name:
                return value
        return None


def intersect(a: DivisorClass, b: DivisorClass, surface: SurfaceModel) -> Fraction:
    """Exact intersection number a . b on the given surface."""
    if a.rank != surface.rank or b.rank != surface.rank:
        raise ValueError(
            f"divisor rank mismatch: surface {surface.name} has Picard rank "
            f"{surface.rank}, got {a.rank} and {b.rank}"
        )
    total = Fraction(0)
    for i, ai in enumerate(a.coeffs):
        if ai == 0:
            continue
        row = surface.intersection[i]
        for j, bj in enumerate(b.coeffs):
            if bj:
                total += ai * bj * row[j]
    return total


def self_intersection(a: DivisorClass, surface: SurfaceModel) -> Fraction:
    return intersect(a, a, surface)


def volume(a: DivisorClass, surface: SurfaceModel) -> Fraction:
    """Cohomological volume A^2 / 2 of a class on a surface."""
    return self_intersection(a, surface) / 2


def is_nef(a: DivisorClass, surface: SurfaceModel) -> bool:
    return all(intersect(a, ray, surface) >= 0 for _, ray in surface.curve_rays)


def is_ample(a: DivisorClass, surface: SurfaceModel) -> bool:
    # Nakai-Moishezon on these catalog surfaces: positive against every
    # extremal ray and positive self-intersection.
    if any(intersect(a, ray, surface) <= 0 for _, ray in surface.curve_rays):
        return False
    return self_intersection(a, surface) > 0


def nef_threshold(a: DivisorClass, surface: SurfaceModel) -> Optional[Fraction]:
    """Largest s with A + sK nef, as an exact rational; None when K is nef.

    Requires A ample.  Each ray C with K.C < 0 bounds s by A.C / (-K.C); the
    threshold is the smallest bound.  With no bounding ray the path stays
    ample forever and the flow is global.
    """
    if not is_ample(a, surface):
        raise ValueError(f"nef threshold needs an ample class on {surface.name}")
    k = surface.canonical
    bounds = []
    for _, ray in surface.curve_rays:
        kc = intersect(k, ray, surface)
        if kc < 0:
            bounds.append(intersect(a, ray, surface) / (-kc))
    if not bounds:
        return None
    return min(bounds)


def maximal_time(r: Optional[Fraction]) -> float:
    """Singular time T = log(r + 1) of the class path; inf when r is None."""
    if r is None:
        return math.inf
    return math.log(1 + float(r))


@dataclass(frozen=True)
class ContractionInfo:
    """Limit-class data at the nef threshold.

    kind is one of "divisorial", "fiber_type", "point_collapse", "global".
    For a global flow (K nef) every other field except the surface is None.
    """

    surface: str
    r: Optional[Fraction]
    time: float
    limit_class: Optional[DivisorClass]
    kind: str
    contracted_ray_name: Optional[str] = None
    contracted_ray: Optional[DivisorClass] = None
    discrepancy: Optional[Fraction] = None


def classify_contraction(a: DivisorClass, surface: SurfaceModel) -> ContractionInfo:
    """Classify what the limit class L = A + rK contracts.

    L pairs to zero against at least one extremal ray (that is what the
    threshold means).  A negative-square ray gives a divisorial contraction
    with the catalog discrepancy, a square-zero ray a fibration collapse, and
    L = 0 the collapse of the whole surface to a point.
    """
    r = nef_threshold(a, surface)
    if r is None:
        return ContractionInfo(
            surface=surface.name, r=None, time=math.inf, limit_class=None,
            kind="global",
        )
    limit = a + surface.canonical.scaled(r)
    if limit.is_zero():
        return ContractionInfo(
            surface=surface.name, r=r, time=maximal_time(r), limit_class=limit,
            kind="point_collapse",
        )
    for ray_name, ray in surface.curve_rays:
        if intersect(limit, ray, surface) == 0:
            square = self_intersection(ray, surface)
            kind = "divisorial" if square < 0 else "fiber_type"
            return ContractionInfo(
                surface=surface.name, r=r, time=maximal_time(r),
                limit_class=limit, kind=kind, contracted_ray_name=ray_name,
                contracted_ray=ray,
                discrepancy=surface.discrepancy_of(ray_name),
            )
    raise RuntimeError(
        f"nef threshold {r} on {surface.name} identified no contracted ray"
    )


def path_weight(t: float) -> float:
    """Interpolation weight a(t) = 1 - e^-t of the class path."""
    return -math.expm1(-t)


def residual_weight(t: float, r: Fraction) -> float:
    """Weight b(t) = (r + 1) e^-t - 1 of g0 in the reference split.

    b decreases from r at t = 0 to 0 at T = log(r + 1); the reference family
    is g0(t) = (1/r) (a(t) eta_L + b(t) g0), so b(T) = 0 is the degeneration.
    """
    return (float(r) + 1.0) * math.exp(-t) - 1.0


def class_path(a: DivisorClass, surface: SurfaceModel, t: float) -> list:
    """Float coefficients of A(t) = A + a(t)(K - A)."""
    w = path_weight(t)
    return [
        float(c) + w * (float(k) - float(c))
        for c, k in zip(a.coeffs, surface.canonical.coeffs)
    ]


def class_path_exact(a: DivisorClass, surface: SurfaceModel,
                     s: Rational) -> DivisorClass:
    """A(t) with s = e^-t kept rational, for exact identity checks."""
    w = 1 - _frac(s)
    return a + (surface.canonical - a).scaled(w)


def class_path_split(a: DivisorClass, surface: SurfaceModel,
                     s: Rational) -> DivisorClass:
    """The same path assembled as (1/r)(a(t) L + b(t) A), s = e^-t rational.

    Exact-identity counterpart of class_path_exact: the two agree as rational
    vectors for every rational s in (0, 1].  Needs r finite.
    """
    r = nef_threshold(a, surface)
    if r is None:
        raise ValueError("reference split needs a finite nef threshold")
    s = _frac(s)
    limit = a + surface.canonical.scaled(r)
    a_w = 1 - s
    b_w = (r + 1) * s - 1
    return (limit.scaled(a_w) + a.scaled(b_w)).scaled(Fraction(1, 1) / r)


def _fr(n, d=1) -> Fraction:
    return Fraction(n, d)


def projective_plane() -> SurfaceModel:
    h = DivisorClass([1])
    return SurfaceModel(
        name="P2",
        kind="plane",
        basis_names=("H",),
        intersection=((_fr(1),),),
        canonical=DivisorClass([-3]),
        curve_rays=(("line", h),),
        discrepancies=(),
    )


def hirzebruch(k: int) -> SurfaceModel:
    """Hirzebruch surface of index k (the blowup basis (H, E) when k = 1).

    The negative section has square -k; contracting it for k >= 1 produces a
    point of discrepancy (2 - k)/k (the smooth blow-down at k = 1, a canonical
    cone point at k = 2, klt cone points beyond).  Index 0 is P1 x P1 with two
    square-zero rulings and no negative curve.
    """
    if k < 0:
        raise ValueError("hirzebruch index must be >= 0")
    if k == 1:
        inter = ((_fr(1), _fr(0)), (_fr(0), _fr(-1)))
        e = DivisorClass([0, 1])
        fiber = DivisorClass([1, -1])
        return SurfaceModel(
            name="F1",
            kind="hirzebruch",
            basis_names=("H", "E"),
            intersection=inter,
            canonical=DivisorClass([-3, 1]),
            curve_rays=(("E", e), ("fiber", fiber)),
            discrepancies=(("E", _fr(1)),),
            hirzebruch_index=1,
        )
    inter = ((_fr(-k), _fr(1)), (_fr(1), _fr(0)))
    c0 = DivisorClass([1, 0])
    fiber = DivisorClass([0, 1])
    rays = (("C0", c0), ("fiber", fiber))
    if k == 0:
        # P1 x P1: both rulings are square-zero extremal rays.
        rays = (("ruling_a", c0), ("ruling_b", fiber))
        disc = ()
    else:
        disc = (("C0", _fr(2 - k, k)),)
    return SurfaceModel(
        name=f"F{k}",
        kind="hirzebruch",
        basis_names=("C0", "fiber"),
        intersection=inter,
        canonical=DivisorClass([-2, -(k + 2)]),
        curve_rays=rays,
        discrepancies=disc,
        hirzebruch_index=k,
    )


def torus_surface() -> SurfaceModel:
    """Product of two elliptic curves tracked through its polarization ray.

    theta = sum of the two fiber classes, theta^2 = 2, K = 0: the flow is
    global and the class path contracts nothing, it just scales down.
    """
    theta = DivisorClass([1])
    return SurfaceModel(
        name="T2",
        kind="torus",
        basis_names=("theta",),
        intersection=((_fr(2),),),
        canonical=DivisorClass([0]),
        curve_rays=(("theta", theta),),
        discrepancies=(),
    )


_HIRZEBRUCH_RE = re.compile(r"^F(\d+)$")


def catalog(name: str) -> SurfaceModel:
    """Look up a catalog surface by name: P2, F<k>, or T2."""
    label = name.strip().upper()
    if label == "P2":
        return projective_plane()
    if label == "T2":
        return torus_surface()
    m = _HIRZEBRUCH_RE.match(label)
    if m:
        return hirzebruch(int(m.group(1)))
    raise ValueError(f"unknown surface {name!r}; expected P2, F<k>, or T2")

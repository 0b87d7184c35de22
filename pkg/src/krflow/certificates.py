"""Explicit super/sub-solutions and a priori bound monitors for flow runs.

The comparison principle for the scalar flow gives two space-constant
barriers.  The supersolution solves d(u+)/dt + u+ = K_sup with u+(0) = 0,
where K_sup dominates log det_ratio(g0(t), g0) + f over space and time, so
u+ = (1 - e^-t) K_sup.  The subsolution solves

    d(u-)/dt + u- = n log(b(t)/r) + K_inf,     u-(0) = 0,

with b(t) = (r+1)e^-t - 1 the decaying weight of the reference split and
K_inf = min f: dropping the nonnegative limit-form part of the reference
family bounds the determinant from below by (b/r)^n det g0.  The integral
of log b(t) up to T is finite (b vanishes linearly, and log is integrable),
which is exactly why u- stays bounded on [0, T) and the flow potential is
trapped in a finite sandwich u- <= u <= u+ all the way to the singular
time.  On the flat torus the forcing degenerates to -n t + K_inf and both
barriers are elementary.

The monitors read a completed run and certify, step by step, the bounds
that make the continuum argument work: the sandwich itself, the decay of
v = du/dt below max f, the two-sided metric equivalence C0 g0 <= g(t) <=
C1 g0 on compact sub-intervals [0, t0], t0 < T, and boundedness of the
weighted trace z = e^{-lambda u} tr_{g0(t)} g(t).  The comparison constants
are existential in the continuum theory, so the checks assert positivity,
finiteness, and stability, never particular magnitudes; each check entry
records the worst signed margin and the witnessing node so a failure is
reproducible.  Checks refuse to run against a ledger whose scenario
fingerprint differs from the envelope's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad

from .ansatz import Scenario
from .flow import FlowRun, RescaleReport, expected_pairings

SANDWICH_TOL = 1e-6
V_UPPER_SLACK = 1e-3
CLASS_TRACKING_TOL = 1e-3
RESCALE_TOL = 1e-3
# blow-up whisker excluded from barrier evaluation: the subsolution forcing
# log b(t) is only defined for t < T
ENVELOPE_DOMAIN_PAD = 1e-6

_QUAD_OPTS = {"epsabs": 1e-11, "epsrel": 1e-11, "limit": 200}


@dataclass(frozen=True)
class Envelope:
    """Space-constant barriers u- <= u <= u+ for one scenario."""

    K_sup: float
    K_inf: float
    singular_time: float
    dimension: int
    kind: str
    threshold: Optional[float]
    scenario_fingerprint: str

    def forcing(self, t: float) -> float:
        """Right-hand side of the subsolution ODE at time t."""
        n = self.dimension
        if self.kind == "torus":
            return -n * t + self.K_inf
        if not t < self.singular_time:
            raise ValueError(
                f"subsolution forcing undefined at t = {t}: the reference "
                f"weight b(t) vanishes at T = {self.singular_time:.6f}"
            )
        r = self.threshold
        b = (r + 1.0) * math.exp(-t) - 1.0
        return n * math.log(b / r) + self.K_inf

    def u_plus(self, t: float) -> float:
        return -math.expm1(-t) * self.K_sup

    def u_minus(self, t: float) -> float:
        """Integrating-factor solution, by adaptive quadrature."""
        if t == 0.0:
            return 0.0
        n = self.dimension
        if self.kind == "torus":
            # closed form for forcing -n s + K_inf
            return (-n * (t - 1.0 + math.exp(-t))
                    - math.expm1(-t) * self.K_inf)
        if not t < self.singular_time:
            raise ValueError(
                f"u_minus is defined on [0, T): got t = {t}, "
                f"T = {self.singular_time:.6f}"
            )
        integral, _ = quad(lambda s: math.exp(s) * self.forcing(s),
                           0.0, t, **_QUAD_OPTS)
        return math.exp(-t) * integral


def build_envelope(scenario: Scenario, t_samples: int = 65) -> Envelope:
    """Constants and barriers from the reference family and the source.

    K_sup is the maximum of log det_ratio(g0(t), g0) + f over the space
    grid and a time sample of [0, T); the sample always contains t = 0,
    where the ratio term vanishes, so K_sup >= max f.  K_inf = min f.
    """
    t_sing = scenario.singular_time
    t_hi = 1.0 if math.isinf(t_sing) else t_sing * (1.0 - 1e-9)
    f = scenario.source.values
    k_sup = -math.inf
    for t in np.linspace(0.0, t_hi, t_samples):
        k_sup = max(k_sup, float(np.max(
            scenario.log_reference_det_ratio(float(t)) + f)))
    r = scenario.threshold
    return Envelope(
        K_sup=k_sup,
        K_inf=float(np.min(f)),
        singular_time=t_sing,
        dimension=scenario.dimension,
        kind=scenario.kind,
        threshold=None if r is None else float(r),
        scenario_fingerprint=scenario.fingerprint(),
    )


def envelope_consistency(env: Envelope, ts) -> float:
    """Worst defect of the barriers against their defining ODEs.

    u+ satisfies its ODE in closed form: the residual (d/dt + 1)u+ - K_sup
    vanishes identically.  For u- the quadrature is checked through the
    semigroup property u-(t2) = e^-(t2-t1) u-(t1) + e^-t2 * int_t1^t2 e^s
    forcing(s) ds, evaluated with independent quadratures; agreement to
    quadrature tolerance certifies the integrating-factor solution.
    """
    worst = 0.0
    for t in ts:
        du_plus = math.exp(-t) * env.K_sup  # analytic derivative
        worst = max(worst, abs(du_plus + env.u_plus(t) - env.K_sup))
    ts = sorted(float(t) for t in ts)
    for t1, t2 in zip(ts, ts[1:]):
        piece, _ = quad(lambda s: math.exp(s) * env.forcing(s),
                        t1, t2, **_QUAD_OPTS)
        rebuilt = (math.exp(-(t2 - t1)) * env.u_minus(t1)
                   + math.exp(-t2) * piece)
        worst = max(worst, abs(env.u_minus(t2) - rebuilt))
    return worst


def log_b_integral(scenario: Scenario) -> float:
    """The finite integral of log b(t) over [0, T].

    b(T - tau) = e^tau - 1 for every finite threshold r (because
    (r+1)e^-T = 1), so the integrand splits as log tau plus the smooth
    correction log(expm1(tau)/tau); the log part integrates in closed form
    and the rest is regular at tau = 0.
    """
    r = scenario.threshold
    if r is None:
        raise ValueError("log b integral needs a finite nef threshold")
    t_sing = scenario.singular_time

    def smooth(tau: float) -> float:
        if tau == 0.0:
            return 0.0
        return math.log(math.expm1(tau) / tau)

    correction, _ = quad(smooth, 0.0, t_sing, **_QUAD_OPTS)
    return t_sing * (math.log(t_sing) - 1.0) + correction


@dataclass(frozen=True)
class CheckEntry:
    """One monitored bound over one run."""

    name: str
    t_range: tuple
    worst_margin: float
    witness_node: Optional[int]
    passed: bool
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "t_range": list(self.t_range),
            "worst_margin": self.worst_margin,
            "witness_node": self.witness_node,
            "passed": self.passed,
            "details": self.details,
        }


@dataclass
class CertificateReport:
    """All bound checks for one run, serializable and summarizable."""

    scenario_fingerprint: str
    entries: list

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate check entries: {names}")

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def entry(self, name: str) -> CheckEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(f"no check named {name!r}")

    def as_dict(self) -> dict:
        return {
            "scenario_fingerprint": self.scenario_fingerprint,
            "passed": self.passed,
            "checks": [e.as_dict() for e in self.entries],
        }

    def summary(self) -> str:
        width = max(len(e.name) for e in self.entries)
        lines = [f"{'check':<{width}}  {'status':<6}  worst margin"]
        for e in self.entries:
            status = "pass" if e.passed else "FAIL"
            lines.append(f"{e.name:<{width}}  {status:<6}  "
                         f"{e.worst_margin:+.3e}")
        lines.append("overall: " + ("pass" if self.passed else "FAIL"))
        return "\n".join(lines)


def _require_same_scenario(run: FlowRun, fingerprint: str) -> None:
    got = run.ledger.metadata.get("scenario_fingerprint")
    if got != fingerprint:
        raise ValueError(
            f"scenario fingerprint mismatch: run has {got}, check expects "
            f"{fingerprint}"
        )


def check_sandwich(run: FlowRun, env: Envelope) -> CheckEntry:
    """u-(t) <= u(rho, t) <= u+(t) at every accepted step, within tolerance.

    Steps inside the terminal whisker t > T - pad are skipped: the
    subsolution forcing is undefined there, and the run only enters that
    window through the stop-rule bisection.
    """
    _require_same_scenario(run, env.scenario_fingerprint)
    t_max = env.singular_time - ENVELOPE_DOMAIN_PAD
    worst = math.inf
    witness = None
    t_lo = t_hi = None
    skipped = 0
    for row in run.ledger.steps:
        t = row["t"]
        if not t < t_max:
            skipped += 1
            continue
        upper = env.u_plus(t) - row["u_max"]
        lower = row["u_min"] - env.u_minus(t)
        margin = min(upper, lower)
        if margin < worst:
            worst = margin
            witness = row["u_argmax"] if upper < lower else row["u_argmin"]
        t_lo = t if t_lo is None else t_lo
        t_hi = t
    if t_lo is None:
        raise ValueError("no steps inside the envelope domain")
    return CheckEntry(
        name="sandwich",
        t_range=(t_lo, t_hi),
        worst_margin=float(worst),
        witness_node=witness,
        passed=worst >= -SANDWICH_TOL,
        details={"tolerance": SANDWICH_TOL, "skipped_steps": skipped,
                 "K_sup": env.K_sup, "K_inf": env.K_inf},
    )


def check_v_bounds(run: FlowRun) -> CheckEntry:
    """v = du/dt decays from its initial maximum and stays finite below.

    Upper bound: max v over the run must not exceed max f + slack (the
    comparison argument pins v(0) = f and pushes the maximum down).  Lower
    bound: min v over the compact window t <= T - 0.05 is recorded and must
    be finite; no magnitude is asserted, matching the per-window nature of
    the continuum lower bound.  On the torus the flow is explicitly
    solvable and v = n(e^-t - 1), a curve inside (-n, 0]; the check then
    also pins the run's v extrema to that curve.
    """
    scenario = run.scenario
    max_f = scenario.source.max
    t_sing = scenario.singular_time
    window = math.inf if math.isinf(t_sing) else t_sing - 0.05
    max_v = -math.inf
    min_v_window = math.inf
    t_at_max = None
    torus_dev = 0.0
    n = scenario.dimension
    for row in run.ledger.steps:
        if row["v_max"] is not None and row["v_max"] > max_v:
            max_v = row["v_max"]
            t_at_max = row["t"]
        if row["t"] <= window and row["v_min"] is not None:
            min_v_window = min(min_v_window, row["v_min"])
        if scenario.kind == "torus":
            exact = n * math.expm1(-row["t"])
            torus_dev = max(torus_dev, abs(row["v_min"] - exact),
                            abs(row["v_max"] - exact))
    margin = (max_f + V_UPPER_SLACK) - max_v
    passed = margin >= 0.0 and math.isfinite(min_v_window)
    details = {"max_v": max_v, "max_f": max_f, "t_at_max_v": t_at_max,
               "min_v_window": min_v_window,
               "window_end": None if math.isinf(window) else window,
               "slack": V_UPPER_SLACK}
    if scenario.kind == "torus":
        passed = passed and torus_dev <= 1e-6 and min_v_window > -n
        details["torus_v_deviation"] = torus_dev
    rows = run.ledger.steps
    return CheckEntry(
        name="v-bounds",
        t_range=(rows[0]["t"], rows[-1]["t"]),
        worst_margin=float(margin),
        witness_node=None,
        passed=passed,
        details=details,
    )


def check_class_tracking(run: FlowRun) -> CheckEntry:
    """Measured class pairings follow A + a(t)(K - A) at every step."""
    scenario = run.scenario
    sup = 0.0
    t_at = None
    for row in run.ledger.steps:
        want = expected_pairings(scenario, row["t"])
        for key, value in want.items():
            err = abs(row[key] - value)
            if err > sup:
                sup, t_at = err, row["t"]
    rows = run.ledger.steps
    return CheckEntry(
        name="class-tracking",
        t_range=(rows[0]["t"], rows[-1]["t"]),
        worst_margin=float(CLASS_TRACKING_TOL - sup),
        witness_node=None,
        passed=sup <= CLASS_TRACKING_TOL,
        details={"sup_error": sup, "t_at_sup": t_at,
                 "tolerance": CLASS_TRACKING_TOL},
    )


def _curvature_floor(scenario: Scenario, times) -> float:
    """Joint infimum of the family curvature proxy over sampled times.

    The proxy is the second difference of -log det g0(t) along rho, the
    ansatz stand-in for the bisectional curvature of the reference family;
    only a finite sample floor is needed to pick the trace weight lambda.
    """
    floor = math.inf
    grid = scenario.grid
    for t in times:
        base, fiber = scenario.reference_coefficients(float(t))
        proxy = -grid.d2(np.log(base * fiber))
        floor = min(floor, float(np.min(proxy)))
    return floor


def check_metric_equivalence(run: FlowRun, t0: float) -> tuple:
    """Two-sided metric bounds and the weighted trace monitor up to t0.

    Returns the pair (metric-equivalence entry, laplacian-upper entry).
    The first records [C0, C1] with C0 g0 <= g(t) <= C1 g0 nodewise over
    snapshots with t <= t0 and passes iff C0 > 0.  The second monitors
    z = e^{-lambda u} tr_{g0(t)} g(t) with lambda chosen so the sampled
    curvature floor plus lambda exceeds one; it passes iff the trace stays
    positive and z stays finite.
    """
    t_sing = run.scenario.singular_time
    if not t0 < t_sing:
        raise ValueError(f"t0 = {t0} must lie strictly below T = {t_sing}")
    snaps = [s for s in run.snapshots
             if s.t <= t0 + 1e-12 and not s.degenerate]
    if len(snaps) < 2:
        raise ValueError(f"need snapshots in (0, {t0}]: got {len(snaps)}")
    scenario = run.scenario
    base0 = scenario.reference.base.values
    fiber0 = scenario.reference.fiber.values

    c0, c1 = math.inf, -math.inf
    witness = None
    lam = max(0.0, 1.0 - _curvature_floor(scenario, [s.t for s in snaps])) + 1.0
    z_sup = -math.inf
    trace_min = math.inf
    for s in snaps:
        rb = s.g.base.values / base0
        rf = s.g.fiber.values / fiber0
        lo = min(float(np.min(rb)), float(np.min(rf)))
        if lo < c0:
            c0 = lo
            witness = int(np.argmin(np.minimum(rb, rf)))
        c1 = max(c1, float(np.max(rb)), float(np.max(rf)))
        ref_b, ref_f = scenario.reference_coefficients(s.t)
        trace = s.g.base.values / ref_b + s.g.fiber.values / ref_f
        trace_min = min(trace_min, float(np.min(trace)))
        z_sup = max(z_sup, float(np.max(
            np.exp(-lam * s.u.values) * trace)))

    equivalence = CheckEntry(
        name="metric-equivalence",
        t_range=(snaps[0].t, snaps[-1].t),
        worst_margin=float(c0),
        witness_node=witness,
        passed=c0 > 0.0 and math.isfinite(c1),
        details={"C0": c0, "C1": c1, "t0": t0},
    )
    laplacian = CheckEntry(
        name="laplacian-upper",
        t_range=(snaps[0].t, snaps[-1].t),
        worst_margin=float(trace_min),
        witness_node=None,
        passed=trace_min > 0.0 and math.isfinite(z_sup),
        details={"lambda": lam, "z_sup": z_sup, "trace_min": trace_min,
                 "t0": t0},
    )
    return equivalence, laplacian


def check_rescale_covariance(report: RescaleReport) -> CheckEntry:
    """Delegated check over a completed rescale comparison."""
    margin = RESCALE_TOL - report.defect_sup
    return CheckEntry(
        name="rescale-covariance",
        t_range=(report.s_values[0], report.s_values[-1]),
        worst_margin=float(margin),
        witness_node=None,
        passed=margin >= 0.0,
        details={"factor": report.factor, "defect_sup": report.defect_sup,
                 "rescaled_t_numeric": report.rescaled_t_numeric,
                 "rescaled_t_theory": report.rescaled_t_theory,
                 "tolerance": RESCALE_TOL},
    )


CHECK_NAMES = ("sandwich", "v-bounds", "class-tracking",
               "metric-equivalence", "laplacian-upper")


def certify_run(run: FlowRun, env: Optional[Envelope] = None,
                t0: Optional[float] = None,
                rescale: Optional[RescaleReport] = None,
                enabled: Optional[tuple] = None) -> CertificateReport:
    """Run every enabled bound check once and collect the report.

    ``enabled`` restricts to a subset of CHECK_NAMES; the default runs all
    of them.  The two metric checks share one snapshot sweep, so enabling
    either computes both and keeps the one asked for.
    """
    scenario = run.scenario
    if enabled is None:
        enabled = CHECK_NAMES
    unknown = set(enabled) - set(CHECK_NAMES)
    if unknown:
        raise ValueError(f"unknown checks: {sorted(unknown)}")
    if env is None:
        env = build_envelope(scenario)
    if t0 is None:
        t_sing = scenario.singular_time
        t0 = run.snapshots[-1].t if math.isinf(t_sing) else t_sing - 0.05
    entries = []
    if "sandwich" in enabled:
        entries.append(check_sandwich(run, env))
    if "v-bounds" in enabled:
        entries.append(check_v_bounds(run))
    if "class-tracking" in enabled:
        entries.append(check_class_tracking(run))
    if "metric-equivalence" in enabled or "laplacian-upper" in enabled:
        equivalence, laplacian = check_metric_equivalence(run, t0)
        if "metric-equivalence" in enabled:
            entries.append(equivalence)
        if "laplacian-upper" in enabled:
            entries.append(laplacian)
    if rescale is not None:
        entries.append(check_rescale_covariance(rescale))
    return CertificateReport(
        scenario_fingerprint=env.scenario_fingerprint,
        entries=entries,
    )

"""Time integration of the scalar parabolic Monge-Ampere reduction.

The normalized flow reduces on an invariant scenario to

    du/dt = log det( (g0 + a(t) eta + ddc u) / g0 ) - u + f,    u(.,0) = 0,

a stiff quasilinear parabolic equation for the potential perturbation u on
the rho-grid.  The default integrator is backward Euler with a damped Newton
solve of each implicit stage: L-stability is what matters here, because the
fiber coefficient U'' of the metric goes to zero as t approaches the singular
time and the linearized operator's diffusion coefficients 1/U', 1/U'' blow
up.  The Newton Jacobian is pentadiagonal (compact interior stencils plus two
one-sided endpoint rows) and is solved with a banded LU.

The PDE rows are imposed at interior nodes only; the two endpoint rows pin
the slope of u to zero instead.  On the compact model the perturbation slope
at |rho| = R is O(e^-R), so the constraint is consistent at truncation
accuracy, and it hard-wires class tracking: the cohomology class of g(t)
lives in the endpoint slopes, which the constraint keeps equal to those of
the reference family.

Time adaptation: dt grows by a fixed factor after clean acceptances up to
dt_max and halves when Newton stalls.  When an accepted state dips below the
positivity floor the step is rejected and retried with half the dt, so the
final accepted dt bisects the crossing down to dt_min and the recorded
numerical singular time locates the degeneration to O(dt_min).  A state that
still violates the floor at dt_min is accepted once, flagged degenerate, and
frozen; Newton failure at dt_min freezes the last valid state instead.

An explicit RK4 scheme is available for scenarios without degeneration (the
flat torus, where the closed-form solution is space-constant and the scheme
is exact to O(dt^4)).  It obeys the stability guard dt <= 0.25 h^2 min(U''),
which makes it useless near a collapse but cheap and accurate away from one.

Every accepted step recomputes v = du/dt algebraically from the equation
(the time-derivative field is monitored, never separately integrated) and
audits the renormalization identity

    integral exp(v + u - f) dV0  =  Vol(A(t))  =  A(t)^2 / 2,

failing the run loudly if the relative defect exceeds the audit tolerance:
a drift there means the discrete flow has left the normalized gauge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .ansatz import MetricProfile, Scenario, build_scenario, path_coefficients
from .picard import intersect
from .profiles import Profile

SCHEMES = ("backward_euler_newton", "explicit_rk4")


@dataclass(frozen=True)
class FlowConfig:
    """Integrator knobs; defaults suit the catalog scenarios at N = 2048."""

    scheme: str = "backward_euler_newton"
    dt_init: float = 1e-4
    dt_max: float = 2e-3
    dt_min: float = 1e-7
    growth: float = 1.2
    t_end: Optional[float] = None     # default: T + 0.2 for finite-r scenarios
    newton_tol: float = 1e-10
    newton_max_iter: int = 12
    positivity_floor: float = 1e-8
    snapshot_dt: float = 0.02
    extra_checkpoints: tuple = ()
    volume_audit_tol: float = 1e-2
    max_steps: int = 2_000_000

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected {SCHEMES}")
        if not (0 < self.dt_min <= self.dt_init <= self.dt_max):
            raise ValueError("need 0 < dt_min <= dt_init <= dt_max")
        if self.newton_tol <= 0 or self.positivity_floor <= 0:
            raise ValueError("newton_tol and positivity_floor must be positive")
        if self.growth < 1.0:
            raise ValueError("dt growth factor must be >= 1")


@dataclass(frozen=True)
class FlowState:
    """One accepted time slice of the flow."""

    t: float
    u: Profile
    v: Profile                 # recomputed rhs, = du/dt at this state
    g: MetricProfile
    phi_residual: float        # volume-identity defect at this state
    step_count: int
    degenerate: bool = False

    def margin(self) -> float:
        return self.g.margin()


@dataclass
class RunLedger:
    """Append-only record of a run: metadata, accepted steps, termination."""

    metadata: dict
    steps: list = field(default_factory=list)
    termination: Optional[dict] = None

    def append_step(self, row: dict) -> None:
        if self.steps and row["t"] <= self.steps[-1]["t"]:
            raise ValueError("ledger time must increase")
        self.steps.append(row)

    def finish(self, reason: str, state: FlowState,
               t_numeric: Optional[float]) -> None:
        self.termination = {
            "reason": reason,
            "t": float(state.t),
            "t_numeric": None if t_numeric is None else float(t_numeric),
            "degenerate": bool(state.degenerate),
            "steps": int(state.step_count),
        }

    def as_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "steps": self.steps,
            "termination": self.termination,
        }


@dataclass
class FlowRun:
    """Completed run: ledger, snapshots at checkpoint times, final state."""

    scenario: Scenario
    config: FlowConfig
    ledger: RunLedger
    snapshots: list
    final: FlowState

    @property
    def t_numeric(self) -> Optional[float]:
        term = self.ledger.termination or {}
        return term.get("t_numeric")

    def snapshot_at(self, t: float, tol: float = 1e-9) -> FlowState:
        for s in self.snapshots:
            if abs(s.t - t) <= tol:
                return s
        raise KeyError(f"no snapshot at t = {t}")


def _rhs(scenario: Scenario, det0: np.ndarray, t: float,
         u: np.ndarray) -> tuple:
    """(rhs array, base, fiber) of the scalar equation at (t, u)."""
    base, fiber = scenario.coefficients(t, u)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(base * fiber / det0)
    rhs = log_ratio - u + scenario.source.values
    return rhs, base, fiber


def initial_state(scenario: Scenario) -> FlowState:
    """u = 0 at t = 0; v = f exactly since the determinant ratio is one."""
    u = np.zeros(scenario.grid.n)
    det0 = scenario.reference.det()
    rhs, _, _ = _rhs(scenario, det0, 0.0, u)
    state = FlowState(
        t=0.0,
        u=Profile(scenario.grid, u),
        v=Profile(scenario.grid, rhs),
        g=scenario.metric_at(0.0, u),
        phi_residual=0.0,
        step_count=0,
    )
    return replace(state, phi_residual=volume_identity_residual(state, scenario))


def _newton_residual(scenario, det0, t_new, dt, u_old, u_new):
    """Backward-Euler residual with endpoint-slope constraint rows."""
    rhs, base, fiber = _rhs(scenario, det0, t_new, u_new)
    res = u_new - u_old - dt * rhs
    du = scenario.grid.d1(u_new)
    res[0] = du[0]
    res[-1] = du[-1]
    return res, base, fiber


def _newton_jacobian_banded(scenario, dt, base, fiber):
    """Pentadiagonal Jacobian in solve_banded layout, (l, u) = (2, 2)."""
    n = scenario.grid.n
    h = scenario.grid.spacing
    inv_h2 = 1.0 / (h * h)
    inv_2h = 1.0 / (2.0 * h)
    ab = np.zeros((5, n))
    if scenario.kind == "torus":
        # perturbation enters the base coefficient through D2 only
        c2 = dt / base
        c1 = np.zeros(n)
    else:
        c1 = dt / base
        c2 = dt / fiber
    # interior PDE rows i = 1..n-2
    diag = (1.0 + dt) + 2.0 * c2 * inv_h2
    upper = -(c1 * inv_2h + c2 * inv_h2)
    lower = -(-c1 * inv_2h + c2 * inv_h2)
    ab[2, 1:-1] = diag[1:-1]
    ab[1, 2:] = upper[1:-1]      # J[i, i+1] stored at column i+1
    ab[3, :-2] = lower[1:-1]     # J[i, i-1] stored at column i-1
    # endpoint constraint rows: one-sided slope stencils
    ab[2, 0] = -3.0 * inv_2h
    ab[1, 1] = 4.0 * inv_2h
    ab[0, 2] = -1.0 * inv_2h
    ab[2, -1] = 3.0 * inv_2h
    ab[3, -2] = -4.0 * inv_2h
    ab[4, -3] = 1.0 * inv_2h
    return ab


def _solve_backward_euler(scenario, det0, t_new, dt, u_old, cfg):
    """Damped Newton for the implicit stage; None on failure."""
    u = u_old.copy()
    res, base, fiber = _newton_residual(scenario, det0, t_new, dt, u_old, u)
    if not np.all(np.isfinite(res)):
        return None
    norm = np.max(np.abs(res))
    for _ in range(cfg.newton_max_iter):
        if norm <= cfg.newton_tol:
            return u
        ab = _newton_jacobian_banded(scenario, dt, base, fiber)
        try:
            delta = solve_banded((2, 2), ab, -res)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(delta)):
            return None
        lam = 1.0
        for _ in range(10):
            u_try = u + lam * delta
            res_try, base_try, fiber_try = _newton_residual(
                scenario, det0, t_new, dt, u_old, u_try)
            if np.all(np.isfinite(res_try)):
                norm_try = np.max(np.abs(res_try))
                if norm_try < norm or norm_try <= cfg.newton_tol:
                    u, res, norm = u_try, res_try, norm_try
                    base, fiber = base_try, fiber_try
                    break
            lam *= 0.5
        else:
            return None
    if norm <= cfg.newton_tol:
        return u
    return None


def _rk4_guard(scenario, base, fiber, h) -> float:
    coeff = base if scenario.kind == "torus" else fiber
    return 0.25 * h * h * float(np.min(coeff))


def _step_rk4(scenario, det0, state, dt, cfg):
    """Classical RK4 on the method-of-lines system, stability-clamped."""
    u0 = state.u.values
    _, base, fiber = _rhs(scenario, det0, state.t, u0)
    guard = _rk4_guard(scenario, base, fiber, scenario.grid.spacing)
    dt = min(dt, guard)
    t = state.t

    def rate(tau, u):
        rhs, _, _ = _rhs(scenario, det0, tau, u)
        return rhs

    k1 = rate(t, u0)
    k2 = rate(t + 0.5 * dt, u0 + 0.5 * dt * k1)
    k3 = rate(t + 0.5 * dt, u0 + 0.5 * dt * k2)
    k4 = rate(t + dt, u0 + dt * k3)
    u_new = u0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(u_new)):
        return None, dt
    return u_new, dt


def _build_state(scenario, det0, t, u, step_count, degenerate):
    # At a degenerate acceptance the determinant ratio may be nonpositive at
    # the collapsed node, where v is genuinely undefined: the nan is kept,
    # and the volume audit reports nan rather than a fabricated number.
    rhs, base, fiber = _rhs(scenario, det0, t, u)
    state = FlowState(
        t=t,
        u=Profile(scenario.grid, u),
        v=Profile(scenario.grid, rhs),
        g=scenario.metric_at(t, u),
        phi_residual=0.0,
        step_count=step_count,
        degenerate=degenerate,
    )
    return replace(state, phi_residual=volume_identity_residual(state, scenario))


def state_from_potential(scenario: Scenario, t: float, u_values,
                         step_count: int = 0,
                         degenerate: bool = False) -> FlowState:
    """Reconstruct a flow slice from stored potential values.

    v, the metric, and the volume audit are all recomputed, so a slice
    round-trips exactly through (t, u) alone.  Degenerate slices may carry
    nonpositive determinants; the undefined entries stay nan as in the
    original run.
    """
    u = np.asarray(u_values, dtype=float)
    if u.shape != (scenario.grid.n,):
        raise ValueError(f"expected {scenario.grid.n} potential values, "
                         f"got {u.shape}")
    det0 = scenario.reference.det()
    with np.errstate(divide="ignore", invalid="ignore"):
        return _build_state(scenario, det0, float(t), u,
                            step_count, degenerate)


def step(state: FlowState, cfg: FlowConfig, scenario: Scenario,
         dt: Optional[float] = None) -> FlowState:
    """Advance one accepted step from ``state``; adaptivity built in.

    Newton failures halve dt down to dt_min; a joint positivity margin below
    the floor rejects and halves as well, bisecting the degeneration time.
    The returned state is flagged degenerate when no valid advance exists at
    dt_min, and its t is then the numerical singular time it froze at.
    """
    if state.degenerate:
        raise ValueError("cannot step a degenerate (frozen) state")
    det0 = scenario.reference.det()
    dt_try = cfg.dt_init if dt is None else dt
    if dt_try <= 0:
        raise ValueError("dt must be positive")

    while True:
        t_new = state.t + dt_try
        if cfg.scheme == "explicit_rk4":
            u_new, dt_used = _step_rk4(scenario, det0, state, dt_try, cfg)
            t_new = state.t + dt_used
        else:
            u_new = _solve_backward_euler(scenario, det0, t_new, dt_try,
                                          state.u.values, cfg)
        if u_new is None:
            if dt_try <= cfg.dt_min:
                # no valid advance: freeze where we stand
                return replace(state, degenerate=True)
            dt_try = max(0.5 * dt_try, cfg.dt_min)
            continue
        base, fiber = scenario.coefficients(t_new, u_new)
        margin = min(float(np.min(base)), float(np.min(fiber)))
        if margin < cfg.positivity_floor and dt_try > cfg.dt_min:
            dt_try = max(0.5 * dt_try, cfg.dt_min)
            continue
        return _build_state(scenario, det0, t_new, u_new,
                            state.step_count + 1,
                            degenerate=margin < cfg.positivity_floor)


def volume_identity_residual(state: FlowState, scenario: Scenario) -> float:
    """Relative defect of int exp(v + u - f) dV0 against Vol(A(t)).

    The identity holds for every smooth potential (it is cohomological), so
    the residual measures quadrature and truncation error, not solver error;
    a large value signals the run has drifted out of the normalized gauge.
    """
    integrand = np.exp(state.v.values + state.u.values
                       - scenario.source.values)
    lhs = scenario.grid.integrate(integrand, scenario.volume_weight)
    rhs = scenario.cohomological_volume(state.t)
    return abs(lhs - rhs) / scenario.initial_volume()


def gauge_change(u: Profile, h: Profile, t: float) -> Profile:
    """Potential in the shifted gauge (eta - ddc h, f + h): u + a(t) h."""
    a = -math.expm1(-t)
    return Profile(u.grid, u.values + a * h.values)


def _class_pairings(scenario: Scenario, state: FlowState) -> dict:
    base = state.g.base.values
    if scenario.kind == "torus":
        mean = 0.5 * (float(np.mean(base)) + float(np.mean(state.g.fiber.values)))
        return {"pair_polarization": mean}
    k = scenario.surface.hirzebruch_index
    return {
        "pair_negative_section": k * float(base[0]),
        "pair_fiber": float(base[-1] - base[0]),
    }


def expected_pairings(scenario: Scenario, t: float) -> dict:
    """Pairings of the moving class A(t) against the catalog curve rays.

    These are what the measured endpoint-slope pairings in the run ledger
    must track: the flow moves the class along A + a(t)(K - A) and nothing
    else.  Keys match the per-step ledger columns.
    """
    if scenario.kind == "torus":
        scale = float(np.mean(scenario.reference.base.values))
        return {"pair_polarization": math.exp(-t) * scale}
    coeffs = path_coefficients(scenario, t)
    surf = scenario.surface
    out = {}
    for name, ray in surf.curve_rays:
        square = intersect(ray, ray, surf)
        label = "pair_negative_section" if square < 0 else "pair_fiber"
        weights = [
            float(sum(g * rc for g, rc in zip(row, ray.coeffs)))
            for row in surf.intersection
        ]
        out[label] = float(sum(c * w for c, w in zip(coeffs, weights)))
    return out


def _ledger_metadata(scenario: Scenario, cfg: FlowConfig) -> dict:
    info = scenario.contraction
    return {
        "surface": scenario.surface.name,
        "ample": scenario.ample.to_strings(),
        "scenario_fingerprint": scenario.fingerprint(),
        "nef_threshold": None if info.r is None else str(info.r),
        "t_theory": None if math.isinf(info.time) else float(info.time),
        "contraction_kind": info.kind,
        "grid": {"half_width": scenario.grid.half_width, "n": scenario.grid.n},
        "config": {
            "scheme": cfg.scheme,
            "dt_init": cfg.dt_init, "dt_max": cfg.dt_max, "dt_min": cfg.dt_min,
            "growth": cfg.growth, "t_end": cfg.t_end,
            "newton_tol": cfg.newton_tol,
            "newton_max_iter": cfg.newton_max_iter,
            "positivity_floor": cfg.positivity_floor,
            "snapshot_dt": cfg.snapshot_dt,
            "extra_checkpoints": list(cfg.extra_checkpoints),
            "volume_audit_tol": cfg.volume_audit_tol,
        },
    }


def _finite_or_none(x: float):
    x = float(x)
    return x if math.isfinite(x) else None


def _step_row(scenario, state, dt) -> dict:
    det_vals = state.g.det() / scenario.reference.det()
    # nan-aware extrema: only the single frozen degenerate row can carry
    # undefined v values, and JSON has no NaN
    row = {
        "t": float(state.t),
        "dt": float(dt),
        "u_min": state.u.min, "u_max": state.u.max,
        "u_argmin": int(np.argmin(state.u.values)),
        "u_argmax": int(np.argmax(state.u.values)),
        "v_min": _finite_or_none(np.nanmin(state.v.values)),
        "v_max": _finite_or_none(np.nanmax(state.v.values)),
        "det_ratio_min": float(np.min(det_vals)),
        "det_ratio_max": float(np.max(det_vals)),
        "margin": float(state.margin()),
        "phi_residual": _finite_or_none(state.phi_residual),
    }
    row.update(_class_pairings(scenario, state))
    return row


def resolve_t_end(scenario: Scenario, cfg: FlowConfig) -> float:
    if cfg.t_end is not None:
        return float(cfg.t_end)
    t_sing = scenario.singular_time
    if math.isinf(t_sing):
        raise ValueError(
            "t_end is required for a global flow (infinite singular time)"
        )
    return t_sing + 0.2


def run_flow(scenario: Scenario, cfg: FlowConfig) -> FlowRun:
    """Drive the flow to t_end or degeneration, recording the run."""
    t_end = resolve_t_end(scenario, cfg)
    ledger = RunLedger(_ledger_metadata(scenario, cfg))
    ledger.metadata["t_end"] = t_end

    checkpoints = set()
    if cfg.snapshot_dt > 0:
        m = int(math.floor(t_end / cfg.snapshot_dt)) + 1
        checkpoints.update(round(i * cfg.snapshot_dt, 12) for i in range(1, m))
    checkpoints.update(float(t) for t in cfg.extra_checkpoints)
    pending = sorted(c for c in checkpoints if 0.0 < c <= t_end + 1e-12)

    state = initial_state(scenario)
    snapshots = [state]
    dt = cfg.dt_init
    reason = "reached_t_end"

    while state.t < t_end - 1e-12:
        if state.step_count >= cfg.max_steps:
            raise RuntimeError(f"step budget {cfg.max_steps} exhausted")
        next_stop = t_end
        while pending and pending[0] <= state.t + 1e-12:
            pending.pop(0)
        if pending:
            next_stop = min(next_stop, pending[0])
        dt_clipped = min(dt, next_stop - state.t)
        new_state = step(state, cfg, scenario, dt=dt_clipped)
        if new_state.t == state.t:
            # Newton could not advance at dt_min: freeze the last state.
            state = new_state
            reason = "degenerate_newton"
            break
        accepted_dt = new_state.t - state.t
        ledger.append_step(_step_row(scenario, new_state, accepted_dt))
        # audit valid states only; the frozen degenerate slice is outside
        # the identity's domain (its determinant can vanish)
        if not new_state.degenerate and not (
                new_state.phi_residual <= cfg.volume_audit_tol):
            raise RuntimeError(
                f"volume identity audit failed at t = {new_state.t:.6f}: "
                f"residual {new_state.phi_residual:.3e} exceeds "
                f"{cfg.volume_audit_tol:.1e}"
            )
        state = new_state
        if pending and abs(state.t - pending[0]) <= 1e-9:
            snapshots.append(state)
            pending.pop(0)
        if state.degenerate:
            reason = "degenerate_margin"
            break
        # Grow the proposal after a clean acceptance; restart the ramp from
        # what actually worked when the step halved internally.  A short
        # accepted dt from a checkpoint landing is not a failure, so it must
        # not reset the ramp.
        if accepted_dt >= dt_clipped - 1e-15:
            dt = min(cfg.dt_max, dt * cfg.growth)
        else:
            dt = min(cfg.dt_max, max(accepted_dt, cfg.dt_min) * cfg.growth)

    if snapshots[-1] is not state:
        snapshots.append(state)
    t_numeric = state.t if state.degenerate else None
    ledger.finish(reason, state, t_numeric)
    return FlowRun(scenario, cfg, ledger, snapshots, state)


@dataclass
class RescaleReport:
    """Covariance check of the run against its K-rescaled twin."""

    factor: float
    s_values: list
    defects: list          # sup-norm metric defect per sampled s
    defect_sup: float
    base_t_numeric: Optional[float]
    rescaled_t_numeric: Optional[float]
    rescaled_t_theory: float


def rescale_weight(K: float, s: float) -> float:
    return (K - 1.0) * math.exp(-s) + 1.0


def rescale_time(K: float, s: float) -> float:
    if K == 1.0:
        return s  # avoid the exp/log roundtrip at the identity
    return math.log((math.exp(s) + K - 1.0) / K)


def rescaled_run(K: float, scenario: Scenario, cfg: FlowConfig,
                 s_values: Optional[list] = None) -> RescaleReport:
    """Run the flow from K g0 and compare against k(s) g(t(s)).

    The rescaled problem is the scenario built on the ample class K A; the
    exact covariance k(s) = (K-1)e^-s + 1, t(s) = log((e^s + K - 1)/K) maps
    the base run onto it, so the reported defect isolates time-stepping
    error.  Both runs land exactly on the sampled times.
    """
    if K <= 0:
        raise ValueError("rescale factor must be positive")
    r = scenario.threshold
    if r is None:
        raise ValueError("rescale comparison needs a finite singular time")
    k_frac = Fraction(K)
    ample_scaled = scenario.ample.scaled(k_frac)
    scaled = build_scenario(scenario.surface, ample_scaled, scenario.grid)
    t_theory = scaled.singular_time

    if s_values is None:
        s_values = list(np.linspace(0.1, 0.9, 9) * t_theory)
    s_values = sorted(float(s) for s in s_values)
    t_values = [rescale_time(K, s) for s in s_values]

    base_cfg = replace(cfg, t_end=None, extra_checkpoints=tuple(t_values))
    base = run_flow(scenario, base_cfg)
    scaled_cfg = replace(cfg, t_end=None, extra_checkpoints=tuple(s_values))
    twin = run_flow(scaled, scaled_cfg)

    defects = []
    for s, t in zip(s_values, t_values):
        w = rescale_weight(K, s)
        g_base = base.snapshot_at(t).g
        g_twin = twin.snapshot_at(s).g
        d_base = np.max(np.abs(w * g_base.base.values - g_twin.base.values))
        d_fiber = np.max(np.abs(w * g_base.fiber.values - g_twin.fiber.values))
        defects.append(float(max(d_base, d_fiber)))

    return RescaleReport(
        factor=float(K),
        s_values=s_values,
        defects=defects,
        defect_sup=max(defects),
        base_t_numeric=base.t_numeric,
        rescaled_t_numeric=twin.t_numeric,
        rescaled_t_theory=t_theory,
    )

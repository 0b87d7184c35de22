"""Run configuration: file ingestion, validation, content addressing.

A run is fully specified by one small mapping (surface, polarization, grid,
time-stepper knobs, enabled checks, output options, seed).  Configs load
from TOML or JSON, every field has a default, and unknown keys are
rejected rather than ignored so a typo cannot silently change a run.  The
canonical serialized form is hashed to a short content address; runs land
in one directory per address, which makes sweeps reproducible and
diffable.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:                           # pragma: no cover - version shim
    import tomli as tomllib

from .ansatz import Scenario, build_scenario
from .certificates import CHECK_NAMES
from .flow import FlowConfig
from .picard import DivisorClass, catalog

MIN_GRID_NODES = 64

_FLOW_FIELDS = {f.name for f in fields(FlowConfig)}

DEFAULTS = {
    "scenario": {
        # catalog surface name: F<k>, P2, or T2
        "surface": "F1",
        # ample class coefficients, exact rationals as strings or ints
        "ample": ["4", "-1"],
    },
    "grid": {
        # half-width R of the fiber coordinate interval [-R, R]
        "half_width": 15.0,
        # number of nodes; resolution floor keeps stencils meaningful
        "n": 512,
    },
    # any FlowConfig field may be overridden here (scheme, dt_init, ...)
    "flow": {},
    "checks": {
        # certificate checks to run after the flow; subset of CHECK_NAMES
        "enabled": list(CHECK_NAMES),
        # metric-equivalence horizon; default T - 0.05 (last snapshot
        # when the flow is global)
        "t0": None,
        # optional polarization rescale factor; adds the covariance check
        "rescale_factor": None,
    },
    "outputs": {
        # run directories are created under this root
        "directory": "runs",
        # write SVG profile plots alongside the JSON/CSV artifacts
        "plots": False,
    },
    # reserved for randomized property sweeps; recorded in metadata
    "seed": 0,
}


def _reject_unknown(section: str, data: dict, allowed) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ValueError(
            f"unknown key(s) in [{section}]: {sorted(unknown)}; "
            f"allowed: {sorted(allowed)}"
        )


def _rational(value) -> str:
    """Validate one ample coefficient as an exact rational string."""
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(
                f"ample coefficient {value!r} is a float; write exact "
                f"rationals as strings, e.g. \"1/2\""
            )
        value = int(value)
    text = str(value)
    Fraction(text)   # raises ValueError on garbage
    return text


@dataclass(frozen=True)
class RunConfig:
    """Validated, resolved configuration for one flow run."""

    surface: str
    ample: tuple
    half_width: float
    n: int
    flow: FlowConfig
    checks_enabled: tuple
    checks_t0: Optional[float]
    rescale_factor: Optional[float]
    output_dir: str
    plots: bool
    seed: int

    def __post_init__(self):
        if self.n < MIN_GRID_NODES:
            raise ValueError(f"n = {self.n} below the floor "
                             f"{MIN_GRID_NODES}")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        unknown = set(self.checks_enabled) - set(CHECK_NAMES)
        if unknown:
            raise ValueError(f"unknown checks: {sorted(unknown)}")
        if self.rescale_factor is not None and not self.rescale_factor > 0:
            raise ValueError("rescale_factor must be positive")

    def scenario(self) -> Scenario:
        from .profiles import RhoGrid
        surface = catalog(self.surface)
        return build_scenario(surface, DivisorClass(self.ample),
                              RhoGrid(self.half_width, self.n))

    def as_dict(self) -> dict:
        flow = {f.name: getattr(self.flow, f.name)
                for f in fields(FlowConfig)}
        flow["extra_checkpoints"] = list(flow["extra_checkpoints"])
        return {
            "scenario": {"surface": self.surface,
                         "ample": list(self.ample)},
            "grid": {"half_width": self.half_width, "n": self.n},
            "flow": flow,
            "checks": {"enabled": list(self.checks_enabled),
                       "t0": self.checks_t0,
                       "rescale_factor": self.rescale_factor},
            "outputs": {"directory": self.output_dir, "plots": self.plots},
            "seed": self.seed,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True,
                          separators=(",", ":"), allow_nan=False)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def run_name(self) -> str:
        ample = "_".join(c.replace("/", "over").replace("-", "m")
                         for c in self.ample)
        return f"{self.surface}-{ample}-{self.fingerprint()}"

    def with_overrides(self, **paths) -> "RunConfig":
        """New config with dotted-path overrides, e.g. grid.n = 1024."""
        data = self.as_dict()
        for dotted, value in paths.items():
            parts = dotted.split(".")
            node = data
            for p in parts[:-1]:
                if p not in node:
                    raise ValueError(f"unknown config path {dotted!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config path {dotted!r}")
            node[parts[-1]] = value
        return from_mapping(data)


def from_mapping(data: dict) -> RunConfig:
    """Validate a raw mapping against the schema and defaults."""
    _reject_unknown("config", data, DEFAULTS)
    scen = {**DEFAULTS["scenario"], **data.get("scenario", {})}
    _reject_unknown("scenario", scen, DEFAULTS["scenario"])
    grid = {**DEFAULTS["grid"], **data.get("grid", {})}
    _reject_unknown("grid", grid, DEFAULTS["grid"])
    flow_over = dict(data.get("flow", {}))
    _reject_unknown("flow", flow_over, _FLOW_FIELDS)
    if "extra_checkpoints" in flow_over:
        flow_over["extra_checkpoints"] = tuple(
            float(t) for t in flow_over["extra_checkpoints"])
    checks = {**DEFAULTS["checks"], **data.get("checks", {})}
    _reject_unknown("checks", checks, DEFAULTS["checks"])
    outputs = {**DEFAULTS["outputs"], **data.get("outputs", {})}
    _reject_unknown("outputs", outputs, DEFAULTS["outputs"])

    ample = tuple(_rational(c) for c in scen["ample"])
    if not ample:
        raise ValueError("ample class needs at least one coefficient")
    return RunConfig(
        surface=str(scen["surface"]),
        ample=ample,
        half_width=float(grid["half_width"]),
        n=int(grid["n"]),
        flow=FlowConfig(**flow_over),
        checks_enabled=tuple(checks["enabled"]),
        checks_t0=(None if checks["t0"] is None else float(checks["t0"])),
        rescale_factor=(None if checks["rescale_factor"] is None
                        else float(checks["rescale_factor"])),
        output_dir=str(outputs["directory"]),
        plots=bool(outputs["plots"]),
        seed=int(data.get("seed", DEFAULTS["seed"])),
    )


def load_config(path) -> RunConfig:
    """Read TOML (default) or JSON (by suffix) into a validated config."""
    p = Path(path)
    raw = p.read_bytes()
    if p.suffix == ".json":
        data = json.loads(raw.decode())
    else:
        data = tomllib.loads(raw.decode())
    if not isinstance(data, dict):
        raise ValueError(f"{p}: config must be a table/object")
    return from_mapping(data)


def default_config() -> RunConfig:
    return from_mapping({})


__all__ = [
    "DEFAULTS",
    "MIN_GRID_NODES",
    "RunConfig",
    "default_config",
    "from_mapping",
    "load_config",
]

"""Scenario files: schema, validation, and dotted-path overrides.

Scenarios are JSON documents with a schema_version field. Validation
errors name the offending field and the violated constraint so CLI users
can fix configs without reading source.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

VARIANTS = ("full", "det_cbf", "robust_margin", "no_meta", "no_stochastic", "fixed_params")
BARRIER_FAMILIES = ("halfspace", "circle_clearance", "ellipse_clearance", "box_limit")


class ScenarioError(ValueError):
    """Config violates the scenario schema; message names field and constraint."""


def _require(cond: bool, fieldname: str, constraint: str):
    if not cond:
        raise ScenarioError(f"scenario field '{fieldname}': {constraint}")


@dataclass
class Scenario:
    """Validated scenario document (attribute access mirrors the JSON keys)."""

    name: str = "unnamed"
    plant: str = "scalar_integrator"
    dt: float = 0.02
    horizon: int = 200
    variant: str = "full"
    constraint_mode: str = "composite"
    lse_beta: float = 10.0
    x0: list = field(default_factory=lambda: [1.0])
    barriers: list = field(default_factory=lambda: [{"family": "halfspace", "index": 0, "offset": 0.0}])
    covariance: dict = field(default_factory=dict)
    noise_scale: float = 1.0
    noise_schedule: list = field(default_factory=list)
    reference: dict = field(default_factory=lambda: {"kind": "setpoint", "target": [0.0], "gain": 1.0})
    control: dict = field(default_factory=dict)
    risk: dict = field(default_factory=dict)
    context: dict = field(default_factory=dict)
    disturbances: list = field(default_factory=list)
    targets: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "Scenario":
        _require(self.schema_version == SCHEMA_VERSION, "schema_version",
                 f"must equal {SCHEMA_VERSION}")
        _require(self.plant in ("scalar_integrator", "planar_double_integrator", "synthetic12"),
                 "plant", "unknown plant id")
        _require(self.dt > 0, "dt", "must be > 0")
        _require(self.horizon >= 1, "horizon", "must be >= 1 step")
        _require(self.variant in VARIANTS, "variant", f"must be one of {VARIANTS}")
        _require(self.constraint_mode in ("composite", "per_constraint"),
                 "constraint_mode", "must be 'composite' or 'per_constraint'")
        _require(self.lse_beta > 0, "lse_beta", "must be > 0")
        _require(len(self.barriers) >= 1, "barriers", "need at least one barrier")
        for k, b in enumerate(self.barriers):
            fam = b.get("family")
            _require(fam in BARRIER_FAMILIES, f"barriers[{k}].family",
                     f"must be one of {BARRIER_FAMILIES}")
        horizon_t = self.horizon * self.dt
        for k, seg in enumerate(self.noise_schedule):
            _require(seg.get("t0", 0.0) >= 0.0, f"noise_schedule[{k}].t0", "must be >= 0")
            _require(seg.get("scale", 1.0) >= 0.0, f"noise_schedule[{k}].scale", "must be >= 0")
        for k, ev in enumerate(self.disturbances):
            kind = ev.get("kind")
            _require(kind in ("push", "friction_collapse", "sensor_dropout"),
                     f"disturbances[{k}].kind", "unknown disturbance kind")
            t_ev = ev.get("t", ev.get("t0", 0.0))
            _require(0.0 <= t_ev <= horizon_t, f"disturbances[{k}].t",
                     "must lie within the episode horizon")
        rb = self.risk.get("alpha_bounds", [0.1, 10.0])
        _require(rb[0] > 0 and rb[0] < rb[1], "risk.alpha_bounds", "need 0 < lo < hi")
        kb = self.risk.get("kappa_bounds", [0.0, 5.0])
        _require(kb[0] >= 0 and kb[0] < kb[1], "risk.kappa_bounds", "need 0 <= lo < hi")
        eps = self.targets.get("epsilon", 0.05)
        _require(0.0 < eps < 1.0, "targets.epsilon", "must lie in (0, 1)")
        cov = self.covariance
        for key in ("epi", "ale"):
            v = cov.get(key, 0.0)
            arr = np.atleast_1d(np.asarray(v, dtype=float))
            _require((arr >= 0).all(), f"covariance.{key}", "diagonal must be nonnegative")
        _require(cov.get("floor", 0.0) >= 0.0, "covariance.floor", "must be >= 0")
        _require(cov.get("ceiling", 1e3) > 0.0, "covariance.ceiling", "must be > 0")
        _require(cov.get("scale_applies_to", "both") in ("both", "aleatoric", "epistemic"),
                 "covariance.scale_applies_to", "must be both|aleatoric|epistemic")
        _require(cov.get("inject", "fused") in ("fused", "aleatoric"),
                 "covariance.inject", "must be fused|aleatoric")
        return self

    # convenience accessors with defaults -----------------------------------
    def risk_value(self, key, default):
        return self.risk.get(key, default)

    def control_value(self, key, default):
        return self.control.get(key, default)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version, "name": self.name, "plant": self.plant,
            "dt": self.dt, "horizon": self.horizon, "variant": self.variant,
            "constraint_mode": self.constraint_mode, "lse_beta": self.lse_beta,
            "x0": list(self.x0), "barriers": self.barriers, "covariance": self.covariance,
            "noise_scale": self.noise_scale, "noise_schedule": self.noise_schedule,
            "reference": self.reference, "control": self.control, "risk": self.risk,
            "context": self.context, "disturbances": self.disturbances, "targets": self.targets,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ScenarioError(f"scenario field '{sorted(unknown)[0]}': unknown key")
        return cls(**doc).validate()


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario file {path} is not valid JSON: {exc}") from exc
    return Scenario.from_dict(doc)


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(scenario: Scenario, overrides: list[str]) -> Scenario:
    """Apply key=value overrides with dotted paths into the document.

    Bare keys map onto conventional locations (e.g. kappa_max ->
    risk.kappa_bounds[1]); dotted keys index the raw document.
    """
    doc = scenario.to_dict()
    shortcuts = {
        "kappa_max": ("risk", "kappa_bounds", 1), "kappa_min": ("risk", "kappa_bounds", 0),
        "alpha_max": ("risk", "alpha_bounds", 1), "alpha_min": ("risk", "alpha_bounds", 0),
        "kappa0": ("risk", "kappa0"), "alpha0": ("risk", "alpha0"),
        "noise_scale": ("noise_scale",), "horizon": ("horizon",), "dt": ("dt",),
        "variant": ("variant",), "epsilon": ("targets", "epsilon"),
    }
    bound_defaults = {"kappa_bounds": [0.0, 5.0], "alpha_bounds": [0.1, 10.0]}
    for item in overrides:
        if "=" not in item:
            raise ScenarioError(f"override '{item}': expected key=value")
        key, _, raw = item.partition("=")
        value = _parse_value(raw)
        path = shortcuts.get(key, tuple(key.split(".")))
        node = doc
        for part in path[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
                continue
            if part not in node or not isinstance(node[part], (dict, list)):
                node[part] = list(bound_defaults[part]) if part in bound_defaults else {}
            node = node[part]
        last = path[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return Scenario.from_dict(doc)


def default_bound(value, default):
    return default if value is None or (isinstance(value, float) and math.isnan(value)) else value

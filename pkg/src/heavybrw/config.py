"""Experiment configuration: YAML parsing, validation and hashing.

A config names a kernel, a branching law, a scenario and its parameters.
Every input is explicit; there are no environment-dependent defaults and
seeds must be written out for random scenarios.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .kernel import BranchingLaw, KernelError, TransitionKernel, build_branching, build_kernel

__all__ = ["ConfigError", "ExperimentConfig", "SCENARIOS", "from_dict", "load_config", "parse_config", "tune_law"]

SCENARIOS = ("spectral", "moments", "simulate", "verify")
EXECUTION_KEYS = ("workers",)  # do not change any output

_TOP = {"scenario", "kernel", "law", "params", "output"}
_KERNEL = {"d", "alpha", "H", "R"}
_LAW = {"b", "beta", "beta_ratio", "adjust"}

# name -> (kind, default); a default of ... marks a required field
_PARAMS: dict[str, dict[str, tuple[str, Any]]] = {
    "spectral": {
        "lambdas": ("float_list", [0.0]),
        "x": ("point_list", [0]),
        "y": ("point", 0),
        "classify": ("bool", True),
        "box_radius": ("int", 20),
    },
    "moments": {
        "solver": ("choice:volterra,eigen,rk", "volterra"),
        "t_max": ("pos_float", ...),
        "step": ("pos_float", 0.05),
        "box_radius": ("int", 200),
        "quantities": ("quantities", ["total"]),
        "n_max": ("int", 1),
        "x": ("point", 0),
        "y": ("point", 0),
    },
    "simulate": {
        "times": ("float_list", ...),
        "trials": ("int", ...),
        "seed": ("seed", ...),
        "workers": ("int", 1),
        "population_cap": ("int", 10**6),
        "jump_table_radius": ("opt_int", None),
        "n_max": ("int", 2),
        "x": ("point", 0),
        "y": ("point_list", [0]),
        "capped_policy": ("choice:exclude,clamp", "exclude"),
    },
    "verify": {
        "quantities": ("quantities", ["total"]),
        "n_range": ("int_pair", [1, 1]),
        "t_max": ("pos_float", ...),
        "step": ("pos_float", 0.05),
        "window": ("opt_float_pair", None),
        "method": ("choice:integral-recursion,ODE,monte-carlo", "integral-recursion"),
        "x": ("point", 0),
        "y": ("point", 0),
        "box_radius": ("int", 200),
        "tolerances": ("tolerances", {}),
        "check_constant": ("bool", True),
        "critical_tol": ("pos_float", 1e-9),
        "trials": ("int", 10_000),
        "seed": ("seed", None),
        "snapshots": ("int", 40),
        "workers": ("int", 1),
    },
}


class ConfigError(ValueError):
    """A config problem, located by dotted field path and source line."""

    def __init__(self, field_path: str, message: str, line: int | None = None, source: str | None = None):
        self.field = field_path
        self.line = line
        self.source = source
        self.message = message
        where = source or "config"
        if line is not None:
            where += f", line {line}"
        super().__init__(f"{where}: field '{field_path}': {message}")


def _line_of(root, path: list[str]) -> int | None:
    node, line = root, None
    if root is not None:
        line = root.start_mark.line + 1
    for key in path:
        if not isinstance(node, yaml.MappingNode):
            break
        for k, v in node.value:
            if str(k.value) == key:
                line = k.start_mark.line + 1
                node = v
                break
        else:
            break
    return line


def tune_law(b: Mapping[int, float], target_beta: float, adjust: int) -> dict[int, float]:
    """Change b[adjust] so that sum_k (k-1) b_k equals ``target_beta``."""
    if adjust == 1 or adjust < 0:
        raise ValueError("adjust must be 0 or an offspring number >= 2")
    rest = math.fsum((k - 1) * v for k, v in b.items() if k != adjust)
    val = (target_beta - rest) / (adjust - 1)
    if val < 0:
        raise ValueError(f"b_{adjust} would be negative ({val:.6g}); adjust another rate")
    out = dict(b)
    out[adjust] = val
    return out


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    scenario: str
    kernel: dict
    law: dict
    params: dict
    output: str | None = None
    source: str | None = None
    _nodes: Any = field(default=None, repr=False)

    # --- construction of domain objects

    def build_kernel(self) -> TransitionKernel:
        try:
            return build_kernel(self.kernel["d"], self.kernel["alpha"], self.kernel.get("H"),
                                self.kernel.get("R"))
        except KernelError as exc:
            raise self.error("kernel", str(exc)) from exc

    def build_law(self, kernel: TransitionKernel | None = None) -> BranchingLaw:
        b = {int(k): float(v) for k, v in (self.law.get("b") or {}).items()}
        target = None
        if "beta" in self.law:
            target = float(self.law["beta"])
        elif "beta_ratio" in self.law:
            from .spectral import beta_c

            kernel = kernel or self.build_kernel()
            target = float(self.law["beta_ratio"]) * beta_c(kernel)
        if target is not None:
            adjust = int(self.law.get("adjust", 2 if target >= 0 else 0))
            try:
                b = tune_law(b, target, adjust)
            except ValueError as exc:
                raise self.error("law.adjust", str(exc)) from exc
        try:
            return build_branching(b)
        except KernelError as exc:
            raise self.error("law.b", str(exc)) from exc

    def error(self, field_path: str, message: str) -> ConfigError:
        return ConfigError(field_path, message, _line_of(self._nodes, field_path.split(".")), self.source)

    # --- identity

    def canonical(self, include_execution: bool = False) -> dict:
        params = {k: v for k, v in self.params.items() if include_execution or k not in EXECUTION_KEYS}
        if not include_execution:
            params.pop("seed", None)
        return {"scenario": self.scenario, "kernel": self.kernel, "law": self.law, "params": params}

    def config_hash(self) -> str:
        """Hash of everything but execution knobs and the seed.

        Two runs with the same hash are comparable; the seed is recorded
        separately so that runs differing only in the seed can be compared.
        """
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def to_dict(self) -> dict:
        out = self.canonical(include_execution=True)
        if self.output is not None:
            out["output"] = self.output
        return out

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """Apply dotted-path overrides (e.g. ``params.seed``) and revalidate."""
        raw = self.to_dict()
        for path, value in overrides.items():
            node = raw
            keys = path.split(".")
            for k in keys[:-1]:
                node = node.setdefault(k, {})
            node[keys[-1]] = value
        return _validate(raw, self.source, self._nodes)


# ---------------------------------------------------------------------------
# validation


def _point(v, where, err):
    if isinstance(v, bool):
        raise err(where, "expected a lattice point")
    if isinstance(v, int):
        return v
    if isinstance(v, (list, tuple)) and v and all(isinstance(c, int) and not isinstance(c, bool) for c in v):
        return list(v)
    raise err(where, f"expected an integer or a list of integers, got {v!r}")


def _coerce(kind: str, v, where: str, err):
    if kind == "bool":
        if not isinstance(v, bool):
            raise err(where, f"expected true or false, got {v!r}")
        return v
    if kind in ("int", "opt_int"):
        if v is None and kind == "opt_int":
            return None
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise err(where, f"expected a positive integer, got {v!r}")
        return v
    if kind == "seed":
        if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < 2**64:
            raise err(where, f"expected a seed in [0, 2^64), got {v!r}")
        return v
    if kind == "pos_float":
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not (v > 0 and math.isfinite(v)):
            raise err(where, f"expected a positive number, got {v!r}")
        return float(v)
    if kind == "float_list":
        if not isinstance(v, list) or not v or any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in v):
            raise err(where, f"expected a nonempty list of numbers, got {v!r}")
        return [float(c) for c in v]
    if kind == "point":
        return _point(v, where, err)
    if kind == "point_list":
        if not isinstance(v, list) or not v:
            raise err(where, "expected a nonempty list of lattice points")
        return [_point(c, f"{where}[{i}]", err) for i, c in enumerate(v)]
    if kind == "quantities":
        if not isinstance(v, list) or not v or any(c not in ("local", "total") for c in v):
            raise err(where, f"expected a list drawn from [local, total], got {v!r}")
        return list(v)
    if kind == "int_pair":
        if (not isinstance(v, list) or len(v) != 2 or any(isinstance(c, bool) or not isinstance(c, int) for c in v)
                or not 1 <= v[0] <= v[1]):
            raise err(where, f"expected [n_min, n_max] with 1 <= n_min <= n_max, got {v!r}")
        return list(v)
    if kind == "opt_float_pair":
        if v is None:
            return None
        if (not isinstance(v, list) or len(v) != 2 or any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in v)
                or not 0 < v[0] < v[1]):
            raise err(where, f"expected [t1, t2] with 0 < t1 < t2, got {v!r}")
        return [float(c) for c in v]
    if kind == "tolerances":
        if not isinstance(v, dict) or any(k not in ("exponent", "constant", "rate") for k in v):
            raise err(where, "expected a map with keys among exponent, constant, rate")
        out = {}
        for k, c in v.items():
            out[k] = _coerce("pos_float", c, f"{where}.{k}", err)
        return out
    if kind.startswith("choice:"):
        opts = kind.split(":", 1)[1].split(",")
        if v not in opts:
            raise err(where, f"expected one of {opts}, got {v!r}")
        return v
    raise AssertionError(kind)


def _validate(raw, source: str | None, nodes) -> ExperimentConfig:
    def err(path, msg):
        return ConfigError(path, msg, _line_of(nodes, path.split(".")), source)

    if not isinstance(raw, dict):
        raise err("<root>", "the config must be a mapping")
    for k in raw:
        if k not in _TOP:
            raise err(str(k), f"unknown field (allowed: {sorted(_TOP)})")
    scenario = raw.get("scenario")
    if scenario not in SCENARIOS:
        raise err("scenario", f"expected one of {list(SCENARIOS)}, got {scenario!r}")

    kern = raw.get("kernel")
    if not isinstance(kern, dict):
        raise err("kernel", "missing or not a mapping")
    for k in kern:
        if k not in _KERNEL:
            raise err(f"kernel.{k}", f"unknown field (allowed: {sorted(_KERNEL)})")
    d = kern.get("d")
    if isinstance(d, bool) or not isinstance(d, int) or not 1 <= d <= 3:
        raise err("kernel.d", f"expected an integer in 1..3, got {d!r}")
    a = kern.get("alpha")
    if isinstance(a, bool) or not isinstance(a, (int, float)) or not 0 < a < 2:
        raise err("kernel.alpha", f"must lie in (0, 2), got {a!r}")
    kernel = {"d": d, "alpha": float(a)}
    if kern.get("R") is not None:
        R = kern["R"]
        if isinstance(R, bool) or not isinstance(R, int) or R < 2:
            raise err("kernel.R", f"expected an integer >= 2, got {R!r}")
        kernel["R"] = R
    if kern.get("H") is not None:
        H = kern["H"]
        if isinstance(H, (int, float)) and not isinstance(H, bool):
            H = {"kind": "constant", "params": [float(H)]}
        if not isinstance(H, dict):
            raise err("kernel.H", "expected a number or {kind, params}")
        kernel["H"] = copy.deepcopy(H)

    law_raw = raw.get("law") or {}
    if not isinstance(law_raw, dict):
        raise err("law", "expected a mapping")
    for k in law_raw:
        if k not in _LAW:
            raise err(f"law.{k}", f"unknown field (allowed: {sorted(_LAW)})")
    law: dict = {}
    b = law_raw.get("b") or {}
    if not isinstance(b, dict):
        raise err("law.b", "expected a map from offspring number to rate")
    clean_b = {}
    for k, v in b.items():
        if isinstance(k, str) and k.strip().isdigit():
            k = int(k)  # JSON sidecars store map keys as strings
        if isinstance(k, bool) or not isinstance(k, int) or k < 0 or k == 1:
            raise err(f"law.b.{k}", "offspring numbers must be integers >= 0 other than 1")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v >= 0:
            raise err(f"law.b.{k}", f"rates must be nonnegative numbers, got {v!r}")
        clean_b[k] = float(v)
    law["b"] = {k: clean_b[k] for k in sorted(clean_b)}
    if "beta" in law_raw and "beta_ratio" in law_raw:
        raise err("law.beta_ratio", "give either beta or beta_ratio, not both")
    for key in ("beta", "beta_ratio"):
        if key in law_raw:
            v = law_raw[key]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise err(f"law.{key}", f"expected a number, got {v!r}")
            law[key] = float(v)
    if "adjust" in law_raw:
        v = law_raw["adjust"]
        if isinstance(v, bool) or not isinstance(v, int) or v < 0 or v == 1:
            raise err("law.adjust", "expected an offspring number 0 or >= 2")
        law["adjust"] = v

    params_raw = raw.get("params") or {}
    if not isinstance(params_raw, dict):
        raise err("params", "expected a mapping")
    schema = _PARAMS[scenario]
    for k in params_raw:
        if k not in schema:
            raise err(f"params.{k}", f"unknown field for scenario {scenario} (allowed: {sorted(schema)})")
    params = {}
    for name, (kind, default) in schema.items():
        where = f"params.{name}"
        if name in params_raw:
            params[name] = _coerce(kind, params_raw[name], where, err)
        elif default is ...:
            raise err(where, "required field is missing")
        else:
            params[name] = copy.deepcopy(default)
    if scenario == "verify" and params["method"] == "monte-carlo" and params["seed"] is None:
        raise err("params.seed", "monte-carlo verification needs an explicit seed")
    if scenario == "simulate" and any(b2 <= a2 for a2, b2 in zip(params["times"], params["times"][1:])):
        raise err("params.times", "snapshot times must be increasing")

    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        raise err("output", "expected a directory path")
    return ExperimentConfig(scenario, kernel, law, params, output, source, nodes)


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    try:
        nodes = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError("<syntax>", str(getattr(exc, "problem", exc)), line, source) from exc
    return _validate(raw, source, nodes)


def from_dict(raw: Mapping, source: str | None = None) -> ExperimentConfig:
    return _validate(copy.deepcopy(dict(raw)), source, None)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {p}: {exc.strerror}", None, str(p)) from exc
    return parse_config(text, str(p))

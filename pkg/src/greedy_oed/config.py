"""Plain-text ``key = value`` problem configuration.

Lines starting with ``#`` are comments. Recognised keys::

    n_params, n_sensors, n_steps      positive integers (required)
    wave_speed, decay, pulse_width    floats
    seed                              integer
    noise_sigma                       float; default 0.1 * peak kernel amplitude
    prior.kind                        identity | exponential
    prior.variance, prior.length_scale
    cost_weights                      comma list, one per sensor
    mask.param_weights                comma list, one per parameter
    mask.time_weights                 comma list, one per timestep
    mask.zero_params                  ranges such as ``0-15, 20``

The mask is the outer product of the parameter and time weights, with any
``mask.zero_params`` entries forced to zero.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .lti import LtiProblem, PriorSpec, WeightSpec, make_wave_problem

_INT_KEYS = {"n_params", "n_sensors", "n_steps", "seed"}
_FLOAT_KEYS = {"wave_speed", "decay", "pulse_width", "noise_sigma", "prior.variance", "prior.length_scale"}
_STR_KEYS = {"prior.kind"}
_LIST_KEYS = {"cost_weights", "mask.param_weights", "mask.time_weights"}
_RANGE_KEYS = {"mask.zero_params"}
KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _LIST_KEYS | _RANGE_KEYS
REQUIRED_KEYS = ("n_params", "n_sensors", "n_steps")


def _parse_ranges(key: str, text: str) -> list[int]:
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise InvalidConfig(f"bad range {part!r}", key) from None
    return out


def parse_config(text: str) -> dict:
    cfg: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected 'key = value'", line)
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise InvalidConfig("unknown key", key)
        try:
            if key in _INT_KEYS:
                cfg[key] = int(value)
            elif key in _FLOAT_KEYS:
                cfg[key] = float(value)
            elif key in _LIST_KEYS:
                cfg[key] = [float(x) for x in value.split(",") if x.strip()]
            elif key in _RANGE_KEYS:
                cfg[key] = _parse_ranges(key, value)
            else:
                cfg[key] = value.strip("\"'")
        except ValueError:
            raise InvalidConfig(f"cannot parse {value!r}", key) from None
    for key in REQUIRED_KEYS:
        if key not in cfg:
            raise InvalidConfig("missing required key", key)
    return cfg


def load_config(path) -> dict:
    return parse_config(Path(path).read_text())


def problem_from_config(cfg: dict) -> tuple[LtiProblem, WeightSpec | None]:
    prior = PriorSpec(
        kind=cfg.get("prior.kind", "exponential"),
        variance=cfg.get("prior.variance", 1.0),
        length_scale=cfg.get("prior.length_scale"),
    )
    kwargs = {k: cfg[k] for k in ("wave_speed", "decay", "seed") if k in cfg}
    if "pulse_width" in cfg:
        kwargs["pulse_width"] = cfg["pulse_width"]
    problem = make_wave_problem(
        cfg["n_params"], cfg["n_sensors"], cfg["n_steps"], prior=prior, noise_sigma=cfg.get("noise_sigma"), **kwargs
    )
    return problem, weights_from_config(cfg, problem)


def weights_from_config(cfg: dict, problem: LtiProblem) -> WeightSpec | None:
    cost = mask = None
    if "cost_weights" in cfg:
        cost = np.array(cfg["cost_weights"])
        if cost.shape != (problem.n_sensors,):
            raise InvalidConfig(f"expected {problem.n_sensors} values, got {cost.size}", "cost_weights")
    if any(k.startswith("mask.") for k in cfg):
        pw = np.ones(problem.n_params)
        tw = np.ones(problem.n_steps)
        if "mask.param_weights" in cfg:
            pw = np.array(cfg["mask.param_weights"])
            if pw.shape != (problem.n_params,):
                raise InvalidConfig(f"expected {problem.n_params} values, got {pw.size}", "mask.param_weights")
        if "mask.time_weights" in cfg:
            tw = np.array(cfg["mask.time_weights"])
            if tw.shape != (problem.n_steps,):
                raise InvalidConfig(f"expected {problem.n_steps} values, got {tw.size}", "mask.time_weights")
        for j in cfg.get("mask.zero_params", []):
            if not 0 <= j < problem.n_params:
                raise InvalidConfig(f"parameter index {j} out of range", "mask.zero_params")
            pw[j] = 0.0
        mask = np.outer(pw, tw)
    if cost is None and mask is None:
        return None
    spec = WeightSpec(cost_weights=cost, mask_weights=mask)
    spec.validate(problem)
    return spec

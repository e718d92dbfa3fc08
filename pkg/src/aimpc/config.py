"""Scenario configuration files (TOML).

Sections mirror the domain types and keys carry the dataclass field names::

    [scenario]    name, mode, sim_time
    [ego]         v0_ego, s0_ego, v_ref_ego, tau, omega_n, zeta, K,
                  u_a_min, m1, b1, m2, b2
    [nv]          v0_nv, s0_nv, v_ref_nv, q_s, q_v, q_a, T, tau, l_nv, a, b
    [geometry]    L, gap, M, s_ramp_end, l_enc, l_merged, s_merge_start, M_l
    [weights]     q_s, q_v, q_a, q_l, q_ua, terminal_weight, alpha_fixed
    [solver]      N, Ts, regularization, node_limit, rel_gap
    [imputation]  r, eps

Only ``v0_ego`` and ``v0_nv`` are required; anything else falls back to the
dataclass default and the fallback is logged. The acceleration limits live in
``[ego]`` and are shared by the NV controller.
"""

import logging
import math
from dataclasses import fields

import tomli

from .dynamics import ModelParams
from .harness import Scenario
from .neighbor import EllipseConfig, NvMpcConfig, NvTrueWeights
from .planner import AdmissibilityConfig, EgoWeights, HorizonConfig, PlannerConfig, SafetyConfig

log = logging.getLogger(__name__)

REQUIRED = {("ego", "v0_ego"), ("nv", "v0_nv")}

_SCENARIO_KEYS = {"scenario": ("name", "mode", "sim_time"),
                  "ego": ("v0_ego", "s0_ego", "v_ref_ego"),
                  "nv": ("v0_nv", "s0_nv", "v_ref_nv"),
                  "weights": ("alpha_fixed",),
                  "imputation": ("r", "eps")}


class ConfigError(ValueError):
    """Bad configuration; the message names the offending key or line."""


def _names(cls):
    return tuple(f.name for f in fields(cls))


def _layout():
    """Section -> {key: (target, type)} where target says which object gets the key."""
    out = {}
    for sec, keys in _SCENARIO_KEYS.items():
        for k in keys:
            out.setdefault(sec, {})[k] = "scenario"
    for k in _names(ModelParams):
        out["ego"][k] = "model"
    for k in _names(AdmissibilityConfig):
        out["ego"][k] = "admissibility"
    for k in _names(NvTrueWeights):
        out["nv"][k] = "nv_weights"
    for k in ("T", "tau", "l_nv"):
        out["nv"][k] = "nv"
    for k in _names(EllipseConfig):
        out["nv"][k] = "ellipse"
    out["geometry"] = {k: "safety" for k in _names(SafetyConfig)}
    for k in _names(EgoWeights):
        out["weights"][k] = "ego_weights"
    out["weights"]["terminal_weight"] = "planner"
    out["solver"] = {k: "horizon" for k in _names(HorizonConfig)}
    for k in ("regularization", "node_limit", "rel_gap"):
        out["solver"][k] = "planner"
    return out


LAYOUT = _layout()


def _check_value(sec, key, value):
    name = f"{sec}.{key}"
    if key == "alpha_fixed":
        if not isinstance(value, list) or len(value) != 3:
            raise ConfigError(f"{name}: expected a list of three numbers")
        return tuple(_check_value(sec, f"{key}[{i}]", v) for i, v in enumerate(value))
    if key in ("name", "mode"):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{name}: must be finite")
    if key in ("N", "T", "r", "node_limit"):
        if int(value) != value:
            raise ConfigError(f"{name}: expected an integer")
        return int(value)
    return float(value)


def parse_config(doc):
    """Validate a parsed TOML mapping and return ``{target: {field: value}}``."""
    unknown = sorted(set(doc) - set(LAYOUT))
    if unknown:
        raise ConfigError(f"unknown section [{unknown[0]}]")
    groups = {}
    for sec, table in doc.items():
        if not isinstance(table, dict):
            raise ConfigError(f"{sec}: expected a [{sec}] table")
        for key, value in table.items():
            if key not in LAYOUT[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            groups.setdefault(LAYOUT[sec][key], {})[key] = _check_value(sec, key, value)
    for sec, key in sorted(REQUIRED):
        if key not in doc.get(sec, {}):
            raise ConfigError(f"missing required key {sec}.{key}")
    for sec, keys in LAYOUT.items():
        for key in keys:
            if key not in doc.get(sec, {}) and (sec, key) not in REQUIRED:
                log.info("config: %s.%s not set, using the default", sec, key)
    return groups


def build_scenario(groups, mode=None):
    """Turn validated groups into a :class:`Scenario`."""
    g = {k: dict(v) for k, v in groups.items()}
    try:
        adm = AdmissibilityConfig(**g.get("admissibility", {}))
        planner = PlannerConfig(
            safety=SafetyConfig(**g.get("safety", {})),
            admissibility=adm,
            horizon=HorizonConfig(**g.get("horizon", {})),
            ego_weights=EgoWeights(**g.get("ego_weights", {})),
            model=ModelParams(**g.get("model", {})),
            **g.get("planner", {}))
        nv = NvMpcConfig(Ts=planner.horizon.Ts, ellipse=EllipseConfig(**g.get("ellipse", {})),
                         admissibility=adm, **g.get("nv", {}))
        sc = g.get("scenario", {})
        if mode is not None:
            sc["mode"] = mode
        return Scenario(nv_weights=NvTrueWeights(**g.get("nv_weights", {})), planner=planner, nv=nv, **sc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_scenario(path, mode=None):
    """Read a TOML file into a :class:`Scenario`, raising :class:`ConfigError`."""
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except tomli.TOMLDecodeError as exc:
        # the decoder message already carries "(at line L, column C)"
        raise ConfigError(f"{path}: {exc}") from exc
    return build_scenario(parse_config(doc), mode)

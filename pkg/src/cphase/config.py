"""Strict JSON scenario configuration: schema, loading and object construction.

Validation errors carry the line of the offending key in the source file.
Unknown keys and duplicate keys are rejected.
"""
from __future__ import annotations

import hashlib
import json
from json.decoder import scanstring
from pathlib import Path

import jsonschema

from .device import NormalFormParams, Setpoints, droop_params
from .network import PQ, PV, GridEvent, Network, Slack, build_admittance, solve_power_flow
from .sim import CHANNELS, Scenario, SlackProfile, multisine, scenario_from_power_flow


class ConfigError(ValueError):
    """Invalid configuration; ``line`` points into the source file when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_idx = {"type": "integer", "minimum": 0}
_matrix = {"type": "array", "items": {"type": "array", "items": _num}}
_tones = {"type": "array", "items": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


PARAMS_SCHEMA = _obj(
    {
        "A": _matrix,
        "B": _matrix,
        "C": _matrix,
        "D": _matrix,
        "p_set": _num,
        "q_set": _num,
        "v_set": _pos,
        "vq_droop": {"type": "boolean"},
    },
    ["A", "B", "C", "D", "p_set", "q_set", "v_set", "vq_droop"],
)

_droop = _obj(
    {
        "k_p": _pos,
        "k_q": _pos,
        "tau_p": _pos,
        "tau_q": _pos,
        "alpha": {"type": "number", "minimum": 0},
        "n_x": {"enum": [0, 1, 2]},
        "crosstalk": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
    },
    ["k_p", "k_q"],
)

_multisine = _obj(
    {"n_tones": {"type": "integer", "minimum": 1}, "w_min": _pos, "w_max": _pos, "amplitude": _num},
    ["n_tones", "w_min", "w_max", "amplitude"],
)

CONFIG_SCHEMA = _obj(
    {
        "grid": _obj(
            {
                "buses": {"type": "integer", "minimum": 1},
                "lines": {
                    "type": "array",
                    "items": _obj({"from": _idx, "to": _idx, "b": _num, "g": {"type": "number", "minimum": 0}},
                                  ["from", "to", "b"]),
                },
                "shunts": {
                    "type": "array",
                    "items": _obj({"bus": _idx, "g": _num, "b": _num}, ["bus"]),
                },
            },
            ["buses", "lines"],
        ),
        "power_flow": {
            "type": "array",
            "items": _obj(
                {
                    "bus": _idx,
                    "type": {"enum": ["slack", "pq", "pv"]},
                    "p": _num,
                    "q": _num,
                    "v": _pos,
                    "phi": _num,
                },
                ["bus", "type"],
            ),
        },
        "devices": {
            "type": "array",
            "items": _obj(
                {"bus": _idx, "droop": _droop, "params": PARAMS_SCHEMA, "params_file": {"type": "string"}}, ["bus"]
            ),
        },
        "slacks": {
            "type": "array",
            "items": _obj(
                {
                    "bus": _idx,
                    "base_omega": _num,
                    "sigma_tones": _tones,
                    "phi_tones": _tones,
                    "sigma_multisine": _multisine,
                    "phi_multisine": _multisine,
                    "drift": {"type": "number", "minimum": 0},
                },
                ["bus"],
            ),
        },
        "events": {
            "type": "array",
            "items": _obj(
                {
                    "time": {"type": "number", "minimum": 0},
                    "action": {"enum": ["remove_line", "add_line", "remove_bus", "scale_load"]},
                    "args": {"type": "array", "items": _num},
                },
                ["time", "action", "args"],
            ),
        },
        "simulation": _obj(
            {
                "t_end": _pos,
                "dt": _pos,
                "seed": {"type": "integer", "minimum": 0},
                "omega_nom": _num,
                "noise": {"type": "number", "minimum": 0},
                "channels": {"type": "array", "items": {"enum": list(CHANNELS)}, "minItems": 1},
                "buses": {"type": "array", "items": _idx},
            },
            ["t_end", "dt"],
        ),
        "linearize": _obj(
            {"bus": _idx, "phases": {"type": "array", "items": _num, "minItems": 2}}
        ),
        "identify": _obj(
            {
                "trajectory": {"type": "string"},
                "bus": _idx,
                "order": {"type": "integer", "minimum": 0},
                "setpoints": _obj({"p_set": _num, "q_set": _num, "v_set": _pos}, ["p_set", "q_set", "v_set"]),
                "omega_ref": _num,
                "smoothing_window": {"type": "integer", "minimum": 1},
                "use_recorded_eta": {"type": "boolean"},
            },
            ["trajectory"],
        ),
        "certify": _obj(
            {
                "gamma_max": {"type": "number", "minimum": 1},
                "dphi_max": {"type": "number", "minimum": 0},
                "s_grid": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                "crosstalk_direction": {"enum": ["text_consistent", "as_printed"]},
            }
        ),
    },
    ["grid"],
)


def _key_lines(text: str) -> dict[tuple, int]:
    """Map every JSON path (tuple of keys / indices) to the line where it starts."""
    dec = json.JSONDecoder()
    out: dict[tuple, int] = {}

    def ws(i):
        while i < len(text) and text[i] in " \t\r\n":
            i += 1
        return i

    def line_of(i):
        return text.count("\n", 0, i) + 1

    def value(i, path):
        i = ws(i)
        out.setdefault(path, line_of(i))
        if text[i] == "{":
            i = ws(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                i = ws(i)
                key, j = scanstring(text, i + 1)
                out[path + (key,)] = line_of(i)
                i = ws(j) + 1  # skip ':'
                i = ws(value(i, path + (key,)))
                if text[i] == "}":
                    return i + 1
                i += 1
        if text[i] == "[":
            i = ws(i + 1)
            if text[i] == "]":
                return i + 1
            k = 0
            while True:
                i = ws(value(i, path + (k,)))
                k += 1
                if text[i] == "]":
                    return i + 1
                i += 1
        _, end = dec.raw_decode(text, i)
        return end

    value(0, ())
    return out


def _no_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ConfigError(f"duplicate key {k!r}")
        seen[k] = v
    return seen


def parse_config(text: str, schema: dict = CONFIG_SCHEMA) -> dict:
    """Parse and validate ``text``; raises :class:`ConfigError` on any problem."""
    try:
        data = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno) from None
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        lines = _key_lines(text)
        path = tuple(err.absolute_path)
        if err.validator == "additionalProperties":
            allowed = set(err.schema.get("properties", {}))
            unknown = sorted(set(err.instance) - allowed)
            path = path + (unknown[0],)
            msg = f"unknown key {unknown[0]!r} at {_fmt(path[:-1])}; allowed keys: {', '.join(sorted(allowed))}"
        else:
            msg = f"{_fmt(path)}: {err.message}"
        raise ConfigError(msg, lines.get(path))
    return data


def _fmt(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "top level"


def load_config(path) -> tuple[dict, str]:
    """Validated config and the SHA-256 of its bytes."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(raw.decode("utf-8")), hashlib.sha256(raw).hexdigest()


def load_params(path) -> NormalFormParams:
    """Read a NormalFormParams JSON file (schema :data:`PARAMS_SCHEMA`)."""
    text = Path(path).read_text()
    return NormalFormParams.from_dict(parse_config(text, PARAMS_SCHEMA))


def build_network(cfg: dict) -> Network:
    g = cfg["grid"]
    n = g["buses"]
    for k, ln in enumerate(g["lines"]):
        if ln["from"] >= n or ln["to"] >= n or ln["from"] == ln["to"]:
            raise ConfigError(f"/grid/lines/{k}: invalid line {ln['from']}-{ln['to']} for {n} buses")
    lines = [(ln["from"], ln["to"], ln["b"], ln.get("g", 0.0)) for ln in g["lines"]]
    shunts = {}
    for k, sh in enumerate(g.get("shunts", [])):
        if sh["bus"] >= n:
            raise ConfigError(f"/grid/shunts/{k}: bus {sh['bus']} does not exist")
        shunts[sh["bus"]] = shunts.get(sh["bus"], 0j) + complex(sh.get("g", 0.0), sh.get("b", 0.0))
    return build_admittance(lines, shunts, n_bus=n)


def build_devices(cfg: dict, base_dir=None) -> dict[int, NormalFormParams]:
    """Device models by bus; ``params_file`` paths are relative to ``base_dir``."""
    n = cfg["grid"]["buses"]
    out = {}
    for k, d in enumerate(cfg.get("devices", [])):
        b = d["bus"]
        if b >= n:
            raise ConfigError(f"/devices/{k}: bus {b} does not exist")
        if b in out:
            raise ConfigError(f"/devices/{k}: bus {b} already has a device")
        if sum(key in d for key in ("droop", "params", "params_file")) != 1:
            raise ConfigError(f"/devices/{k}: give exactly one of 'droop', 'params' or 'params_file'")
        if "params_file" in d:
            path = Path(d["params_file"])
            if not path.is_absolute() and base_dir is not None:
                path = Path(base_dir) / path
            if not path.exists():
                raise ConfigError(f"/devices/{k}/params_file: file not found: {path}")
            out[b] = load_params(path)
            continue
        try:
            if "params" in d:
                out[b] = NormalFormParams.from_dict(d["params"])
            else:
                dr = d["droop"]
                out[b] = droop_params(
                    dr["k_p"], dr["k_q"], dr.get("tau_p", 0.1), dr.get("tau_q", 0.1), Setpoints(),
                    alpha=dr.get("alpha", 1.0), n_x=dr.get("n_x", 2), crosstalk=tuple(dr.get("crosstalk", (0.0, 0.0))),
                )
        except ValueError as exc:
            raise ConfigError(f"/devices/{k}: {exc}") from None
    return out


def build_pf_spec(cfg: dict) -> list:
    n = cfg["grid"]["buses"]
    if "power_flow" not in cfg:
        raise ConfigError("a 'power_flow' block is required for this command")
    spec = [None] * n
    for k, e in enumerate(cfg["power_flow"]):
        b = e["bus"]
        if b >= n or spec[b] is not None:
            raise ConfigError(f"/power_flow/{k}: bus {b} is invalid or listed twice")
        if e["type"] == "slack":
            spec[b] = Slack(e.get("v", 1.0), e.get("phi", 0.0))
        elif e["type"] == "pv":
            spec[b] = PV(e.get("p", 0.0), e.get("v", 1.0))
        else:
            spec[b] = PQ(e.get("p", 0.0), e.get("q", 0.0))
    missing = [b for b, s in enumerate(spec) if s is None]
    if missing:
        raise ConfigError(f"/power_flow: no entry for bus(es) {missing}")
    return spec


def operating_point(cfg: dict, net: Network | None = None):
    net = build_network(cfg) if net is None else net
    return solve_power_flow(net, build_pf_spec(cfg))


def build_slacks(cfg: dict, pf_spec, omega_nom: float) -> dict[int, SlackProfile]:
    out = {}
    for k, s in enumerate(cfg.get("slacks", [])):
        b = s["bus"]
        if b >= len(pf_spec) or not isinstance(pf_spec[b], Slack):
            raise ConfigError(f"/slacks/{k}: bus {b} is not a slack bus in the power flow")
        sig = list(map(tuple, s.get("sigma_tones", [])))
        phi = list(map(tuple, s.get("phi_tones", [])))
        if "sigma_multisine" in s:
            sig += list(multisine(**s["sigma_multisine"]))
        if "phi_multisine" in s:
            phi += list(multisine(**s["phi_multisine"]))
        try:
            out[b] = SlackProfile(
                base_v=pf_spec[b].v_mag,
                base_omega=s.get("base_omega", omega_nom),
                phi0=pf_spec[b].phi,
                sigma_tones=tuple(sig),
                phi_tones=tuple(phi),
                drift=s.get("drift", 0.0),
            )
        except ValueError as exc:
            raise ConfigError(f"/slacks/{k}: {exc}") from None
    for b, sp in enumerate(pf_spec):
        if isinstance(sp, Slack) and b not in out:
            out[b] = SlackProfile(base_v=sp.v_mag, base_omega=omega_nom, phi0=sp.phi)
    return out


def build_scenario(cfg: dict, seed: int | None = None, base_dir=None) -> Scenario:
    """Scenario at the power-flow equilibrium described by ``cfg``."""
    if "simulation" not in cfg:
        raise ConfigError("a 'simulation' block is required for this command")
    sim = cfg["simulation"]
    net = build_network(cfg)
    spec = build_pf_spec(cfg)
    devices = build_devices(cfg, base_dir)
    omega_nom = sim.get("omega_nom", 0.0)
    slacks = build_slacks(cfg, spec, omega_nom)
    for b in devices:
        if b in slacks:
            raise ConfigError(f"bus {b} is both a device and a slack")
    try:
        events = tuple(GridEvent(e["time"], e["action"], tuple(e["args"])) for e in cfg.get("events", []))
    except ValueError as exc:
        raise ConfigError(f"/events: {exc}") from None
    seed = sim.get("seed", 0) if seed is None else seed
    try:
        return scenario_from_power_flow(
            net, spec, devices, slacks, events=events, t_end=sim["t_end"], dt=sim["dt"],
            omega_nom=omega_nom, seed=seed, noise=sim.get("noise", 0.0),
        )
    except (ValueError, IndexError, KeyError) as exc:
        raise ConfigError(str(exc)) from None

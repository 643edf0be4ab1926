"""Experiment configuration: TOML parsing, schema validation and problem assembly."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dynamics import Network, NetworkState, check_nonsingular
from .gains import GainError, GainProfile, GainSchedule, assign_subgraph_gains, check_admissible, check_positive
from .graph import Digraph, GraphError, SwitchingSchedule, is_weight_balanced, laplacian, min_ujsc_window
from .objective import make_example1, make_example2, quadratic, scaled_quadratic
from .passivity import AgentParams, PassivityError, ifp_index_minimax
from .sim import Problem, SimConfig


class ConfigError(ValueError):
    """Schema or semantic validation failure; ``path`` locates the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


_NUM = {"type": "number"}
_MATRIX = {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 1}, "minItems": 1}
_VECTOR_OR_MATRIX = {"type": "array", "items": {"anyOf": [_NUM, {"type": "array", "items": _NUM}]}}

_PROFILE = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["constant", "sinusoidal", "expression"]},
        "value": {"type": "number", "exclusiveMinimum": 0},
        "offset": _NUM,
        "amplitude": _NUM,
        "frequency": _NUM,
        "phase": _NUM,
        "expr": {"type": "string"},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ifpopt experiment",
    "type": "object",
    "required": ["objectives", "agents", "gain"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "anchor": {"type": "string", "description": "published result this experiment reproduces"},
        "description": {"type": "string"},
        "algorithm": {"enum": ["alg1", "alg2"], "default": "alg1"},
        "seed": {"type": "integer", "minimum": 0, "default": 0},
        "allow_inadmissible_gain": {
            "type": "boolean",
            "description": "run the first algorithm even when the gain bound is violated (instability studies)",
        },
        "objectives": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["kind"],
                "additionalProperties": False,
                "properties": {
                    "kind": {"enum": ["example1", "example2", "quadratic", "scaled_quadratic"]},
                    "index": {"type": "integer", "minimum": 1, "maximum": 4},
                    "Q": _MATRIX,
                    "c": {"type": "array", "items": _NUM, "minItems": 1},
                    "offset": _NUM,
                    "scale": {"type": "number", "exclusiveMinimum": 0},
                    "center": {"type": "array", "items": _NUM, "minItems": 1},
                },
            },
        },
        "agents": {
            "type": "object",
            "required": ["alpha", "beta", "gamma"],
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "beta": _NUM,
                "gamma": {"type": "number", "exclusiveMinimum": 0},
                "C": _MATRIX,
                "J": {"type": "array", "items": _MATRIX},
                "K": {"type": "array", "items": _MATRIX},
                "nu": {"type": "array", "items": {"type": "number", "maximum": 0}},
            },
        },
        "graph": {
            "type": "object",
            "required": ["adjacency"],
            "additionalProperties": False,
            "properties": {"adjacency": _MATRIX},
        },
        "schedule": {
            "type": "object",
            "required": ["modes", "dwell"],
            "additionalProperties": False,
            "properties": {
                "modes": {"type": "array", "items": _MATRIX, "minItems": 1},
                "dwell": {"type": "number", "exclusiveMinimum": 0},
                "order": {"enum": ["random", "cyclic"], "default": "cyclic"},
            },
        },
        "gain": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                **_PROFILE["properties"],
                "kind": {"enum": ["constant", "sinusoidal", "expression", "per_subgraph"]},
                "profiles": {"type": "array", "items": _PROFILE, "minItems": 1},
                "anchors": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            },
        },
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"x": _VECTOR_OR_MATRIX, "lam": _VECTOR_OR_MATRIX},
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "t_end": {"type": "number", "exclusiveMinimum": 0},
                "record_every": {"type": "integer", "minimum": 1},
                "monitor_lyapunov": {"type": "boolean"},
                "monitor_passivity": {"type": "boolean"},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "plot": {"type": "boolean"}},
        },
    },
    "oneOf": [{"required": ["graph"]}, {"required": ["schedule"]}],
}


def _path(err: jsonschema.ValidationError) -> str:
    parts = []
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else (f".{p}" if parts else str(p)))
    return "".join(parts) or "<root>"


def validate_schema(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        msg = e.message
        if e.validator == "oneOf" and not e.absolute_path:
            msg = "exactly one of 'graph' or 'schedule' is required"
        raise ConfigError(msg, _path(e))


def load_toml(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}", str(path)) from None


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# --- builtins --------------------------------------------------------------

BUILTIN_ALIASES = {"example1": "example1-case1", "example2": "example2-alg1-sigma0.005"}


def builtin_names() -> list[str]:
    files = resources.files("ifpopt").joinpath("builtins")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".toml"))


def load_builtin(name: str) -> dict:
    name = BUILTIN_ALIASES.get(name, name)
    res = resources.files("ifpopt").joinpath("builtins", f"{name}.toml")
    if not res.is_file():
        raise ConfigError(f"unknown builtin {name!r}; available: {', '.join(builtin_names())}")
    return tomllib.loads(res.read_text(encoding="utf-8"))


# --- assembly --------------------------------------------------------------

@dataclass
class Experiment:
    raw: dict
    name: str
    algorithm: str
    seed: int
    problem: Problem
    init: NetworkState
    sim: SimConfig
    computed_nus: np.ndarray
    computed_etas: np.ndarray
    pinned_nus: np.ndarray | None
    mode_sequence: list[int] | None
    ujsc_window: float | None
    admissibility: list[str]

    @property
    def network(self) -> Network:
        return self.problem.network

    @property
    def design_nus(self) -> np.ndarray:
        return self.problem.network.nus


def _objective(entry: dict, k: int):
    kind = entry["kind"]
    where = f"objectives[{k}]"
    try:
        if kind in ("example1", "example2"):
            if "index" not in entry:
                raise ConfigError("'index' is required for catalog objectives", where)
            return (make_example1 if kind == "example1" else make_example2)(entry["index"])
        if kind == "quadratic":
            if "Q" not in entry or "c" not in entry:
                raise ConfigError("'Q' and 'c' are required", where)
            return quadratic(entry["Q"], entry["c"], entry.get("offset", 0.0))
        if "scale" not in entry or "center" not in entry:
            raise ConfigError("'scale' and 'center' are required", where)
        return scaled_quadratic(entry["scale"], entry["center"])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), where) from None


def _profile(entry: dict, where: str) -> GainProfile:
    kind = entry["kind"]
    try:
        if kind == "constant":
            if "value" not in entry:
                raise ConfigError("'value' is required", where)
            return GainProfile.const(entry["value"])
        if kind == "sinusoidal":
            if "offset" not in entry or "amplitude" not in entry:
                raise ConfigError("'offset' and 'amplitude' are required", where)
            return GainProfile.sinusoid(
                entry["offset"], entry["amplitude"], entry.get("frequency", 1.0), entry.get("phase", 0.0)
            )
        if kind == "expression":
            if "expr" not in entry:
                raise ConfigError("'expr' is required", where)
            return GainProfile.expression(entry["expr"])
    except GainError as exc:
        raise ConfigError(str(exc), where) from None
    raise ConfigError(f"unknown gain kind {kind!r}", where)


def _per_agent(values, n: int, m: int, where: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if m == 1 and arr.shape == (n,):
        arr = arr.reshape(n, 1)
    if arr.shape != (n, m):
        raise ConfigError(f"expected {n} agents x {m} entries, got shape {arr.shape}", where)
    return arr


def apply_overrides(raw: dict, *, seed=None, dt=None, t_end=None, gain_expr=None) -> dict:
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = int(seed)
    sim = raw.setdefault("sim", {})
    if dt is not None:
        sim["dt"] = float(dt)
    if t_end is not None:
        sim["t_end"] = float(t_end)
    if gain_expr is not None:
        raw["gain"] = {"kind": "expression", "expr": gain_expr}
    return raw


def build(raw: dict, allow_inadmissible_gain: bool = False) -> Experiment:
    """Validate ``raw`` as a whole and assemble the experiment.

    Every check runs before any simulation: schema, K_i J_i = C^T,
    weight balance, nonzero Laplacian, joint strong connectivity,
    the zero multiplier sum at t = 0 and, for the first algorithm,
    gain admissibility.
    """
    validate_schema(raw)
    allow_inadmissible_gain = allow_inadmissible_gain or bool(raw.get("allow_inadmissible_gain", False))
    algorithm = raw.get("algorithm", "alg1")
    seed = int(raw.get("seed", 0))
    sim_raw = raw.get("sim", {})
    t_end = float(sim_raw.get("t_end", 100.0))

    fs = [_objective(o, k) for k, o in enumerate(raw["objectives"])]
    n = len(fs)
    m = fs[0].dim
    if any(f.dim != m for f in fs):
        raise ConfigError("all objectives must share one dimension", "objectives")

    ag = raw["agents"]
    C = np.asarray(ag.get("C", np.eye(m).tolist()), dtype=float)
    if C.shape != (m, m):
        raise ConfigError(f"C must be {m}x{m}", "agents.C")
    Js = ag.get("J", [np.eye(m).tolist()] * n)
    Ks = ag.get("K", [np.eye(m).tolist()] * n)
    for key, arr in (("J", Js), ("K", Ks)):
        if len(arr) != n:
            raise ConfigError(f"need one matrix per agent ({n})", f"agents.{key}")
    pinned = ag.get("nu")
    if pinned is not None and len(pinned) != n:
        raise ConfigError(f"need one index per agent ({n})", "agents.nu")

    agents, nus, etas = [], [], []
    for i, f in enumerate(fs):
        where = f"agents[{i}]"
        J, K = np.asarray(Js[i], dtype=float), np.asarray(Ks[i], dtype=float)
        if J.shape != (m, m) or K.shape != (m, m):
            raise ConfigError(f"J and K must be {m}x{m}", where)
        if np.linalg.norm(K @ J - C.T) > 1e-10:
            raise ConfigError("K_i J_i = C^T violated", where)
        try:
            p = AgentParams(ag["alpha"], ag["beta"], ag["gamma"], J, K, C)
            nu, eta = ifp_index_minimax(p, f)
        except (ValueError, PassivityError) as exc:
            raise ConfigError(str(exc), where) from None
        nus.append(nu)
        etas.append(eta)
        agents.append(p.with_index(pinned[i] if pinned is not None else nu, eta))
    net = Network(agents, fs)

    mode_sequence = None
    try:
        if "graph" in raw:
            g = Digraph(raw["graph"]["adjacency"])
            if g.n_nodes != n:
                raise ConfigError(f"adjacency must be {n}x{n}", "graph.adjacency")
            schedule = SwitchingSchedule.constant(g)
        else:
            sc = raw["schedule"]
            modes = [Digraph(a) for a in sc["modes"]]
            for k, gm in enumerate(modes):
                if gm.n_nodes != n:
                    raise ConfigError(f"mode must be {n}x{n}", f"schedule.modes[{k}]")
            if sc.get("order", "cyclic") == "random":
                schedule, mode_sequence = SwitchingSchedule.random(modes, sc["dwell"], t_end, seed)
            else:
                schedule = SwitchingSchedule.cyclic(modes, sc["dwell"])
    except GraphError as exc:
        raise ConfigError(str(exc), "graph" if "graph" in raw else "schedule") from None

    for k, gm in enumerate(schedule.modes):
        where = "graph.adjacency" if "graph" in raw else f"schedule.modes[{k}]"
        if not is_weight_balanced(gm):
            raise ConfigError("graph is not weight-balanced (in-degree must equal out-degree)", where)
        if not np.any(laplacian(gm)):
            raise ConfigError("graph has no edges (all-zero Laplacian)", where)
    window = min_ujsc_window(schedule, t_end)
    if window is None:
        raise ConfigError("schedule is not uniformly jointly strongly connected over the run", "schedule")

    gspec = raw["gain"]
    if gspec["kind"] == "per_subgraph":
        if "profiles" not in gspec:
            raise ConfigError("'profiles' is required for per_subgraph gains", "gain")
        profiles = [_profile(p, f"gain.profiles[{k}]") for k, p in enumerate(gspec["profiles"])]
        anchors = [a - 1 for a in gspec.get("anchors", [])]
        if any(a >= n for a in anchors):
            raise ConfigError(f"anchor agents must be in 1..{n}", "gain.anchors")
        gains = assign_subgraph_gains(schedule, net.nus, profiles, t_end, anchors, check=False)
    else:
        gains = GainSchedule.shared(_profile(gspec, "gain"), n)

    if algorithm == "alg1":
        problems = check_admissible(schedule, gains, net.nus, t_end)
    else:
        problems = check_positive(schedule, gains, t_end)
        for k, gm in enumerate(schedule.modes):
            ok, cond = check_nonsingular(gm, 1.0, net.nus, [p.J for p in agents])
            if not ok:
                raise ConfigError(f"derivative-feedback loop matrix is singular (cond {cond:.3g})",
                                  f"schedule.modes[{k}]")
    if problems and not allow_inadmissible_gain:
        raise ConfigError(problems[0] + (f" (+{len(problems) - 1} more)" if len(problems) > 1 else ""), "gain")

    init_raw = raw.get("initial", {})
    x0 = _per_agent(init_raw.get("x", np.linspace(0.0, 1.0, n).tolist()), n, m, "initial.x")
    lam0 = _per_agent(init_raw.get("lam", np.zeros((n, m)).tolist()), n, m, "initial.lam")
    if np.linalg.norm(net.multiplier_sum(lam0)) > 1e-10:
        raise ConfigError("initial condition sum_i K_i lam_i(0) = 0 violated", "initial.lam")

    try:
        sim = SimConfig(
            dt=float(sim_raw.get("dt", 1e-3)),
            t_end=t_end,
            record_every=int(sim_raw.get("record_every", 10)),
            algorithm=algorithm,
            monitor_lyapunov=bool(sim_raw.get("monitor_lyapunov", True)),
            monitor_passivity=bool(sim_raw.get("monitor_passivity", False)),
            allow_inadmissible_gain=allow_inadmissible_gain,
        )
    except ValueError as exc:
        raise ConfigError(str(exc), "sim") from None

    problem = Problem(net, schedule, gains, certified_nus=np.array(nus))
    return Experiment(
        raw=raw,
        name=raw.get("name", "experiment"),
        algorithm=algorithm,
        seed=seed,
        problem=problem,
        init=NetworkState(x0, lam0, 0.0),
        sim=sim,
        computed_nus=np.array(nus),
        computed_etas=np.array(etas),
        pinned_nus=None if pinned is None else np.array(pinned, dtype=float),
        mode_sequence=mode_sequence,
        ujsc_window=window,
        admissibility=problems,
    )


def load(path: str | Path | None = None, builtin: str | None = None) -> dict:
    if (path is None) == (builtin is None):
        raise ConfigError("give exactly one of a config path or a builtin name")
    return load_builtin(builtin) if builtin is not None else load_toml(path)


def finite_or_none(v: float):
    return v if math.isfinite(v) else None

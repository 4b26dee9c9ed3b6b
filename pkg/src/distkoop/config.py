"""Experiment configuration: one TOML file with a section per module.

Every key has a default, so an empty file is a valid configuration. Unknown
sections or keys, wrong types and out-of-range values raise
:class:`~distkoop.errors.ConfigError` naming the field and, when it comes
from a file, its line.
"""

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass

import tomli

from .errors import ConfigError, DisconnectedGraph, IndexOutOfRange
from .graph import build_graph
from .mpc import DEFAULT_GOAL, DEFAULT_X0, MpcConfig
from .train import TrainConfig
from .vessel import DEFAULT_INTERVALS, VesselParams

_V = VesselParams()
_M = MpcConfig()

DEFAULTS = {
    "vessel": {f.name: getattr(_V, f.name) for f in dataclasses.fields(VesselParams)},
    "data": {
        "T": 5000, "dt": 0.02, "sigma": 0.5, "hold": 10, "seed": 0,
        "intervals": [list(iv) for iv in DEFAULT_INTERVALS],
        "train_end": 4000, "test_end": 5000,
    },
    "graph": {"n_agents": 5, "edges": [[1, 2], [2, 3], [3, 4], [4, 5], [5, 1]]},
    "lift": {"r": 8, "hidden": 256, "init_seed": 0, "normalize": False},
    "consensus": {"c": TrainConfig.c, "S": 200, "matrix_seed": 0, "mixing": "metropolis",
                  "weighting": "uniform"},
    "theta": {"lr": 1e-4, "S_bar": 100, "rounds": 50, "threshold": 7e-6, "optimizer": "adam",
              "max_steps": 200_000, "baseline_steps": 5000, "dko_init": "lstsq", "n_runs": 10},
    "mpc": {
        "horizon": _M.horizon, "q": list(_M.q), "qf": list(_M.qf), "r": list(_M.r),
        "samples": _M.samples, "elites": _M.elites, "iterations": _M.iterations, "init_std": _M.init_std,
        "keep_elites": _M.keep_elites, "block": _M.block, "seed": _M.seed, "wrap_yaw": _M.wrap_yaw,
        "max_steps": 500, "x0": list(DEFAULT_X0), "goal": list(DEFAULT_GOAL),
    },
    "paths": {"out_dir": "runs", "trajectory": "runs/trajectory.csv"},
}


@dataclass
class DataSettings:
    T: int
    dt: float
    sigma: float
    hold: int
    seed: int
    intervals: tuple
    train_end: int
    test_end: int


@dataclass
class ExperimentConfig:
    """Validated configuration plus the raw resolved values and their hash."""

    vessel: VesselParams
    data: DataSettings
    graph: object
    train: TrainConfig
    mpc: MpcConfig
    mpc_steps: int
    x0: tuple
    goal: tuple
    n_runs: int
    paths: dict
    raw: dict

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def meta(self, **extra) -> dict:
        """Provenance fields written into every output file."""
        return {"config_hash": self.hash, "data_seed": self.data.seed, **extra}


def config_hash(raw: dict) -> str:
    """Short digest of every setting that affects results; file locations are excluded."""
    raw = {k: v for k, v in raw.items() if k != "paths"}
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _locate(text, section, key=None):
    """1-based line of ``[section]`` or of ``key`` inside it, if present."""
    if text is None:
        return None
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if current == section and key is not None and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return no
    return None


def _check_type(value, default, field, line):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"expected {type(default).__name__}, got {type(value).__name__}", field, line)
    return value


def resolve(user: dict, text=None) -> dict:
    """Merge ``user`` over the defaults, rejecting unknown names and bad types."""
    raw = json.loads(json.dumps(DEFAULTS))
    for section, values in user.items():
        if section not in DEFAULTS:
            raise ConfigError("unknown section", section, _locate(text, section))
        if not isinstance(values, dict):
            raise ConfigError("must be a table", section, _locate(text, section))
        for key, value in values.items():
            field = f"{section}.{key}"
            line = _locate(text, section, key)
            if key not in DEFAULTS[section]:
                raise ConfigError("unknown key", field, line)
            raw[section][key] = _check_type(value, DEFAULTS[section][key], field, line)
    return raw


def _build(raw, text):
    def fail(field, exc):
        section, _, key = field.partition(".")
        raise ConfigError(str(exc), field, _locate(text, section, key or None)) from exc

    try:
        vessel = VesselParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw["vessel"].items()})
    except (ValueError, TypeError) as exc:
        bad = next((k for k in raw["vessel"] if f"vessel.{k} " in str(exc) or f"vessel.{k}" in str(exc)), None)
        fail(f"vessel.{bad}" if bad else "vessel", exc)

    d = raw["data"]
    for key in ("T", "hold"):
        if d[key] < (2 if key == "T" else 1):
            fail(f"data.{key}", ValueError(f"data.{key} is too small"))
    if not d["dt"] > 0:
        fail("data.dt", ValueError("dt must be positive"))
    if d["sigma"] < 0:
        fail("data.sigma", ValueError("sigma must be nonnegative"))
    intervals = []
    for iv in d["intervals"]:
        if not (isinstance(iv, list) and len(iv) == 2 and all(isinstance(v, int) for v in iv)):
            fail("data.intervals", ValueError(f"interval {iv!r} is not a pair of integers"))
        if not 0 <= iv[0] < iv[1] <= d["T"]:
            fail("data.intervals", ValueError(f"interval {iv} outside 0 <= start < end <= {d['T']}"))
        intervals.append(tuple(iv))
    if not 0 < d["train_end"] < d["test_end"] <= d["T"]:
        fail("data.train_end", ValueError("need 0 < train_end < test_end <= T"))
    data = DataSettings(d["T"], d["dt"], d["sigma"], d["hold"], d["seed"], tuple(intervals),
                        d["train_end"], d["test_end"])

    g = raw["graph"]
    try:
        graph = build_graph(g["n_agents"], [tuple(e) for e in g["edges"]])
    except (IndexOutOfRange, DisconnectedGraph, ValueError, TypeError) as exc:
        fail("graph.edges", exc)
    if len(intervals) != graph.n_agents:
        fail("data.intervals", ValueError(f"{len(intervals)} intervals for {graph.n_agents} agents"))

    lf, cs, th = raw["lift"], raw["consensus"], raw["theta"]
    try:
        train = TrainConfig(
            S=cs["S"], S_bar=th["S_bar"], rounds=th["rounds"], c=cs["c"], lr=th["lr"],
            threshold=th["threshold"], init_seed=lf["init_seed"], matrix_seed=cs["matrix_seed"],
            r=lf["r"], hidden=lf["hidden"], mixing=cs["mixing"], optimizer=th["optimizer"],
            max_theta_steps=th["max_steps"], baseline_steps=th["baseline_steps"],
            normalize=lf["normalize"], dko_init=th["dko_init"], weighting=cs["weighting"],
        )
    except ValueError as exc:
        fail("theta", exc)
    if cs["mixing"] not in ("metropolis", "uniform-rows"):
        fail("consensus.mixing", ValueError(f"unknown mixing {cs['mixing']!r}"))
    if th["n_runs"] < 1:
        fail("theta.n_runs", ValueError("n_runs must be >= 1"))

    m = raw["mpc"]
    try:
        mpc = MpcConfig(horizon=m["horizon"], q=m["q"], qf=m["qf"], r=m["r"], dt=d["dt"], samples=m["samples"],
                        elites=m["elites"], iterations=m["iterations"], init_std=m["init_std"],
                        keep_elites=m["keep_elites"], block=m["block"], seed=m["seed"], wrap_yaw=m["wrap_yaw"])
    except (ValueError, TypeError) as exc:
        fail("mpc", exc)
    for key in ("x0", "goal"):
        if len(m[key]) != 6:
            fail(f"mpc.{key}", ValueError(f"mpc.{key} needs 6 entries"))
    if m["max_steps"] < 1:
        fail("mpc.max_steps", ValueError("max_steps must be >= 1"))

    return ExperimentConfig(vessel, data, graph, train, mpc, m["max_steps"], tuple(map(float, m["x0"])),
                            tuple(map(float, m["goal"])), th["n_runs"], dict(raw["paths"]), raw)


def from_dict(user: dict, text=None) -> ExperimentConfig:
    return _build(resolve(user, text), text)


def loads(text: str) -> ExperimentConfig:
    try:
        user = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", line=int(m.group(1)) if m else None) from exc
    return from_dict(user, text)


def load(path=None) -> ExperimentConfig:
    """Read a config file; ``None`` gives the all-defaults configuration."""
    if path is None:
        return from_dict({})
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return loads(text)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Rebuild with dotted-key overrides such as ``{"data.seed": 7}``; ``None`` values are ignored."""
    user = json.loads(json.dumps(cfg.raw))
    for dotted, value in changes.items():
        if value is None:
            continue
        section, key = dotted.split(".")
        user[section][key] = value
    return from_dict(user)


def dump_defaults() -> str:
    """The default configuration as TOML text."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    out = []
    for section, values in DEFAULTS.items():
        out.append(f"[{section}]")
        out.extend(f"{k} = {fmt(v)}" for k, v in values.items())
        out.append("")
    return "\n".join(out)

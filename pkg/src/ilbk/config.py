"""Run configuration: JSON files, ``key=value`` overrides, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from ilbk.gas import GasParameters, InvalidParameterError, derive_constants

OUT_ENV = "ILBK_OUT"

DEFAULTS = {
    "gas": {"m": 1.0, "m1": 1.0, "eps": 1.0, "theta1": 1.0, "u1": [0.0, 0.0, 0.0]},
    "grid": {"N": 24, "L": 6.0, "Nr": 256, "ell_max": 2},
    "solver": {"method": "spectral-exponential", "dt": None, "t_end": None,
               "n_samples": 300, "initial": "hot"},
    "spectrum": {"path": "radial", "k": 12, "tol": 1e-10, "cache": False},
    "sigma": {"r_max": 20.0, "n_r": 81, "n_oracle": 20, "budget": 200000},
    "kernel": {"r_max": 15.0, "n_r": 61, "rho": [0.5, 1.0, 2.0, 5.0, 10.0]},
    "transport": {"N": 8, "L": 4.0, "Nx": 32, "steps": 1000, "collisions": True},
    "seed": 0,
}

SECTIONS = tuple(k for k, v in DEFAULTS.items() if isinstance(v, dict))
# keys excluded from the config hash: they do not change any computed number
UNHASHED = ("out", "threads")


class ConfigError(ValueError):
    pass


def _flat_index() -> dict:
    """Map every unique leaf name to its ``section.key`` path."""
    idx, seen = {}, {}
    for sec in SECTIONS:
        for key in DEFAULTS[sec]:
            seen.setdefault(key, []).append(sec)
    for key, secs in seen.items():
        if len(secs) == 1:
            idx[key] = f"{secs[0]}.{key}"
    return idx


def _set(cfg: dict, dotted: str, value):
    parts = dotted.split(".")
    if len(parts) == 1:
        key = parts[0]
        if key in DEFAULTS and not isinstance(DEFAULTS[key], dict):
            cfg[key] = value
            return
        flat = _flat_index()
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}")
        parts = flat[key].split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS or parts[1] not in DEFAULTS[parts[0]]:
        raise ConfigError(f"unknown config key {dotted!r}")
    cfg[parts[0]][parts[1]] = value


def _merge(cfg: dict, data: dict, prefix: str = ""):
    for key, val in data.items():
        if key in SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"section {key!r} must be an object")
            for sub, v in val.items():
                _set(cfg, f"{key}.{sub}", v)
        else:
            _set(cfg, key, val)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(cfg: dict):
    g = cfg["gas"]
    for k in ("m", "m1", "eps", "theta1"):
        if not isinstance(g[k], (int, float)) or isinstance(g[k], bool):
            raise ConfigError(f"gas.{k} must be a number")
        g[k] = float(g[k])
    if not (isinstance(g["u1"], list) and len(g["u1"]) == 3):
        raise ConfigError("gas.u1 must be a list of three numbers")
    g["u1"] = [float(x) for x in g["u1"]]
    for k in ("N", "Nr", "ell_max"):
        if not isinstance(cfg["grid"][k], int) or isinstance(cfg["grid"][k], bool):
            raise ConfigError(f"grid.{k} must be an integer")
    if cfg["grid"]["N"] < 8 or cfg["grid"]["N"] % 2:
        raise ConfigError("grid.N must be an even integer >= 8")
    if cfg["grid"]["Nr"] < 8:
        raise ConfigError("grid.Nr must be >= 8")
    if not cfg["grid"]["L"] > 0:
        raise ConfigError("grid.L must be positive")
    if cfg["solver"]["method"] not in ("spectral-exponential", "rk4"):
        raise ConfigError("solver.method must be 'spectral-exponential' or 'rk4'")
    if cfg["spectrum"]["path"] not in ("radial", "3d"):
        raise ConfigError("spectrum.path must be 'radial' or '3d'")
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")


def gas_parameters(cfg: dict) -> GasParameters:
    g = cfg["gas"]
    return GasParameters(g["m"], g["m1"], g["eps"], g["theta1"], tuple(g["u1"]))


def parse_config(path=None, overrides=(), seed=None) -> dict:
    """Effective configuration from defaults, an optional JSON file and overrides.

    Keys may be flat (``"eps"``) or sectioned (``{"gas": {"eps": ...}}``);
    unknown keys are rejected. Gas parameters are validated before returning.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            text = p.read_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"{p}: not valid UTF-8 ({exc})") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: JSON parse error at line {exc.lineno}, "
                              f"column {exc.colno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
        _merge(cfg, data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        _set(cfg, key.strip(), _parse_value(val.strip()))
    if seed is not None:
        cfg["seed"] = seed
    _coerce(cfg)
    try:
        derive_constants(gas_parameters(cfg))
    except InvalidParameterError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def config_hash(cfg: dict) -> str:
    payload = {k: v for k, v in cfg.items() if k not in UNHASHED}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def gas_hash(cfg: dict) -> str:
    blob = json.dumps(cfg["gas"], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "ilbk-out"))


def atomic_write(path, data, mode: str = "w"):
    """Write to a temporary file in the same directory, then rename."""
    import tempfile
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path

"""Run configuration: defaults, INI files, bundled presets.

A resolved configuration is a nested ``{section: {key: value}}`` dict of
plain JSON values.  Precedence, lowest first: defaults, preset, config
file, command-line flags.
"""

from __future__ import annotations

import configparser
import copy

from .model import DomainError


class ConfigError(DomainError):
    pass


DEFAULTS = {
    "model": {"M": 4, "N": 4, "H": 2, "H0": 1},
    "prior": {"phi_u": "1", "theta_u": "1", "phi_v": "1", "theta_v": "1"},
    "truth": {"seed": 0, "low": 0.5, "high": 1.5, "u": None, "v": None},
    "data": {"n": 500, "n_test": None, "path": None, "seed": 0},
    "gibbs": {"burn_in": 20000, "thin": 20, "K": 1000, "seed": 0, "draws": "retain"},
    "experiment": {"D": 20, "master_seed": 0},
    "vb": {"max_iters": 10000, "tol": 1e-8, "restarts": 5, "seed": 0},
    "select": {"ranks": None},
}

_INT = {("model", k) for k in ("M", "N", "H", "H0")} | {
    ("truth", "seed"), ("data", "n"), ("data", "n_test"), ("data", "seed"),
    ("gibbs", "burn_in"), ("gibbs", "thin"), ("gibbs", "K"), ("gibbs", "seed"),
    ("experiment", "D"), ("experiment", "master_seed"),
    ("vb", "max_iters"), ("vb", "restarts"), ("vb", "seed"),
}
_FLOAT = {("truth", "low"), ("truth", "high"), ("vb", "tol")}

GRID_PHI = {1: "0.25", 2: "0.5", 3: "1", 4: "2"}


def _grid_cell(row: int, n: int) -> dict:
    return {
        "model": {"M": 4, "N": 4, "H": 2, "H0": 1},
        "prior": {"phi_u": GRID_PHI[row], "phi_v": GRID_PHI[row], "theta_u": "1", "theta_v": "1"},
        "data": {"n": n, "n_test": 100 * n},
        "gibbs": {"burn_in": 20000, "thin": 20, "K": 1000 if n == 500 else 2000},
        "experiment": {"D": 20},
    }


PRESETS = {}
for _row in GRID_PHI:
    for _n in (500, 1000):
        PRESETS[f"table1_row{_row}_n{_n}"] = _grid_cell(_row, _n)
    PRESETS[f"table1_row{_row}"] = _grid_cell(_row, 500)


def coerce(section: str, key: str, value):
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"unknown setting [{section}] {key}")
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
        return None
    try:
        if (section, key) in _INT:
            return int(value)
        if (section, key) in _FLOAT:
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key}: invalid number {value!r}") from None
    if section == "select" and key == "ranks":
        if isinstance(value, str):
            try:
                return [int(v) for v in value.replace(",", " ").split()]
            except ValueError:
                raise ConfigError(f"[select] ranks: expected integers, got {value!r}") from None
        return [int(v) for v in value]
    return str(value)


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for section, values in override.items():
        for key, value in values.items():
            out.setdefault(section, {})[key] = coerce(section, key, value)
    return out


def read_ini(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser.items(section):
            try:
                out.setdefault(section, {})[key] = coerce(section, key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}: {exc}") from None
    return out


def resolve(preset: str | None = None, path=None, flags: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(sorted(PRESETS))}")
        cfg = merge(cfg, PRESETS[preset])
    if path is not None:
        cfg = merge(cfg, read_ini(path))
    if flags:
        cfg = merge(cfg, flags)
    return cfg


def write_ini(cfg: dict, path):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in cfg.items():
        parser[section] = {}
        for k, v in values.items():
            if v is None:
                continue
            parser[section][k] = " ".join(map(str, v)) if isinstance(v, list) else str(v)
    with open(path, "w") as fh:
        parser.write(fh)

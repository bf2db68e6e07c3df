"""TOML model configs: parsing, tensor loading (inline or CSV) and model digests.

A config looks like::

    schema_version = 1
    family = "tabular"          # or "gaussian"
    discount = 0.9
    initial = [0.5, 0.5]
    horizon = 2                 # optional default for runs

    [tabular]
    K = [...]                   # (X, A, Xbar, X') nested lists, or K_csv = "file.csv"
    d = [...]                   # (X, A, Xbar), or d_csv
    r = [...]                   # (X, Y), or r_csv

CSV tensors are in long format: one integer column per axis followed by a
``value`` column. Gaussian configs describe grids and either tabulated or
affine/quadratic parametric tensors, see the bundled examples.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import GameModel, Grid, ModelValidationError, build_gaussian, build_tabular

SCHEMA_VERSION = 1
FAMILIES = ("tabular", "gaussian")
CSV_AXES = {"K": ("x", "a", "xbar", "xnext"), "d": ("x", "a", "xbar"), "r": ("x", "y"),
            "f": ("x", "a", "xbar"), "g": ("x", "a"), "h": ("x", "xbar")}


class ConfigError(ValueError):
    """Unreadable or ill-formed config; the message names the file and field or line."""


@dataclass
class LoadedModel:
    model: GameModel
    path: Path
    raw: dict
    digest: str
    horizon: Optional[int] = None
    name: str = ""
    resolved: dict = field(default_factory=dict)


def _field(raw: dict, key: str, where: str, kind=None):
    if key not in raw:
        raise ConfigError(f"{where}: missing field '{key}'")
    value = raw[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"{where}: field '{key}' has type {type(value).__name__}")
    return value


def _array(value, where: str, name: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: field '{name}' is not a rectangular numeric array ({exc})") from None
    if arr.dtype == object:
        raise ConfigError(f"{where}: field '{name}' is ragged")
    return arr


def read_tensor_csv(path: Path, axes: tuple, shape: tuple) -> np.ndarray:
    if not path.is_file():
        raise ConfigError(f"{path}: tensor file not found")
    out = np.zeros(shape)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(axes + ("value",)) - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        for line, rec in enumerate(reader, start=2):
            try:
                idx = tuple(int(rec[a]) for a in axes)
                out[idx] = float(rec["value"])
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"{path}:{line}: {exc}") from None
    return out


def _tensor(section: dict, name: str, base: Path, where: str, shape: Optional[tuple]) -> np.ndarray:
    if name in section:
        arr = _array(section[name], where, name)
        if shape is not None and arr.shape != shape:
            raise ConfigError(f"{where}: field '{name}' has shape {arr.shape}, expected {shape}")
        return arr
    if f"{name}_csv" in section:
        if shape is None:
            raise ConfigError(f"{where}: field '{name}_csv' needs grid sizes to be known")
        return read_tensor_csv(base / section[f"{name}_csv"], CSV_AXES[name], shape)
    raise ConfigError(f"{where}: missing field '{name}' (inline) or '{name}_csv'")


def _grid(raw, where: str) -> Grid:
    try:
        if isinstance(raw, int):
            return Grid(raw)
        if "values" in raw:
            return Grid.from_values(raw["values"])
        return Grid.uniform(float(_field(raw, "lo", where)), float(_field(raw, "hi", where)),
                            int(_field(raw, "size", where)))
    except ModelValidationError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _tabular(raw: dict, base: Path, check: bool) -> tuple:
    sec = _field(raw, "tabular", "config", dict)
    where = "[tabular]"
    r = _tensor(sec, "r", base, where, None if "r" in sec else _sizes_r(raw))
    X = r.shape[0]
    if "K" in sec:
        K = _tensor(sec, "K", base, where, None)
        A = K.shape[1] if K.ndim == 4 else 0
    else:
        A = int(_field(_field(raw, "grids", "config", dict), "actions", "[grids]"))
        K = _tensor(sec, "K", base, where, (X, A, X, X))
    d = _tensor(sec, "d", base, where, (X, A, X))
    w = sec.get("moment_weights")
    alpha = sec.get("moment_alpha")
    model = build_tabular(K, d, r, raw["discount"], raw["initial"],
                          None if w is None else np.asarray(w, dtype=float), alpha, check=check)
    return model, {"K": K, "d": d, "r": r}


def _sizes_r(raw: dict) -> tuple:
    grids = _field(raw, "grids", "config", dict)
    return (int(_field(grids, "states", "[grids]")), int(_field(grids, "observations", "[grids]")))


def _gaussian(raw: dict, base: Path) -> tuple:
    grids = _field(raw, "grids", "config", dict)
    S = _grid(_field(grids, "states", "[grids]"), "[grids.states]")
    O = _grid(_field(grids, "observations", "[grids]"), "[grids.observations]")
    Ac = _grid(_field(grids, "actions", "[grids]"), "[grids.actions]")
    sec = _field(raw, "gaussian", "config", dict)
    where = "[gaussian]"
    X, A = S.size, Ac.size
    xi, u = S.coords, Ac.coords
    if "f_affine" in sec:
        c = sec["f_affine"]
        f = (c.get("state", 0.0) * xi[:, None, None] + c.get("mean", 0.0) * xi[None, None, :]
             + c.get("action", 0.0) * u[None, :, None] + c.get("const", 0.0))
        f = np.broadcast_to(f, (X, A, X)).copy()
    else:
        f = _tensor(sec, "f", base, where, (X, A, X))
    if "g_const" in sec:
        g = np.full((X, A), float(sec["g_const"]))
    else:
        g = _tensor(sec, "g", base, where, (X, A))
    if "h_affine" in sec:
        c = sec["h_affine"]
        h = np.broadcast_to(c.get("state", 0.0) * xi[:, None] + c.get("mean", 0.0) * xi[None, :]
                            + c.get("const", 0.0), (X, X)).copy()
    elif "h" in sec:
        h = _array(sec["h"], where, "h")
    else:
        h = _tensor(sec, "h", base, where, (X, X))
    if "d_quadratic" in sec:
        c = sec["d_quadratic"]
        d = (c.get("state", 0.0) * xi[:, None, None] ** 2 + c.get("action", 0.0) * u[None, :, None] ** 2
             + c.get("mean", 0.0) * (xi[:, None, None] - xi[None, None, :]) ** 2 + c.get("const", 0.0))
        d = np.broadcast_to(d, (X, A, X)).copy()
    else:
        d = _tensor(sec, "d", base, where, (X, A, X))
    mode = sec.get("observation_mode", "mean_field_free")
    if mode not in ("mean_field_free", "coupled"):
        raise ConfigError(f"{where}: observation_mode must be 'mean_field_free' or 'coupled', got {mode!r}")
    model = build_gaussian(f, g, h, d, S, O, Ac, raw["discount"], raw["initial"],
                           observation_mean_field_free=(mode == "mean_field_free"), L=sec.get("L"))
    return model, {"f": f, "g": g, "h": h, "d": d, "states": xi, "observations": O.coords, "actions": u}


def model_digest(family: str, discount: float, initial, tensors: dict) -> str:
    """sha256 over a canonical rendering of the resolved model content."""
    h = hashlib.sha256()
    h.update(json.dumps({"family": family, "discount": repr(float(discount))}, sort_keys=True).encode())
    for name in ("initial",) + tuple(sorted(tensors)):
        arr = np.ascontiguousarray(initial if name == "initial" else tensors[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def load_config(path, check: bool = True) -> LoadedModel:
    """Parse a TOML config and build its model.

    Raises :class:`ConfigError` on unreadable or ill-formed input and
    :class:`ModelValidationError` when ``check`` is set and a kernel is invalid.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        version = _field(raw, "schema_version", "config", int)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config: schema_version {version} unsupported (expected {SCHEMA_VERSION})")
        family = _field(raw, "family", "config", str)
        if family not in FAMILIES:
            raise ConfigError(f"config: field 'family' must be one of {FAMILIES}, got {family!r}")
        discount = _field(raw, "discount", "config")
        if not isinstance(discount, (int, float)) or not 0 < discount < 1:
            raise ConfigError(f"config: field 'discount' must lie in (0, 1), got {discount!r}")
        _array(_field(raw, "initial", "config", list), "config", "initial")
        base = path.parent
        if family == "tabular":
            model, tensors = _tabular(raw, base, check)
        else:
            model, tensors = _gaussian(raw, base)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    horizon = raw.get("horizon")
    digest = model_digest(family, discount, model.initial, tensors)
    return LoadedModel(model, path, raw, digest, horizon, raw.get("name", path.stem), tensors)


BUNDLED = ("decoupled", "coupled_toy", "cost_one", "gaussian")


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise ConfigError(f"no bundled model named {name!r}; choose from {BUNDLED}")
    return Path(__file__).with_name("data") / f"{name}.toml"


def load_bundled(name: str) -> LoadedModel:
    return load_config(bundled_path(name))

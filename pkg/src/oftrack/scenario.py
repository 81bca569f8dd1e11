"""Scenario configuration: JSON parsing, validation, hashing and bundled scenarios."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .lti_core import Exosystem, Plant, Weights
from .offpolicy_rl import ExcitationSpec
from .state_reconstruction import FilterSpec

BUNDLED = ("scalar_step", "rot_tracking", "mimo_small")
INIT_MODES = ("auto", "oracle", "zero", "gain")
SOLVERS = ("direct", "gradient")

DEFAULTS = {
    "seed": 0,
    "filter": {"kind": "deadbeat"},
    "excitation": {},
    "learning": {"k0": 10, "kf": 400, "theta_source": "exploration", "eps_stop": 1e-6, "max_iter": 50},
    "solver": {"kind": "direct", "eps_fraction": 0.5, "tol": 1e-7, "max_s": None, "accelerate": True},
    "init": {"mode": "auto"},
    "initial_state": {},
    "deploy": {"horizon": 300, "window": 50},
    "sweep": {"k0_list": [10, 20, 40, 80], "window": 400},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _field(raw: dict, path: str):
    node = raw
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"missing required field '{path}'")
        node = node[part]
    return node


def _matrix(raw: dict, path: str) -> np.ndarray:
    val = _field(raw, path)
    try:
        arr = np.array(val, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{path}' is not a numeric matrix: {exc}") from exc
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ConfigError(f"field '{path}' must be a 2-D array (row-major nested lists)")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"field '{path}' has non-finite entries")
    return arr


def _vector(val, path: str, size: int | None = None) -> np.ndarray | None:
    if val is None:
        return None
    arr = np.array(val, dtype=float).ravel()
    if size is not None and arr.size != size:
        raise ConfigError(f"field '{path}' must have {size} entries, got {arr.size}")
    return arr


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    raw: dict
    plant: Plant
    exo: Exosystem
    weights: Weights
    T: np.ndarray | None
    filter_kind: str
    filter_radius: float
    excitation: ExcitationSpec
    k0: int
    kf: int
    theta_source: str
    eps_stop: float
    max_iter: int
    solver: str
    solver_kw: dict
    init_mode: str
    K_o0: np.ndarray | None
    x0: np.ndarray | None
    xd0: np.ndarray | None
    horizon: int
    window: int
    deploy_gain: np.ndarray | None
    k0_list: tuple[int, ...]
    sweep_window: int
    sweep_x0: np.ndarray | None

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)

    def filter_spec(self, n: int) -> FilterSpec:
        if self.filter_kind == "deadbeat":
            return FilterSpec.deadbeat(n)
        return FilterSpec.from_radius(n, self.filter_radius)

    def seed_for(self, purpose: str) -> list[int]:
        """Independent RNG streams per purpose, all derived from the scenario seed."""
        return [self.seed, {"T": 1, "observer": 2}[purpose]]


def config_hash(raw: dict) -> str:
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def parse_config(data: dict, seed: int | None = None, solver: str | None = None) -> ScenarioConfig:
    """Validate a config dictionary; ``seed``/``solver`` override the file values."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    raw = _merge(DEFAULTS, data)
    if seed is not None:
        raw["seed"] = int(seed)
    if solver is not None:
        raw["solver"]["kind"] = solver

    try:
        plant = Plant(_matrix(raw, "plant.A"), _matrix(raw, "plant.B"), _matrix(raw, "plant.C"))
        exo = Exosystem(_matrix(raw, "exosystem.S"), _matrix(raw, "exosystem.R"),
                        np.array(_field(raw, "exosystem.minimal_poly"), dtype=float))
        weights = Weights(_matrix(raw, "weights.Q"), _matrix(raw, "weights.Rbar"))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if exo.R.shape != (plant.p, exo.q):
        raise ConfigError(f"exosystem.R must be {plant.p}x{exo.q}, got {exo.R.shape}")
    if weights.Q.shape != (plant.p, plant.p) or weights.Rbar.shape != (plant.m, plant.m):
        raise ConfigError(f"weights must be Q {plant.p}x{plant.p} and Rbar {plant.m}x{plant.m}")
    T = _matrix(raw, "T") if raw.get("T") is not None else None

    filt = raw["filter"]
    kind = filt.get("kind", "deadbeat")
    if kind not in ("deadbeat", "radius"):
        raise ConfigError(f"filter.kind must be 'deadbeat' or 'radius', got {kind!r}")
    radius = float(filt.get("radius", 0.0))
    if kind == "radius" and not 0.0 <= radius < 1.0:
        raise ConfigError(f"filter.radius must lie in [0, 1), got {radius}")

    exc_raw = dict(raw["excitation"])
    if "freq_range" in exc_raw:
        exc_raw["freq_range"] = tuple(exc_raw["freq_range"])
    try:
        excitation = ExcitationSpec(seed=raw["seed"], **exc_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"excitation: {exc}") from exc

    lr = raw["learning"]
    k0, kf = int(lr["k0"]), int(lr["kf"])
    if not 0 <= k0 < kf:
        raise ConfigError(f"learning requires 0 <= k0 < kf, got k0={k0}, kf={kf}")
    if lr["theta_source"] not in ("exploration", "reference"):
        raise ConfigError("learning.theta_source must be 'exploration' or 'reference'")

    sol = raw["solver"]
    if sol["kind"] not in SOLVERS:
        raise ConfigError(f"solver.kind must be one of {SOLVERS}, got {sol['kind']!r}")
    gradient_kw = {"eps_fraction": float(sol["eps_fraction"]), "tol": float(sol["tol"]),
                   "max_s": None if sol["max_s"] is None else int(sol["max_s"]), "accelerate": bool(sol["accelerate"])}
    if not 0.0 < gradient_kw["eps_fraction"] < 1.0:
        raise ConfigError("solver.eps_fraction must lie in (0, 1)")
    solver_kw = gradient_kw if sol["kind"] == "gradient" else {}

    init = raw["init"]
    mode = init.get("mode", "auto")
    if mode not in INIT_MODES:
        raise ConfigError(f"init.mode must be one of {INIT_MODES}, got {mode!r}")
    K_o0 = _matrix(raw, "init.K_o") if mode == "gain" else None

    ist = raw["initial_state"]
    x0 = _vector(ist.get("x0"), "initial_state.x0", plant.n)
    xd0 = _vector(ist.get("xd0"), "initial_state.xd0", exo.q)

    dep = raw["deploy"]
    deploy_gain = _matrix(raw, "deploy.K_o") if dep.get("K_o") is not None else None
    horizon, window = int(dep["horizon"]), int(dep["window"])
    if horizon < 1 or not 1 <= window <= horizon:
        raise ConfigError("deploy needs horizon >= 1 and 1 <= window <= horizon")

    sw = raw["sweep"]
    k0_list = tuple(int(k) for k in sw["k0_list"])
    if any(k < 0 for k in k0_list):
        raise ConfigError("sweep.k0_list entries must be non-negative")
    sweep_x0 = _vector(sw.get("x0"), "sweep.x0", plant.n)

    return ScenarioConfig(
        name=str(raw.get("name", "custom")), raw=raw, plant=plant, exo=exo, weights=weights, T=T,
        filter_kind=kind, filter_radius=radius, excitation=excitation, k0=k0, kf=kf,
        theta_source=lr["theta_source"], eps_stop=float(lr["eps_stop"]), max_iter=int(lr["max_iter"]),
        solver=sol["kind"], solver_kw=solver_kw, init_mode=mode, K_o0=K_o0, x0=x0, xd0=xd0,
        horizon=horizon, window=window, deploy_gain=deploy_gain, k0_list=k0_list,
        sweep_window=int(sw["window"]), sweep_x0=sweep_x0,
    )


def load_config(path: str | Path, seed: int | None = None, solver: str | None = None) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data, seed=seed, solver=solver)


def bundled_raw(name: str) -> dict:
    if name not in BUNDLED:
        raise ConfigError(f"unknown bundled scenario {name!r}; choose from {BUNDLED}")
    text = resources.files("oftrack").joinpath("scenarios", f"{name}.json").read_text()
    return json.loads(text)


def load_bundled(name: str, seed: int | None = None, solver: str | None = None) -> ScenarioConfig:
    return parse_config(bundled_raw(name), seed=seed, solver=solver)

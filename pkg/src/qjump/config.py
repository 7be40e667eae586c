"""Experiment configuration: a YAML (or JSON) document with ``model``, ``run`` and ``output`` sections.

Complex 2×2 matrices are written as rows of ``[re, im]`` pairs::

    model:
      H: [[[0.5, 0], [0, 0]], [[0, 0], [-0.5, 0]]]
      C: [[[0, 0], [1, 0]], [[0, 0], [0, 0]]]
      observable: diagonal          # or {P0: <matrix>}
      beta: ground                  # or <matrix>
      rho0: excited                 # ground | excited | <matrix>
    run:
      T: 1.0
      n_grid: [8, 16, 32, 64, 128, 256, 512]
      n_paths: 2000
      grid_points: 1000
      seed: 20261016
      mode: {blocks: asymptotic, flow: propagator}
    output:
      directory: out
      formats: [csv, json]
      max_path_files: 100
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import numpy as np
import yaml

from .discrete import ModelSpec, ObservableSpec
from .qmatrix import EXCITED, GROUND, validate_state

DEFAULTS = {
    "model": {
        "H": [[[0.5, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-0.5, 0.0]]],
        "C": [[[0.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]],
        "observable": "diagonal",
        "beta": "ground",
        "rho0": "excited",
    },
    "run": {
        "T": 1.0,
        "n_grid": [8, 16, 32, 64, 128, 256, 512],
        "n_paths": 2000,
        "grid_points": 1000,
        "seed": 20261016,
        "mode": {"blocks": "asymptotic", "flow": "propagator"},
    },
    "output": {"directory": "out", "formats": ["csv", "json"], "max_path_files": 100},
}

NAMED_STATES = {"ground": GROUND, "excited": EXCITED}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _matrix(value, field: str) -> list:
    """Normalize a 2×2 complex matrix to rows of ``[re, im]`` floats."""
    if not isinstance(value, list) or len(value) != 2:
        raise ConfigError(field, "expected a 2x2 matrix of [re, im] pairs")
    out = []
    for i, row in enumerate(value):
        if not isinstance(row, list) or len(row) != 2:
            raise ConfigError(field, f"row {i} must have 2 entries")
        cells = []
        for j, z in enumerate(row):
            if isinstance(z, (int, float)) and not isinstance(z, bool):
                z = [z, 0.0]
            if (not isinstance(z, list) or len(z) != 2
                    or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in z)):
                raise ConfigError(field, f"entry ({i},{j}) must be [re, im]")
            if not all(np.isfinite(z)):
                raise ConfigError(field, f"entry ({i},{j}) is not finite")
            cells.append([float(z[0]), float(z[1])])
        out.append(cells)
    return out


def matrix_value(m: list) -> np.ndarray:
    return np.array([[complex(re, im) for re, im in row] for row in m])


def matrix_record(a) -> list:
    a = np.asarray(a, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in a]


def _state(value, field: str):
    if isinstance(value, str):
        if value not in NAMED_STATES:
            raise ConfigError(field, f"unknown state keyword {value!r} (use ground or excited)")
        return value
    m = _matrix(value, field)
    if not validate_state(matrix_value(m)).ok:
        raise ConfigError(field, "not a density matrix")
    return m


def _int(value, field: str, lo: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(field, "expected an integer")
    if value < lo:
        raise ConfigError(field, f"must be >= {lo}")
    return value


@dataclass
class ExperimentConfig:
    data: dict

    @property
    def spec(self) -> ModelSpec:
        m = self.data["model"]
        obs = m["observable"]
        observable = (ObservableSpec.diagonal() if obs == "diagonal"
                      else ObservableSpec.from_projector(matrix_value(obs["P0"])))
        beta = GROUND if m["beta"] == "ground" else matrix_value(m["beta"])
        return ModelSpec(matrix_value(m["H"]), matrix_value(m["C"]), observable, beta)

    @property
    def rho0(self) -> np.ndarray:
        v = self.data["model"]["rho0"]
        return NAMED_STATES[v].copy() if isinstance(v, str) else matrix_value(v)

    @property
    def run(self) -> dict:
        return self.data["run"]

    @property
    def output(self) -> dict:
        return self.data["output"]

    def with_overrides(self, seed=None, out=None, paths=None) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        if seed is not None:
            d["run"]["seed"] = seed
        if out is not None:
            d["output"]["directory"] = str(out)
        if paths is not None:
            d["run"]["n_paths"] = paths
        return validate(d)

    def serialize(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if sec is None:
        sec = {}
    if not isinstance(sec, dict):
        raise ConfigError(name, "expected a mapping")
    unknown = set(sec) - set(DEFAULTS[name])
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown field")
    return {**copy.deepcopy(DEFAULTS[name]), **sec}


def validate(raw) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping with model/run/output sections")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    model, run, output = (_section(raw, s) for s in ("model", "run", "output"))

    model["H"] = _matrix(model["H"], "model.H")
    H = matrix_value(model["H"])
    if np.linalg.norm(H - H.conj().T) > 1e-9:
        raise ConfigError("model.H", "not hermitian")
    model["C"] = _matrix(model["C"], "model.C")
    obs = model["observable"]
    if obs != "diagonal":
        if not isinstance(obs, dict) or set(obs) != {"P0"}:
            raise ConfigError("model.observable", 'expected "diagonal" or {P0: matrix}')
        P0 = _matrix(obs["P0"], "model.observable.P0")
        try:
            ObservableSpec.from_projector(matrix_value(P0))
        except ValueError as e:
            raise ConfigError("model.observable.P0", f"not a projector ({e})") from None
        model["observable"] = {"P0": P0}
    if model["beta"] != "ground":
        beta = _state(model["beta"], "model.beta")
        if isinstance(beta, str) or np.linalg.norm(matrix_value(beta) - GROUND) > 1e-9:
            raise ConfigError("model.beta", "only the ground ancilla state is supported")
        model["beta"] = "ground"
    model["rho0"] = _state(model["rho0"], "model.rho0")

    T = run["T"]
    if isinstance(T, bool) or not isinstance(T, (int, float)) or not np.isfinite(T) or T <= 0:
        raise ConfigError("run.T", "must be a positive number")
    run["T"] = float(T)
    if not isinstance(run["n_grid"], list) or not run["n_grid"]:
        raise ConfigError("run.n_grid", "expected a list of integers")
    run["n_grid"] = [_int(n, "run.n_grid", 1) for n in run["n_grid"]]
    run["n_paths"] = _int(run["n_paths"], "run.n_paths", 1)
    run["grid_points"] = _int(run["grid_points"], "run.grid_points", 2)
    run["seed"] = _int(run["seed"], "run.seed", 0)
    if run["seed"] >= 2**64:
        raise ConfigError("run.seed", "must fit in 64 bits")
    mode = run["mode"]
    if not isinstance(mode, dict):
        raise ConfigError("run.mode", "expected a mapping")
    mode = {**DEFAULTS["run"]["mode"], **mode}
    if set(mode) != set(DEFAULTS["run"]["mode"]):
        raise ConfigError("run.mode", f"unknown flag {sorted(set(mode) - set(DEFAULTS['run']['mode']))[0]}")
    if mode["blocks"] not in ("asymptotic", "exact"):
        raise ConfigError("run.mode.blocks", "must be asymptotic or exact")
    if mode["flow"] not in ("propagator", "rk4"):
        raise ConfigError("run.mode.flow", "must be propagator or rk4")
    run["mode"] = mode

    if not isinstance(output["directory"], str) or not output["directory"]:
        raise ConfigError("output.directory", "expected a path")
    formats = output["formats"]
    if not isinstance(formats, list) or not formats or not set(formats) <= {"csv", "json"}:
        raise ConfigError("output.formats", "expected a non-empty subset of [csv, json]")
    output["formats"] = sorted(set(formats))
    output["max_path_files"] = _int(output["max_path_files"], "output.max_path_files", 0)
    return ExperimentConfig({"model": model, "run": run, "output": output})


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("<syntax>", str(e).replace("\n", " ")) from None
    if raw is None:
        raw = {}
    return validate(raw)


def default_config() -> ExperimentConfig:
    return validate(copy.deepcopy(DEFAULTS))

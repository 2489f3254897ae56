"""Scenario configuration files.

A config is a YAML document with the sections ``scenario``, ``system``,
``likelihood``, ``prior``, ``flow`` and ``output``. Validation errors name the
offending field as a dotted path together with its line in the file. The
schema is documented in ``docs/config.md``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dirac import ParticleSet, read_particles_csv
from .distance import DistanceParams
from .errors import ContractError, FlowFiltError
from .filter import (
    METHODS,
    SYSTEM_MODELS,
    DeterministicNoise,
    GaussianNoise,
    Scenario,
    gaussian_particles,
    system_model,
)
from .flow import INTEGRATORS, FlowConfig
from .homotopy import MEASUREMENT_FUNCTIONS, Schedule, gaussian_likelihood, measurement_function

SECTIONS = ("scenario", "system", "likelihood", "prior", "flow", "output")
_ALLOWED = {
    "scenario": {"name", "seed", "methods", "measurements"},
    "system": {"model", "dim", "A", "dt", "noise", "inputs"},
    "likelihood": {"kind", "measurement_function", "H", "noise_cov", "schedule"},
    "prior": {"kind", "mean", "cov", "count", "oversample", "file", "locations", "weights"},
    "flow": {"integrator", "steps", "rtol", "atol", "damping", "self_radius", "barrier", "K1", "K2"},
    "output": {"dir", "trace"},
}


class ConfigError(FlowFiltError):
    """A config file is malformed or violates the schema."""

    def __init__(self, message, path=None, line=None, source=None):
        self.path = path
        self.line = line
        self.source = source
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        field_part = f"field '{path}': " if path else ""
        super().__init__(f"{prefix + ': ' if prefix else ''}{field_part}{message}")


def _marks(node, path=(), out=None):
    """Map every key path in a composed YAML tree to its 1-based line."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            sub = path + (key.value,)
            out[sub] = key.start_mark.line + 1
            _marks(value, sub, out)
            out[sub] = key.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _marks(item, path + (i,), out)
    return out


def _dotted(path):
    parts = []
    for p in path:
        if isinstance(p, int):
            parts[-1] = f"{parts[-1]}[{p}]" if parts else f"[{p}]"
        else:
            parts.append(str(p))
    return ".".join(parts)


class _Reader:
    """Typed access to the parsed document with positioned errors."""

    def __init__(self, data, marks, source):
        self.data = data
        self.marks = marks
        self.source = source

    def error(self, path, message):
        line = None
        for cut in range(len(path), -1, -1):
            if tuple(path[:cut]) in self.marks:
                line = self.marks[tuple(path[:cut])]
                break
        return ConfigError(message, _dotted(path), line, self.source)

    def get(self, path, default=None, required=False):
        node = self.data
        for p in path:
            if isinstance(node, dict) and p in node:
                node = node[p]
            elif isinstance(node, list) and isinstance(p, int) and p < len(node):
                node = node[p]
            else:
                if required:
                    raise self.error(path, "is required")
                return default
        return node

    def number(self, path, default=None, required=False, positive=False, nonneg=False, integer=False):
        value = self.get(path, default, required)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(path, f"must be a number, got {value!r}")
        if integer and not float(value).is_integer():
            raise self.error(path, f"must be an integer, got {value!r}")
        if positive and not value > 0:
            raise self.error(path, f"must be positive, got {value!r}")
        if nonneg and not value >= 0:
            raise self.error(path, f"must be nonnegative, got {value!r}")
        return int(value) if integer else float(value)

    def choice(self, path, options, default=None, required=False):
        value = self.get(path, default, required)
        if value is None:
            return None
        if value not in options:
            raise self.error(path, f"must be one of {list(options)}, got {value!r}")
        return value

    def vector(self, path, size=None, required=False):
        value = self.get(path, None, required)
        if value is None:
            return None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        arr = self._array(path, value, 1)
        if size is not None and arr.size != size:
            raise self.error(path, f"must have {size} entries, got {arr.size}")
        return arr

    def matrix(self, path, shape=None, required=False):
        value = self.get(path, None, required)
        if value is None:
            return None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [[value]]
        arr = self._array(path, value, 2)
        if shape is not None and arr.shape != tuple(shape):
            raise self.error(path, f"must be {shape[0]}x{shape[1]}, got {arr.shape[0]}x{arr.shape[1]}")
        return arr

    def _array(self, path, value, ndim):
        try:
            arr = np.array(value, dtype=float)
        except (TypeError, ValueError):
            raise self.error(path, "must be numeric") from None
        if arr.ndim != ndim:
            raise self.error(path, f"must be a {'list' if ndim == 1 else 'list of equal-length lists'} of numbers")
        if not np.all(np.isfinite(arr)):
            raise self.error(path, "must be finite")
        return arr


@dataclass(frozen=True)
class RunConfig:
    """A validated config together with what is needed to run it."""

    scenario: Scenario
    methods: tuple
    name: str
    seed: int
    config_hash: str
    out_dir: Path | None
    trace: bool
    raw: dict = field(repr=False)
    kalman: dict | None = None


def _canonical(value):
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_canonical(v) for v in value]
    return str(value)


def config_hash(data: dict) -> str:
    """SHA-256 of the semantic content; the output section and formatting do not count."""
    semantic = {k: v for k, v in data.items() if k != "output"}
    text = json.dumps(_canonical(semantic), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_config(path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", source=path) from exc
    return parse_config(text, source=path, seed_override=seed_override)


def parse_config(text: str, source=None, seed_override: int | None = None) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", line=line, source=source) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping of sections", line=1, source=source)
    r = _Reader(data, _marks(node), source)
    for key in data:
        if key not in SECTIONS:
            raise r.error((key,), f"unknown section; expected one of {list(SECTIONS)}")
        if data[key] is not None and not isinstance(data[key], dict):
            raise r.error((key,), "must be a mapping")
        for sub in data[key] or {}:
            if sub not in _ALLOWED[key]:
                raise r.error((key, sub), f"unknown field; allowed: {sorted(_ALLOWED[key])}")
    for key in ("system", "likelihood", "prior"):
        if key not in data:
            raise r.error((key,), "section is required")

    base = Path(source).parent if source is not None else Path.cwd()
    seed = r.number(("scenario", "seed"), 0, integer=True, nonneg=True)
    if seed_override is not None:
        seed = int(seed_override)
    system, n = _system(r)
    lik_for, p_dim, kal_h, kal_r = _likelihood(r, n)
    prior, kal_prior = _prior(r, n, base, seed)
    flow_cfg = _flow(r)
    methods = r.get(("scenario", "methods"), ["flow-recursive"])
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",")]
    if not isinstance(methods, list) or not methods:
        raise r.error(("scenario", "methods"), "must be a non-empty list")
    for i, m in enumerate(methods):
        if m not in METHODS:
            raise r.error(("scenario", "methods", i), f"unknown method {m!r}; choose from {list(METHODS)}")

    raw_meas = r.get(("scenario", "measurements"), []) or []
    if not isinstance(raw_meas, list):
        raise r.error(("scenario", "measurements"), "must be a list of measurement vectors")
    measurements = []
    for i, _ in enumerate(raw_meas):
        y = r.vector(("scenario", "measurements", i))
        if y.size != p_dim:
            raise r.error(("scenario", "measurements", i), f"has dimension {y.size}, the likelihood expects {p_dim}")
        measurements.append(y)

    inputs = system.inputs
    if inputs is not None and len(inputs) not in (0, len(measurements)) and len(measurements):
        raise r.error(("system", "inputs"), f"needs one input per measurement ({len(measurements)}), got {len(inputs)}")

    name = str(r.get(("scenario", "name"), Path(source).stem if source else "scenario"))
    try:
        scenario = Scenario(system, lik_for, prior, tuple(measurements), flow_cfg, seed, p_dim)
    except ContractError as exc:
        raise ConfigError(str(exc), source=source) from None

    kalman = None
    if kal_prior is not None and kal_h is not None and system.name in ("identity", "random-walk", "linear"):
        noise = system.noise
        if noise is None or isinstance(noise, GaussianNoise):
            A = np.eye(n) if system.name != "linear" else r.matrix(("system", "A"))
            Q = np.zeros((n, n)) if noise is None else noise.cov
            kalman = dict(mean=kal_prior[0], cov=kal_prior[1], A=A, Q=Q, H=kal_h, R=kal_r)

    out = r.get(("output", "dir"))
    trace = r.get(("output", "trace"), False)
    if not isinstance(trace, bool):
        raise r.error(("output", "trace"), "must be true or false")
    return RunConfig(scenario, tuple(methods), name, seed, config_hash(data),
                     Path(out) if out is not None else None, trace, data, kalman)


def _system(r: _Reader):
    model = r.choice(("system", "model"), SYSTEM_MODELS, required=True)
    n = r.number(("system", "dim"), required=True, integer=True, positive=True)
    A = r.matrix(("system", "A"), shape=(n, n)) if model == "linear" else None
    if model == "linear" and A is None:
        raise r.error(("system", "A"), "is required for the linear model")
    if model == "coordinated-turn-2d" and n != 5:
        raise r.error(("system", "dim"), "must be 5 for coordinated-turn-2d ([px, py, vx, vy, omega])")
    dt = r.number(("system", "dt"), 1.0, positive=True)
    noise = None
    kind = r.choice(("system", "noise", "kind"), ("none", "gaussian", "deterministic"), default="none")
    if kind == "gaussian":
        cov = r.matrix(("system", "noise", "cov"), shape=(n, n), required=True)
        if not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(0.5 * (cov + cov.T)) < 0):
            raise r.error(("system", "noise", "cov"), "must be symmetric positive semidefinite")
        noise = GaussianNoise(cov)
    elif kind == "deterministic":
        locs = r.matrix(("system", "noise", "locations"), required=True)
        if locs.shape[1] != n:
            raise r.error(("system", "noise", "locations"), f"rows must have {n} entries")
        w = r.vector(("system", "noise", "weights"), size=locs.shape[0])
        try:
            noise = DeterministicNoise(ParticleSet(locs, w) if w is not None else ParticleSet.equal(locs))
        except ContractError as exc:
            raise r.error(("system", "noise"), str(exc)) from None
    inputs = None
    raw = r.get(("system", "inputs"))
    if raw is not None:
        if not isinstance(raw, list):
            raise r.error(("system", "inputs"), "must be a list of input vectors")
        inputs = [r.vector(("system", "inputs", i), size=n) for i in range(len(raw))]
    return system_model(model, n, A=A, dt=dt, noise=noise, inputs=inputs), n


def _likelihood(r: _Reader, n: int):
    r.choice(("likelihood", "kind"), ("gaussian",), default="gaussian")
    name = r.choice(("likelihood", "measurement_function"), MEASUREMENT_FUNCTIONS, default="identity")
    H = None
    if name == "linear":
        H = r.matrix(("likelihood", "H"), required=True)
        if H.shape[1] != n:
            raise r.error(("likelihood", "H"), f"must have {n} columns, got {H.shape[1]}")
        p = H.shape[0]
    elif name in ("identity", "cubic"):
        p = n
    elif name == "range":
        p = 1
    else:
        if n < 2:
            raise r.error(("likelihood", "measurement_function"), "range-bearing needs a state of dimension >= 2")
        p = 2
    R = r.matrix(("likelihood", "noise_cov"), shape=(p, p), required=True)
    if not np.allclose(R, R.T, rtol=0, atol=1e-12 * np.max(np.abs(R))):
        raise r.error(("likelihood", "noise_cov"), "must be symmetric")
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise r.error(("likelihood", "noise_cov"), "must be positive definite") from None
    kind = r.choice(("likelihood", "schedule", "kind"), ("linear", "power2", "power"), default="linear")
    exponent = r.number(("likelihood", "schedule", "exponent"), 1.0)
    try:
        schedule = Schedule(kind, exponent if kind == "power" else 1.0)
    except ContractError as exc:
        raise r.error(("likelihood", "schedule"), str(exc)) from None
    h, angular = measurement_function(name, H)

    def likelihood_for(y):
        return gaussian_likelihood(y, h, R, schedule, angular)

    kal_h = np.eye(n) if name == "identity" else H if name == "linear" else None
    return likelihood_for, p, kal_h, R


def _prior(r: _Reader, n: int, base: Path, seed: int):
    kind = r.choice(("prior", "kind"), ("gaussian", "particles"), default="gaussian")
    if kind == "gaussian":
        mean = r.vector(("prior", "mean"), size=n, required=True)
        cov = r.matrix(("prior", "cov"), shape=(n, n), required=True)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise r.error(("prior", "cov"), "must be positive definite") from None
        count = r.number(("prior", "count"), 100, integer=True, positive=True)
        over = r.number(("prior", "oversample"), 10, integer=True, positive=True)
        return gaussian_particles(mean, cov, count, seed, oversample=over), (mean, cov)
    file = r.get(("prior", "file"))
    try:
        if file is not None:
            p = Path(file)
            prior = read_particles_csv(p if p.is_absolute() else base / p)
        else:
            locs = r.matrix(("prior", "locations"), required=True)
            w = r.vector(("prior", "weights"), size=locs.shape[0])
            prior = ParticleSet(locs, w) if w is not None else ParticleSet.equal(locs)
    except (OSError, ContractError) as exc:
        raise r.error(("prior",), f"cannot build the particle prior: {exc}") from None
    if prior.dim != n:
        raise r.error(("prior",), f"particles have dimension {prior.dim}, the system has {n}")
    return prior, None


def _flow(r: _Reader) -> FlowConfig:
    defaults = FlowConfig()
    K1 = r.number(("flow", "K1"), 100.0)
    K2 = r.number(("flow", "K2"))
    try:
        params = DistanceParams(K1, K2)
    except ContractError as exc:
        raise r.error(("flow", "K1" if K2 is None else "K2"), str(exc)) from None
    return FlowConfig(
        integrator=r.choice(("flow", "integrator"), INTEGRATORS, default=defaults.integrator),
        steps=r.number(("flow", "steps"), defaults.steps, integer=True, positive=True),
        rtol=r.number(("flow", "rtol"), defaults.rtol, positive=True),
        atol=r.number(("flow", "atol"), defaults.atol, positive=True),
        damping=r.number(("flow", "damping"), defaults.damping, nonneg=True),
        self_radius=r.number(("flow", "self_radius"), defaults.self_radius, nonneg=True),
        barrier=r.number(("flow", "barrier"), defaults.barrier, nonneg=True),
        params=params,
    )

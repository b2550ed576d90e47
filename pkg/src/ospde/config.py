"""JSON problem configs: named coefficient forms -> SpdeProblem.

The schema is documented in docs/config_schema.md.  Every error names the
offending field path, e.g. ``problem.coefficients.h[1].form``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .model import (
    CoefficientSet,
    DominatorSpec,
    Lipschitz,
    ObstacleSpec,
    SigmaField,
    SpatialDomain,
    SpdeProblem,
)
from .symbolic import ParseError, parse_fields, parse_poly


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON (sorted keys, no whitespace)."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def load_config(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("$", "top level must be an object")
    return data


# --------------------------------------------------------------------------- #
# small typed getters
# --------------------------------------------------------------------------- #


def _get(obj: dict, key: str, path: str, default: Any = ..., kind: type | tuple = object):
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object")
    if key not in obj:
        if default is ...:
            raise ConfigError(f"{path}.{key}", "required field missing")
        return default
    value = obj[key]
    if kind is float and isinstance(value, bool):
        raise ConfigError(f"{path}.{key}", "expected a number")
    if kind is float and isinstance(value, int):
        return float(value)
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{path}.{key}", "expected an integer")
    if not isinstance(value, kind):
        raise ConfigError(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


def _numbers(value, path: str, length: int | None = None) -> list[float]:
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ConfigError(path, "expected a list of numbers")
    if length is not None and len(value) != length:
        raise ConfigError(path, f"expected {length} entries, got {len(value)}")
    return [float(v) for v in value]


# --------------------------------------------------------------------------- #
# space forms: x (P, d) -> (P,)
# --------------------------------------------------------------------------- #

SpaceForm = Callable[[np.ndarray], np.ndarray]


def space_form(spec: Any, path: str, domain: SpatialDomain) -> SpaceForm:
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        value = float(spec)
        return lambda x: np.full(x.shape[0], value)
    form = _get(spec, "form", path, kind=str)
    lo = np.array([a for a, _ in domain.extent])
    L = np.array(domain.lengths)
    if form == "constant":
        value = _get(spec, "value", path, kind=float)
        return lambda x: np.full(x.shape[0], value)
    if form == "mode":
        amp = _get(spec, "amplitude", path, 1.0, float)
        k = _numbers(_get(spec, "k", path, [1.0] * domain.dim, list), f"{path}.k", domain.dim)
        kk = np.array(k)
        return lambda x: amp * np.prod(np.sin(kk * np.pi * (x - lo) / L), axis=1)
    if form == "poly":
        expr = _get(spec, "expr", path, kind=str)
        try:
            poly = parse_poly(expr, domain.dim)
        except ParseError as exc:
            raise ConfigError(f"{path}.expr", str(exc)) from exc
        return lambda x: poly(x)
    if form == "bump":
        amp = _get(spec, "amplitude", path, 1.0, float)
        center = np.array(_numbers(_get(spec, "center", path, kind=list), f"{path}.center", domain.dim))
        width = _get(spec, "width", path, kind=float)
        if not width > 0:
            raise ConfigError(f"{path}.width", "must be positive")
        # smooth, compactly supported: exp(1 - 1/(1 - r^2)) for r < 1
        def bump(x):
            r2 = np.sum((x - center) ** 2, axis=1) / width ** 2
            out = np.zeros(x.shape[0])
            inside = r2 < 1
            out[inside] = amp * np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
            return out

        return bump
    if form == "tabulated":
        values = np.array(_numbers(_get(spec, "values", path, kind=list), f"{path}.values", int(np.prod(domain.resolution))))
        full = domain.full_nodes()
        bmask = domain.boundary_mask()
        table = np.zeros(full.shape[0])
        table[~bmask] = values
        shape = tuple(n + 2 for n in domain.resolution)
        spacing = np.array(domain.spacing)

        def lookup(x):
            idx = np.rint((x - lo) / spacing).astype(int)
            if np.any(np.abs(x - (lo + idx * spacing)) > 1e-9 * np.max(L)):
                raise ValueError("tabulated field evaluated off the grid")
            return table[np.ravel_multi_index(tuple(idx.T), shape)]

        return lookup
    if form == "sum":
        terms = _get(spec, "terms", path, kind=list)
        parts = [space_form(t, f"{path}.terms[{i}]", domain) for i, t in enumerate(terms)]
        return lambda x: sum((p(x) for p in parts), np.zeros(x.shape[0]))
    raise ConfigError(f"{path}.form", f"unknown space form {form!r}")


# --------------------------------------------------------------------------- #
# coefficient forms: (t, x, y, z) -> (P,)
# --------------------------------------------------------------------------- #

TermForm = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _modulator(spec: dict, path: str, domain: SpatialDomain) -> SpaceForm | None:
    if "x" not in spec:
        return None
    return space_form(spec["x"], f"{path}.x", domain)


def term_form(spec: Any, path: str, domain: SpatialDomain, n: int) -> tuple[TermForm, bool]:
    """Returns (callable, depends on (y, z))."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        value = float(spec)
        return (lambda t, x, y, z: np.full(x.shape[0], value)), False
    form = _get(spec, "form", path, kind=str)
    mod = _modulator(spec, path, domain)

    def modulated(fn: TermForm) -> TermForm:
        if mod is None:
            return fn
        return lambda t, x, y, z: mod(x) * fn(t, x, y, z)

    if form == "constant":
        value = _get(spec, "value", path, kind=float)
        return modulated(lambda t, x, y, z: np.full(x.shape[0], value)), False
    if form == "xfield":
        field = space_form(_get(spec, "field", path), f"{path}.field", domain)
        return modulated(lambda t, x, y, z: field(x)), False
    if form in ("affine", "tanh", "sin"):
        c0 = _get(spec, "const", path, 0.0, float)
        a = _get(spec, "y", path, 0.0, float)
        b = np.array(_numbers(_get(spec, "z", path, [0.0] * n, list), f"{path}.z", n))
        scale = _get(spec, "scale", path, 1.0, float)
        state = a != 0.0 or bool(np.any(b))
        if form == "affine":
            fn = lambda t, x, y, z: c0 + scale * (a * y + z @ b)
        elif form == "tanh":
            fn = lambda t, x, y, z: c0 + scale * np.tanh(a * y + z @ b)
        else:
            fn = lambda t, x, y, z: c0 + scale * np.sin(a * y + z @ b)
        return modulated(fn), state
    if form == "sum":
        terms = _get(spec, "terms", path, kind=list)
        parts = [term_form(t, f"{path}.terms[{i}]", domain, n) for i, t in enumerate(terms)]
        fns = [p[0] for p in parts]
        return modulated(lambda t, x, y, z: sum((f(t, x, y, z) for f in fns), np.zeros(x.shape[0]))), any(p[1] for p in parts)
    raise ConfigError(f"{path}.form", f"unknown coefficient form {form!r}")


def _vector_terms(spec: Any, path: str, domain: SpatialDomain, n: int, count: int):
    if not isinstance(spec, list) or len(spec) != count:
        raise ConfigError(path, f"expected a list of {count} terms")
    parts = [term_form(s, f"{path}[{i}]", domain, n) for i, s in enumerate(spec)]
    fns = [p[0] for p in parts]
    return (lambda t, x, y, z: np.stack([f(t, x, y, z) for f in fns], axis=-1)), any(p[1] for p in parts)


# --------------------------------------------------------------------------- #
# problem
# --------------------------------------------------------------------------- #


def build_domain(spec: dict, path: str) -> SpatialDomain:
    extent = _get(spec, "extent", path, kind=list)
    resolution = _get(spec, "resolution", path, kind=list)
    try:
        ext = [tuple(_numbers(e, f"{path}.extent[{i}]", 2)) for i, e in enumerate(extent)]
        if not all(isinstance(r, int) and not isinstance(r, bool) for r in resolution):
            raise ConfigError(f"{path}.resolution", "expected a list of integers")
        return SpatialDomain(tuple(ext), tuple(resolution))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from exc


def build_sigma(spec: dict, path: str, domain: SpatialDomain) -> SigmaField:
    kind = _get(spec, "kind", path, kind=str)
    bound = _get(spec, "bound", path, None, (int, float))
    bound = None if bound is None else float(bound)
    if kind == "fields":
        texts = _get(spec, "fields", path, kind=list)
        try:
            fields = parse_fields(texts, domain.dim)
        except (ParseError, ValueError) as exc:
            raise ConfigError(f"{path}.fields", str(exc)) from exc
        return SigmaField.from_vector_fields(fields, bound)
    if kind == "matrix":
        rows = _get(spec, "matrix", path, kind=list)
        if len(rows) != domain.dim:
            raise ConfigError(f"{path}.matrix", f"expected {domain.dim} rows")
        m = [_numbers(r, f"{path}.matrix[{i}]") for i, r in enumerate(rows)]
        if len({len(r) for r in m}) != 1:
            raise ConfigError(f"{path}.matrix", "rows have different lengths")
        return SigmaField.constant(m, bound)
    if kind == "zero":
        cols = _get(spec, "columns", path, 1, int)
        return SigmaField.zero(domain.dim, cols)
    raise ConfigError(f"{path}.kind", f"unknown sigma kind {kind!r}")


def build_coefficients(spec: dict, path: str, domain: SpatialDomain, n: int) -> CoefficientSet:
    J = _get(spec, "J", path, 1, int)
    if J < 1:
        raise ConfigError(f"{path}.J", "must be >= 1")
    lip = _get(spec, "lipschitz", path, kind=dict)
    try:
        lipschitz = Lipschitz(
            _get(lip, "C", f"{path}.lipschitz", kind=float),
            _get(lip, "alpha", f"{path}.lipschitz", kind=float),
            _get(lip, "beta", f"{path}.lipschitz", kind=float),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}.lipschitz", str(exc)) from exc
    f, sf = term_form(_get(spec, "f", path, 0.0), f"{path}.f", domain, n)
    g, sg = _vector_terms(_get(spec, "g", path, [0.0] * n), f"{path}.g", domain, n, n)
    h, sh = _vector_terms(_get(spec, "h", path, [0.0] * J), f"{path}.h", domain, n, J)
    return CoefficientSet(f, g, h, lipschitz, n, J, sf or sg or sh)


def _time_form(spec: Any, path: str, domain: SpatialDomain):
    """Space form plus an optional linear-in-time shift ``rate * t``."""
    base = space_form(spec, path, domain)
    rate = _get(spec, "rate", path, 0.0, float) if isinstance(spec, dict) else 0.0
    return lambda t, x: base(x) + rate * t


def build_obstacle(spec: dict | None, path: str, domain: SpatialDomain, n: int, J: int) -> ObstacleSpec | None:
    if spec is None:
        return None
    offset = _get(spec, "offset", path, 0.0, float)
    if "barrier" in spec:
        return ObstacleSpec(barrier=_time_form(spec["barrier"], f"{path}.barrier", domain), offset=offset)
    if "dominator" in spec:
        d = spec["dominator"]
        dp = f"{path}.dominator"
        init = space_form(_get(d, "initial", dp), f"{dp}.initial", domain)
        f = _time_form(_get(d, "f", dp, 0.0), f"{dp}.f", domain)
        gs = [_time_form(s, f"{dp}.g[{i}]", domain) for i, s in enumerate(_get(d, "g", dp, [0.0] * n, list))]
        hs = [_time_form(s, f"{dp}.h[{i}]", domain) for i, s in enumerate(_get(d, "h", dp, [0.0] * J, list))]
        if len(gs) != n:
            raise ConfigError(f"{dp}.g", f"expected {n} entries")
        if len(hs) != J:
            raise ConfigError(f"{dp}.h", f"expected {J} entries")
        dom = DominatorSpec(
            f=f,
            g=lambda t, x: np.stack([q(t, x) for q in gs], axis=-1),
            h=lambda t, x: np.stack([q(t, x) for q in hs], axis=-1),
            initial=init,
        )
        try:
            return ObstacleSpec(dominator=dom, offset=offset)
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from exc
    raise ConfigError(path, "obstacle needs 'barrier' or 'dominator'")


def build_problem(spec: dict, path: str = "problem") -> SpdeProblem:
    if not isinstance(spec, dict):
        raise ConfigError(path, "expected an object")
    domain = build_domain(_get(spec, "domain", path, kind=dict), f"{path}.domain")
    sigma = build_sigma(_get(spec, "sigma", path, kind=dict), f"{path}.sigma", domain)
    coeffs = build_coefficients(_get(spec, "coefficients", path, kind=dict), f"{path}.coefficients", domain, sigma.columns)
    initial = space_form(_get(spec, "initial", path, 0.0), f"{path}.initial", domain)
    obstacle = build_obstacle(_get(spec, "obstacle", path, None), f"{path}.obstacle", domain, sigma.columns, coeffs.J)
    horizon = _get(spec, "horizon", path, 1.0, float)
    viscosity = _get(spec, "viscosity", path, 0.0, float)
    try:
        return SpdeProblem(domain, sigma, coeffs, initial, obstacle, horizon, viscosity)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


# --------------------------------------------------------------------------- #
# run settings
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class RunConfig:
    dt: float = 1e-2
    penalty: float = 1000.0
    penalties: tuple[float, ...] = ()
    picard_tol: float = 1e-8
    picard_max_iter: int = 30
    paths: int = 1
    base_seed: int = 0
    lambdas: tuple[float, ...] = ()
    levels: int = 6
    k: int = 8
    p: float = 3.0
    degiorgi_lambda: float | None = None
    export_every: int = 0
    compare_tol: float = 1e-8


def build_run(spec: dict | None, path: str = "run") -> RunConfig:
    spec = spec or {}
    if not isinstance(spec, dict):
        raise ConfigError(path, "expected an object")
    known = set(RunConfig.__dataclass_fields__)
    for key in spec:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown field")
    out = RunConfig(
        dt=_get(spec, "dt", path, 1e-2, float),
        penalty=_get(spec, "penalty", path, 1000.0, float),
        penalties=tuple(_numbers(_get(spec, "penalties", path, [], list), f"{path}.penalties")),
        picard_tol=_get(spec, "picard_tol", path, 1e-8, float),
        picard_max_iter=_get(spec, "picard_max_iter", path, 30, int),
        paths=_get(spec, "paths", path, 1, int),
        base_seed=_get(spec, "base_seed", path, 0, int),
        lambdas=tuple(_numbers(_get(spec, "lambdas", path, [], list), f"{path}.lambdas")),
        levels=_get(spec, "levels", path, 6, int),
        k=_get(spec, "k", path, 8, int),
        p=_get(spec, "p", path, 3.0, float),
        degiorgi_lambda=_get(spec, "degiorgi_lambda", path, None, (int, float)),
        export_every=_get(spec, "export_every", path, 0, int),
        compare_tol=_get(spec, "compare_tol", path, 1e-8, float),
    )
    if not out.dt > 0:
        raise ConfigError(f"{path}.dt", "must be positive")
    if out.paths < 1:
        raise ConfigError(f"{path}.paths", "must be >= 1")
    if out.base_seed < 0:
        raise ConfigError(f"{path}.base_seed", "must be non-negative")
    return out

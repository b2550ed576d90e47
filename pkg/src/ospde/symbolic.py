"""Polynomial vector fields, Lie brackets and the Hormander order search.

A first-order operator ``X = sum_i X_i d_i`` with polynomial coefficients is
stored as a :class:`VectorField`.  Brackets are computed in exact rational
arithmetic, so two fields are equal iff their canonical term lists are equal.

The Hormander search builds the nested families

    L_0 = {L_1, ..., L_n},   L_{m+1} = L_m  u  {[L_k, M] : M in L_m}

and reports the first level whose polynomial-coefficient span contains every
coordinate field ``d_1, ..., d_d``.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

Monomial = tuple[int, ...]
Number = int | Fraction


class DimensionMismatch(ValueError):
    pass


class ParseError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# polynomials
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Poly:
    """Multivariate polynomial with rational coefficients.

    ``terms`` is sorted by exponent tuple and never contains a zero
    coefficient, which makes ``==`` a syntactic test.
    """

    nvars: int
    terms: tuple[tuple[Monomial, Fraction], ...] = ()

    @classmethod
    def from_dict(cls, nvars: int, coeffs: dict[Monomial, Number]) -> "Poly":
        items = []
        for mono, c in coeffs.items():
            if len(mono) != nvars:
                raise DimensionMismatch(f"monomial {mono} has wrong arity for {nvars} variables")
            c = Fraction(c)
            if c != 0:
                items.append((tuple(int(e) for e in mono), c))
        items.sort()
        return cls(nvars, tuple(items))

    @classmethod
    def zero(cls, nvars: int) -> "Poly":
        return cls(nvars, ())

    @classmethod
    def constant(cls, nvars: int, value: Number) -> "Poly":
        return cls.from_dict(nvars, {(0,) * nvars: value})

    @classmethod
    def variable(cls, nvars: int, index: int, power: int = 1) -> "Poly":
        mono = tuple(power if i == index else 0 for i in range(nvars))
        return cls.from_dict(nvars, {mono: 1})

    def as_dict(self) -> dict[Monomial, Fraction]:
        return dict(self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    @property
    def degree(self) -> int:
        if not self.terms:
            return -1
        return max(sum(m) for m, _ in self.terms)

    def _check(self, other: "Poly") -> None:
        if self.nvars != other.nvars:
            raise DimensionMismatch(f"{self.nvars} vs {other.nvars} variables")

    def __add__(self, other: "Poly") -> "Poly":
        self._check(other)
        acc = self.as_dict()
        for m, c in other.terms:
            acc[m] = acc.get(m, Fraction(0)) + c
        return Poly.from_dict(self.nvars, acc)

    def __neg__(self) -> "Poly":
        return Poly(self.nvars, tuple((m, -c) for m, c in self.terms))

    def __sub__(self, other: "Poly") -> "Poly":
        return self + (-other)

    def __mul__(self, other: "Poly | Number") -> "Poly":
        if not isinstance(other, Poly):
            other = Fraction(other)
            if other == 0:
                return Poly.zero(self.nvars)
            return Poly(self.nvars, tuple((m, c * other) for m, c in self.terms))
        self._check(other)
        acc: dict[Monomial, Fraction] = {}
        for (m1, c1), (m2, c2) in itertools.product(self.terms, other.terms):
            m = tuple(a + b for a, b in zip(m1, m2))
            acc[m] = acc.get(m, Fraction(0)) + c1 * c2
        return Poly.from_dict(self.nvars, acc)

    __rmul__ = __mul__

    def diff(self, index: int) -> "Poly":
        acc: dict[Monomial, Fraction] = {}
        for m, c in self.terms:
            e = m[index]
            if e == 0:
                continue
            dm = tuple(e - 1 if i == index else mi for i, mi in enumerate(m))
            acc[dm] = acc.get(dm, Fraction(0)) + c * e
        return Poly.from_dict(self.nvars, acc)

    def evaluate(self, point: Sequence[Number]) -> Fraction:
        """Exact value at a rational point."""
        total = Fraction(0)
        for m, c in self.terms:
            v = c
            for xi, e in zip(point, m):
                if e:
                    v *= Fraction(xi) ** e
            total += v
        return total

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Floating-point evaluation at points ``x`` of shape (P, nvars)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[0])
        for m, c in self.terms:
            term = np.full(x.shape[0], float(c))
            for i, e in enumerate(m):
                if e:
                    term = term * x[:, i] ** e
            out += term
        return out

    def __str__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for m, c in sorted(self.terms, key=lambda t: (-sum(t[0]), t[0])):
            parts.append(_format_term(c, _format_monomial(m), ""))
        return _join_terms(parts)


def _format_monomial(m: Monomial) -> str:
    factors = []
    for i, e in enumerate(m):
        if e == 1:
            factors.append(f"x{i + 1}")
        elif e > 1:
            factors.append(f"x{i + 1}^{e}")
    return "*".join(factors)


def _format_term(c: Fraction, mono: str, op: str) -> str:
    body = "*".join(s for s in (mono, op) if s)
    if not body:
        return str(c)
    if c == 1:
        return body
    if c == -1:
        return "-" + body
    return f"{c}*{body}"


def _join_terms(parts: list[str]) -> str:
    out = parts[0]
    for p in parts[1:]:
        out += " - " + p[1:] if p.startswith("-") else " + " + p
    return out


def monomials(nvars: int, max_degree: int) -> list[Monomial]:
    """All exponent tuples of total degree <= max_degree, graded order."""
    out = []
    for deg in range(max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(nvars), deg):
            m = [0] * nvars
            for i in combo:
                m[i] += 1
            out.append(tuple(m))
    return out


# --------------------------------------------------------------------------- #
# vector fields
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class VectorField:
    """First-order operator ``sum_i components[i] * d_i``."""

    components: tuple[Poly, ...]

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError("vector field needs at least one component")
        nv = {p.nvars for p in self.components}
        if nv != {len(self.components)}:
            raise DimensionMismatch("component arity must equal the dimension")

    @property
    def dim(self) -> int:
        return len(self.components)

    @classmethod
    def zero(cls, dim: int) -> "VectorField":
        return cls(tuple(Poly.zero(dim) for _ in range(dim)))

    @classmethod
    def coordinate(cls, dim: int, index: int) -> "VectorField":
        """The field ``d_{index+1}``."""
        return cls(tuple(Poly.constant(dim, 1 if i == index else 0) for i in range(dim)))

    def is_zero(self) -> bool:
        return all(p.is_zero() for p in self.components)

    @property
    def degree(self) -> int:
        return max(p.degree for p in self.components)

    def _check(self, other: "VectorField") -> None:
        if self.dim != other.dim:
            raise DimensionMismatch(f"fields of dimension {self.dim} and {other.dim}")

    def __add__(self, other: "VectorField") -> "VectorField":
        self._check(other)
        return VectorField(tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other: "VectorField") -> "VectorField":
        self._check(other)
        return VectorField(tuple(a - b for a, b in zip(self.components, other.components)))

    def __neg__(self) -> "VectorField":
        return VectorField(tuple(-a for a in self.components))

    def __mul__(self, scalar: "Number | Poly") -> "VectorField":
        return VectorField(tuple(a * scalar for a in self.components))

    __rmul__ = __mul__

    def at(self, point: Sequence[Number]) -> tuple[Fraction, ...]:
        return tuple(p.evaluate(point) for p in self.components)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Float evaluation at points (P, d); returns (P, d)."""
        return np.stack([p(x) for p in self.components], axis=-1)

    def __str__(self) -> str:
        parts = []
        for i, p in enumerate(self.components):
            for m, c in sorted(p.terms, key=lambda t: (-sum(t[0]), t[0])):
                parts.append(_format_term(c, _format_monomial(m), f"d{i + 1}"))
        return _join_terms(parts) if parts else "0"


def lie_bracket(X: VectorField, Y: VectorField) -> VectorField:
    """``[X, Y] = XY - YX``; component j is sum_i (X_i d_i Y_j - Y_i d_i X_j)."""
    X._check(Y)
    d = X.dim
    comps = []
    for j in range(d):
        acc = Poly.zero(d)
        for i in range(d):
            acc = acc + X.components[i] * Y.components[j].diff(i)
            acc = acc - Y.components[i] * X.components[j].diff(i)
        comps.append(acc)
    return VectorField(tuple(comps))


# --------------------------------------------------------------------------- #
# expression grammar:  "x1*d2 + 3*d1",  "-1/2*x1^2*d2",  "0"
# --------------------------------------------------------------------------- #

_TOKEN = re.compile(r"\s*(?:(?P<num>\d+(?:\.\d+)?(?:/\d+)?)|(?P<var>[xd])(?P<idx>\d+)(?:\^(?P<pow>\d+))?|(?P<op>[+\-*]))")


def _tokens(text: str) -> list[tuple[str, str, int, int]]:
    out = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected input at column {pos}: {text[pos:]!r}")
        if m.group("num"):
            out.append(("num", m.group("num"), 0, 0))
        elif m.group("var"):
            out.append((m.group("var"), "", int(m.group("idx")), int(m.group("pow") or 1)))
        else:
            out.append(("op", m.group("op"), 0, 0))
        pos = m.end()
    return out


def _split_terms(tokens):
    """Yield (sign, factor tokens) for each additive term."""
    sign, current = 1, []
    for tok in tokens:
        if tok[0] == "op" and tok[1] in "+-":
            if current and current[-1][0] == "op":
                raise ParseError(f"misplaced operator {tok[1]!r}")
            if current:
                yield sign, current
                current, sign = [], 1
            if tok[1] == "-":
                sign = -sign
            continue
        current.append(tok)
    if current:
        yield sign, current
    elif tokens:
        raise ParseError("expression ends with an operator")


def _parse_factors(factors, dim: int, allow_d: bool):
    coeff = Fraction(1)
    mono = [0] * dim
    d_index = None
    expect_factor = True
    for kind, text, idx, power in factors:
        if kind == "op":
            if text != "*" or expect_factor:
                raise ParseError(f"misplaced operator {text!r}")
            expect_factor = True
            continue
        if not expect_factor:
            raise ParseError("factors must be separated by '*'")
        expect_factor = False
        if kind == "num":
            coeff *= Fraction(text)
        elif kind == "x":
            if not 1 <= idx <= dim:
                raise ParseError(f"x{idx} out of range for dimension {dim}")
            mono[idx - 1] += power
        else:
            if not allow_d:
                raise ParseError("derivative symbol in a scalar polynomial")
            if d_index is not None:
                raise ParseError("a term may contain only one derivative symbol")
            if power != 1 or not 1 <= idx <= dim:
                raise ParseError(f"bad derivative symbol d{idx}")
            d_index = idx - 1
    if expect_factor:
        raise ParseError("term ends with '*'")
    return coeff, tuple(mono), d_index


def _max_index(tokens) -> int:
    return max((t[2] for t in tokens if t[0] in "xd"), default=1)


def parse_field(text: str, dim: int | None = None) -> VectorField:
    """Parse a field such as ``"x1*d2 + 3*d1"``.

    ``dim`` defaults to the largest index that appears.
    """
    tokens = _tokens(text)
    if dim is None:
        dim = _max_index(tokens)
    comps: list[dict[Monomial, Fraction]] = [dict() for _ in range(dim)]
    for sign, factors in _split_terms(tokens):
        coeff, mono, d_index = _parse_factors(factors, dim, allow_d=True)
        if d_index is None:
            if coeff == 0:
                continue
            raise ParseError("each term of a vector field needs a derivative symbol d<i>")
        acc = comps[d_index]
        acc[mono] = acc.get(mono, Fraction(0)) + sign * coeff
    return VectorField(tuple(Poly.from_dict(dim, c) for c in comps))


def parse_fields(texts: Sequence[str], dim: int | None = None) -> list[VectorField]:
    """Parse several fields into one common dimension (the largest index seen)."""
    if dim is None:
        dim = max(_max_index(_tokens(t)) for t in texts)
    return [parse_field(t, dim) for t in texts]


def parse_poly(text: str, nvars: int | None = None) -> Poly:
    """Parse a scalar polynomial such as ``"x1^2 + 1/2*x2"``."""
    tokens = _tokens(text)
    if nvars is None:
        nvars = _max_index(tokens)
    acc: dict[Monomial, Fraction] = {}
    for sign, factors in _split_terms(tokens):
        coeff, mono, _ = _parse_factors(factors, nvars, allow_d=False)
        acc[mono] = acc.get(mono, Fraction(0)) + sign * coeff
    return Poly.from_dict(nvars, acc)


# --------------------------------------------------------------------------- #
# Hormander search
# --------------------------------------------------------------------------- #


def hormander_floor(d: int) -> int:
    """Smallest admissible order: 2 for d=1, 1 for d=2, 0 otherwise."""
    return {1: 2, 2: 1}.get(d, 0)


@dataclass(frozen=True)
class WitnessTerm:
    coefficient: Poly
    expression: str


@dataclass(frozen=True)
class HormanderResult:
    n0: int | None
    n0_eff: int | None
    eta: Fraction | None
    witness: dict[int, tuple[WitnessTerm, ...]]
    depth_cap: int
    level_sizes: tuple[int, ...] = ()
    sample_points: tuple[tuple[Fraction, ...], ...] = field(default=(), repr=False)

    def as_dict(self) -> dict:
        return {
            "n0": self.n0,
            "n0_eff": self.n0_eff,
            "eta": None if self.eta is None else str(self.eta),
            "depth_cap": self.depth_cap,
            "level_sizes": list(self.level_sizes),
            "witness": {
                f"d{i + 1}": [
                    {"coefficient": str(t.coefficient), "field": t.expression} for t in terms
                ]
                for i, terms in sorted(self.witness.items())
            },
        }


def sample_points(d: int, count: int) -> list[tuple[Fraction, ...]]:
    """Fixed rational sample points used by the span test.

    Point k has coordinate i equal to ``(((k + 1) * p_i) mod 211 - 105) / (53 + i)``
    with p = (17, 29, 41, 59, ...); the sequence is a pseudo-random walk over a
    prime modulus, so low-degree algebraic coincidences do not occur in practice.
    Any coincidence can only make the sampled system *easier* to satisfy, and
    every candidate witness is re-verified symbolically.
    """
    primes = (17, 29, 41, 59, 71, 83, 97, 101)
    pts = []
    for k in range(count):
        pts.append(
            tuple(Fraction(((k + 1) * primes[i % len(primes)] + 7 * i) % 211 - 105, 53 + i) for i in range(d))
        )
    return pts


def _solve_rational(rows: list[list[Fraction]], rhs: list[list[Fraction]]):
    """Row-reduce [A | B] exactly; return per-column particular solutions or None."""
    nrows = len(rows)
    ncols = len(rows[0]) if rows else 0
    nrhs = len(rhs[0]) if rhs else 0
    aug = [list(r) + list(b) for r, b in zip(rows, rhs)]
    pivots = []
    r = 0
    for c in range(ncols):
        piv = next((i for i in range(r, nrows) if aug[i][c] != 0), None)
        if piv is None:
            continue
        aug[r], aug[piv] = aug[piv], aug[r]
        pv = aug[r][c]
        aug[r] = [v / pv for v in aug[r]]
        for i in range(nrows):
            if i != r and aug[i][c] != 0:
                fac = aug[i][c]
                aug[i] = [a - fac * b for a, b in zip(aug[i], aug[r])]
        pivots.append(c)
        r += 1
        if r == nrows:
            break
    solutions = []
    for b in range(nrhs):
        col = ncols + b
        if any(aug[i][col] != 0 for i in range(r, nrows)):
            solutions.append(None)
            continue
        x = [Fraction(0)] * ncols
        for i, c in enumerate(pivots):
            x[c] = aug[i][col]
        solutions.append(x)
    return solutions


def _span_witness(fields: list[VectorField], labels: list[str], d: int):
    """Try to write every d_i as a polynomial combination of ``fields``.

    Coefficients range over polynomials of total degree <= max field degree.
    Returns {i: witness terms} for the coordinates that were reached.
    """
    if not fields:
        return {}
    cdeg = max(0, max(f.degree for f in fields))
    basis = monomials(d, cdeg)
    support = len(monomials(d, cdeg + max(0, max(f.degree for f in fields))))
    pts = sample_points(d, 2 * support + d)
    rows, rhs = [], []
    for p in pts:
        mono_vals = [Poly.from_dict(d, {m: 1}).evaluate(p) for m in basis]
        field_vals = [f.at(p) for f in fields]
        for comp in range(d):
            rows.append([mv * fv[comp] for fv in field_vals for mv in mono_vals])
            rhs.append([Fraction(1 if comp == i else 0) for i in range(d)])
    sols = _solve_rational(rows, rhs)
    found = {}
    for i, x in enumerate(sols):
        if x is None:
            continue
        terms = []
        combo = VectorField.zero(d)
        for j, f in enumerate(fields):
            coeff = Poly.from_dict(d, {m: x[j * len(basis) + a] for a, m in enumerate(basis)})
            if not coeff.is_zero():
                terms.append(WitnessTerm(coeff, labels[j]))
                combo = combo + f * coeff
        if combo == VectorField.coordinate(d, i):
            found[i] = tuple(terms)
    return found


def hormander_order(fields: Iterable[VectorField], d: int, depth_cap: int = 5) -> HormanderResult:
    """Smallest bracket level whose span contains all coordinate fields."""
    if depth_cap < 0:
        raise ValueError("depth_cap must be non-negative")
    gens = list(fields)
    for f in gens:
        if f.dim != d:
            raise DimensionMismatch(f"field {f} has dimension {f.dim}, expected {d}")
    gen_labels = [f"L{k + 1}" for k in range(len(gens))]

    current: list[VectorField] = []
    labels: list[str] = []
    for f, lab in zip(gens, gen_labels):
        if not f.is_zero() and f not in current:
            current.append(f)
            labels.append(lab)
    frontier = list(zip(current, labels))
    sizes = []
    for level in range(depth_cap + 1):
        if level > 0:
            new_frontier = []
            for (M, mlab) in frontier:
                for L, llab in zip(gens, gen_labels):
                    B = lie_bracket(L, M)
                    if B.is_zero() or B in current or (-B) in current:
                        continue
                    lab = f"[{llab},{mlab}]"
                    current.append(B)
                    labels.append(lab)
                    new_frontier.append((B, lab))
            frontier = new_frontier
        sizes.append(len(current))
        witness = _span_witness(current, labels, d)
        if len(witness) == d:
            n0_eff = max(level, hormander_floor(d))
            return HormanderResult(
                n0=level,
                n0_eff=n0_eff,
                eta=Fraction(1, 2**n0_eff),
                witness=witness,
                depth_cap=depth_cap,
                level_sizes=tuple(sizes),
            )
        if level > 0 and not frontier:
            break
    return HormanderResult(None, None, None, {}, depth_cap, tuple(sizes))


def alpha_exponent(eta: Fraction | float, d: int, k: int) -> Fraction | float:
    """``(2*eta*k - d - 2*eta) / (d*k)``; requires ``k > 1 + d/(2*eta)``."""
    if isinstance(eta, float):
        eta_q: Fraction | float = eta
        bound = 1 + d / (2 * eta)
    else:
        eta_q = Fraction(eta)
        bound = 1 + Fraction(d) / (2 * eta_q)
    if not k > bound:
        raise ValueError(f"integrability exponent k={k} must exceed 1 + d/(2*eta) = {bound}")
    return (2 * eta_q * k - d - 2 * eta_q) / (d * k)


def eta_exponent(result: HormanderResult, d: int, k: int) -> tuple[Fraction, Fraction]:
    """Return (eta, alpha0) for a successful Hormander search."""
    if result.n0 is None or result.eta is None:
        raise ValueError("Hormander condition not reached within depth_cap; eta undefined")
    return result.eta, alpha_exponent(result.eta, d, k)

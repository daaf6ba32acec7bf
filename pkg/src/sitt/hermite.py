"""Probabilist's Hermite polynomials and polynomial link functions.

Conventions used throughout the package:

* ``He_i`` is the probabilist's Hermite polynomial: ``He_0 = 1``,
  ``He_1 = z``, ``He_{i+1}(z) = z He_i(z) - i He_{i-1}(z)``.  Under the
  standard normal measure, ``E[He_i He_j] = 1{i=j} i!``.
* A link function stores raw coefficients ``c_i`` and evaluates as
  ``sigma(z) = sum_i (c_i / i!) He_i(z)``.
* Basis-change helpers (`monomial_to_hermite`, `hermite_to_monomial`,
  `quadrature_expand`) work with *plain* Hermite coefficients ``h_k``
  such that ``f(z) = sum_k h_k He_k(z)``, i.e. ``h_k = E[f He_k] / k!``.

All functions are pure; arrays are never mutated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .errors import ConfigError

__all__ = [
    "MAX_DEGREE",
    "MAX_LINK_DEGREE",
    "COEFF_TOL",
    "DEFAULT_COEFF_BOUND",
    "LinkFunction",
    "ClippedLink",
    "ExponentReport",
    "hermite_eval",
    "link_eval",
    "link_derivative_eval",
    "monomial_to_hermite",
    "hermite_to_monomial",
    "information_exponent",
    "general_exponent",
    "general_exponent_bruteforce",
    "exponent_report",
    "quadrature_expand",
]

# Degree caps: the evaluator goes up to 64 (factorials via log-gamma past
# 20 would lose accuracy in coefficient normalisation beyond that), link
# functions are capped at 16.
MAX_DEGREE = 64
MAX_LINK_DEGREE = 16

# Absolute tolerance below which a Hermite coefficient counts as zero in
# exponent computations.
COEFF_TOL = 1e-12

# Default bound on sum(c_i^2) accepted at LinkFunction construction.
DEFAULT_COEFF_BOUND = 25.0


def _factorial(i: int) -> float:
    if i <= 20:
        return float(math.factorial(i))
    return math.exp(math.lgamma(i + 1))


def hermite_eval(i: int, z):
    """Evaluate He_i(z) by the stable three-term recurrence.

    `z` may be a scalar or an ndarray; the result has the shape of `z`.
    """
    if i < 0:
        raise ValueError("Hermite degree must be non-negative")
    if i > MAX_DEGREE:
        raise ValueError(f"Hermite degree {i} exceeds the supported maximum {MAX_DEGREE}")
    z = np.asarray(z, dtype=float)
    prev = np.ones_like(z)
    if i == 0:
        return prev if prev.ndim else float(prev)
    cur = z.copy()
    for k in range(1, i):
        prev, cur = cur, z * cur - k * prev
    return cur if cur.ndim else float(cur)


def _hermite_table(max_degree: int, z: np.ndarray) -> np.ndarray:
    """Rows 0..max_degree of He_i(z) for a vector z, shape (max_degree+1, len(z))."""
    z = np.asarray(z, dtype=float)
    table = np.empty((max_degree + 1,) + z.shape)
    table[0] = 1.0
    if max_degree >= 1:
        table[1] = z
    for k in range(1, max_degree):
        table[k + 1] = z * table[k] - k * table[k - 1]
    return table


@dataclass(frozen=True)
class LinkFunction:
    """Polynomial link sigma(z) = sum_{i} (c_i / i!) He_i(z).

    `coeffs` maps degree i to the raw coefficient c_i.  Degrees must lie
    in [0, 16]; at least one coefficient of degree >= 1 must be nonzero,
    and sum(c_i^2) must stay below `coeff_bound`.
    """

    coeffs: dict[int, float]
    coeff_bound: float = field(default=DEFAULT_COEFF_BOUND, compare=False)

    def __post_init__(self):
        clean: dict[int, float] = {}
        for deg, c in self.coeffs.items():
            deg = int(deg)
            if deg < 0:
                raise ConfigError(f"negative Hermite degree {deg} in link function")
            if deg > MAX_LINK_DEGREE:
                raise ConfigError(
                    f"link degree {deg} exceeds the cap {MAX_LINK_DEGREE}"
                )
            clean[deg] = float(c)
        if not any(abs(c) > COEFF_TOL for d, c in clean.items() if d >= 1):
            raise ConfigError("link function must have a nonzero coefficient of degree >= 1")
        total = sum(c * c for c in clean.values())
        if total > self.coeff_bound:
            raise ConfigError(
                f"sum of squared link coefficients {total:.4g} exceeds the bound "
                f"{self.coeff_bound:.4g}"
            )
        object.__setattr__(self, "coeffs", clean)

    @property
    def degree(self) -> int:
        """Largest degree with a coefficient above tolerance."""
        return max(d for d, c in self.coeffs.items() if abs(c) > COEFF_TOL)

    @property
    def lowest_degree(self) -> int:
        """Smallest degree >= 1 with a coefficient above tolerance (the Q of the family)."""
        return min(d for d, c in self.coeffs.items() if d >= 1 and abs(c) > COEFF_TOL)

    def __call__(self, z):
        return link_eval(self, z)

    def derivative(self, z):
        return link_derivative_eval(self, z)

    def to_monomial(self) -> np.ndarray:
        """Monomial coefficients (index = power) of sigma as a polynomial."""
        hcoeffs = {d: c / _factorial(d) for d, c in self.coeffs.items()}
        return hermite_to_monomial(hcoeffs)


def link_eval(link: LinkFunction, z):
    """sigma(z) = sum_i (c_i / i!) He_i(z); accepts scalar or ndarray z."""
    z_arr = np.asarray(z, dtype=float)
    if link.coeffs:
        table = _hermite_table(max(link.coeffs), z_arr)
    out = np.zeros_like(z_arr)
    for deg, c in link.coeffs.items():
        out += (c / _factorial(deg)) * table[deg]
    return out if out.ndim else float(out)


def link_derivative_eval(link: LinkFunction, z):
    """sigma'(z) via He_i' = i He_{i-1}: sum_i (c_i / (i-1)!) He_{i-1}(z)."""
    z_arr = np.asarray(z, dtype=float)
    top = max(link.coeffs)
    table = _hermite_table(max(top - 1, 0), z_arr)
    out = np.zeros_like(z_arr)
    for deg, c in link.coeffs.items():
        if deg >= 1:
            out += (c / _factorial(deg - 1)) * table[deg - 1]
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ClippedLink:
    """sigma(z)/rho clipped to zero wherever |sigma(z)/rho| exceeds `clip`.

    The conventional threshold is 1/ln(d) (natural log, fixed throughout
    the package).
    """

    base: LinkFunction
    rho: float
    clip: float

    def __post_init__(self):
        if self.rho <= 0:
            raise ConfigError("temperature rho must be positive")
        if self.clip <= 0:
            raise ConfigError("clip threshold must be positive")

    def __call__(self, z):
        scaled = np.asarray(link_eval(self.base, z), dtype=float) / self.rho
        out = np.where(np.abs(scaled) <= self.clip, scaled, 0.0)
        return out if out.ndim else float(out)


def _monomial_hermite_rows(max_degree: int) -> list[list[int]]:
    """Exact integer monomial coefficients of He_0..He_max_degree."""
    rows: list[list[int]] = [[1]]
    if max_degree >= 1:
        rows.append([0, 1])
    for k in range(1, max_degree):
        prev, cur = rows[k - 1], rows[k]
        nxt = [0] * (k + 2)
        for p, c in enumerate(cur):  # z * He_k
            nxt[p + 1] += c
        for p, c in enumerate(prev):  # - k He_{k-1}
            nxt[p] -= k * c
        rows.append(nxt)
    return rows


def monomial_to_hermite(poly_coeffs) -> dict[int, float]:
    """Expand a polynomial (coefficients by power) in the He basis.

    Uses the exact identity
    ``z^n = n! sum_m He_{n-2m}(z) / (2^m m! (n-2m)!)``,
    with integer arithmetic, so the change of basis round-trips to
    machine precision.  Returns {degree: coefficient} with f = sum h_k He_k.
    """
    poly = list(np.asarray(poly_coeffs, dtype=float))
    if len(poly) - 1 > MAX_DEGREE:
        raise ValueError(f"polynomial degree {len(poly) - 1} exceeds {MAX_DEGREE}")
    out: dict[int, float] = {}
    for n, p in enumerate(poly):
        if p == 0.0:
            continue
        for m in range(n // 2 + 1):
            k = n - 2 * m
            count = math.factorial(n) // (2**m * math.factorial(m) * math.factorial(k))
            out[k] = out.get(k, 0.0) + p * float(count)
    return {k: v for k, v in sorted(out.items())}


def hermite_to_monomial(hermite_coeffs) -> np.ndarray:
    """Inverse of `monomial_to_hermite`: f = sum h_k He_k as a power series."""
    if not hermite_coeffs:
        return np.zeros(1)
    top = max(hermite_coeffs)
    if top > MAX_DEGREE:
        raise ValueError(f"Hermite degree {top} exceeds {MAX_DEGREE}")
    rows = _monomial_hermite_rows(top)
    out = np.zeros(top + 1)
    for k, h in hermite_coeffs.items():
        if h == 0.0:
            continue
        row = rows[k]
        out[: len(row)] += h * np.asarray(row, dtype=float)
    return out


def information_exponent(link: LinkFunction) -> int:
    """Smallest degree >= 1 whose Hermite coefficient is nonzero."""
    degrees = [d for d, c in link.coeffs.items() if d >= 1 and abs(c) > COEFF_TOL]
    if not degrees:
        raise ConfigError("all-zero link has no information exponent")
    return min(degrees)


def _is_even_polynomial(link: LinkFunction) -> bool:
    poly = link.to_monomial()
    scale = max(1.0, float(np.max(np.abs(poly))))
    odd = poly[1::2]
    return bool(np.all(np.abs(odd) <= 1e-9 * scale))


def general_exponent(link: LinkFunction) -> int:
    """1 if sigma has any odd-degree monomial term (constant dropped), else 2."""
    return 2 if _is_even_polynomial(link) else 1


def general_exponent_bruteforce(link: LinkFunction, j_max: int = 4) -> int:
    """min over j = 1..j_max of the information exponent of sigma^j.

    Powers are formed in monomial space and re-expanded in the He basis.
    j_max = 4 suffices to certify any answer in {1, 2}: even links keep
    every power even, and for non-even links one of sigma, sigma^2,
    sigma^3 acquires a degree-1 Hermite component.
    """
    poly = link.to_monomial()
    best: int | None = None
    power = np.ones(1)
    for _ in range(j_max):
        power = np.convolve(power, poly)
        hc = monomial_to_hermite(power)
        scale = max(1.0, max(abs(v) for v in hc.values()))
        nz = [d for d, v in hc.items() if d >= 1 and abs(v) > 1e-9 * scale]
        if nz:
            best = min(nz) if best is None else min(best, min(nz))
        if best == 1:
            break
    if best is None:
        raise ConfigError("link has no nonzero Hermite coefficient of degree >= 1")
    return best


@dataclass(frozen=True)
class ExponentReport:
    """Degree, information exponent and general exponent of one link."""

    degree: int
    ie: int
    ge: int

    def __post_init__(self):
        if not (self.ge <= self.ie <= self.degree):
            raise ValueError(
                f"exponent ordering violated: ge={self.ge} ie={self.ie} deg={self.degree}"
            )
        if self.ge not in (1, 2):
            raise ValueError(f"general exponent must be 1 or 2, got {self.ge}")


def exponent_report(link: LinkFunction) -> ExponentReport:
    return ExponentReport(
        degree=link.degree,
        ie=information_exponent(link),
        ge=general_exponent(link),
    )


def quadrature_expand(f, max_degree: int, nodes: int = 128) -> dict[int, float]:
    """Hermite coefficients of f under N(0,1) via Gauss-Hermite quadrature.

    Returns {k: h_k} with h_k = E[f(z) He_k(z)] / k!, so that
    ``f(z) ~= sum_k h_k He_k(z)``.  The rule integrates polynomials of
    degree <= 2*nodes - 1 exactly; `nodes >= 4*max_degree` is required so
    polynomial inputs of degree <= max_degree come out exact.

    `f` must accept an ndarray of evaluation points.
    """
    if max_degree < 0:
        raise ValueError("max_degree must be non-negative")
    if nodes < 4 * max(max_degree, 1):
        raise ValueError(
            f"insufficient quadrature nodes: need >= {4 * max(max_degree, 1)}, got {nodes}"
        )
    # hermegauss integrates against e^{-z^2/2}; renormalise to the
    # standard normal density.
    z, w = hermegauss(nodes)
    w = w / math.sqrt(2.0 * math.pi)
    vals = np.asarray(f(z), dtype=float)
    if vals.shape != z.shape:
        raise ValueError("f must map an array of nodes to an equal-shaped array")
    table = _hermite_table(max_degree, z)
    out: dict[int, float] = {}
    for k in range(max_degree + 1):
        out[k] = float(np.sum(w * vals * table[k]) / _factorial(k))
    return out

"""Sampling of subspaces, feature vectors, link functions and prompts.

A task is a triple (beta, link, tau): inputs are standard Gaussian in
R^d, labels are y = sigma(<beta, x>) + zeta with zeta a fair +-tau coin,
and beta lives on the unit sphere of an r-dimensional subspace.  Prompts
carry their context split into the four groups the test-time training
pipeline consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .hermite import LinkFunction, link_eval

__all__ = [
    "Subspace",
    "Task",
    "Prompt",
    "Constant",
    "Uniform",
    "LinkSpec",
    "sample_subspace",
    "sample_feature",
    "sample_link",
    "sample_prompt",
    "sample_labels",
    "subspace_projector",
]

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class Subspace:
    """Orthonormal basis of an r-dimensional subspace of R^d (columns span it)."""

    basis: np.ndarray  # (d, r)
    d: int
    r: int

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.shape != (self.d, self.r):
            raise ConfigError(f"basis shape {b.shape} does not match (d, r)=({self.d}, {self.r})")
        if not (1 <= self.r <= self.d):
            raise ConfigError(f"need 1 <= r <= d, got r={self.r}, d={self.d}")
        gram = b.T @ b
        if np.max(np.abs(gram - np.eye(self.r))) > ORTHO_TOL:
            raise ConfigError("basis columns are not orthonormal to 1e-10")
        object.__setattr__(self, "basis", b)

    def projector(self) -> np.ndarray:
        return subspace_projector(self)


@dataclass(frozen=True)
class Task:
    """One single-index task: unit feature direction, link and noise level."""

    beta: np.ndarray
    link: LinkFunction
    tau: float
    subspace: Subspace | None = None

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if abs(np.linalg.norm(beta) - 1.0) > ORTHO_TOL:
            raise ConfigError("feature vector beta must have unit norm")
        if self.tau < 0:
            raise ConfigError("noise magnitude tau must be >= 0")
        if self.subspace is not None:
            resid = beta - self.subspace.basis @ (self.subspace.basis.T @ beta)
            if np.linalg.norm(resid) > ORTHO_TOL:
                raise ConfigError("beta does not lie in the task subspace")
        object.__setattr__(self, "beta", beta)

    @property
    def d(self) -> int:
        return self.beta.size


@dataclass(frozen=True)
class Prompt:
    """Labelled contexts split into four groups, plus one query pair."""

    xs: np.ndarray  # (N, d)
    ys: np.ndarray  # (N,)
    query_x: np.ndarray  # (d,)
    query_y: float
    group_sizes: tuple[int, int, int, int]

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if xs.ndim != 2 or ys.ndim != 1 or xs.shape[0] != ys.shape[0]:
            raise ConfigError("contexts must be (N, d) inputs with N labels")
        if sum(self.group_sizes) != xs.shape[0]:
            raise ConfigError(
                f"group sizes {self.group_sizes} do not partition {xs.shape[0]} contexts"
            )
        if any(n < 0 for n in self.group_sizes):
            raise ConfigError("group sizes must be >= 0")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "query_x", np.asarray(self.query_x, dtype=float))

    def group(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Inputs and labels of group k in 1..4."""
        if k not in (1, 2, 3, 4):
            raise ValueError("group index must be 1..4")
        start = sum(self.group_sizes[: k - 1])
        stop = start + self.group_sizes[k - 1]
        return self.xs[start:stop], self.ys[start:stop]


@dataclass(frozen=True)
class Constant:
    value: float

    def sample(self, rng: np.random.Generator) -> float:
        return self.value

    @property
    def mean(self) -> float:
        return self.value


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if self.hi < self.lo:
            raise ConfigError(f"uniform bounds out of order: ({self.lo}, {self.hi})")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.lo, self.hi))

    @property
    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class LinkSpec:
    """Per-degree coefficient distributions of a link-function family.

    Only constant and uniform families are supported.  The lowest degree
    must have nonzero mean, so the family satisfies E[c_Q] != 0.
    """

    dists: dict[int, Constant | Uniform]
    coeff_bound: float = field(default=25.0, compare=False)

    def __post_init__(self):
        if not self.dists:
            raise ConfigError("link spec must declare at least one degree")
        degrees = sorted(self.dists)
        if degrees[0] < 1:
            raise ConfigError("link spec degrees must be >= 1")
        q = degrees[0]
        if abs(self.dists[q].mean) < 1e-12:
            raise ConfigError(
                f"distribution of the lowest degree {q} must have nonzero mean"
            )
        object.__setattr__(self, "dists", dict(self.dists))


def sample_subspace(d: int, r: int, rng: np.random.Generator) -> Subspace:
    """Rotation-invariant random subspace via modified Gram-Schmidt.

    One re-orthogonalisation pass keeps the basis orthonormal to well
    below 1e-10 at the dimensions this package targets (d <= 256).
    """
    if not (1 <= r <= d):
        raise ConfigError(f"need 1 <= r <= d, got r={r}, d={d}")
    g = rng.standard_normal((d, r))
    basis = _mgs(g)
    basis = _mgs(basis)  # re-orthogonalisation pass
    return Subspace(basis=basis, d=d, r=r)


def _mgs(a: np.ndarray) -> np.ndarray:
    q = np.array(a, dtype=float, copy=True)
    d, r = q.shape
    for j in range(r):
        for i in range(j):
            q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
        norm = np.linalg.norm(q[:, j])
        if norm < 1e-12:
            raise NumericError("rank-deficient draw during orthonormalisation")
        q[:, j] /= norm
    return q


def sample_feature(sub: Subspace, rng: np.random.Generator) -> np.ndarray:
    """Uniform unit vector on the sphere of the subspace: U g / ||g||."""
    while True:
        g = rng.standard_normal(sub.r)
        norm = np.linalg.norm(g)
        if norm > 1e-12:
            break
    return sub.basis @ (g / norm)


def sample_link(spec: LinkSpec, rng: np.random.Generator) -> LinkFunction:
    """Draw coefficients per degree, rejecting the (measure-zero) all-zero draw."""
    for _ in range(100):
        coeffs = {deg: dist.sample(rng) for deg, dist in spec.dists.items()}
        if any(abs(c) > 1e-12 for c in coeffs.values()):
            return LinkFunction(coeffs, coeff_bound=spec.coeff_bound)
    raise NumericError("link sampling kept producing all-zero coefficients")


def sample_labels(task: Task, xs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Labels y = sigma(<beta, x>) + zeta with zeta ~ Unif{-tau, +tau}."""
    z = xs @ task.beta
    clean = link_eval(task.link, z)
    if task.tau == 0.0:
        return np.asarray(clean, dtype=float)
    signs = rng.integers(0, 2, size=xs.shape[0]) * 2 - 1
    return clean + task.tau * signs


def sample_prompt(
    task: Task,
    sizes: tuple[int, int, int, int],
    rng: np.random.Generator,
) -> Prompt:
    """i.i.d. standard Gaussian contexts and a query, labelled by the task."""
    if any(n < 0 for n in sizes):
        raise ConfigError("group sizes must be >= 0")
    n_total = sum(sizes)
    d = task.d
    xs = rng.standard_normal((n_total, d))
    ys = sample_labels(task, xs, rng)
    query_x = rng.standard_normal(d)
    query_y = float(sample_labels(task, query_x[None, :], rng)[0])
    return Prompt(xs=xs, ys=ys, query_x=query_x, query_y=query_y, group_sizes=tuple(sizes))


def subspace_projector(sub: Subspace) -> np.ndarray:
    """P = U U^T; equals r E[beta beta^T] for beta uniform on the subspace sphere."""
    return sub.basis @ sub.basis.T

"""Independent verification machinery.

Everything here deliberately avoids the analytic code paths it is used
to check: gradients come from central differences, expectations from
streaming Monte Carlo, and the ridge solution from plain gradient
descent.  Keeping these routes separate is what makes the cross-checks
meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .hermite import LinkFunction, link_derivative_eval, link_eval

__all__ = [
    "FiniteDiffReport",
    "SteinReport",
    "RidgeGdResult",
    "finite_diff_grad",
    "check_gradient",
    "stein_check",
    "ridge_gd_oracle",
    "mc_expectation",
]

DEFAULT_FD_STEP = 1e-5


@dataclass(frozen=True)
class FiniteDiffReport:
    """Worst-case relative disagreement between analytic and numeric gradients."""

    max_rel_error: float
    argmax_index: int
    step_h: float

    def __post_init__(self):
        if self.step_h <= 0:
            raise ValueError("finite-difference step must be positive")


def finite_diff_grad(f, point, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.asarray(point, dtype=float).ravel()
    grad = np.empty_like(x0)
    for j in range(x0.size):
        step = np.zeros_like(x0)
        step[j] = h
        fp = f(x0 + step)
        fm = f(x0 - step)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function not finite near coordinate {j}")
        grad[j] = (fp - fm) / (2.0 * h)
    return grad


def check_gradient(f, analytic_grad, point, h: float = DEFAULT_FD_STEP) -> FiniteDiffReport:
    """Compare an analytic gradient against central differences.

    Relative error per coordinate is |a - n| / max(1, |a|, |n|), which
    degrades gracefully to absolute error near zero entries.
    """
    numeric = finite_diff_grad(f, point, h)
    analytic = np.asarray(analytic_grad, dtype=float).ravel()
    if analytic.shape != numeric.shape:
        raise ValueError("gradient shape mismatch")
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    idx = int(np.argmax(rel))
    return FiniteDiffReport(max_rel_error=float(rel[idx]), argmax_index=idx, step_h=h)


@dataclass(frozen=True)
class SteinReport:
    """Monte Carlo check of E[sigma(<b,x>) x] = E[sigma'(<b,x>)] b."""

    deviation: float
    stderr: float
    samples: int


def stein_check(
    link: LinkFunction, beta: np.ndarray, M: int, rng: np.random.Generator
) -> SteinReport:
    """Estimate both sides of the Stein identity and report their gap.

    The derivative side is analytic (He_i' = i He_{i-1}); the deviation
    is the Euclidean norm of the difference of the two Monte Carlo
    means, and `stderr` is the matching norm of per-coordinate standard
    errors of that difference.
    """
    if M < 10_000:
        raise ValueError("stein_check needs at least 1e4 samples")
    beta = np.asarray(beta, dtype=float)
    d = beta.size
    x = rng.standard_normal((M, d))
    z = x @ beta
    fx = link_eval(link, z)
    dfx = link_derivative_eval(link, z)
    # per-sample difference vector f(z) x - f'(z) beta
    diff = fx[:, None] * x - dfx[:, None] * beta[None, :]
    mean = diff.mean(axis=0)
    se = diff.std(axis=0, ddof=1) / np.sqrt(M)
    return SteinReport(
        deviation=float(np.linalg.norm(mean)),
        stderr=float(np.linalg.norm(se)),
        samples=M,
    )


@dataclass(frozen=True)
class RidgeGdResult:
    a: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


def ridge_gd_oracle(
    phi: np.ndarray,
    y: np.ndarray,
    lambda2: float,
    rate: float = 0.5,
    iters: int = 200_000,
    tol: float = 1e-10,
) -> RidgeGdResult:
    """Gradient descent on the ridge objective, used to validate closed forms.

    Minimises (1/2N) ||phi a - y||^2 + (lambda2/2) ||a||^2.  The step
    size is clamped below 2/L with L estimated by power iteration, so
    the iteration is a contraction whenever lambda2 > 0.
    """
    phi = np.asarray(phi, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = phi.shape
    gram = phi.T @ phi / n

    # power iteration for the largest eigenvalue of gram + lambda2 I
    v = np.ones(m) / np.sqrt(m)
    for _ in range(100):
        w = gram @ v + lambda2 * v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
    lmax = float(v @ (gram @ v) + lambda2)
    safe = 1.0 / max(lmax, 1e-12)
    rate = min(rate, safe)  # keeps rate < 2/lmax with margin

    target = phi.T @ y / n
    a = np.zeros(m)
    prev_obj = np.inf
    bad_steps = 0
    grad_norm = np.inf
    for it in range(1, iters + 1):
        grad = gram @ a + lambda2 * a - target
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            return RidgeGdResult(a=a, converged=True, iterations=it, grad_norm=grad_norm)
        a = a - rate * grad
        obj = 0.5 * float((phi @ a - y) @ (phi @ a - y)) / n + 0.5 * lambda2 * float(a @ a)
        if obj > prev_obj:
            bad_steps += 1
            if bad_steps >= 10:
                raise NumericError("ridge gradient descent diverged")
        else:
            bad_steps = 0
        prev_obj = obj
    return RidgeGdResult(a=a, converged=False, iterations=iters, grad_norm=grad_norm)


def mc_expectation(f, sampler, M: int, rng: np.random.Generator, chunk: int = 4096):
    """Streaming Monte Carlo mean and standard error of a vector statistic.

    `sampler(rng, n)` must return n raw samples (first axis = sample);
    `f` maps that batch to an (n, k) or (n,) array.  Accumulation uses
    the pairwise/Chan update so a single pass is numerically stable and
    the result does not depend on the chunk size.
    """
    if M < 2:
        raise ValueError("need at least two samples")
    count = 0
    mean = None
    m2 = None
    done = 0
    while done < M:
        take = min(chunk, M - done)
        vals = np.asarray(f(sampler(rng, take)), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] != take:
            raise NumericError("statistic returned a wrong-length batch")
        if not np.all(np.isfinite(vals)):
            bad = int(np.argwhere(~np.isfinite(vals).all(axis=1))[0][0])
            raise NumericError(f"non-finite sample at index {done + bad}")
        b_count = take
        b_mean = vals.mean(axis=0)
        b_m2 = ((vals - b_mean) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = b_count, b_mean, b_m2
        else:
            delta = b_mean - mean
            tot = count + b_count
            mean = mean + delta * (b_count / tot)
            m2 = m2 + b_m2 + delta**2 * (count * b_count / tot)
            count = tot
        done += take
    var = m2 / (count - 1)
    stderr = np.sqrt(var / count)
    if mean.size == 1:
        return float(mean[0]), float(stderr[0])
    return mean, stderr

"""Self-contained verification suites behind `sitt verify`.

Each check pits an analytic code path against an independent oracle
(Monte Carlo, finite differences, quadrature closed forms, or an
iterative solver) and reports the measured discrepancy next to its
tolerance.  Suites are deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import hermite as H
from .model import (
    AttentionContext,
    AttentionParams,
    LoraState,
    MlpParams,
    f_ic,
    grad_gamma_pretrain_loss,
    grad_u_fic,
)
from .oracles import check_gradient, ridge_gd_oracle, stein_check
from .streams import derive
from .training import ttt_stage3

__all__ = ["CheckResult", "SUITES", "run_suites"]


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    measured: float
    tolerance: float
    passed: bool


def _check(suite: str, name: str, measured: float, tolerance: float) -> CheckResult:
    return CheckResult(
        suite=suite,
        name=name,
        measured=float(measured),
        tolerance=float(tolerance),
        passed=bool(measured <= tolerance),
    )


def suite_hermite(seed: int) -> list[CheckResult]:
    rng = derive(seed, 101)
    out = []

    # three-term recurrence consistency on random points
    z = rng.uniform(-5.0, 5.0, size=256)
    worst = 0.0
    for i in range(1, 20):
        lhs = H.hermite_eval(i + 1, z)
        rhs = z * H.hermite_eval(i, z) - i * H.hermite_eval(i - 1, z)
        scale = np.maximum(1.0, np.abs(lhs))
        worst = max(worst, float(np.max(np.abs(lhs - rhs) / scale)))
    out.append(_check("hermite", "recurrence_consistency", worst, 1e-9))

    # Monte Carlo orthogonality: |mean(He_i He_j) - 1{i=j} i!| <= 5 stderr
    M = 200_000
    zs = rng.standard_normal(M)
    table = np.stack([H.hermite_eval(i, zs) for i in range(7)])
    worst_sigma = 0.0
    for i in range(7):
        for j in range(i, 7):
            prod = table[i] * table[j]
            target = math.factorial(i) if i == j else 0.0
            se = prod.std(ddof=1) / math.sqrt(M)
            dev = abs(prod.mean() - target)
            worst_sigma = max(worst_sigma, dev / max(se, 1e-300))
    out.append(_check("hermite", "mc_orthogonality_sigmas", worst_sigma, 5.0))

    # basis round-trip: monomial -> hermite -> monomial
    worst = 0.0
    for _ in range(20):
        deg = int(rng.integers(1, 13))
        poly = rng.standard_normal(deg + 1)
        back = H.hermite_to_monomial(H.monomial_to_hermite(poly))
        scale = max(1.0, float(np.max(np.abs(poly))))
        worst = max(worst, float(np.max(np.abs(back[: poly.size] - poly)) / scale))
    out.append(_check("hermite", "basis_round_trip", worst, 1e-10))

    # quadrature exactness on a random polynomial link
    coeffs = {1: 0.7, 3: -1.1, 5: 0.4}
    link = H.LinkFunction(coeffs)
    got = H.quadrature_expand(lambda t: H.link_eval(link, t), 6, 64)
    worst = 0.0
    for k in range(7):
        expected = coeffs.get(k, 0.0) / math.factorial(k)
        worst = max(worst, abs(got.get(k, 0.0) - expected))
    out.append(_check("hermite", "quadrature_polynomial_exactness", worst, 1e-9))

    # generating-function closed form: exp(z/4) coefficients
    got = H.quadrature_expand(lambda t: np.exp(t / 4.0), 8, 64)
    worst = 0.0
    for k in range(9):
        expected = (0.25**k) * math.exp(1.0 / 32.0) / math.factorial(k)
        worst = max(worst, abs(got[k] - expected))
    out.append(_check("hermite", "exp_generating_function", worst, 1e-9))

    # exponent identity on a randomized corpus
    mismatches = 0
    for _ in range(100):
        degs = sorted(set(rng.integers(1, 7, size=int(rng.integers(1, 4)))))
        coeffs = {int(d): float(rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 1.5)) for d in degs}
        link = H.LinkFunction(coeffs)
        ge = H.general_exponent(link)
        ge_bf = H.general_exponent_bruteforce(link)
        ie = H.information_exponent(link)
        if ge != ge_bf or not (ge <= ie <= link.degree):
            mismatches += 1
    out.append(_check("hermite", "exponent_identity_mismatches", mismatches, 0.0))
    return out


def suite_gradients(seed: int) -> list[CheckResult]:
    rng = derive(seed, 102)
    out = []

    worst = 0.0
    d, n, m = 8, 16, 8
    for _ in range(20):
        gamma = rng.standard_normal((d, d)) * 0.3
        att = AttentionParams(gamma=gamma, rho=float(rng.uniform(0.8, 3.0)))
        ctx = AttentionContext(xs=rng.standard_normal((n, d)), ys=rng.standard_normal(n))
        x = rng.standard_normal(d)
        u = rng.standard_normal(d) * 0.5
        v = rng.integers(0, 2, m) * 2.0 - 1.0
        mlp = MlpParams(a=rng.standard_normal(m), v=v, b=rng.standard_normal(m))
        grad = grad_u_fic(att, LoraState(u=u), mlp, ctx, x)
        rep = check_gradient(
            lambda uu: f_ic(att, LoraState(u=uu), mlp, ctx, x), grad, u, 1e-5
        )
        worst = max(worst, rep.max_rel_error)
    out.append(_check("gradients", "adapter_gradient_vs_fd", worst, 1e-5))

    worst = 0.0
    d, n, m = 6, 8, 4
    for _ in range(20):
        gamma = rng.standard_normal((d, d)) * 0.3
        rho = float(rng.uniform(0.8, 3.0))
        att = AttentionParams(gamma=gamma, rho=rho)
        ctx = AttentionContext(xs=rng.standard_normal((n, d)), ys=rng.standard_normal(n))
        x = rng.standard_normal(d)
        y = float(rng.standard_normal())
        lam = float(rng.uniform(0.0, 0.1))
        v = rng.integers(0, 2, m) * 2.0 - 1.0
        mlp = MlpParams(a=rng.standard_normal(m), v=v, b=rng.standard_normal(m))
        grad = grad_gamma_pretrain_loss(att, mlp, ctx, x, y, lam)

        def loss(gflat, rho=rho, ctx=ctx, x=x, y=y, lam=lam, mlp=mlp):
            att2 = AttentionParams(gamma=gflat.reshape(d, d), rho=rho)
            val = f_ic(att2, None, mlp, ctx, x)
            return (val - y) ** 2 + lam * float(np.sum(gflat**2))

        rep = check_gradient(loss, grad.ravel(), gamma.ravel(), 1e-5)
        worst = max(worst, rep.max_rel_error)
    out.append(_check("gradients", "attention_matrix_gradient_vs_fd", worst, 1e-5))
    return out


def suite_stein(seed: int) -> list[CheckResult]:
    rng = derive(seed, 103)
    out = []
    for name, coeffs, d in (
        ("identity_link", {1: 1.0}, 8),
        ("pure_quadratic", {2: 1.0}, 8),
        ("cubic_quartic_mix", {3: 1.0, 4: 0.4}, 16),
    ):
        link = H.LinkFunction(coeffs)
        beta = rng.standard_normal(d)
        beta /= np.linalg.norm(beta)
        rep = stein_check(link, beta, 100_000, rng)
        sigmas = rep.deviation / max(rep.stderr, 1e-300)
        out.append(_check("stein", name + "_sigmas", sigmas, 5.0))
    return out


def suite_ridge(seed: int) -> list[CheckResult]:
    rng = derive(seed, 104)
    worst_gap = 0.0
    worst_kkt = 0.0
    m, n4 = 8, 64
    for _ in range(20):
        u = rng.standard_normal(4)
        u /= np.linalg.norm(u)
        xs = rng.standard_normal((n4, 4))
        ys = rng.standard_normal(n4)
        v = rng.integers(0, 2, m) * 2.0 - 1.0
        b = rng.uniform(-2.0, 2.0, m)
        lam = float(rng.uniform(1e-3, 1e-1))
        mlp = ttt_stage3(u, MlpParams(a=np.zeros(m), v=v, b=b), xs, ys, lam)
        phi = np.maximum((xs @ u)[:, None] * v[None, :] + b[None, :], 0.0)
        res = ridge_gd_oracle(phi, ys, lam, iters=300_000)
        worst_gap = max(worst_gap, float(np.max(np.abs(res.a - mlp.a))))
        kkt = phi.T @ (phi @ mlp.a) / n4 + lam * mlp.a - phi.T @ ys / n4
        scale = max(float(np.linalg.norm(phi.T @ ys / n4)), 1e-300)
        worst_kkt = max(worst_kkt, float(np.linalg.norm(kkt)) / scale)
    return [
        _check("ridge", "closed_form_vs_gd_oracle", worst_gap, 1e-6),
        _check("ridge", "kkt_relative_residual", worst_kkt, 1e-8),
    ]


SUITES = {
    "hermite": suite_hermite,
    "gradients": suite_gradients,
    "stein": suite_stein,
    "ridge": suite_ridge,
}


def run_suites(names, seed: int) -> list[CheckResult]:
    results: list[CheckResult] = []
    for name in names:
        results.extend(SUITES[name](seed))
    return results

"""The reduced single-layer softmax-attention model and its gradients.

The attention output over a context {(x_i, y_i)} for a query x is

    g = sum_i y_i w_i / sum_i w_i,   w_i = exp((y_i + x_i^T G x) / rho),

optionally with the rank-one adapted matrix G = gamma + u u^T, and the
full in-context prediction applies a ReLU MLP head to g.  The direct
head prediction f_tf skips attention and reads <u, x> instead.

Gradients with respect to u and gamma are exact.  Writing p_i for the
softmax weights w_i / sum w_j, the quotient rule collapses to

    dg/du     = (1/rho) sum_i p_i (y_i - g) (<x_i, u> x + <u, x> x_i)
    dg/dgamma = (1/rho) (sum_i p_i (y_i - g) x_i) x^T

which is evaluated with a max-shift so logits up to +-1e6 stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

__all__ = [
    "AttentionParams",
    "MlpParams",
    "LoraState",
    "AttentionContext",
    "AttentionMemory",
    "attention_output",
    "attention_output_batch",
    "f_ic",
    "f_tf",
    "mlp_forward",
    "grad_u_fic",
    "grad_gamma_pretrain_loss",
]


@dataclass(frozen=True)
class AttentionParams:
    """Attention matrix gamma (d x d) and softmax temperature rho > 0."""

    gamma: np.ndarray
    rho: float

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ConfigError("gamma must be a square matrix")
        if not np.all(np.isfinite(g)):
            raise NumericError("gamma contains non-finite entries")
        if not (self.rho > 0):
            raise ConfigError("temperature rho must be positive")
        object.__setattr__(self, "gamma", g)

    @property
    def d(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class MlpParams:
    """ReLU head: f(s) = sum_j a_j relu(v_j s + b_j), with v_j in {-1, +1}."""

    a: np.ndarray
    v: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        v = np.asarray(self.v, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if not (a.shape == v.shape == b.shape) or a.ndim != 1:
            raise ConfigError("a, v, b must be 1-d arrays of equal length")
        if a.size and np.max(np.abs(np.abs(v) - 1.0)) > 1e-12:
            raise ConfigError("entries of v must be +-1")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "b", b)

    @property
    def m(self) -> int:
        return self.a.size

    def with_a(self, a: np.ndarray) -> "MlpParams":
        return MlpParams(a=np.asarray(a, dtype=float), v=self.v, b=self.b)


@dataclass(frozen=True)
class LoraState:
    """Trainable rank-one direction u; the adapted matrix is gamma + u u^T."""

    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.ndim != 1:
            raise ConfigError("u must be a vector")
        if not np.all(np.isfinite(u)):
            raise NumericError("u contains non-finite entries")
        object.__setattr__(self, "u", u)


@dataclass(frozen=True)
class AttentionContext:
    """Context pairs the attention attends over (inputs may be preprocessed)."""

    xs: np.ndarray  # (N, d)
    ys: np.ndarray  # (N,)

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if xs.ndim != 2 or ys.ndim != 1 or xs.shape[0] != ys.shape[0]:
            raise ConfigError("context must be (N, d) inputs with N labels")
        if xs.shape[0] < 1:
            raise ConfigError("attention context must be nonempty")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n(self) -> int:
        return self.xs.shape[0]


def _check_query(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (d,):
        raise ConfigError(f"query has shape {x.shape}, expected ({d},)")
    if not np.all(np.isfinite(x)):
        raise NumericError("query contains non-finite entries")
    return x


class AttentionMemory:
    """Precomputed attention state for repeated queries against one context.

    Caches x_i^T gamma so that each query costs O(N d).  All methods are
    read-only with respect to the stored arrays, so one memory may be
    shared across threads.
    """

    def __init__(self, att: AttentionParams, ctx: AttentionContext):
        if ctx.xs.shape[1] != att.d:
            raise ConfigError("context dimension does not match gamma")
        self.rho = att.rho
        self.xs = ctx.xs
        self.ys = ctx.ys
        self.rows = ctx.xs @ att.gamma  # row i = x_i^T gamma

    def base_logits(self, x: np.ndarray) -> np.ndarray:
        """(y_i + x_i^T gamma x) / rho, the u-independent part of the logits."""
        return (self.ys + self.rows @ x) / self.rho

    def softmax_weights(self, x, u=None, base=None):
        logits = self.base_logits(x) if base is None else base
        if u is not None:
            cu = self.xs @ u
            logits = logits + cu * (u @ x) / self.rho
        if not np.all(np.isfinite(logits)):
            raise NumericError("attention logits are non-finite")
        shifted = logits - np.max(logits)
        w = np.exp(shifted)
        return w / np.sum(w)

    def output(self, x, u=None, base=None) -> float:
        p = self.softmax_weights(x, u, base)
        return float(p @ self.ys)

    def output_and_grad_u(self, x, u, base=None):
        """Attention value g and its exact gradient dg/du at the adapted matrix."""
        cu = self.xs @ u  # <x_i, u>
        c2 = float(u @ x)  # <u, x>
        logits = (self.base_logits(x) if base is None else base) + cu * (c2 / self.rho)
        if not np.all(np.isfinite(logits)):
            raise NumericError("attention logits are non-finite")
        shifted = logits - np.max(logits)
        w = np.exp(shifted)
        p = w / np.sum(w)
        g = float(p @ self.ys)
        resid = p * (self.ys - g)
        grad = (np.dot(resid, cu) * np.asarray(x, dtype=float) + c2 * (resid @ self.xs)) / self.rho
        return g, grad

    def output_and_grad_gamma(self, x, base=None):
        """Attention value g and dg/dgamma (no adapter) as a d x d matrix."""
        p = self.softmax_weights(x, None, base)
        g = float(p @ self.ys)
        resid = p * (self.ys - g)
        grad = np.outer(resid @ self.xs, np.asarray(x, dtype=float)) / self.rho
        return g, grad


def attention_output_batch(
    att: AttentionParams,
    ctx: AttentionContext,
    queries: np.ndarray,
    chunk: int = 512,
) -> np.ndarray:
    """Attention outputs for many queries against one fixed context."""
    queries = np.asarray(queries, dtype=float)
    mem = AttentionMemory(att, ctx)
    out = np.empty(queries.shape[0])
    for lo in range(0, queries.shape[0], chunk):
        qc = queries[lo : lo + chunk]
        logits = (mem.ys[None, :] + qc @ mem.rows.T) / mem.rho
        if not np.all(np.isfinite(logits)):
            raise NumericError("attention logits are non-finite")
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        out[lo : lo + chunk] = (w @ mem.ys) / w.sum(axis=1)
    return out


def _head_value_and_coef(mlp: MlpParams, g: float) -> tuple[float, float]:
    """MLP value at g and d(value)/dg; the ReLU derivative at 0 is taken as 0."""
    pre = mlp.v * g + mlp.b
    active = pre > 0.0
    value = float(mlp.a @ np.where(active, pre, 0.0))
    coef = float(np.sum(mlp.a * mlp.v * active))
    return value, coef


def attention_output(
    att: AttentionParams,
    lora: LoraState | None,
    ctx: AttentionContext,
    x: np.ndarray,
) -> float:
    """Softmax-weighted label average; always lies in [min y, max y]."""
    x = _check_query(x, att.d)
    mem = AttentionMemory(att, ctx)
    u = lora.u if lora is not None else None
    return mem.output(x, u)


def f_ic(
    att: AttentionParams,
    lora: LoraState | None,
    mlp: MlpParams,
    ctx: AttentionContext,
    x: np.ndarray,
) -> float:
    """In-context prediction: ReLU head applied to the attention output."""
    g = attention_output(att, lora, ctx, x)
    value, _ = _head_value_and_coef(mlp, g)
    return value


def mlp_forward(u: np.ndarray, mlp: MlpParams, xs: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Vectorised head readout f(x) = sum_j a_j relu(v_j <u, x> + b_j).

    `xs` is (N, d); evaluation is chunked so N x m feature blocks stay
    small.  Returns an (N,) array.
    """
    xs = np.asarray(xs, dtype=float)
    s = xs @ np.asarray(u, dtype=float)
    out = np.empty(s.shape[0])
    for lo in range(0, s.shape[0], chunk):
        block = s[lo : lo + chunk, None] * mlp.v[None, :] + mlp.b[None, :]
        np.maximum(block, 0.0, out=block)
        out[lo : lo + chunk] = block @ mlp.a
    return out


def f_tf(lora: LoraState, mlp: MlpParams, x: np.ndarray) -> float:
    """Direct prediction sum_j a_j relu(v_j <u, x> + b_j)."""
    s = float(np.asarray(x, dtype=float) @ lora.u)
    pre = mlp.v * s + mlp.b
    return float(mlp.a @ np.where(pre > 0.0, pre, 0.0))


def grad_u_fic(
    att: AttentionParams,
    lora: LoraState,
    mlp: MlpParams,
    ctx: AttentionContext,
    x: np.ndarray,
) -> np.ndarray:
    """Exact gradient of f_ic with respect to the adapter direction u."""
    x = _check_query(x, att.d)
    mem = AttentionMemory(att, ctx)
    g, dg = mem.output_and_grad_u(x, lora.u)
    _, coef = _head_value_and_coef(mlp, g)
    return coef * dg


def grad_gamma_pretrain_loss(
    att: AttentionParams,
    mlp: MlpParams,
    ctx: AttentionContext,
    x: np.ndarray,
    y: float,
    lambda_pt: float,
) -> np.ndarray:
    """Gradient of (f_ic(x) - y)^2 + lambda_pt ||gamma||_F^2 w.r.t. gamma.

    Pretraining runs without the adapter, so no LoRA term appears.
    """
    x = _check_query(x, att.d)
    mem = AttentionMemory(att, ctx)
    g, dg_dgamma = mem.output_and_grad_gamma(x)
    value, coef = _head_value_and_coef(mlp, g)
    return 2.0 * (value - y) * coef * dg_dgamma + 2.0 * lambda_pt * att.gamma

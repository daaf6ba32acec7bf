"""Pretraining and the three test-time-training stages.

Stage contracts (all updates act on the adapter direction u except the
last):

* Pretraining: one averaged gradient step on gamma from gamma(0) = I/sqrt(d)
  over t_pt independent prompts, with Frobenius ridge lambda_pt.
* Oracle shortcut: gamma* = P / (kappa sqrt(r)) with P the subspace
  projector, standing in for the pretrained matrix.
* Stage I (self-distillation): one preconditioned gradient step toward
  the centred output of the frozen base model on fresh unlabeled draws,
  with an L2 term that shrinks the initialisation; then normalise.
* Stage II (online SGD): one pass over a stream of labelled points,
  preconditioning every squared-loss gradient by sqrt(r) gamma* and
  renormalising u after each step.
* Stage III: closed-form ridge fit of the head weights a on the final
  group of labelled points.

The attention memory used inside f_ic during Stages I and II is always
context group 1 after preprocessing; the Stage II stream consumes raw
group-3 points (optionally prefixed by raw group 2 via `group2_role`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import BudgetError, ConfigError, NumericError
from .hermite import general_exponent
from .model import AttentionContext, AttentionMemory, AttentionParams, MlpParams
from .taskgen import Subspace, Task, sample_prompt
from . import taskgen

__all__ = [
    "PretrainConfig",
    "TttConfig",
    "PipelineConfig",
    "Stage1Result",
    "Stage2Result",
    "PipelineResult",
    "PRETRAIN_BUDGET",
    "default_kappa",
    "pretrain_gamma",
    "oracle_gamma",
    "preprocess_context",
    "init_u",
    "ttt_stage1",
    "ttt_stage2",
    "ttt_stage3",
    "run_pipeline",
    "unit_with_alignment",
]

# Refuse pretraining configurations costing more than this many
# elementary operations (t_pt * n_pt * d^2) unless forced.
PRETRAIN_BUDGET = 10**11


def default_kappa(d: int) -> float:
    """Default scale replacing the polylog factor in the oracle matrix."""
    return math.log(d) ** 2


@dataclass(frozen=True)
class PretrainConfig:
    d: int
    m: int
    rho: float
    eta_pt: float
    lambda_pt: float
    t_pt: int
    n_pt: int
    alpha_pt: float

    def __post_init__(self):
        for name in ("d", "m", "t_pt", "n_pt"):
            if getattr(self, name) < 1:
                raise ConfigError(f"pretrain config field {name} must be >= 1")
        if self.rho <= 0 or self.eta_pt < 0 or self.lambda_pt < 0 or self.alpha_pt < 0:
            raise ConfigError("pretrain rates and scales must be non-negative (rho > 0)")

    @property
    def cost(self) -> int:
        return self.t_pt * self.n_pt * self.d * self.d


@dataclass(frozen=True)
class TttConfig:
    """Group sizes and stage hyperparameters for test-time training.

    In `scaling_mode="theorem-orders"` the stage scales are derived from
    (r, ge, epsilon) with a single constant c:

        alpha1 * m = c * r^(-ge/2 - 1)      eta1 = c * r^(3 ge/2 + 3/2)
        lambda1    = 1 / eta1               alpha2 * m = c * epsilon / r
        eta2       = c / sqrt(r)            n3 = ceil((r sqrt(r)/eps) ln(1/eps))

    and any of eta1/eta2/lambda1/alpha1/alpha2/n3 left unset (None) is
    filled in; explicit values win.  In `scaling_mode="explicit"` every
    rate must be given.
    """

    n1: int
    n2: int
    n3: int | None
    n4: int
    n_new: int
    eta1: float | None = None
    eta2: float | None = None
    lambda1: float | None = None
    lambda2: float = 1e-3
    alpha1: float | None = None
    alpha2: float | None = None
    scaling_mode: str = "explicit"
    c: float = 1.0
    epsilon: float = 0.05
    group2_role: str = "unused"

    def __post_init__(self):
        if self.scaling_mode not in ("explicit", "theorem-orders"):
            raise ConfigError(f"unknown scaling_mode {self.scaling_mode!r}")
        if self.group2_role not in ("unused", "stream-prefix"):
            raise ConfigError(f"unknown group2_role {self.group2_role!r}")
        for name in ("n1", "n2", "n4", "n_new"):
            if getattr(self, name) < 0:
                raise ConfigError(f"group size {name} must be >= 0")
        if self.n3 is not None and self.n3 < 0:
            raise ConfigError("n3 must be >= 0")
        if self.scaling_mode == "explicit":
            missing = [
                k
                for k in ("eta1", "eta2", "lambda1", "alpha1", "alpha2", "n3")
                if getattr(self, k) is None
            ]
            if missing:
                raise ConfigError(f"explicit scaling requires {', '.join(missing)}")
        if not (0 < self.epsilon < 1):
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.c <= 0:
            raise ConfigError("theorem-orders constant c must be positive")

    def with_stream_length(self, n3: int, r: int | None = None) -> "TttConfig":
        """Pin the stage II stream length, keeping theorem-orders consistent.

        In theorem-orders mode the target accuracy and the stream length
        are tied by n3 = c (r sqrt(r)/eps) ln(1/eps); pinning n3 therefore
        re-derives eps by fixed-point inversion so alpha2 keeps tracking
        the per-cell target.
        """
        if n3 < 0:
            raise ConfigError("n3 must be >= 0")
        if self.scaling_mode != "theorem-orders" or n3 == 0:
            return replace(self, n3=int(n3))
        if r is None:
            raise ConfigError("theorem-orders n3 inversion needs the intrinsic dimension r")
        eps = min(max(r**1.5 / n3, 1e-12), 0.5)
        for _ in range(40):
            eps = self.c * r**1.5 * math.log(1.0 / min(max(eps, 1e-12), 0.5)) / n3
        eps = float(min(max(eps, 1e-12), 0.999))
        return replace(self, n3=int(n3), epsilon=eps)

    def resolve(self, r: int, ge: int, m: int) -> "TttConfig":
        """Return a fully explicit config, deriving theorem-order scales."""
        if self.scaling_mode == "explicit":
            return self
        c, eps = self.c, self.epsilon
        eta1 = self.eta1 if self.eta1 is not None else c * r ** (1.5 * ge + 1.5)
        values = dict(
            eta1=eta1,
            lambda1=self.lambda1 if self.lambda1 is not None else 1.0 / eta1,
            alpha1=self.alpha1 if self.alpha1 is not None else c * r ** (-0.5 * ge - 1.0) / m,
            alpha2=self.alpha2 if self.alpha2 is not None else c * eps / (r * m),
            eta2=self.eta2 if self.eta2 is not None else c / math.sqrt(r),
            n3=self.n3
            if self.n3 is not None
            else int(math.ceil(r * math.sqrt(r) / eps * math.log(1.0 / eps))),
        )
        resolved = replace(self, scaling_mode="explicit", **values)
        if resolved.eta1 < 0 or resolved.eta2 < 0 or resolved.alpha1 < 0 or resolved.alpha2 < 0:
            raise ConfigError("derived stage scales must be non-negative")
        return resolved


@dataclass(frozen=True)
class PipelineConfig:
    """Everything run_pipeline needs besides the task itself."""

    d: int
    r: int
    m: int
    rho: float
    ttt: TttConfig
    gamma_source: str = "oracle"  # oracle | pretrain | fixed
    kappa_scale: float | None = None  # None -> ln(d)^2
    pretrain: PretrainConfig | None = None
    pin_u_to_beta: bool = False
    init_alignment: float | None = None
    record_trajectory: bool = True

    def __post_init__(self):
        if self.gamma_source not in ("oracle", "pretrain", "fixed"):
            raise ConfigError(f"unknown gamma_source {self.gamma_source!r}")
        if self.init_alignment is not None and not (-1.0 <= self.init_alignment <= 1.0):
            raise ConfigError("init_alignment must lie in [-1, 1]")
        if self.gamma_source == "pretrain" and self.pretrain is None:
            raise ConfigError("gamma_source='pretrain' needs a pretrain config")
        if not (1 <= self.r <= self.d):
            raise ConfigError("need 1 <= r <= d")
        if self.m < 1 or self.rho <= 0:
            raise ConfigError("m must be >= 1 and rho > 0")

    @property
    def kappa(self) -> float:
        return self.kappa_scale if self.kappa_scale is not None else default_kappa(self.d)


def pretrain_gamma(
    cfg: PretrainConfig,
    task_sampler,
    rng: np.random.Generator,
    force: bool = False,
) -> np.ndarray:
    """One averaged gradient step on gamma from gamma(0) = I/sqrt(d).

    `task_sampler(rng)` must return a Task of dimension cfg.d.  Each
    prompt draws its own child stream, so the result only depends on the
    incoming generator state, not on evaluation order.
    """
    if cfg.cost > PRETRAIN_BUDGET and not force:
        raise BudgetError(
            f"pretraining cost {cfg.cost:.3g} exceeds the budget {PRETRAIN_BUDGET:.3g}; "
            "pass force=True (CLI: --force) or use the oracle matrix"
        )
    d = cfg.d
    gamma0 = np.eye(d) / math.sqrt(d)
    att = AttentionParams(gamma=gamma0, rho=cfg.rho)
    v = rng.integers(0, 2, size=cfg.m) * 2.0 - 1.0
    mlp = MlpParams(a=np.full(cfg.m, cfg.alpha_pt), v=v, b=np.zeros(cfg.m))
    streams = rng.spawn(cfg.t_pt)

    acc = np.zeros((d, d))
    for t, sub_rng in enumerate(streams):
        task = task_sampler(sub_rng)
        xs = sub_rng.standard_normal((cfg.n_pt, d))
        ys = taskgen.sample_labels(task, xs, sub_rng)
        query = sub_rng.standard_normal(d)
        query_y = float(taskgen.sample_labels(task, query[None, :], sub_rng)[0])

        mem = AttentionMemory(att, AttentionContext(xs=xs, ys=ys))
        g, dg_dgamma = mem.output_and_grad_gamma(query)
        pre = mlp.v * g + mlp.b
        active = pre > 0.0
        value = float(mlp.a @ np.where(active, pre, 0.0))
        coef = float(np.sum(mlp.a * mlp.v * active))
        grad = 2.0 * (value - query_y) * coef * dg_dgamma + 2.0 * cfg.lambda_pt * gamma0
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite pretraining gradient at prompt {t}")
        acc += grad

    return gamma0 - cfg.eta_pt * acc / (2.0 * cfg.t_pt)


def oracle_gamma(sub: Subspace, kappa_scale: float) -> np.ndarray:
    """Analytic stand-in for the pretrained matrix: P / (kappa sqrt(r))."""
    if kappa_scale <= 0:
        raise ConfigError("kappa_scale must be positive")
    return sub.projector() / (kappa_scale * math.sqrt(sub.r))


def preprocess_context(gamma_star: np.ndarray, r: int, xs: np.ndarray) -> np.ndarray:
    """Apply x_i <- sqrt(r) gamma* x_i to every row; labels are untouched."""
    gamma_star = np.asarray(gamma_star, dtype=float)
    xs = np.asarray(xs, dtype=float)
    if xs.shape[1] != gamma_star.shape[0]:
        raise ConfigError("context dimension does not match gamma*")
    return math.sqrt(r) * xs @ gamma_star.T


def init_u(gamma_star: np.ndarray, r: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian draw, projected through sqrt(r) gamma*, scaled to norm 1/sqrt(r)."""
    d = gamma_star.shape[0]
    for _ in range(100):
        u = math.sqrt(r) * gamma_star @ rng.standard_normal(d)
        norm = np.linalg.norm(u)
        if norm > 1e-12:
            return u / (math.sqrt(r) * norm)
    raise NumericError("initial adapter direction kept collapsing to zero")


def _head_batch(mlp: MlpParams, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Head values and d(value)/dg for a batch of attention outputs."""
    pre = g[:, None] * mlp.v[None, :] + mlp.b[None, :]
    active = pre > 0.0
    values = np.where(active, pre, 0.0) @ mlp.a
    coefs = active @ (mlp.a * mlp.v)
    return values, coefs


@dataclass(frozen=True)
class Stage1Result:
    u: np.ndarray
    data_gradient: np.ndarray  # preconditioned, before the step
    teacher_center: float


def stage1_data_gradient(
    gamma_star: np.ndarray,
    r: int,
    ctx1: AttentionContext,
    u0: np.ndarray,
    mlp: MlpParams,
    rho: float,
    n_new: int,
    rng: np.random.Generator,
    chunk: int = 512,
) -> tuple[np.ndarray, float]:
    """Preconditioned self-distillation gradient and the centring constant.

    Draws n_new fresh standard Gaussians w_i, computes the frozen-model
    teacher g(gamma*, w_i) centred by its empirical mean b, and returns

        sqrt(r) gamma* . (1/n_new) sum_i (f_ic(w_i) - (g_i - b)) df_ic/du (w_i)

    evaluated at the adapted matrix gamma* + u0 u0^T.
    """
    if n_new < 1:
        raise ConfigError("stage I needs n_new >= 1")
    d = gamma_star.shape[0]
    att = AttentionParams(gamma=gamma_star, rho=rho)
    mem = AttentionMemory(att, ctx1)
    ws = rng.standard_normal((n_new, d))

    cu = mem.xs @ u0  # <x_i, u0>, fixed across queries
    teacher_all = np.empty(n_new)
    grads = np.empty((n_new, d))
    resid_scale = np.empty(n_new)
    for lo in range(0, n_new, chunk):
        wc = ws[lo : lo + chunk]
        base = (mem.ys[None, :] + wc @ mem.rows.T) / rho  # (B, N1)
        # frozen teacher: no adapter
        p0 = _row_softmax(base)
        teacher_all[lo : lo + chunk] = p0 @ mem.ys
        # student: adapter u0
        c2 = wc @ u0  # (B,)
        logits = base + np.outer(c2, cu) / rho
        p = _row_softmax(logits)
        g = p @ mem.ys
        resid_p = p * (mem.ys[None, :] - g[:, None])
        dg = ((resid_p @ cu)[:, None] * wc + c2[:, None] * (resid_p @ mem.xs)) / rho
        values, coefs = _head_batch(mlp, g)
        grads[lo : lo + chunk] = dg
        resid_scale[lo : lo + chunk] = values
        # teacher residual is filled in after b is known; stash f and coef
        grads[lo : lo + chunk] *= coefs[:, None]
    b = float(teacher_all.mean())
    residual = resid_scale - (teacher_all - b)
    acc = residual @ grads / n_new
    if not np.all(np.isfinite(acc)):
        raise NumericError("non-finite stage I gradient")
    return math.sqrt(r) * gamma_star @ acc, b


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericError("attention logits are non-finite")
    shifted = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=1, keepdims=True)


def ttt_stage1(
    gamma_star: np.ndarray,
    r: int,
    ctx1: AttentionContext,
    u0: np.ndarray,
    mlp: MlpParams,
    rho: float,
    eta1: float,
    lambda1: float,
    n_new: int,
    rng: np.random.Generator,
) -> Stage1Result:
    """One self-distillation step followed by normalisation:

        u1 = normalise(u0 - eta1 (sqrt(r) gamma* grad_data + lambda1 u0))
    """
    grad, center = stage1_data_gradient(
        gamma_star, r, ctx1, u0, mlp, rho=rho, n_new=n_new, rng=rng
    )
    raw = u0 - eta1 * grad - eta1 * lambda1 * np.asarray(u0, dtype=float)
    norm = np.linalg.norm(raw)
    if norm < 1e-300:
        raise NumericError(
            "stage I produced a zero adapter direction (eta1 * lambda1 = 1 with no data signal?)"
        )
    return Stage1Result(u=raw / norm, data_gradient=grad, teacher_center=center)


@dataclass(frozen=True)
class Stage2Result:
    u: np.ndarray
    trajectory: np.ndarray  # (steps, 2): step index, alignment (nan if beta unknown)
    losses: np.ndarray
    grad_norms: np.ndarray


def ttt_stage2(
    gamma_star: np.ndarray,
    r: int,
    memory_ctx: AttentionContext,
    stream_xs: np.ndarray,
    stream_ys: np.ndarray,
    u_init: np.ndarray,
    eta2: float,
    mlp: MlpParams,
    rho: float,
    beta: np.ndarray | None = None,
    chunk: int = 256,
) -> Stage2Result:
    """Online SGD over the stream with per-step projection preconditioning.

    Each point is consumed once:
        u <- normalise(u - eta2 sqrt(r) gamma* (f_ic(x_t) - y_t) df_ic/du)
    The trajectory records <beta, u> after every step when beta is given.
    """
    stream_xs = np.asarray(stream_xs, dtype=float)
    stream_ys = np.asarray(stream_ys, dtype=float)
    steps = stream_xs.shape[0]
    att = AttentionParams(gamma=gamma_star, rho=rho)
    mem = AttentionMemory(att, memory_ctx)
    precond = math.sqrt(r) * gamma_star

    u = np.asarray(u_init, dtype=float).copy()
    traj = np.empty((steps, 2))
    losses = np.empty(steps)
    grad_norms = np.empty(steps)
    xs_mem = mem.xs
    ys_mem = mem.ys
    rows = mem.rows

    for lo in range(0, steps, chunk):
        xc = stream_xs[lo : lo + chunk]
        bases = (ys_mem[None, :] + xc @ rows.T) / rho  # (B, N1)
        for j in range(xc.shape[0]):
            t = lo + j
            x = xc[j]
            cu = xs_mem @ u
            c2 = float(u @ x)
            logits = bases[j] + cu * (c2 / rho)
            if not np.all(np.isfinite(logits)):
                raise NumericError(f"non-finite attention logits at stream step {t}")
            shifted = logits - logits.max()
            w = np.exp(shifted)
            p = w / w.sum()
            g = float(p @ ys_mem)
            resid_p = p * (ys_mem - g)
            dg = (np.dot(resid_p, cu) * x + c2 * (resid_p @ xs_mem)) / rho
            pre = mlp.v * g + mlp.b
            active = pre > 0.0
            value = float(mlp.a @ np.where(active, pre, 0.0))
            coef = float(np.sum(mlp.a * mlp.v * active))
            err = value - stream_ys[t]
            step_vec = precond @ ((err * coef) * dg)
            if not np.all(np.isfinite(step_vec)):
                raise NumericError(f"non-finite stage II update at stream step {t}")
            u = u - eta2 * step_vec
            norm = np.linalg.norm(u)
            if norm < 1e-300:
                raise NumericError(f"adapter direction collapsed at stream step {t}")
            u = u / norm
            traj[t, 0] = t + 1
            traj[t, 1] = float(beta @ u) if beta is not None else np.nan
            losses[t] = 0.5 * err * err
            grad_norms[t] = float(np.linalg.norm(step_vec))

    return Stage2Result(u=u, trajectory=traj, losses=losses, grad_norms=grad_norms)


def ttt_stage3(
    u_final: np.ndarray,
    mlp_init: MlpParams,
    xs4: np.ndarray,
    ys4: np.ndarray,
    lambda2: float,
    chunk: int = 2048,
) -> MlpParams:
    """Closed-form ridge fit of the head weights a on group 4.

    Solves (Phi^T Phi / n4 + lambda2 I) a = Phi^T y / n4 with
    Phi_{t,j} = relu(v_j <u, x_t> + b_j), via a symmetric positive
    definite factorisation (dual form when m > n4).  Raises if the
    normal equations are singular (possible only when lambda2 = 0).
    """
    xs4 = np.asarray(xs4, dtype=float)
    ys4 = np.asarray(ys4, dtype=float)
    n4 = xs4.shape[0]
    if n4 < 1:
        raise ConfigError("stage III requires n4 >= 1")
    if lambda2 < 0:
        raise ConfigError("lambda2 must be >= 0")
    m = mlp_init.m
    s = xs4 @ np.asarray(u_final, dtype=float)

    def phi_block(lo: int, hi: int) -> np.ndarray:
        block = s[lo:hi, None] * mlp_init.v[None, :] + mlp_init.b[None, :]
        np.maximum(block, 0.0, out=block)
        return block

    try:
        if m <= n4:
            gram = np.zeros((m, m))
            rhs = np.zeros(m)
            for lo in range(0, n4, chunk):
                block = phi_block(lo, min(lo + chunk, n4))
                gram += block.T @ block
                rhs += block.T @ ys4[lo : lo + block.shape[0]]
            gram /= n4
            rhs /= n4
            a = cho_solve(cho_factor(gram + lambda2 * np.eye(m)), rhs)
        else:
            phi = phi_block(0, n4)
            k = phi @ phi.T / n4 + lambda2 * np.eye(n4)
            alpha = cho_solve(cho_factor(k), ys4 / n4)
            a = phi.T @ alpha
            gram = phi.T @ phi / n4
            rhs = phi.T @ ys4 / n4
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            "stage III normal equations are singular; set lambda2 > 0"
        ) from exc

    kkt = gram @ a + lambda2 * a - rhs
    scale = max(np.linalg.norm(rhs), 1e-300)
    if np.linalg.norm(kkt) > 1e-8 * scale:
        raise NumericError(
            f"stage III solve failed the normal-equation residual check "
            f"({np.linalg.norm(kkt) / scale:.3g} relative)"
        )
    return mlp_init.with_a(a)


@dataclass(frozen=True)
class PipelineResult:
    gamma_star: np.ndarray
    u_final: np.ndarray
    mlp: MlpParams
    alignment_trajectory: np.ndarray  # (steps, 2)
    stage_diagnostics: dict

    def __post_init__(self):
        if abs(np.linalg.norm(self.u_final) - 1.0) > 1e-10:
            raise NumericError("pipeline produced a non-unit adapter direction")


def unit_with_alignment(
    beta: np.ndarray, sub: Subspace, a: float, rng: np.random.Generator
) -> np.ndarray:
    """Unit vector in the subspace with a prescribed overlap <beta, u> = a."""
    if not (-1.0 <= a <= 1.0):
        raise ConfigError("alignment must lie in [-1, 1]")
    for _ in range(100):
        w = sub.basis @ rng.standard_normal(sub.r)
        w = w - (w @ beta) * beta
        norm = np.linalg.norm(w)
        if norm > 1e-12:
            return a * beta + math.sqrt(max(0.0, 1.0 - a * a)) * w / norm
    raise NumericError("could not build an orthogonal complement direction")


def run_pipeline(
    cfg: PipelineConfig,
    task: Task,
    rng: np.random.Generator,
    gamma_star: np.ndarray | None = None,
    pretrain_sampler=None,
    prompt=None,
) -> PipelineResult:
    """Execute preprocessing, Stages I-III in order, gathering diagnostics.

    Deterministic given the generator state.  `gamma_star` must be
    supplied when cfg.gamma_source == "fixed"; `pretrain_sampler(rng)`
    (a Task factory) when cfg.gamma_source == "pretrain".  A pre-sampled
    prompt may be passed in; its group sizes must match the config.
    """
    ttt = cfg.ttt.resolve(cfg.r, general_exponent(task.link), cfg.m)
    if ttt.n4 < 1:
        raise ConfigError("stage III requires n4 >= 1")
    if task.d != cfg.d:
        raise ConfigError("task dimension does not match the pipeline config")

    rng_gamma, rng_vb, rng_prompt, rng_u, rng_stage1 = rng.spawn(5)

    if cfg.gamma_source == "fixed":
        if gamma_star is None:
            raise ConfigError("gamma_source='fixed' needs an explicit matrix")
        gamma = np.asarray(gamma_star, dtype=float)
    elif cfg.gamma_source == "pretrain":
        if pretrain_sampler is None:
            raise ConfigError("gamma_source='pretrain' needs a pretrain task sampler")
        gamma = pretrain_gamma(cfg.pretrain, pretrain_sampler, rng_gamma)
    else:
        if task.subspace is None:
            raise ConfigError("oracle gamma* needs the task to carry its subspace")
        gamma = oracle_gamma(task.subspace, cfg.kappa)
    if gamma.shape != (cfg.d, cfg.d):
        raise ConfigError(
            f"gamma* has shape {gamma.shape}, expected ({cfg.d}, {cfg.d})"
        )

    v = rng_vb.integers(0, 2, size=cfg.m) * 2.0 - 1.0
    b_star = rng_vb.uniform(-math.log(cfg.d) ** 2, math.log(cfg.d) ** 2, size=cfg.m)

    n3 = int(ttt.n3)
    if prompt is None:
        prompt = sample_prompt(task, (ttt.n1, ttt.n2, n3, ttt.n4), rng_prompt)
    elif prompt.group_sizes != (ttt.n1, ttt.n2, n3, ttt.n4):
        raise ConfigError(
            f"prompt group sizes {prompt.group_sizes} do not match the config "
            f"{(ttt.n1, ttt.n2, n3, ttt.n4)}"
        )
    xs1, ys1 = prompt.group(1)
    diagnostics: dict = {"gamma_source": cfg.gamma_source}

    if cfg.pin_u_to_beta:
        u = task.beta.copy()
        traj = np.empty((0, 2))
        diagnostics["u_pinned"] = True
    else:
        if cfg.init_alignment is not None:
            if task.subspace is None:
                raise ConfigError("init_alignment needs the task to carry its subspace")
            u0 = unit_with_alignment(task.beta, task.subspace, cfg.init_alignment, rng_u)
            u0 = u0 / math.sqrt(cfg.r)  # match the stage I input scale ||u0|| = 1/sqrt(r)
        else:
            u0 = init_u(gamma, cfg.r, rng_u)
        diagnostics["u0"] = u0
        ctx1 = (
            AttentionContext(xs=preprocess_context(gamma, cfg.r, xs1), ys=ys1)
            if ttt.n1 >= 1
            else None
        )
        if ctx1 is not None and ttt.n_new >= 1:
            mlp1 = MlpParams(a=np.full(cfg.m, ttt.alpha1), v=v, b=np.zeros(cfg.m))
            res1 = ttt_stage1(
                gamma, cfg.r, ctx1, u0, mlp1, cfg.rho,
                ttt.eta1, ttt.lambda1, ttt.n_new, rng_stage1,
            )
            u1 = res1.u
            diagnostics["stage1"] = {
                "teacher_center": res1.teacher_center,
                "grad_norm": float(np.linalg.norm(res1.data_gradient)),
            }
        else:
            u1 = u0 / np.linalg.norm(u0)
        if n3 >= 1 and ctx1 is not None:
            mlp2 = MlpParams(a=np.full(cfg.m, ttt.alpha2), v=v, b=np.zeros(cfg.m))
            xs3, ys3 = prompt.group(3)
            if ttt.group2_role == "stream-prefix":
                xs2, ys2 = prompt.group(2)
                xs3 = np.concatenate([xs2, xs3], axis=0)
                ys3 = np.concatenate([ys2, ys3], axis=0)
            res2 = ttt_stage2(
                gamma,
                cfg.r,
                ctx1,
                xs3,
                ys3,
                u1,
                ttt.eta2,
                mlp2,
                cfg.rho,
                beta=task.beta if cfg.record_trajectory else None,
            )
            u = res2.u
            traj = res2.trajectory
            diagnostics["stage2"] = {
                "losses": res2.losses,
                "grad_norms": res2.grad_norms,
            }
        else:
            u = u1
            traj = np.empty((0, 2))

    xs4, ys4 = prompt.group(4)
    mlp_init = MlpParams(a=np.zeros(cfg.m), v=v, b=b_star)
    mlp = ttt_stage3(u, mlp_init, xs4, ys4, ttt.lambda2)

    return PipelineResult(
        gamma_star=gamma,
        u_final=u,
        mlp=mlp,
        alignment_trajectory=traj,
        stage_diagnostics=diagnostics,
    )

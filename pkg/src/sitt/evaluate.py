"""Risk estimation, scaling sweeps and the ICL-vs-TTT comparison.

Risk is the mean absolute prediction error E|f(x) - y| including the
label noise, estimated on fresh draws.  Sweeps run the full pipeline per
(knob value, seed) cell on independent random streams, aggregate the
median of a gap metric over seeds, and fit a log-log slope:

* N4 and m sweeps use |risk - tau|,
* N3 sweeps use 1 - <beta, u_final> (the recovery gap).

Cells are independent; a thread pool may execute them in any order
without changing the output (each cell derives its own stream from the
master seed, the knob and the seed index).
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericError
from .hermite import general_exponent
from .model import (
    AttentionContext,
    AttentionMemory,
    AttentionParams,
    MlpParams,
    attention_output_batch,
    mlp_forward,
)
from .streams import derive
from .taskgen import (
    LinkSpec,
    Subspace,
    Task,
    sample_feature,
    sample_labels,
    sample_link,
    sample_prompt,
    sample_subspace,
)
from .training import PipelineConfig, oracle_gamma, run_pipeline, ttt_stage3

__all__ = [
    "RiskEstimate",
    "SweepRow",
    "SlopeFit",
    "ComparisonRow",
    "ExperimentConfig",
    "estimate_risk",
    "alignment",
    "fit_loglog_slope",
    "scaling_sweep",
    "icl_vs_ttt_experiment",
    "sweep_metric_name",
]

KNOB_CODES = {"N3": 3, "N4": 4, "m": 5}


@dataclass(frozen=True)
class RiskEstimate:
    mean_abs_error: float
    stderr: float
    samples: int
    tau: float

    def __post_init__(self):
        if self.samples < 100:
            raise ConfigError("risk estimates need at least 100 samples")


@dataclass(frozen=True)
class SweepRow:
    knob: str
    value: float
    seed: int
    risk: float
    stderr: float
    alignment: float
    tau: float
    wall_ms: float


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r_squared: float
    points: int

    def __post_init__(self):
        if self.points < 4:
            raise ConfigError("slope fits need at least 4 points")


@dataclass(frozen=True)
class ComparisonRow:
    seed: int
    arm: str  # "icl" | "ttt"
    risk: float
    stderr: float
    alignment: float
    tau: float
    wall_ms: float


def estimate_risk(predictor, task: Task, M: int, rng: np.random.Generator) -> RiskEstimate:
    """Monte Carlo estimate of E|predictor(x) - y| on fresh task draws.

    `predictor` maps an (M, d) batch of inputs to (M,) predictions.
    """
    if M < 100:
        raise ConfigError("risk estimation needs M >= 100")
    xs = rng.standard_normal((M, task.d))
    ys = sample_labels(task, xs, rng)
    preds = np.asarray(predictor(xs), dtype=float)
    if preds.shape != (M,):
        raise NumericError(f"predictor returned shape {preds.shape}, expected ({M},)")
    if not np.all(np.isfinite(preds)):
        bad = int(np.argwhere(~np.isfinite(preds))[0][0])
        raise NumericError(f"non-finite prediction at evaluation sample {bad}")
    errs = np.abs(preds - ys)
    return RiskEstimate(
        mean_abs_error=float(errs.mean()),
        stderr=float(errs.std(ddof=1) / math.sqrt(M)),
        samples=M,
        tau=task.tau,
    )


def alignment(u: np.ndarray, beta: np.ndarray) -> float:
    """<beta, u> / ||u||, the recovery overlap with the true direction."""
    u = np.asarray(u, dtype=float)
    norm = np.linalg.norm(u)
    if norm < 1e-300:
        raise NumericError("alignment of the zero vector is undefined")
    return float(beta @ u / norm)


def fit_loglog_slope(points) -> SlopeFit:
    """OLS fit of ln(value) against ln(knob); all inputs must be positive."""
    pts = [(float(a), float(b)) for a, b in points]
    if len(pts) < 4:
        raise ConfigError(f"need at least 4 points for a slope fit, got {len(pts)}")
    if any(a <= 0 or b <= 0 for a, b in pts):
        raise NumericError("log-log slope fit needs strictly positive values")
    lx = np.log([a for a, _ in pts])
    ly = np.log([b for _, b in pts])
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return SlopeFit(slope=float(slope), intercept=float(intercept), r_squared=r2, points=len(pts))


@dataclass(frozen=True)
class ExperimentConfig:
    """Task family plus pipeline and evaluation settings for experiments."""

    d: int
    r: int
    tau: float
    link_spec: LinkSpec
    pipeline: PipelineConfig
    m_eval: int = 4096
    n_calib_tasks: int = 32
    q_calib: int = 64

    def __post_init__(self):
        if self.pipeline.d != self.d or self.pipeline.r != self.r:
            raise ConfigError("pipeline dimensions disagree with the task family")
        if self.m_eval < 100:
            raise ConfigError("m_eval must be >= 100")


def _sample_task(exp: ExperimentConfig, rng: np.random.Generator, spec: LinkSpec | None = None) -> Task:
    sub = sample_subspace(exp.d, exp.r, rng)
    beta = sample_feature(sub, rng)
    link = sample_link(spec if spec is not None else exp.link_spec, rng)
    return Task(beta=beta, link=link, tau=exp.tau, subspace=sub)


def _tf_predictor(u: np.ndarray, mlp: MlpParams):
    def predict(xs: np.ndarray) -> np.ndarray:
        return mlp_forward(u, mlp, xs)

    return predict


def _apply_knob(exp: ExperimentConfig, knob: str, value: int) -> ExperimentConfig:
    pipe = exp.pipeline
    if knob == "N3":
        ttt = pipe.ttt.with_stream_length(int(value), exp.r)
        return replace(exp, pipeline=replace(pipe, ttt=ttt))
    if knob == "N4":
        return replace(exp, pipeline=replace(pipe, ttt=replace(pipe.ttt, n4=int(value))))
    if knob == "m":
        return replace(exp, pipeline=replace(pipe, m=int(value)))
    raise ConfigError(f"unknown sweep knob {knob!r}; expected N3, N4 or m")


def _run_cell(exp: ExperimentConfig, knob: str, value: int, seed: int, master_seed: int) -> SweepRow:
    t0 = time.perf_counter()
    cell_exp = _apply_knob(exp, knob, value)
    rng = derive(master_seed, KNOB_CODES[knob], int(value), seed)
    task = _sample_task(cell_exp, rng)
    result = run_pipeline(cell_exp.pipeline, task, rng)
    risk = estimate_risk(
        _tf_predictor(result.u_final, result.mlp), task, cell_exp.m_eval, rng
    )
    return SweepRow(
        knob=knob,
        value=float(value),
        seed=seed,
        risk=risk.mean_abs_error,
        stderr=risk.stderr,
        alignment=alignment(result.u_final, task.beta),
        tau=task.tau,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def validate_grid(grid) -> list[int]:
    """A sweep grid must be geometric, increasing, >= 5 points, no duplicates."""
    values = [int(v) for v in grid]
    if len(values) < 5:
        raise ConfigError("sweep grids need at least 5 points")
    if len(set(values)) != len(values):
        raise ConfigError("sweep grid contains duplicate values")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError("sweep grid must be strictly increasing")
    ratios = [b / a for a, b in zip(values, values[1:])]
    if max(ratios) > 1.25 * min(ratios):
        raise ConfigError("sweep grid must be (approximately) geometric")
    return values


def sweep_metric_name(knob: str) -> str:
    return "one_minus_alignment" if knob == "N3" else "risk_gap"


def scaling_sweep(
    knob: str,
    grid,
    exp: ExperimentConfig,
    seeds: int,
    master_seed: int,
    threads: int = 1,
) -> tuple[list[SweepRow], SlopeFit]:
    """Run the pipeline over a geometric grid and fit the scaling slope.

    The fitted metric is the median over seeds of |risk - tau| (N4, m)
    or of 1 - alignment (N3).  Rows come back sorted by (value, seed)
    regardless of scheduling.
    """
    if knob not in KNOB_CODES:
        raise ConfigError(f"unknown sweep knob {knob!r}; expected N3, N4 or m")
    values = validate_grid(grid)
    if seeds < 1:
        raise ConfigError("need at least one seed per cell")

    cells = [(v, s) for v in values for s in range(seeds)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(
                pool.map(lambda c: _run_cell(exp, knob, c[0], c[1], master_seed), cells)
            )
    else:
        rows = [_run_cell(exp, knob, v, s, master_seed) for v, s in cells]
    rows.sort(key=lambda r: (r.value, r.seed))

    points = []
    for v in values:
        cell_rows = [r for r in rows if r.value == float(v)]
        if knob == "N3":
            gap = float(np.median([1.0 - r.alignment for r in cell_rows]))
        else:
            gap = float(np.median([abs(r.risk - r.tau) for r in cell_rows]))
        points.append((float(v), max(gap, 1e-15)))
    return rows, fit_loglog_slope(points)


def _calibrate_icl_head(
    exp: ExperimentConfig,
    gamma: np.ndarray,
    v: np.ndarray,
    b_star: np.ndarray,
    spec_a: LinkSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    """Fit the frozen ICL head once, on attention outputs from family-A tasks."""
    att = AttentionParams(gamma=gamma, rho=exp.pipeline.rho)
    ttt = exp.pipeline.ttt
    n_ctx = max(1, ttt.n1 + ttt.n2 + (ttt.n3 or 0) + ttt.n4)
    feats = []
    labels = []
    for _ in range(exp.n_calib_tasks):
        task = _sample_task(exp, rng, spec=spec_a)
        prompt = sample_prompt(task, (n_ctx, 0, 0, 0), rng)
        ctx = AttentionContext(xs=prompt.xs, ys=prompt.ys)
        qx = rng.standard_normal((exp.q_calib, exp.d))
        qy = sample_labels(task, qx, rng)
        g = attention_output_batch(att, ctx, qx)
        feats.append(np.maximum(g[:, None] * v[None, :] + b_star[None, :], 0.0))
        labels.append(qy)
    phi = np.vstack(feats)
    y = np.concatenate(labels)
    n = phi.shape[0]
    lam = exp.pipeline.ttt.lambda2
    gram = phi.T @ phi / n + lam * np.eye(phi.shape[1])
    return np.linalg.solve(gram, phi.T @ y / n)


def icl_vs_ttt_experiment(
    spec_a: LinkSpec,
    spec_b: LinkSpec,
    exp: ExperimentConfig,
    seeds: int,
    master_seed: int,
    threads: int = 1,
) -> list[ComparisonRow]:
    """Paired comparison of the frozen in-context predictor against TTT.

    The ICL arm keeps the family-A attention matrix and a head ridge-fitted
    once on family-A data, and predicts each query through attention over
    the raw test context.  The TTT arm runs the full per-task pipeline.
    Both arms are evaluated on identical family-B draws per seed.
    """
    if seeds < 1:
        raise ConfigError("need at least one seed")
    pipe = exp.pipeline
    setup_rng = derive(master_seed, 90)
    if pipe.gamma_source == "oracle":
        sub0 = sample_subspace(exp.d, exp.r, setup_rng)
        gamma = oracle_gamma(sub0, pipe.kappa)
    elif pipe.gamma_source == "fixed":
        raise ConfigError("comparison builds its own gamma*; use oracle or pretrain")
    else:
        from .training import pretrain_gamma

        def sampler(rr):
            sub = sample_subspace(exp.d, exp.r, rr)
            return Task(
                beta=sample_feature(sub, rr),
                link=sample_link(spec_a, rr),
                tau=exp.tau,
                subspace=sub,
            )

        gamma = pretrain_gamma(pipe.pretrain, sampler, setup_rng)

    v = setup_rng.integers(0, 2, size=pipe.m) * 2.0 - 1.0
    b_star = setup_rng.uniform(-math.log(exp.d) ** 2, math.log(exp.d) ** 2, size=pipe.m)
    a_icl = _calibrate_icl_head(exp, gamma, v, b_star, spec_a, setup_rng)
    icl_head = MlpParams(a=a_icl, v=v, b=b_star)
    att = AttentionParams(gamma=gamma, rho=pipe.rho)

    exp_fixed = replace(
        exp,
        pipeline=replace(pipe, gamma_source="fixed"),
        link_spec=spec_b,
    )

    def one_seed(seed: int) -> list[ComparisonRow]:
        rng = derive(master_seed, 91, seed)
        task = _sample_task(exp_fixed, rng)
        ttt = exp_fixed.pipeline.ttt.resolve(exp.r, general_exponent(task.link), pipe.m)
        n3 = int(ttt.n3 or 0)
        prompt = sample_prompt(task, (ttt.n1, ttt.n2, n3, ttt.n4), rng)
        eval_xs = rng.standard_normal((exp.m_eval, exp.d))
        eval_ys = sample_labels(task, eval_xs, rng)

        t0 = time.perf_counter()
        result = run_pipeline(
            exp_fixed.pipeline, task, derive(master_seed, 92, seed),
            gamma_star=gamma, prompt=prompt,
        )
        pred_ttt = mlp_forward(result.u_final, result.mlp, eval_xs)
        ttt_ms = (time.perf_counter() - t0) * 1e3

        t1 = time.perf_counter()
        ctx = AttentionContext(xs=prompt.xs, ys=prompt.ys)
        g = attention_output_batch(att, ctx, eval_xs)
        pred_icl = mlp_forward(np.ones(1), icl_head, g[:, None])  # head over scalar g
        icl_ms = (time.perf_counter() - t1) * 1e3

        rows = []
        for arm, preds, ms in (("ttt", pred_ttt, ttt_ms), ("icl", pred_icl, icl_ms)):
            errs = np.abs(preds - eval_ys)
            if not np.all(np.isfinite(errs)):
                raise NumericError(f"non-finite {arm} prediction at seed {seed}")
            rows.append(
                ComparisonRow(
                    seed=seed,
                    arm=arm,
                    risk=float(errs.mean()),
                    stderr=float(errs.std(ddof=1) / math.sqrt(errs.size)),
                    alignment=alignment(result.u_final, task.beta) if arm == "ttt" else float("nan"),
                    tau=task.tau,
                    wall_ms=ms,
                )
            )
        return rows

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            nested = list(pool.map(one_seed, range(seeds)))
    else:
        nested = [one_seed(s) for s in range(seeds)]
    rows = [row for pair in nested for row in pair]
    rows.sort(key=lambda r: (r.seed, r.arm))
    return rows

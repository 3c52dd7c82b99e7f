"""Evaluation metrics, analytic FLOPs accounting, timing, and the
selection-strategy ablation harness.

AUC is the Mann-Whitney concordance computed from midranks in O(n log n);
because midranks are half-integers the result is bit-identical to quadratic
pair counting. FLOPs are reported as multiply-adds times two (one multiply
plus one add), a convention stated in every emitted report.
"""

from __future__ import annotations

import contextlib
import gc
import io
import time
from dataclasses import dataclass, replace

import numpy as np

from . import numeric as nc
from .aps import APSWeights
from .config import EncoderConfig, TrainConfig, canonical_strategy
from .data import Bag
from .encoders import ModelParams, Tensor, dt_rank, encode, forward, init_params
from .errors import DomainError

FLOPS_CONVENTION = "1 multiply-add = 2 FLOPs"


def auc(scores, labels) -> float:
    """Area under the ROC curve via midranks (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DomainError("scores and labels must be equal-length vectors")
    if not set(np.unique(labels)).issubset({0, 1}):
        raise DomainError("labels must be binary 0/1")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC is undefined when only one class is present")
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    rank_sum = 0.0
    i = 0
    n = len(s_sorted)
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        midrank = (i + j + 1) / 2.0          # 1-based midrank, exact half-integer
        rank_sum += midrank * int((l_sorted[i:j] == 1).sum())
        i = j
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of correct thresholded predictions; score == threshold is positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise DomainError("accuracy of an empty set is undefined")
    predictions = (scores >= threshold).astype(int)
    return float((predictions == labels).sum() / scores.size)


def error_rate(scores, labels, threshold: float = 0.5) -> float:
    return 1.0 - accuracy(scores, labels, threshold)


# ---------------------------------------------------------------------------
# analytic FLOPs


@dataclass
class FlopsBreakdown:
    """Closed-form FLOP counts for one bag pass, by pipeline stage."""

    instance_classifier: float
    aps_scoring: float
    encoder: float
    head: float

    @property
    def total(self) -> float:
        return self.instance_classifier + self.aps_scoring + self.encoder + self.head

    def to_dict(self) -> dict:
        return {
            "convention": FLOPS_CONVENTION,
            "instance_classifier": self.instance_classifier,
            "aps_scoring": self.aps_scoring,
            "encoder": self.encoder,
            "head": self.head,
            "total": self.total,
            "total_megaflops": self.total / 1e6,
        }


def affine_flops(d_in: int, d_out: int) -> float:
    return 2.0 * d_in * d_out


def _rnn_step_flops(kind: str, d_in: int, h: int) -> float:
    gates = 4 if kind == "lstm" else 3
    matmuls = 2.0 * gates * (d_in * h + h * h)
    elementwise = (13.0 if kind == "lstm" else 12.0) * h   # gate activations and blends
    return matmuls + elementwise


def _ssm_step_flops(d: int, config: EncoderConfig) -> float:
    m = config.mamba
    e_d = m.expansion * d
    s = m.state_dim
    r = dt_rank(d)
    per_block = (
        4.0 * d                                  # pre-norm
        + affine_flops(d, 2 * e_d)               # in_proj
        + 2.0 * m.conv_kernel * e_d + 4.0 * e_d  # causal conv + SiLU
        + affine_flops(e_d, r + 2 * s)           # x_proj
        + affine_flops(r, e_d) + 3.0 * e_d       # dt_proj + softplus
        + 8.0 * e_d * s                          # discretization and state recurrence
        + 2.0 * e_d * s                          # state readout
        + 2.0 * e_d + 5.0 * e_d                  # skip term + gate
        + affine_flops(e_d, d)                   # out_proj
    )
    return m.depth * per_block


def encoder_step_flops(config: EncoderConfig, d: int) -> float:
    """Per-timestep encoder cost; the sequence cost is exactly this times lambda."""
    if config.kind == "mamba":
        return _ssm_step_flops(d, config)
    h = config.resolved_hidden(d)
    per_dir = _rnn_step_flops(config.kind, d, h)
    for _ in range(1, config.layers):
        per_dir += _rnn_step_flops(config.kind, 2 * h, h)
    total = 2.0 * per_dir
    if 2 * h != d:
        total += affine_flops(2 * h, d)
    return total


def count_flops(config: EncoderConfig, d: int, c: int, big_lambda: int, n: int) -> FlopsBreakdown:
    """Multiply-add accounting for one bag with N instances and lambda selected."""
    lam_eff = min(big_lambda, n)
    aps = (
        2.0 * n * n * d        # cosine similarity matrix
        + 2.0 * n * d          # row norms
        + 8.0 * n * max(c, 2)  # probabilities, entropy, score fusion
        + 6.0 * n              # weighted sum and softmax
    )
    head = 6.0 * lam_eff * d + 2.0 * lam_eff * d + affine_flops(d, c)  # norm, pooling, classifier
    return FlopsBreakdown(
        instance_classifier=n * affine_flops(d, c),
        aps_scoring=aps,
        encoder=lam_eff * encoder_step_flops(config, d),
        head=head,
    )


# ---------------------------------------------------------------------------
# evaluation reports


@dataclass
class BagPrediction:
    id: str
    label: int | None
    probability: float
    encoder_mflops: float


@dataclass
class EvalReport:
    auc: float
    acc: float
    n_bags: int
    per_bag: list[BagPrediction]
    mean_ms: float | None = None
    p95_ms: float | None = None
    timing_runs: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("id,label,probability,encoder_mflops\n")
        for row in self.per_bag:
            label = "" if row.label is None else str(row.label)
            buf.write(f"{row.id},{label},{row.probability!r},{row.encoder_mflops!r}\n")
        return buf.getvalue()


def evaluate(bags: list[Bag], params: ModelParams, enc_config: EncoderConfig,
             config: TrainConfig, bench: bool = False, bench_runs: int = 100,
             bench_warmup: int = 10) -> EvalReport:
    """Eval-mode dataset pass with optional post-warm-up latency statistics."""
    from .training import _select_rng   # shared per-bag rng derivation

    weights = APSWeights(*config.aps_weights)
    per_bag = []
    probs, labels = [], []
    for bag in bags:
        trace = forward(bag.features, params, enc_config, weights, config.big_lambda,
                        strategy=config.strategy,
                        select_rng=_select_rng(config, bag, epoch=None))
        prob = nc.sigmoid(float(trace.bag_logits.data[0]))
        flops = count_flops(enc_config, bag.d, params.c, config.big_lambda, bag.n)
        per_bag.append(BagPrediction(id=bag.id, label=bag.label, probability=prob,
                                     encoder_mflops=flops.encoder / 1e6))
        if bag.label is not None:
            probs.append(prob)
            labels.append(bag.label)
    report = EvalReport(
        auc=auc(np.array(probs), np.array(labels)),
        acc=accuracy(np.array(probs), np.array(labels)),
        n_bags=len(bags),
        per_bag=per_bag,
    )
    if bench:
        times = _time_inference(bags, params, enc_config, config, bench_runs, bench_warmup)
        report.mean_ms = float(np.mean(times))
        report.p95_ms = float(np.percentile(times, 95))
        report.timing_runs = len(times)
    return report


def _time_inference(bags, params, enc_config, config, runs: int, warmup: int) -> list[float]:
    """Per-run single-bag latencies, cycling through the bag list."""
    from .training import _select_rng

    weights = APSWeights(*config.aps_weights)
    times = []
    with _gc_paused():
        for i in range(warmup + runs):
            bag = bags[i % len(bags)]
            t0 = time.perf_counter()
            forward(bag.features, params, enc_config, weights, config.big_lambda,
                    strategy=config.strategy, select_rng=_select_rng(config, bag, epoch=None))
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                times.append(dt)
    return times


@contextlib.contextmanager
def _gc_paused():
    """Collector pause during timed regions, as timeit does; restores state."""
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        gc.collect()
        if was_enabled:
            gc.enable()


def time_encoder_forward(config: EncoderConfig, d: int, big_lambda: int,
                         runs: int = 100, warmup: int = 10, seed: int = 42) -> list[float]:
    """Millisecond timings of the bare encoder on a random (lambda, d) sequence."""
    params = init_params(d, 1, config, seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((big_lambda, d)))
    times = []
    with _gc_paused():
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            encode(x, params, config)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                times.append(dt)
    return times


def linear_fit_r2(xs, ys) -> tuple[float, float, float]:
    """Least-squares line fit; returns (slope, intercept, R^2)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


# ---------------------------------------------------------------------------
# selection-strategy ablation


@dataclass
class AblationRow:
    strategy: str
    big_lambda: int
    seed: int
    auc: float
    acc: float
    train_seconds: float
    best_epoch: int


def ablation_table_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    buf.write("strategy,big_lambda,seed,auc,acc,train_seconds,best_epoch\n")
    for r in rows:
        buf.write(f"{r.strategy},{r.big_lambda},{r.seed},{r.auc!r},{r.acc!r},"
                  f"{r.train_seconds:.3f},{r.best_epoch}\n")
    return buf.getvalue()


def _run_ablation_cell(args) -> AblationRow:
    bags, enc_config, config = args
    from .training import fit

    result = fit(bags, enc_config, config)
    best = result.history[result.best_epoch]
    return AblationRow(
        strategy=config.strategy,
        big_lambda=config.big_lambda,
        seed=config.seed,
        auc=result.best_val_auc,
        acc=best.val_acc,
        train_seconds=sum(r.seconds for r in result.history),
        best_epoch=result.best_epoch,
    )


def ablation_run(bags: list[Bag], strategies: list[str], lambdas: list[int],
                 seeds: list[int], enc_config: EncoderConfig, base_config: TrainConfig,
                 jobs: int = 1) -> list[AblationRow]:
    """Train and evaluate every (strategy, lambda, seed) cell; deterministic order."""
    cells = []
    for strategy in strategies:
        for lam in lambdas:
            for seed in seeds:
                config = replace(base_config, strategy=canonical_strategy(strategy),
                                 big_lambda=lam, seed=seed)
                cells.append((bags, enc_config, config))
    if jobs <= 1:
        return [_run_ablation_cell(cell) for cell in cells]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_ablation_cell, cells))

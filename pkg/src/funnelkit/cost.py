"""Analytical FLOPs and measured latency for a funnel placement.

FLOPs convention: 2 flops per multiply-add in every matmul.  Normalisation,
activations, softmax, rotary rotation and the embedding lookup are not
counted.  Recovery, which has no matmul, is charged one flop per element
for each elementwise add/max/scale it performs, including the running
max/sum upkeep that ``sum_prev_*`` needs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .funnel import FunnelConfig, RecoveryOp
from .model import ModelConfig, ModelState, PoolerConfig, forward_sentence

TASKS = ("sentence", "token")


@dataclass(frozen=True)
class FlopsReport:
    per_layer: list[int]
    pooler_flops: int
    recovery_flops: int
    head_flops: int
    total: int
    baseline_total: int
    savings_ratio: float


def block_flops(length: int, d_model: int, d_ff: int) -> int:
    """QKVO projections + scores/value mix + GeGLU MLP for one block."""
    attn = 8 * length * d_model * d_model + 4 * length * length * d_model
    mlp = 6 * length * d_model * d_ff
    return attn + mlp


def recovery_flops(op: RecoveryOp | None, full_len: int, d_model: int, pre_funnel_count: int) -> int:
    if op is None:
        return 0
    elems = full_len * d_model
    per_elem = {
        RecoveryOp.SUM_FIRST: 1,
        RecoveryOp.SUM_LAST: 1,
        RecoveryOp.MAX_LAST: 1,
        RecoveryOp.AVG_LAST: 2,
        RecoveryOp.SUM_PREV_MAX: pre_funnel_count,  # (count - 1) maxes + 1 add
        RecoveryOp.SUM_PREV_AVG: pre_funnel_count + 1,  # (count - 1) adds + scale + add
    }[op]
    return per_elem * elems


def _count(mc: ModelConfig, fc: FunnelConfig, seq: int, task: str, pooler: PoolerConfig):
    d = mc.d_model
    f = fc.funnel_layer
    pooled = math.ceil(seq / 2) if f is not None else seq
    per_layer = [block_flops(pooled if f is not None and k >= f else seq, d, mc.d_ff) for k in range(mc.n_layers)]
    post = pooled
    if task == "sentence":
        pool = (
            pooler.n_pool_layers * block_flops(post, d, mc.d_ff)
            + 4 * post * d * d  # key and value projections
            + 4 * post * d  # learned-query scores + value mix
        )
        head = 2 * d * mc.n_classes
        rec = 0
    else:
        pool = 0
        head = 2 * seq * d * mc.n_tags
        rec = recovery_flops(fc.recovery_op, seq, d, max(f, 1)) if f is not None else 0
    return per_layer, pool, rec, head


def flops_estimate(
    mc: ModelConfig,
    fc: FunnelConfig,
    seq: int,
    task: str = "sentence",
    pooler: PoolerConfig | None = None,
) -> FlopsReport:
    """Forward-pass FLOPs for one sequence of length ``seq``.

    ``task`` picks the head: "sentence" (pooling block + attention pool +
    classifier at post-stack length) or "token" (tile/recovery + per-token
    classifier at full length).  The baseline is the same model and head
    with no funnel.  ``savings_ratio`` can dip below 0 when recovery costs
    more than the funnel saves (funnel after the last layer).
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if seq > mc.max_seq or seq < 1:
        raise ValueError(f"seq must be in 1..{mc.max_seq}")
    fc.check(mc.n_layers)
    pooler = pooler or PoolerConfig()
    per_layer, pool, rec, head = _count(mc, fc, seq, task, pooler)
    total = sum(per_layer) + pool + rec + head
    b_layers, b_pool, b_rec, b_head = _count(mc, FunnelConfig.none(mc.n_layers), seq, task, pooler)
    baseline = sum(b_layers) + b_pool + b_rec + b_head
    return FlopsReport(per_layer, pool, rec, head, total, baseline, 1.0 - total / baseline)


# ---------------------------------------------------------------------------
# wall clock

@dataclass(frozen=True)
class LatencyStats:
    n_warmup: int
    n_reps: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    savings_vs_baseline: float
    samples_ms: list[float] = field(default_factory=list, repr=False)


def _stats(samples: list[float], n_warmup: int, ratios: list[float]) -> LatencyStats:
    arr = np.asarray(samples)
    return LatencyStats(
        n_warmup=n_warmup,
        n_reps=len(samples),
        median_ms=float(np.median(arr)),
        p10_ms=float(np.percentile(arr, 10)),
        p90_ms=float(np.percentile(arr, 90)),
        savings_vs_baseline=1.0 - float(np.median(ratios)),
        samples_ms=list(samples),
    )


def profile_funnels(
    state: ModelState,
    funnels: dict,
    seq: int,
    batch: int = 8,
    n_warmup: int = 3,
    n_reps: int = 15,
    seed: int = 0,
) -> dict:
    """Median sentence-path latency for each funnel config, plus the baseline.

    Configs are timed round-robin, with the starting config rotating each
    round.  Savings are paired: each config's time is divided by the
    baseline time from the same round and the median ratio is used, so
    drift and load bursts on the machine mostly cancel.  Returns ``{key:
    LatencyStats}`` with an extra ``None`` key for the no-funnel baseline.
    BLAS is pinned to one thread while timing.
    """
    if n_reps < 5:
        raise ValueError("n_reps must be >= 5")
    mc = state.config
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, mc.vocab_size, size=(batch, seq))
    states = {None: state.with_funnel(FunnelConfig.none(mc.n_layers))}
    states.update({k: state.with_funnel(fc) for k, fc in funnels.items()})
    samples: dict = {k: [] for k in states}
    with threadpool_limits(limits=1):
        for _ in range(n_warmup):
            for s in states.values():
                forward_sentence(s, tokens)
        keys = list(states)
        for r in range(n_reps):
            for k in keys[r % len(keys):] + keys[:r % len(keys)]:
                t0 = time.perf_counter()
                forward_sentence(states[k], tokens)
                samples[k].append((time.perf_counter() - t0) * 1e3)
    base = samples[None]
    return {k: _stats(v, n_warmup, [t / b for t, b in zip(v, base)]) for k, v in samples.items()}


def wall_clock_profile(
    state: ModelState,
    seq: int,
    batch: int = 8,
    n_warmup: int = 3,
    n_reps: int = 15,
    seed: int = 0,
) -> LatencyStats:
    """Latency of ``state``'s own funnel config against the no-funnel baseline."""
    return profile_funnels(state, {"run": state.funnel}, seq, batch, n_warmup, n_reps, seed)["run"]

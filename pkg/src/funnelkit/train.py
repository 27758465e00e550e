"""Optimiser, schedule, objectives and the three training scenarios."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import SENTENCE, TOKEN, Batch, gen_sentence_task, gen_token_task
from .errors import ConfigError
from .funnel import FunnelConfig, RecoveryOp
from .model import (
    ModelConfig,
    ModelState,
    PoolerConfig,
    forward_mlm,
    forward_sentence,
    forward_tokens,
    init_model,
)
from .numerics import GradTape, cross_entropy, per_op_finite_checks

log = logging.getLogger(__name__)

MASK_FRACTION = 0.15


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    The schedule shape (100 warmup steps, cosine decay to 10% of peak) follows
    the reference fine-tuning setup; peak LR and batch size are desk-scale
    values for models trained from scratch.
    """

    max_steps: int = 2000
    max_lr: float = 1e-3
    min_lr_fraction: float = 0.1
    warmup_steps: int = 100
    batch_size: int = 16
    eval_batch_size: int = 256
    weight_decay: float = 0.0
    seed: int = 0
    grad_clip: float = 1.0
    log_every: int = 100

    def __post_init__(self):
        if not 0 < self.min_lr_fraction <= 1:
            raise ConfigError("min_lr_fraction must be in (0, 1]")
        if self.max_steps > 0 and not self.warmup_steps < self.max_steps:
            raise ConfigError("warmup_steps must be < max_steps")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to ``max_lr * min_lr_fraction`` at ``max_steps``."""
    if step < tc.warmup_steps:
        return tc.max_lr * step / tc.warmup_steps
    floor = tc.max_lr * tc.min_lr_fraction
    progress = min(1.0, (step - tc.warmup_steps) / max(1, tc.max_steps - tc.warmup_steps))
    return floor + (tc.max_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over all parameters at once.

    On construction every parameter's array is re-pointed at a view into one
    flat buffer, so an update is a handful of vector ops.
    """

    def __init__(self, params: dict, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = None):
        self.names = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        sizes = [params[n].data.size for n in self.names]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.flat = np.concatenate([params[n].data.ravel() for n in self.names]).astype(np.float64)
        for n, a, b in zip(self.names, self.offsets[:-1], self.offsets[1:]):
            p = params[n]
            p.data = self.flat[a:b].reshape(p.data.shape)
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)

    def flat_grad(self, grads: dict) -> np.ndarray:
        g = np.zeros_like(self.flat)
        for n, a, b in zip(self.names, self.offsets[:-1], self.offsets[1:]):
            if n in grads:
                g[a:b] = grads[n].ravel()
        return g

    def step(self, grads: dict, lr: float) -> None:
        g = self.flat_grad(grads)
        norm = float(np.sqrt(g @ g))
        if not math.isfinite(norm):
            raise FloatingPointError(f"non-finite gradient at update {self.t + 1}")
        if self.grad_clip:
            if norm > self.grad_clip:
                g *= self.grad_clip / norm
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * g
        g *= g
        self.v *= self.b2
        self.v += (1 - self.b2) * g
        # update = mhat / (sqrt(vhat) + eps), built in the scratch buffer g
        np.divide(self.v, 1 - self.b2 ** self.t, out=g)
        np.sqrt(g, out=g)
        g += self.eps
        np.divide(self.m, g, out=g)
        g *= 1.0 / (1 - self.b1 ** self.t)
        if self.weight_decay:
            g += self.weight_decay * self.flat
        g *= lr
        self.flat -= g


# ---------------------------------------------------------------------------
# objectives

def needs_tile_only(state: ModelState, kind: str) -> bool:
    """Token task, funnel on, recovery off: the head reads the tiled activations."""
    return kind == TOKEN and state.funnel.active and state.funnel.recovery_op is None


def task_loss(state: ModelState, batch: Batch):
    if batch.kind == SENTENCE:
        return cross_entropy(forward_sentence(state, batch.tokens, batch.mask), batch.labels)
    logits = forward_tokens(state, batch.tokens, batch.mask, tile_only=needs_tile_only(state, TOKEN))
    return cross_entropy(logits, batch.labels, batch.mask)


def mlm_loss(state: ModelState, tokens: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Masked-token loss: 15% of valid positions swapped for the mask id."""
    chosen = (rng.random(tokens.shape) < MASK_FRACTION) & mask
    if not chosen.any():
        rows, cols = np.nonzero(mask)
        k = rng.integers(len(rows))
        chosen[rows[k], cols[k]] = True
    corrupted = np.where(chosen, state.config.mask_token_id, tokens)
    logits = forward_mlm(state, corrupted, mask)
    return cross_entropy(logits, tokens, chosen)


def train(state: ModelState, data: Batch, tc: TrainConfig, objective: str = "task", phase: str = "finetune") -> list[dict]:
    """Run ``tc.max_steps`` AdamW updates in place; returns the loss history.

    ``objective`` is "task" (labels of ``data``) or "mlm" (masked tokens).
    Minibatches are drawn epoch by epoch from a permutation seeded by
    ``tc.seed``.
    """
    if objective not in ("task", "mlm"):
        raise ValueError(f"unknown objective {objective!r}")
    rng = np.random.default_rng([tc.seed, 1 if objective == "mlm" else 0])
    opt = AdamW(state.params, tc.weight_decay, grad_clip=tc.grad_clip)
    history = []
    order = rng.permutation(len(data))
    cursor = 0
    for step in range(tc.max_steps):
        if cursor + tc.batch_size > len(order):
            order = rng.permutation(len(data))
            cursor = 0
        mb = data.take(order[cursor: cursor + tc.batch_size])
        cursor += tc.batch_size
        # Per-op checks are skipped here; a NaN/Inf anywhere reaches the loss
        # (forward) or the gradient norm (backward), and both are checked.
        with per_op_finite_checks(False), GradTape() as tape:
            loss = mlm_loss(state, mb.tokens, mb.mask, rng) if objective == "mlm" else task_loss(state, mb)
            if not math.isfinite(float(loss.data)):
                raise FloatingPointError(f"non-finite {objective} loss at step {step}")
            grads = tape.backward(loss)
        opt.step(grads, lr_at(step + 1, tc))
        if step % tc.log_every == 0 or step == tc.max_steps - 1:
            history.append({"phase": phase, "step": step, "loss": float(loss.data)})
            log.debug("%s step %d loss %.4f", phase, step, float(loss.data))
    return history


# ---------------------------------------------------------------------------
# evaluation

def prf(pred: np.ndarray, gold: np.ndarray, valid: np.ndarray, negative_tag: int = 0) -> dict:
    """Micro precision/recall/F1 over tags other than ``negative_tag``.

    F1 is 0 when precision + recall is 0.
    """
    pred, gold = pred[valid], gold[valid]
    pos_gold = gold != negative_tag
    pos_pred = pred != negative_tag
    tp = int(np.sum(pos_gold & (pred == gold)))
    fp = int(np.sum(pos_pred & (pred != gold)))
    fn = int(np.sum(pos_gold & (pred != gold)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "accuracy": float(np.mean(pred == gold))}


def predict(state: ModelState, batch: Batch, eval_batch_size: int = 256) -> np.ndarray:
    out = []
    tile_only = needs_tile_only(state, batch.kind)
    for a in range(0, len(batch), eval_batch_size):
        mb = batch.take(slice(a, a + eval_batch_size))
        if batch.kind == SENTENCE:
            logits = forward_sentence(state, mb.tokens, mb.mask)
        else:
            logits = forward_tokens(state, mb.tokens, mb.mask, tile_only=tile_only)
        out.append(logits.data.argmax(axis=-1))
    return np.concatenate(out, axis=0)


def headline(kind: str) -> str:
    return "accuracy" if kind == SENTENCE else "f1"


def evaluate(state: ModelState, batch: Batch, eval_batch_size: int = 256) -> dict:
    """Sentence task: accuracy.  Token task: precision, recall, F1 (+ accuracy)."""
    pred = predict(state, batch, eval_batch_size)
    if batch.kind == SENTENCE:
        return {"accuracy": float(np.mean(pred == batch.labels))}
    return prf(pred, batch.labels, batch.mask, batch.negative_tag)


# ---------------------------------------------------------------------------
# scenarios

class Scenario(str, enum.Enum):
    FUNNEL_AWARE_PRETRAIN = "funnel_aware_pretrain"
    NORMAL_PRETRAIN = "normal_pretrain"
    INFERENCE_ONLY = "inference_only"


@dataclass
class TaskData:
    train: Batch
    eval: Batch

    @property
    def kind(self) -> str:
        return self.train.kind


def make_task(task: str, seed: int, seq: int, vocab: int, n_train: int = 4096, n_eval: int = 1024) -> TaskData:
    """Synthetic train/eval split; the eval set uses an independent stream."""
    gen = {SENTENCE: gen_sentence_task, TOKEN: gen_token_task}.get(task)
    if gen is None:
        raise ConfigError(f"unknown synthetic task {task!r}")
    return TaskData(gen([seed, 0], n_train, seq, vocab), gen([seed, 1], n_eval, seq, vocab))


@dataclass
class ScenarioResult:
    state: ModelState
    history: list[dict]
    metrics: dict
    metric_name: str

    @property
    def metric(self) -> float:
        return self.metrics[self.metric_name]


def run_scenario(
    scenario: Scenario | str,
    mc: ModelConfig,
    fc: FunnelConfig,
    tc: TrainConfig,
    data: TaskData,
    pretrain_steps: int | None = None,
    pretrain_layer: int = 2,
    pooler: PoolerConfig | None = None,
    init_seed: int | None = None,
) -> ScenarioResult:
    """Pretrain (masked tokens), fine-tune on the task, evaluate.

    * funnel_aware_pretrain: pretrain with a funnel before ``pretrain_layer``,
      fine-tune and evaluate with ``fc``;
    * normal_pretrain: pretrain without a funnel, fine-tune and evaluate with ``fc``;
    * inference_only: pretrain and fine-tune without a funnel, then evaluate
      with ``fc`` inserted.

    ``pretrain_steps`` defaults to ``tc.max_steps``; 0 skips pretraining.
    """
    scenario = Scenario(scenario)
    fc.check(mc.n_layers)
    pretrain_steps = tc.max_steps if pretrain_steps is None else pretrain_steps
    no_funnel = FunnelConfig.none(mc.n_layers, fc.recovery_op)
    seed = tc.seed if init_seed is None else init_seed
    state = init_model(mc, no_funnel, pooler, seed=seed)
    history: list[dict] = []

    if pretrain_steps > 0:
        if scenario is Scenario.FUNNEL_AWARE_PRETRAIN:
            pre_fc = FunnelConfig.at_layer(mc.n_layers, pretrain_layer, fc.recovery_op or RecoveryOp.AVG_LAST)
        else:
            pre_fc = no_funnel
        pre_tc = TrainConfig(**{**tc.__dict__, "max_steps": pretrain_steps,
                                "warmup_steps": min(tc.warmup_steps, max(0, pretrain_steps - 1))})
        pre_state = state.with_funnel(pre_fc)
        history += train(pre_state, data.train, pre_tc, objective="mlm", phase="pretrain")

    ft_fc = no_funnel if scenario is Scenario.INFERENCE_ONLY else fc
    ft_state = state.with_funnel(ft_fc)
    if tc.max_steps > 0:
        history += train(ft_state, data.train, tc, objective="task", phase="finetune")
    final = ft_state.with_funnel(fc)
    metrics = evaluate(final, data.eval, tc.eval_batch_size)
    return ScenarioResult(final, history, metrics, headline(data.kind))

"""Multi-seed sweeps over funnel placement and recovery op, and their CSV output."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .cost import flops_estimate, profile_funnels
from .data import SENTENCE
from .errors import UsageError
from .funnel import FunnelConfig, RecoveryOp
from .model import ModelConfig, ModelState, PoolerConfig
from .train import Scenario, TaskData, TrainConfig, run_scenario

RUN_HEADER = (
    "scenario", "funnel_layer", "recovery_op", "task", "seed", "steps",
    "metric_name", "metric_value", "flops_savings", "latency_median_ms",
)
COST_HEADER = (
    "funnel_layer", "recovery_op", "seq_len", "flops_total", "flops_savings",
    "latency_median_ms", "latency_savings",
)
PLOT_HEADER = ("scenario", "recovery_op", "x", "y_mean", "y_std", "n")


def op_name(op: RecoveryOp | None) -> str:
    return "none" if op is None else op.value


@dataclass(frozen=True)
class RunRecord:
    scenario: str
    funnel_layer: int
    recovery_op: str
    task: str
    seed: int
    steps: int
    metric_name: str
    metric_value: float
    flops_savings: float
    latency_median_ms: float | None = None

    def row(self) -> list:
        lat = "" if self.latency_median_ms is None else f"{self.latency_median_ms:.6g}"
        return [self.scenario, self.funnel_layer, self.recovery_op, self.task, self.seed, self.steps,
                self.metric_name, repr(float(self.metric_value)), repr(float(self.flops_savings)), lat]


def check_grid(layers: Iterable[int], n_layers: int) -> list[int]:
    """Sweep grids use even layers in 0..n_layers; 0 is the no-funnel point."""
    layers = list(layers)
    if not layers:
        raise UsageError("empty layer grid")
    bad = [k for k in layers if k < 0 or k > n_layers or k % 2]
    if bad:
        raise UsageError(f"grid layers must be even and within 0..{n_layers}, got {bad}")
    if len(set(layers)) != len(layers):
        raise UsageError("duplicate layers in grid")
    return layers


def sweep_funnel(grid_layer: int, n_layers: int, op: RecoveryOp | None) -> FunnelConfig:
    return FunnelConfig.at_layer(n_layers, grid_layer if grid_layer > 0 else None, op)


def run_grid(
    mc: ModelConfig,
    tc: TrainConfig,
    make_data: Callable[[int], TaskData],
    task: str,
    layers: Iterable[int],
    ops: Iterable[RecoveryOp | None],
    seeds: Iterable[int],
    scenario: Scenario | str = Scenario.NORMAL_PRETRAIN,
    pretrain_steps: int = 0,
    pooler: PoolerConfig | None = None,
    progress: Callable[[RunRecord], None] | None = None,
) -> list[RunRecord]:
    """Train and evaluate one model per (op, layer, seed); rows come out in that order."""
    scenario = Scenario(scenario)
    layers = check_grid(layers, mc.n_layers)
    seeds = list(seeds)
    records = []
    for op in ops:
        for layer in layers:
            fc = sweep_funnel(layer, mc.n_layers, op)
            data_kind = None
            for seed in seeds:
                data = make_data(seed)
                data_kind = data.kind
                result = run_scenario(scenario, mc, fc, replace(tc, seed=seed), data,
                                      pretrain_steps=pretrain_steps, pooler=pooler)
                cost_task = "sentence" if data_kind == SENTENCE else "token"
                savings = flops_estimate(mc, fc, data.train.tokens.shape[1], cost_task, pooler).savings_ratio
                rec = RunRecord(scenario.value, layer, op_name(op), task, seed, tc.max_steps,
                                result.metric_name, result.metric, savings)
                records.append(rec)
                if progress:
                    progress(rec)
    return records


def aggregate(records: list[RunRecord]) -> list[dict]:
    """Mean and sample std (ddof=1) of the metric per (scenario, recovery op, layer)."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.scenario, r.recovery_op, r.funnel_layer), []).append(r.metric_value)
    out = []
    for (scenario, op, layer), vals in groups.items():
        arr = np.asarray(vals, dtype=float)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        out.append({"scenario": scenario, "recovery_op": op, "x": layer,
                    "y_mean": float(arr.mean()), "y_std": std, "n": len(arr)})
    return out


def recovery_ranking(records: list[RunRecord]) -> tuple[dict[str, float], list[str]]:
    """Mean metric per op over the whole grid, and ops that beat avg_last (if any)."""
    per_op: dict[str, list[float]] = {}
    for r in records:
        per_op.setdefault(r.recovery_op, []).append(r.metric_value)
    means = {op: float(np.mean(v)) for op, v in per_op.items()}
    ref = means.get(RecoveryOp.AVG_LAST.value)
    beaten_by = [] if ref is None else [op for op, m in means.items() if m > ref]
    return means, beaten_by


# ---------------------------------------------------------------------------
# cost rows

def cost_rows(
    state: ModelState,
    layers: Iterable[int],
    seq: int,
    task: str = "sentence",
    recovery_op: RecoveryOp | None = None,
    measure: bool = False,
    batch: int = 8,
    n_warmup: int = 3,
    n_reps: int = 15,
    seed: int = 0,
) -> list[list]:
    """One cost row per layer.  Here layer k means pooling before layer k (0..n_layers).

    With ``measure`` the sentence path is timed for every layer in one
    round-robin session; otherwise the latency columns are blank.
    """
    mc = state.config
    layers = list(layers)
    funnels = {k: FunnelConfig.at_layer(mc.n_layers, k, recovery_op) for k in layers}
    timings = profile_funnels(state, funnels, seq, batch, n_warmup, n_reps, seed) if measure else {}
    rows = []
    for k in layers:
        rep = flops_estimate(mc, funnels[k], seq, task, state.pooler)
        lat = timings.get(k)
        rows.append([
            k, op_name(recovery_op), seq, rep.total, repr(rep.savings_ratio),
            "" if lat is None else f"{lat.median_ms:.6g}",
            "" if lat is None else f"{lat.savings_vs_baseline:.6g}",
        ])
    return rows


# ---------------------------------------------------------------------------
# files

def write_csv(path: str | Path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_runs(path, records: list[RunRecord]) -> Path:
    return write_csv(path, RUN_HEADER, [r.row() for r in records])


def write_plot_data(path, records: list[RunRecord]) -> Path:
    rows = [[a["scenario"], a["recovery_op"], a["x"], repr(a["y_mean"]), repr(a["y_std"]), a["n"]]
            for a in aggregate(records)]
    return write_csv(path, PLOT_HEADER, rows)


def read_runs(path) -> list[RunRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        RunRecord(r["scenario"], int(r["funnel_layer"]), r["recovery_op"], r["task"], int(r["seed"]),
                  int(r["steps"]), r["metric_name"], float(r["metric_value"]), float(r["flops_savings"]),
                  float(r["latency_median_ms"]) if r["latency_median_ms"] else None)
        for r in rows
    ]


def summarize(records: list[RunRecord]) -> str:
    lines = []
    for a in aggregate(records):
        sd = "" if math.isnan(a["y_std"]) else f" +/- {a['y_std']:.4f}"
        lines.append(f"{a['scenario']:<22} {a['recovery_op']:<13} layer {a['x']:>2}: {a['y_mean']:.4f}{sd} (n={a['n']})")
    return "\n".join(lines)

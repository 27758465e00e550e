"""Acceptance criteria, one test each.  Every test appends a PASS/FAIL line to
the summary printed at the end of the pytest run, then asserts."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import reference
from conftest import ACCEPTANCE_LINES
from helpers import fd_check
from test_cost import oracle_flops, random_case

from funnelkit.cli import main
from funnelkit.cost import flops_estimate, profile_funnels
from funnelkit.data import parse_conll
from funnelkit.funnel import FunnelConfig, RecoveryOp, tile_upsample
from funnelkit.model import ModelConfig, PoolerConfig, forward_sentence, forward_tokens, init_model
from funnelkit.numerics import cross_entropy
from funnelkit.train import TrainConfig, evaluate, make_task, run_scenario

FIXTURES = Path(__file__).parent / "fixtures"
SEEDS = range(5)
slow = pytest.mark.slow


def report(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1-5: exact checks

def test_c1_flag_off_equivalence():
    t0 = time.perf_counter()
    cfg = ModelConfig(n_layers=4, d_model=16, n_heads=2, head_dim=8, d_ff=32, vocab_size=13, max_seq=32)
    state = init_model(cfg, FunnelConfig.none(4, "avg_last"), seed=0)
    P = {k: v.data for k, v in state.params.items()}
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(20):
        b, n = int(rng.integers(1, 4)), int(rng.integers(2, 33))
        tok = rng.integers(0, cfg.vocab_size, size=(b, n))
        mask = np.ones((b, n), bool)
        mask[0, int(rng.integers(1, n + 1)):] = False
        same_tok = forward_tokens(state, tok, mask).data.tobytes() == reference.token_logits(P, cfg, tok, mask).tobytes()
        same_sent = forward_sentence(state, tok, mask).data.tobytes() == reference.sentence_logits(P, cfg, tok, mask).tobytes()
        mismatches += (not same_tok) + (not same_sent)
    dt = time.perf_counter() - t0
    report("C1", "flag-off equivalence", mismatches == 0 and dt < 60,
           f"{mismatches} mismatching outputs over 20 inputs x 2 heads, {dt:.1f}s")


def test_c2_gradient_suite():
    t0 = time.perf_counter()
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, head_dim=4, d_ff=16, vocab_size=11, max_seq=16)
    rng = np.random.default_rng(5)
    tok = rng.integers(0, cfg.vocab_size, size=(2, 5))
    tags = rng.integers(0, 2, size=(2, 5))
    results = {}
    for op in RecoveryOp:
        state = init_model(cfg, FunnelConfig.at_layer(2, 1, op), seed=1)
        results[op.value] = fd_check(lambda: cross_entropy(forward_tokens(state, tok), tags), state.params,
                                     n_coords=16, seed=3)
    dt = time.perf_counter() - t0
    worst = max(w for w, _ in results.values())
    fewest = min(c for _, c in results.values())
    report("C2", "gradient suite, six recovery ops", worst < 1e-4 and fewest >= 10 and dt < 120,
           f"worst rel err {worst:.2e}, >= {fewest} coords per op, {dt:.1f}s")


def test_c3_tiling_example():
    out = tile_upsample(np.array([[[1.0], [3.0], [4.0]]]), 2, 6).data[0, :, 0]
    report("C3", "tiling (1,3,4) -> (1,1,3,3,4,4)", out.tolist() == [1, 1, 3, 3, 4, 4], f"got {out.tolist()}")


def test_c4_flops_oracle():
    t0 = time.perf_counter()
    bad = []
    for case in range(25):
        mc, fc, seq, task, pooler = random_case(np.random.default_rng(5000 + case))
        if flops_estimate(mc, fc, seq, task, pooler).total != oracle_flops(mc, fc, seq, task, pooler):
            bad.append(case)
    dt = time.perf_counter() - t0
    report("C4", "FLOPs estimate == op-count oracle", not bad and dt < 60, f"25 random configs, {len(bad)} mismatches, {dt:.1f}s")


def test_c5_savings_monotone():
    mc = ModelConfig()
    grid = list(range(0, 17, 2))
    savings = [flops_estimate(mc, FunnelConfig.at_layer(16, k), 128).savings_ratio for k in grid]
    ok = all(a >= b for a, b in zip(savings, savings[1:]))
    report("C5", "analytic savings non-increasing over 0,2,..,16", ok,
           "savings " + " ".join(f"{s:.3f}" for s in savings))


# ---------------------------------------------------------------------------
# 6: measured latency

@slow
def test_c6_latency_shape():
    t0 = time.perf_counter()
    mc = ModelConfig()
    state = init_model(mc, FunnelConfig.none(16), seed=0)
    grid = list(range(0, 17, 2))
    stats = profile_funnels(state, {k: FunnelConfig.at_layer(16, k) for k in grid}, seq=128, batch=8,
                            n_warmup=3, n_reps=15)
    s = [stats[k].savings_vs_baseline for k in grid]
    monotone = all(b <= a + 0.05 for a, b in zip(s, s[1:]))
    dt = time.perf_counter() - t0
    ok = s[0] >= 0.30 and s[-1] <= 0.15 and monotone and dt < 600
    report("C6", "latency savings shape (seq 128, 1 thread)", ok,
           f"layer0 {s[0]:.3f} (>=0.30), layer16 {s[-1]:.3f} (<=0.15), step-wise band ok={monotone}, "
           f"curve [{' '.join(f'{v:.2f}' for v in s)}], {dt:.0f}s")


# ---------------------------------------------------------------------------
# 7: mechanism sensitivity on the token task

C7_MODEL = ModelConfig(n_layers=16, d_model=32, n_heads=4, head_dim=8, d_ff=64, vocab_size=9, max_seq=32)
C7_ARMS = {
    "baseline": FunnelConfig.none(16),
    "avg_last@2": FunnelConfig.at_layer(16, 2, "avg_last"),
    "tile_only@2": FunnelConfig.at_layer(16, 2, None),
    "avg_last@16": FunnelConfig.at_layer(16, 16, "avg_last"),
}


@pytest.fixture(scope="module")
def c7_runs():
    t0 = time.perf_counter()
    scores = {arm: [] for arm in C7_ARMS}
    for seed in SEEDS:
        data = make_task("token", seed, 16, C7_MODEL.vocab_size - 1)
        tc = TrainConfig(max_steps=2000, seed=seed)
        for arm, fc in C7_ARMS.items():
            scores[arm].append(run_scenario("normal_pretrain", C7_MODEL, fc, tc, data, pretrain_steps=0).metric)
    return scores, time.perf_counter() - t0


def _fmt(vals):
    return f"{np.mean(vals):.4f} [{' '.join(f'{v:.3f}' for v in vals)}]"


@slow
def test_c7a_baseline_learns(c7_runs):
    scores, dt = c7_runs
    base = scores["baseline"]
    report("C7a", "no-funnel token F1 >= 0.9 after 2000 steps", min(base) >= 0.9,
           f"F1 per seed {_fmt(base)}")


@slow
def test_c7b_recovery_beats_tiling(c7_runs):
    scores, _ = c7_runs
    rec, tile = scores["avg_last@2"], scores["tile_only@2"]
    report("C7b", "avg_last@2 mean F1 > tile-only@2", np.mean(rec) > np.mean(tile),
           f"avg_last {_fmt(rec)} vs tile-only {_fmt(tile)}")


@slow
def test_c7c_late_funnel_not_worse(c7_runs):
    scores, dt = c7_runs
    late, early = scores["avg_last@16"], scores["avg_last@2"]
    report("C7c", "mean F1 @16 >= @2, total runtime < 30 min", np.mean(late) >= np.mean(early) and dt < 1800,
           f"@16 {_fmt(late)} vs @2 {_fmt(early)}, 20 runs in {dt / 60:.1f} min")


# ---------------------------------------------------------------------------
# 8: scenario ordering on the sentence task

C8_MODEL = ModelConfig(n_layers=4, d_model=32, n_heads=4, head_dim=8, d_ff=64, vocab_size=17, max_seq=32)
C8_POOLER = PoolerConfig(n_pool_heads=4)
C8_LAYER = 0  # the matched point: pretraining and evaluation both pool the embeddings


@pytest.fixture(scope="module")
def c8_runs():
    fc = FunnelConfig.at_layer(4, C8_LAYER)
    out = {"aware": [], "inference": [], "plain": [], "late": []}
    for seed in SEEDS:
        data = make_task("sentence", seed, 16, C8_MODEL.vocab_size - 1)
        tc = TrainConfig(max_steps=600, seed=seed)
        aware = run_scenario("funnel_aware_pretrain", C8_MODEL, fc, tc, data, pretrain_steps=300,
                             pretrain_layer=C8_LAYER, pooler=C8_POOLER)
        inf = run_scenario("inference_only", C8_MODEL, fc, tc, data, pretrain_steps=300, pooler=C8_POOLER)
        out["aware"].append(aware.metric)
        out["inference"].append(inf.metric)
        out["plain"].append(evaluate(inf.state.with_funnel(FunnelConfig.none(4)), data.eval)["accuracy"])
        out["late"].append(evaluate(inf.state.with_funnel(FunnelConfig.at_layer(4, 4)), data.eval)["accuracy"])
    return out


@slow
def test_c8_scenario_ordering(c8_runs):
    aware, inf = c8_runs["aware"], c8_runs["inference"]
    report("C8", f"funnel-aware >= inference-only at matched layer {C8_LAYER} (sentence)",
           np.mean(aware) >= np.mean(inf), f"aware {_fmt(aware)} vs inference-only {_fmt(inf)}")


@slow
def test_inference_only_late_funnel_close_to_plain(c8_runs):
    # scenario example: a funnel after the last layer costs at most 10 accuracy points
    gap = np.mean(c8_runs["plain"]) - np.mean(c8_runs["late"])
    assert gap <= 0.10, gap


# ---------------------------------------------------------------------------
# 9-10

def test_c9_conll_fixture():
    corpus = parse_conll(FIXTURES / "two_sentences.conll")
    expected = [
        [("EU", "B-ORG"), ("rejects", "O"), ("German", "B-MISC"), ("call", "O")],
        [("Peter", "B-PER"), ("Blackburn", "I-PER")],
    ]
    ok = corpus.sentences == expected and corpus.tags == ["B-ORG", "O", "B-MISC", "B-PER", "I-PER"]
    report("C9", "CoNLL two-sentence fixture", ok, f"{len(corpus.sentences)} sentences, tags {corpus.tags}")


C10_CONFIG = {
    "model": {"n_layers": 4, "d_model": 16, "n_heads": 2, "head_dim": 8, "d_ff": 32, "vocab_size": 9, "max_seq": 16},
    "pooler": {"n_pool_heads": 2},
    "data": {"seq": 8, "n_train": 128, "n_eval": 64},
    "train": {"max_steps": 20, "warmup_steps": 2, "batch_size": 8},
}
C10_COMMANDS = {
    "gen-data": ["gen-data"],
    "train": ["train", "--layers", "2", "--pretrain-steps", "5", "--scenario", "funnel_aware_pretrain"],
    "sweep-funnel-layer": ["sweep-funnel-layer", "--layers", "0,2,4", "--seeds", "2"],
    "sweep-recovery-op": ["sweep-recovery-op", "--layers", "2,4", "--seeds", "2"],
    "flops": ["flops", "--task", "token", "--recovery", "sum_prev_avg"],
}


def test_c10_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(C10_CONFIG))
    differing = []
    for name, cmd in C10_COMMANDS.items():
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / name / run
            assert main(cmd + ["--config", str(cfg), "--seed", "13", "--out", str(out)]) == 0
            outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.suffix in (".csv", ".txt")})
        if outputs[0] != outputs[1] or not outputs[0]:
            differing.append(name)
    report("C10", "same --seed gives bit-identical CSV/data twice", not differing,
           f"checked {', '.join(C10_COMMANDS)}; differing: {differing or 'none'}")

"""``funnelkit`` command-line runner.

Exit codes: 0 success, 2 usage/config error, 3 bad input (missing or
malformed file), 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import SENTENCE, TOKEN, gen_sentence_task, gen_token_task, load_batch, parse_conll, save_batch
from .errors import ConfigError, InputError, UsageError
from .funnel import FunnelConfig, RecoveryOp
from .model import ModelConfig, PoolerConfig, init_model, load_checkpoint, save_checkpoint
from .sweep import (
    COST_HEADER,
    RunRecord,
    cost_rows,
    recovery_ranking,
    run_grid,
    summarize,
    sweep_funnel,
    write_csv,
    write_plot_data,
    write_runs,
)
from .train import Scenario, TaskData, TrainConfig, evaluate, headline, run_scenario

log = logging.getLogger("funnelkit")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3, 4
TASKS = (SENTENCE, TOKEN, "conll")


@dataclass(frozen=True)
class DataConfig:
    seq: int = 16
    n_train: int = 4096
    n_eval: int = 1024
    repeat_prob: float = 0.3


# ---------------------------------------------------------------------------
# configuration

def _section(cls, values: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    return values


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise InputError(f"{p}: top level must be an object")
    extra = set(raw) - {"model", "train", "pooler", "data", "funnel"}
    if extra:
        raise ConfigError(f"unknown config section(s): {sorted(extra)}")
    return raw


@dataclass
class Settings:
    model: ModelConfig
    train: TrainConfig
    pooler: PoolerConfig
    data: DataConfig
    funnel_layer: int | None
    recovery: RecoveryOp | None
    pretrain_steps: int


def resolve(args) -> Settings:
    """Built-in defaults, overlaid by the config file, overlaid by CLI flags."""
    cfg = load_config_file(args.config)
    model = dict(_section(ModelConfig, cfg.get("model", {}), "model"))
    train = dict(_section(TrainConfig, cfg.get("train", {}), "train"))
    pooler = _section(PoolerConfig, cfg.get("pooler", {}), "pooler")
    data = dict(_section(DataConfig, cfg.get("data", {}), "data"))
    funnel = cfg.get("funnel", {})
    unknown = set(funnel) - {"layer", "recovery_op", "pretrain_steps"}
    if unknown:
        raise ConfigError(f"unknown key(s) in [funnel]: {sorted(unknown)}")

    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        train["max_steps"] = args.steps
        if "warmup_steps" not in train and args.steps <= TrainConfig.warmup_steps:
            train["warmup_steps"] = max(0, args.steps // 10)
    if getattr(args, "seq", None) is not None:
        data["seq"] = args.seq
    recovery = funnel.get("recovery_op", "avg_last")
    if getattr(args, "recovery", None) is not None:
        recovery = args.recovery
    layer = funnel.get("layer")
    layers = getattr(args, "layers", None)
    if layers is not None and len(layers) == 1:
        layer = layers[0]
    pretrain = getattr(args, "pretrain_steps", None)
    if pretrain is None:
        pretrain = funnel.get("pretrain_steps", 0)
    return Settings(
        ModelConfig(**model), TrainConfig(**train), PoolerConfig(**pooler), DataConfig(**data),
        layer, RecoveryOp.parse(recovery), int(pretrain),
    )


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# data

def _conll_split(path: str, mc: ModelConfig, seq: int) -> tuple[ModelConfig, TaskData]:
    corpus = parse_conll(path)
    batch = corpus.encode(mc.vocab_size - 1, max_len=seq)
    n = len(batch)
    if n < 2:
        raise InputError(f"{path}: need at least 2 sentences for a train/eval split")
    order = np.random.default_rng(0).permutation(n)
    n_eval = max(1, n // 5)
    mc = replace(mc, n_tags=max(mc.n_tags, len(corpus.tags)))
    return mc, TaskData(batch.take(order[n_eval:]), batch.take(order[:n_eval]))


def make_data_factory(task: str, s: Settings, data_path: str | None):
    """Returns (model config, seed -> TaskData).  CoNLL data is the same for every seed."""
    vocab = s.model.vocab_size - 1  # last id is the mask token
    if s.data.seq > s.model.max_seq:
        raise ConfigError(f"data seq {s.data.seq} exceeds model max_seq {s.model.max_seq}")
    if task == "conll":
        if data_path is None:
            raise UsageError("--task conll needs --data PATH")
        mc, fixed = _conll_split(data_path, s.model, s.data.seq)
        return mc, lambda seed: fixed
    if data_path is not None:
        train, ev = load_batch(Path(data_path) / "train.txt"), load_batch(Path(data_path) / "eval.txt")
        if train.kind != task:
            raise InputError(f"{data_path} holds a {train.kind} dataset, not {task}")
        return s.model, lambda seed: TaskData(train, ev)

    def synth(seed: int) -> TaskData:
        if task == SENTENCE:
            return TaskData(gen_sentence_task([seed, 0], s.data.n_train, s.data.seq, vocab),
                            gen_sentence_task([seed, 1], s.data.n_eval, s.data.seq, vocab))
        return TaskData(gen_token_task([seed, 0], s.data.n_train, s.data.seq, vocab, s.data.repeat_prob),
                        gen_token_task([seed, 1], s.data.n_eval, s.data.seq, vocab, s.data.repeat_prob))

    return s.model, synth


# ---------------------------------------------------------------------------
# commands

def _out(args) -> Path:
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    s = resolve(args)
    _, factory = make_data_factory(args.task, s, args.data)
    data = factory(s.train.seed)
    out = _out(args)
    meta = {"seed": s.train.seed, "seq": s.data.seq}
    save_batch(data.train, out / "train.txt", meta)
    save_batch(data.eval, out / "eval.txt", meta)
    print(f"wrote {len(data.train)} train / {len(data.eval)} eval rows to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    s = resolve(args)
    mc, factory = make_data_factory(args.task, s, args.data)
    data = factory(s.train.seed)
    fc = sweep_funnel(s.funnel_layer or 0, mc.n_layers, s.recovery)
    result = run_scenario(args.scenario, mc, fc, s.train, data, pretrain_steps=s.pretrain_steps, pooler=s.pooler)
    out = _out(args)
    extra = {
        "task": args.task,
        "data_path": None if args.data is None else str(Path(args.data).resolve()),
        "data": asdict(s.data),
        "train": asdict(s.train),
        "scenario": Scenario(args.scenario).value,
        "metrics": result.metrics,
        "metric_name": result.metric_name,
    }
    ckpt = save_checkpoint(result.state, out / "checkpoint.npz", extra)
    write_csv(out / "history.csv", ("phase", "step", "loss"),
              [[h["phase"], h["step"], repr(h["loss"])] for h in result.history])
    print(f"{result.metric_name} {result.metric!r}")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state, extra = load_checkpoint(args.checkpoint)
    if "task" not in extra:
        raise InputError(f"{args.checkpoint}: checkpoint carries no task metadata")
    task = args.task or extra["task"]
    s = Settings(state.config, TrainConfig(**extra["train"]), state.pooler, DataConfig(**extra["data"]),
                 None, state.funnel.recovery_op, 0)
    _, factory = make_data_factory(task, s, args.data or extra.get("data_path"))
    data = factory(s.train.seed)
    if args.layers is not None:
        if len(args.layers) != 1:
            raise UsageError("eval takes a single --layers value")
        recovery = state.funnel.recovery_op if args.recovery is None else RecoveryOp.parse(args.recovery)
        state = state.with_funnel(sweep_funnel(args.layers[0], state.config.n_layers, recovery))
    metrics = evaluate(state, data.eval, s.train.eval_batch_size)
    name = headline(data.kind)
    for k in sorted(metrics):
        print(f"{k} {metrics[k]!r}")
    if args.out:
        write_csv(_out(args) / "eval.csv", ("metric_name", "metric_value"), [[k, repr(v)] for k, v in sorted(metrics.items())])
    log.info("headline %s = %r", name, metrics[name])
    return EXIT_OK


def _seeds(args, s: Settings) -> list[int]:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    return [s.train.seed + i for i in range(args.seeds)]


def _progress(rec: RunRecord) -> None:
    log.info("layer %s op %s seed %s: %s = %.4f", rec.funnel_layer, rec.recovery_op, rec.seed, rec.metric_name, rec.metric_value)


def _default_grid(n_layers: int) -> list[int]:
    return list(range(0, n_layers + 1, 2))


def cmd_sweep_funnel_layer(args) -> int:
    s = resolve(args)
    mc, factory = make_data_factory(args.task, s, args.data)
    layers = args.layers if args.layers is not None else _default_grid(mc.n_layers)
    op = s.recovery if args.task != SENTENCE else None
    records = run_grid(mc, s.train, factory, args.task, layers, [op], _seeds(args, s),
                       args.scenario, s.pretrain_steps, s.pooler, _progress)
    out = _out(args)
    write_runs(out / "sweep_funnel_layer.csv", records)
    write_plot_data(out / "sweep_funnel_layer_plot.csv", records)
    print(summarize(records))
    return EXIT_OK


def cmd_sweep_recovery_op(args) -> int:
    if args.task == SENTENCE:
        raise UsageError("recovery ops only apply to token-level tasks; use --task token or conll")
    s = resolve(args)
    mc, factory = make_data_factory(args.task, s, args.data)
    layers = args.layers if args.layers is not None else _default_grid(mc.n_layers)
    records = run_grid(mc, s.train, factory, args.task, layers, list(RecoveryOp), _seeds(args, s),
                       args.scenario, s.pretrain_steps, s.pooler, _progress)
    out = _out(args)
    write_runs(out / "sweep_recovery_op.csv", records)
    write_plot_data(out / "sweep_recovery_op_plot.csv", records)
    print(summarize(records))
    means, beaten_by = recovery_ranking(records)
    for op, m in sorted(means.items(), key=lambda kv: -kv[1]):
        print(f"mean over grid  {op:<13} {m:.4f}")
    if beaten_by:
        print(f"NOTE: avg_last is not the best op on this grid; higher mean: {', '.join(beaten_by)}")
    else:
        print("avg_last has the highest mean over the grid")
    return EXIT_OK


def _cost_layers(args, mc: ModelConfig) -> list[int]:
    layers = args.layers if args.layers is not None else _default_grid(mc.n_layers)
    bad = [k for k in layers if not 0 <= k <= mc.n_layers]
    if bad:
        raise UsageError(f"layers must be within 0..{mc.n_layers}, got {bad}")
    return layers


def cmd_bench(args) -> int:
    s = resolve(args)
    mc = s.model
    seq = args.seq if args.seq is not None else mc.max_seq
    state = init_model(mc, FunnelConfig.none(mc.n_layers), s.pooler, seed=s.train.seed)
    rows = cost_rows(state, _cost_layers(args, mc), seq, "sentence", None, measure=True,
                     batch=args.batch, n_warmup=args.warmup, n_reps=args.reps, seed=s.train.seed)
    path = write_csv(_out(args) / "bench.csv", COST_HEADER, rows)
    for r in rows:
        print(f"layer {r[0]:>2}  flops savings {float(r[4]):7.4f}  median {float(r[5]):9.3f} ms  latency savings {float(r[6]):7.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_flops(args) -> int:
    s = resolve(args)
    mc = s.model
    seq = args.seq if args.seq is not None else mc.max_seq
    cost_task = "sentence" if args.task == SENTENCE else "token"
    recovery = s.recovery if cost_task == "token" else None
    state = init_model(mc, FunnelConfig.none(mc.n_layers), s.pooler, seed=0)
    rows = cost_rows(state, _cost_layers(args, mc), seq, cost_task, recovery)
    path = write_csv(_out(args) / "flops.csv", COST_HEADER, rows)
    for r in rows:
        print(f"layer {r[0]:>2}  flops {r[3]:>12}  savings {float(r[4]):.4f}")
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with model/train/pooler/data/funnel sections")
    common.add_argument("--seed", type=int, help="base seed (data, init, minibatch order)")
    common.add_argument("--out", help="output directory (default: ./out)")
    common.add_argument("--layers", type=_int_list, help="funnel layer(s), e.g. 0,2,4")
    common.add_argument("--recovery", help="recovery op name or 'none' (default avg_last)")
    common.add_argument("--task", choices=TASKS, help="default: token")
    common.add_argument("--data", help="CoNLL file (--task conll) or a gen-data output directory")
    common.add_argument("--seq", type=int, help="sequence length")
    common.add_argument("-v", "--verbose", action="store_true")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--steps", type=int, help="fine-tuning steps")
    training.add_argument("--pretrain-steps", type=int, help="masked-token pretraining steps (default 0)")
    training.add_argument("--scenario", choices=[s.value for s in Scenario], default=Scenario.NORMAL_PRETRAIN.value)

    multi = argparse.ArgumentParser(add_help=False)
    multi.add_argument("--seeds", type=int, default=5, help="seeds per grid point (default 5)")

    p = argparse.ArgumentParser(prog="funnelkit", description="Funnel placement experiments on a small transformer.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset").set_defaults(func=cmd_gen_data)
    sub.add_parser("train", parents=[common, training], help="train one model, save a checkpoint").set_defaults(func=cmd_train)
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("checkpoint")
    ev.set_defaults(func=cmd_eval)
    sub.add_parser("sweep-funnel-layer", parents=[common, training, multi],
                   help="metric vs funnel layer (layer 0 = no funnel)").set_defaults(func=cmd_sweep_funnel_layer)
    sub.add_parser("sweep-recovery-op", parents=[common, training, multi],
                   help="all six recovery ops over a layer grid").set_defaults(func=cmd_sweep_recovery_op)
    bench = sub.add_parser("bench", parents=[common], help="FLOPs and measured latency per funnel layer")
    bench.add_argument("--batch", type=int, default=8)
    bench.add_argument("--reps", type=int, default=15)
    bench.add_argument("--warmup", type=int, default=3)
    bench.set_defaults(func=cmd_bench)
    sub.add_parser("flops", parents=[common], help="analytic FLOPs per funnel layer").set_defaults(func=cmd_flops)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.func is not cmd_eval and args.task is None:
        args.task = TOKEN
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"funnelkit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, FileNotFoundError) as e:
        print(f"funnelkit: input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

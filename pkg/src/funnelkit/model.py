"""A small Gemma2-style encoder stack with an optional funnel.

Each block is pre-norm: RMSNorm -> multi-head attention with rotary
positions -> residual, then RMSNorm -> GeGLU MLP -> residual.  Attention is
bidirectional unless ``causal`` is set.  Two heads sit on top:

* a per-token classifier, reached through tile + recovery when funneled;
* a sentence classifier: one extra transformer block, then ``n_pool_heads``
  learned queries attend over the sequence and their outputs are
  concatenated into one vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .funnel import (
    FunnelConfig,
    LayerCache,
    RecoveryOp,
    check_mask,
    max_pool_seq,
    pool_positions,
    recover,
    tile_upsample,
)
from .numerics import (
    Tensor,
    add,
    as_tensor,
    gather,
    gelu,
    matmul,
    mul,
    parameter,
    record,
    reshape,
    rmsnorm,
    scale,
    softmax_lastdim,
    transpose,
)

CHECKPOINT_FORMAT = "funnelkit-checkpoint"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 16
    d_model: int = 64
    n_heads: int = 4
    head_dim: int = 16
    d_ff: int = 256
    vocab_size: int = 64
    max_seq: int = 128
    causal: bool = False
    rope_base: float = 10000.0
    n_classes: int = 2
    n_tags: int = 2
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.n_heads * self.head_dim != self.d_model:
            raise ConfigError(
                f"n_heads * head_dim = {self.n_heads * self.head_dim} must equal d_model = {self.d_model}"
            )
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.max_seq < 2:
            raise ConfigError("max_seq must be >= 2")
        for name in ("n_layers", "d_model", "d_ff", "vocab_size", "n_classes", "n_tags"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def mask_token_id(self) -> int:
        """Last vocabulary id, reserved for masked-token pretraining."""
        return self.vocab_size - 1


@dataclass(frozen=True)
class PoolerConfig:
    n_pool_heads: int = 4
    n_pool_layers: int = 1


def _check_pooler(mc: ModelConfig, pc: PoolerConfig) -> None:
    if pc.n_pool_heads < 1 or mc.d_model % pc.n_pool_heads:
        raise ConfigError(f"n_pool_heads={pc.n_pool_heads} must divide d_model={mc.d_model}")
    if (mc.d_model // pc.n_pool_heads) % 2:
        raise ConfigError("pooler head size must be even")
    if pc.n_pool_layers < 0:
        raise ConfigError("n_pool_layers must be >= 0")


@dataclass
class ModelState:
    config: ModelConfig
    funnel: FunnelConfig
    params: dict[str, Tensor]
    pooler: PoolerConfig = field(default_factory=PoolerConfig)

    def with_funnel(self, funnel: FunnelConfig) -> ModelState:
        """Same parameters (shared, not copied) under a different funnel."""
        funnel.check(self.config.n_layers)
        return replace(self, funnel=funnel)

    def clone(self) -> ModelState:
        params = {k: parameter(v.data.copy(), k) for k, v in self.params.items()}
        return replace(self, params=params)

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def param_count(mc: ModelConfig, pc: PoolerConfig = PoolerConfig()) -> int:
    """Closed-form parameter count; equals ``init_model(...).n_params()``."""
    d, f = mc.d_model, mc.d_ff
    block = 2 * d + 4 * d * d + 3 * d * f
    return (
        mc.vocab_size * d
        + mc.n_layers * block
        + d  # final norm
        + d * mc.n_tags + mc.n_tags
        + pc.n_pool_layers * block
        + d  # pooler norm
        + d  # pooling queries: n_pool_heads * (d / n_pool_heads)
        + 2 * d * d  # pooling key/value projections
        + d * mc.n_classes + mc.n_classes
    )


def _block_shapes(prefix: str, mc: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, f = mc.d_model, mc.d_ff
    return [
        (f"{prefix}.attn_norm", (d,), "ones"),
        (f"{prefix}.wq", (d, d), "normal"),
        (f"{prefix}.wk", (d, d), "normal"),
        (f"{prefix}.wv", (d, d), "normal"),
        (f"{prefix}.wo", (d, d), "normal"),
        (f"{prefix}.mlp_norm", (d,), "ones"),
        (f"{prefix}.w_gate", (d, f), "normal"),
        (f"{prefix}.w_up", (d, f), "normal"),
        (f"{prefix}.w_down", (f, d), "normal"),
    ]


def _param_layout(mc: ModelConfig, pc: PoolerConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d = mc.d_model
    layout = [("embed", (mc.vocab_size, d), "normal")]
    for i in range(mc.n_layers):
        layout += _block_shapes(f"layers.{i}", mc)
    layout += [
        ("final_norm", (d,), "ones"),
        ("token_head.w", (d, mc.n_tags), "normal"),
        ("token_head.b", (mc.n_tags,), "zeros"),
    ]
    for j in range(pc.n_pool_layers):
        layout += _block_shapes(f"pooler.layers.{j}", mc)
    layout += [
        ("pooler.norm", (d,), "ones"),
        ("pooler.query", (pc.n_pool_heads, d // pc.n_pool_heads), "normal"),
        ("pooler.wk", (d, d), "normal"),
        ("pooler.wv", (d, d), "normal"),
        ("cls.w", (d, mc.n_classes), "normal"),
        ("cls.b", (mc.n_classes,), "zeros"),
    ]
    return layout


def init_model(
    mc: ModelConfig,
    funnel: FunnelConfig | None = None,
    pooler: PoolerConfig | None = None,
    seed: int = 0,
) -> ModelState:
    """Seeded init: N(0, 0.02) weights, unit norm gains, zero biases."""
    pooler = pooler or PoolerConfig()
    _check_pooler(mc, pooler)
    funnel = funnel or FunnelConfig.none(mc.n_layers)
    funnel.check(mc.n_layers)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _param_layout(mc, pooler):
        if kind == "normal":
            data = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = parameter(data, name)
    return ModelState(mc, funnel, params, pooler)


# ---------------------------------------------------------------------------
# building blocks

def _rope_tables(positions: np.ndarray, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    key = (positions.tobytes(), positions.dtype.str, head_dim, base)
    hit = _ROPE_CACHE.get(key)
    if hit is None:
        if len(_ROPE_CACHE) > 256:
            _ROPE_CACHE.clear()
        hit = _ROPE_CACHE[key] = _rope_tables_uncached(positions, head_dim, base)
    return hit


_ROPE_CACHE: dict = {}


def _rope_tables_uncached(positions: np.ndarray, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope_apply(x, positions, rope_base: float, head_dim: int | None = None) -> Tensor:
    """Rotary position embedding on a (batch, seq, dim) tensor.

    The last axis is split into heads of ``head_dim``; inside each head, entry
    ``i`` is rotated with entry ``i + head_dim/2`` by angle ``pos * base^(-2i/head_dim)``.
    Positions are the tokens' original coordinates, also after pooling.
    """
    x = as_tensor(x)
    b, n, d = x.shape
    hd = head_dim or d
    positions = np.asarray(positions)
    if positions.shape != (n,):
        raise ShapeError(f"positions length {positions.shape} != seq {n}")
    if d % hd or hd % 2:
        raise ShapeError(f"head_dim {hd} must be even and divide {d}")
    half = hd // 2
    cos, sin = _rope_tables(positions, hd, rope_base)
    cos = cos[None, :, None, :]
    sin = sin[None, :, None, :]
    v = x.data.reshape(b, n, d // hd, hd)
    x1, x2 = v[..., :half], v[..., half:]
    out = np.empty_like(v)
    np.subtract(x1 * cos, x2 * sin, out=out[..., :half])
    np.add(x1 * sin, x2 * cos, out=out[..., half:])
    out = out.reshape(b, n, d)

    def backward(g):
        g = g.reshape(b, n, d // hd, hd)
        g1, g2 = g[..., :half], g[..., half:]
        gx = np.empty_like(g)
        np.add(g1 * cos, g2 * sin, out=gx[..., :half])
        np.subtract(g2 * cos, g1 * sin, out=gx[..., half:])
        return (gx.reshape(b, n, d),)

    return record(out, (x,), backward)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * hd))


def _attention_mask(mask: np.ndarray, causal: bool) -> np.ndarray:
    n = mask.shape[1]
    allowed = mask[:, None, None, :]
    if causal:
        # the diagonal keeps rows of padded queries non-empty
        allowed = (allowed & np.tril(np.ones((n, n), dtype=bool))) | np.eye(n, dtype=bool)
    return allowed


def _attention_weights(state: ModelState, prefix: str, h: Tensor, mask: np.ndarray, positions) -> Tensor:
    mc = state.config
    p = state.params
    q = _split_heads(rope_apply(matmul(h, p[f"{prefix}.wq"]), positions, mc.rope_base, mc.head_dim), mc.n_heads)
    k = _split_heads(rope_apply(matmul(h, p[f"{prefix}.wk"]), positions, mc.rope_base, mc.head_dim), mc.n_heads)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(mc.head_dim))
    return softmax_lastdim(scores, _attention_mask(mask, mc.causal))


def attention_scores(state: ModelState, prefix: str, x, mask: np.ndarray, positions) -> Tensor:
    """Post-softmax attention weights of one block, shape (batch, heads, seq, seq)."""
    h = rmsnorm(x, state.params[f"{prefix}.attn_norm"], state.config.norm_eps)
    return _attention_weights(state, prefix, h, mask, positions)


def block(state: ModelState, prefix: str, x, mask: np.ndarray, positions) -> Tensor:
    mc = state.config
    p = state.params
    h = rmsnorm(x, p[f"{prefix}.attn_norm"], mc.norm_eps)
    attn = _attention_weights(state, prefix, h, mask, positions)
    v = _split_heads(matmul(h, p[f"{prefix}.wv"]), mc.n_heads)
    x = add(x, matmul(_merge_heads(matmul(attn, v)), p[f"{prefix}.wo"]))
    h = rmsnorm(x, p[f"{prefix}.mlp_norm"], mc.norm_eps)
    ff = mul(gelu(matmul(h, p[f"{prefix}.w_gate"])), matmul(h, p[f"{prefix}.w_up"]))
    return add(x, matmul(ff, p[f"{prefix}.w_down"]))


def embed(state: ModelState, tokens: np.ndarray) -> Tensor:
    mc = state.config
    return scale(gather(state.params["embed"], tokens), math.sqrt(mc.d_model))


# ---------------------------------------------------------------------------
# forward passes

@dataclass
class ForwardResult:
    """Output of the layer stack.

    ``final`` has ``pooled_len`` positions; ``cache`` holds the pre-funnel
    activations at full length (None when no funnel is configured).
    """

    final: Tensor
    cache: LayerCache | None
    pooled_len: int
    mask: np.ndarray
    positions: np.ndarray
    full_mask: np.ndarray
    factor: int


def _check_inputs(state: ModelState, tokens, mask) -> tuple[np.ndarray, np.ndarray]:
    mc = state.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (batch, seq), got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= mc.vocab_size):
        raise InputError(f"token id out of range [0, {mc.vocab_size})")
    b, n = tokens.shape
    if n > mc.max_seq:
        raise InputError(f"sequence length {n} exceeds max_seq {mc.max_seq}")
    if mask is None:
        mask = np.ones((b, n), dtype=bool)
    return tokens, check_mask(mask, b, n)


def forward(state: ModelState, tokens, mask=None, keep_cache: bool = True) -> ForwardResult:
    """Embed and run every layer, pooling wherever the funnel config says.

    ``keep_cache=False`` skips the pre-funnel cache (heads that never recover).
    """
    mc, fc = state.config, state.funnel
    tokens, mask = _check_inputs(state, tokens, mask)
    full_mask = mask
    n = tokens.shape[1]
    x = embed(state, tokens)
    positions = np.arange(n)
    f = fc.funnel_layer
    cache = LayerCache() if f is not None and keep_cache else None
    factor = 1
    for k in range(mc.n_layers + 1):
        pf = fc.factor_before(k)
        if pf > 1:
            if cache is not None and cache.pre_funnel_count == 0:
                cache.push(x)  # funnel before layer 0: the embeddings are the only full-length state
            x, mask = max_pool_seq(x, mask, pf)
            positions = pool_positions(positions, pf)
            factor = pf
        if k == mc.n_layers:
            break
        x = block(state, f"layers.{k}", x, mask, positions)
        if cache is not None and k < f:
            cache.push(x)
    return ForwardResult(x, cache, x.shape[1], mask, positions, full_mask, factor)


def token_hidden(
    state: ModelState,
    res: ForwardResult,
    tile_only: bool = False,
    recovery_op: RecoveryOp | str | None = None,
) -> Tensor:
    """Full-length hidden states for per-token heads (tile + recovery when funneled)."""
    if res.factor == 1:
        return res.final
    op = RecoveryOp.parse(recovery_op) or state.funnel.recovery_op
    n = res.full_mask.shape[1]
    tiled = tile_upsample(res.final, res.factor, n)
    if tile_only:
        return tiled
    if op is None:
        raise ConfigError("token task requires recovery")
    return recover(tiled, res.cache, op)


def token_head(state: ModelState, hidden) -> Tensor:
    p = state.params
    h = rmsnorm(hidden, p["final_norm"], state.config.norm_eps)
    return add(matmul(h, p["token_head.w"]), p["token_head.b"])


def forward_tokens(state: ModelState, tokens, mask=None, tile_only: bool = False) -> Tensor:
    """Per-token logits (batch, seq, n_tags) at the input length.

    With a funnel active this needs ``funnel.recovery_op``; ``tile_only=True``
    instead feeds the bare tiled activations to the head (the no-recovery
    ablation).
    """
    res = forward(state, tokens, mask)
    return token_head(state, token_hidden(state, res, tile_only))


def forward_mlm(state: ModelState, tokens, mask=None, recovery_op: RecoveryOp | str | None = None) -> Tensor:
    """Vocabulary logits per position through the tied embedding matrix."""
    res = forward(state, tokens, mask)
    op = RecoveryOp.parse(recovery_op) or state.funnel.recovery_op or RecoveryOp.AVG_LAST
    hidden = token_hidden(state, res, recovery_op=op)
    h = rmsnorm(hidden, state.params["final_norm"], state.config.norm_eps)
    return matmul(h, transpose(state.params["embed"], (1, 0)))


def attention_pool(state: ModelState, x, mask: np.ndarray) -> Tensor:
    """Learned-query multi-head attention collapsing (batch, seq, d) to (batch, d)."""
    p = state.params
    nph = state.pooler.n_pool_heads
    b, n, d = x.shape
    hd = d // nph
    k = _split_heads(matmul(x, p["pooler.wk"]), nph)  # (b, P, n, hd)
    v = _split_heads(matmul(x, p["pooler.wv"]), nph)
    q = reshape(p["pooler.query"], (1, nph, 1, hd))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))  # (b, P, 1, n)
    attn = softmax_lastdim(scores, mask[:, None, None, :])
    return reshape(matmul(attn, v), (b, d))


def sentence_head(state: ModelState, res: ForwardResult) -> Tensor:
    p = state.params
    x = res.final
    for j in range(state.pooler.n_pool_layers):
        x = block(state, f"pooler.layers.{j}", x, res.mask, res.positions)
    x = rmsnorm(x, p["pooler.norm"], state.config.norm_eps)
    pooled = attention_pool(state, x, res.mask)
    return add(matmul(pooled, p["cls.w"]), p["cls.b"])


def forward_sentence(state: ModelState, tokens, mask=None) -> Tensor:
    """Per-sequence class logits (batch, n_classes); no length recovery."""
    return sentence_head(state, forward(state, tokens, mask, keep_cache=False))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: ModelState, path: str | Path, extra: dict | None = None) -> Path:
    """Write an uncompressed ``.npz``: one ``param/<name>`` array per parameter
    plus a ``meta`` JSON string (format tag, version, configs, ``extra``)."""
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": asdict(state.config),
        "pooler": asdict(state.pooler),
        "funnel": state.funnel.to_dict(),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.data for k, v in state.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise InputError(f"{path}: not a version-{CHECKPOINT_VERSION} funnelkit checkpoint")
        params = {k[len("param/"):]: parameter(z[k], k[len("param/"):]) for k in z.files if k.startswith("param/")}
    mc = ModelConfig(**meta["model"])
    pc = PoolerConfig(**meta["pooler"])
    fc = FunnelConfig.from_dict(meta["funnel"])
    expected = {name for name, _, _ in _param_layout(mc, pc)}
    if set(params) != expected:
        raise InputError(f"{path}: parameter names do not match the stored config")
    return ModelState(mc, fc, params, pc), meta["extra"]

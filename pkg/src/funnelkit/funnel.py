"""Sequence pooling and tiling, plus the six ways of recovering full length.

A funnel halves the sequence with a window-2 max-pool between two layers.
Layers after the funnel point see the pooled sequence.  Token-level heads
need full length back, which is done by tiling the pooled activations and
combining them with full-resolution activations cached before the funnel.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .numerics import Tensor, add, as_tensor, maximum, record, scale

ALLOWED_FACTORS = (1, 2)


class RecoveryOp(str, enum.Enum):
    SUM_FIRST = "sum_first"
    SUM_LAST = "sum_last"
    SUM_PREV_MAX = "sum_prev_max"
    SUM_PREV_AVG = "sum_prev_avg"
    AVG_LAST = "avg_last"
    MAX_LAST = "max_last"

    @classmethod
    def parse(cls, name: str | None) -> RecoveryOp | None:
        """Config/CLI string to enum; ``None``/"none" means recovery disabled."""
        if name is None or isinstance(name, cls):
            return name
        if name.lower() == "none":
            return None
        try:
            return cls(name.lower())
        except ValueError:
            valid = ", ".join(op.value for op in cls)
            raise ConfigError(f"unknown recovery op {name!r} (expected one of: {valid}, none)") from None


@dataclass(frozen=True)
class FunnelConfig:
    """Per-layer pooling factors plus the recovery op.

    ``pool_factors[k] == 2`` pools the hidden states *before* layer ``k`` runs.
    The list may carry one extra trailing entry for a model of ``n_layers``
    layers: a 2 there pools after the final layer (the "funnel at layer
    n_layers" point, which shortens no layer).
    """

    pool_factors: tuple[int, ...]
    recovery_op: RecoveryOp | None = None

    def __post_init__(self):
        factors = tuple(int(f) for f in self.pool_factors)
        object.__setattr__(self, "pool_factors", factors)
        object.__setattr__(self, "recovery_op", RecoveryOp.parse(self.recovery_op))
        if not factors:
            raise ConfigError("pool_factors must not be empty")
        bad = [f for f in factors if f not in ALLOWED_FACTORS]
        if bad:
            raise ConfigError(f"pool factors must be 1 or 2, got {bad}")
        if sum(f > 1 for f in factors) > 1:
            raise ConfigError("at most one funnel point is supported")

    @classmethod
    def none(cls, n_layers: int, recovery_op: RecoveryOp | str | None = None) -> FunnelConfig:
        return cls((1,) * n_layers, recovery_op)

    @classmethod
    def at_layer(cls, n_layers: int, layer: int | None, recovery_op: RecoveryOp | str | None = None) -> FunnelConfig:
        """Funnel placed before layer ``layer`` (0..n_layers); None gives no funnel."""
        if layer is None:
            return cls.none(n_layers, recovery_op)
        if not 0 <= layer <= n_layers:
            raise ConfigError(f"funnel layer {layer} outside 0..{n_layers}")
        factors = [1] * (n_layers + 1 if layer == n_layers else n_layers)
        factors[layer] = 2
        return cls(tuple(factors), recovery_op)

    @property
    def funnel_layer(self) -> int | None:
        for k, f in enumerate(self.pool_factors):
            if f > 1:
                return k
        return None

    @property
    def active(self) -> bool:
        return self.funnel_layer is not None

    def check(self, n_layers: int) -> None:
        if len(self.pool_factors) not in (n_layers, n_layers + 1):
            raise ConfigError(
                f"pool_factors has length {len(self.pool_factors)}, expected {n_layers} (or {n_layers + 1})"
            )

    def factor_before(self, k: int) -> int:
        return self.pool_factors[k] if k < len(self.pool_factors) else 1

    def to_dict(self) -> dict:
        return {
            "pool_factors": list(self.pool_factors),
            "recovery_op": None if self.recovery_op is None else self.recovery_op.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> FunnelConfig:
        return cls(tuple(d["pool_factors"]), d.get("recovery_op"))


# ---------------------------------------------------------------------------
# masks and positions

def full_mask(batch: int, seq: int) -> np.ndarray:
    return np.ones((batch, seq), dtype=bool)


def check_mask(mask: np.ndarray, batch: int, seq: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (batch, seq):
        raise ShapeError(f"mask shape {mask.shape} != {(batch, seq)}")
    if not mask.any(axis=1).all():
        raise ShapeError("every sequence needs at least one valid position")
    return mask


def _check_factor(factor: int) -> None:
    if factor not in ALLOWED_FACTORS:
        raise ConfigError(f"pool factor must be 1 or 2, got {factor}")


def max_pool_seq(x, mask: np.ndarray, factor: int) -> tuple[Tensor, np.ndarray]:
    """Window max over the sequence axis of a (batch, seq, dim) tensor.

    Windows are ``factor`` wide; an odd tail forms a window of one.  Padding
    positions are left out of the max; a window with no valid position yields
    zeros and is marked invalid in the returned mask.  The gradient goes to
    the first argmax of each window.
    """
    _check_factor(factor)
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if factor == 1:
        return x, mask
    b, n, d = x.shape
    out_len = math.ceil(n / factor)
    pad = out_len * factor - n

    vals = x.data
    valid = mask
    if pad:
        vals = np.concatenate([vals, np.zeros((b, pad, d))], axis=1)
        valid = np.concatenate([valid, np.zeros((b, pad), dtype=bool)], axis=1)
    win = vals.reshape(b, out_len, factor, d)
    wvalid = valid.reshape(b, out_len, factor)
    masked = np.where(wvalid[..., None], win, -np.inf)
    arg = masked.argmax(axis=2)  # first index wins ties
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]
    pooled_mask = wvalid.any(axis=2)
    out = np.where(pooled_mask[..., None], out, 0.0)

    def backward(g):
        g = np.where(pooled_mask[..., None], g, 0.0)
        gwin = np.zeros((b, out_len, factor, d))
        np.put_along_axis(gwin, arg[:, :, None, :], g[:, :, None, :], axis=2)
        return (gwin.reshape(b, out_len * factor, d)[:, :n, :],)

    return record(out, (x,), backward), pooled_mask


def pool_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    _check_factor(factor)
    mask = np.asarray(mask, dtype=bool)
    if factor == 1:
        return mask
    b, n = mask.shape
    out_len = math.ceil(n / factor)
    padded = np.zeros((b, out_len * factor), dtype=bool)
    padded[:, :n] = mask
    return padded.reshape(b, out_len, factor).any(axis=2)


def pool_positions(positions: Sequence[int], factor: int) -> np.ndarray:
    """Keep the start position of each window, so pooled tokens keep original coordinates."""
    _check_factor(factor)
    return np.asarray(positions)[::factor]


def tile_upsample(x, factor: int, target_len: int) -> Tensor:
    """Repeat each position ``factor`` times, then cut to ``target_len``.

    >>> tile_upsample(np.array([[[1.], [3.], [4.]]]), 2, 6).data[0, :, 0]
    array([1., 1., 3., 3., 4., 4.])
    """
    _check_factor(factor)
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"expected (batch, seq, dim), got {x.shape}")
    b, n, d = x.shape
    if math.ceil(target_len / factor) != n:
        raise ShapeError(f"cannot tile length {n} by {factor} to {target_len}")
    out = np.repeat(x.data, factor, axis=1)[:, :target_len, :]

    def backward(g):
        full = np.zeros((b, n * factor, d))
        full[:, :target_len, :] = g
        return (full.reshape(b, n, factor, d).sum(axis=2),)

    return record(out, (x,), backward)


# ---------------------------------------------------------------------------
# layer cache and recovery

@dataclass
class LayerCache:
    """Full-resolution activations gathered from the layers before the funnel.

    Fill with :meth:`push` once per pre-funnel layer output, in order.  The
    running max and average are built on first access, so recovery ops that
    do not need them do not pay for them.
    """

    first_full: Tensor | None = None
    last_full: Tensor | None = None
    pre_funnel_count: int = 0
    _outputs: list = field(default_factory=list, repr=False)
    _max: Tensor | None = field(default=None, repr=False)
    _sum: Tensor | None = field(default=None, repr=False)
    _avg: Tensor | None = field(default=None, repr=False)

    def push(self, out: Tensor) -> None:
        if self.first_full is None:
            self.first_full = out
        elif out.shape != self.first_full.shape:
            raise ShapeError(f"cached layer shape {out.shape} != {self.first_full.shape}")
        self.last_full = out
        self._outputs.append(out)
        self.pre_funnel_count += 1
        self._max = self._sum = self._avg = None

    def _require(self) -> None:
        if self.pre_funnel_count == 0:
            raise UsageError("empty layer cache")

    @property
    def running_max(self) -> Tensor:
        self._require()
        if self._max is None:
            acc = self._outputs[0]
            for out in self._outputs[1:]:
                acc = maximum(acc, out)
            self._max = acc
        return self._max

    @property
    def running_sum(self) -> Tensor:
        self._require()
        if self._sum is None:
            acc = self._outputs[0]
            for out in self._outputs[1:]:
                acc = add(acc, out)
            self._sum = acc
        return self._sum

    @property
    def running_avg(self) -> Tensor:
        if self._avg is None:
            self._avg = scale(self.running_sum, 1.0 / self.pre_funnel_count)
        return self._avg

    @property
    def shape(self) -> tuple[int, ...]:
        self._require()
        return self.first_full.shape


def recover(tiled, cache: LayerCache, op: RecoveryOp | str | None) -> Tensor:
    """Combine the tiled funnel output with cached pre-funnel activations."""
    op = RecoveryOp.parse(op)
    if op is None:
        raise UsageError("recover() called with recovery disabled")
    tiled = as_tensor(tiled)
    if tiled.shape != cache.shape:
        raise ShapeError(f"tiled shape {tiled.shape} != cached shape {cache.shape}")
    if op is RecoveryOp.SUM_FIRST:
        return add(tiled, cache.first_full)
    if op is RecoveryOp.SUM_LAST:
        return add(tiled, cache.last_full)
    if op is RecoveryOp.SUM_PREV_MAX:
        return add(tiled, cache.running_max)
    if op is RecoveryOp.SUM_PREV_AVG:
        return add(tiled, cache.running_avg)
    if op is RecoveryOp.AVG_LAST:
        return scale(add(tiled, cache.last_full), 0.5)
    return maximum(tiled, cache.last_full)

"""Scaled dot-product attention modulated by a transition-weight mask.

The mask enters multiplicatively on the logits.  In ``literal`` mode a zero
mask entry merely neutralises the logit (the key still receives the weight
of a zero score); in ``hard`` mode zero entries are excluded from the
softmax entirely, so their attention weights come out as exact ``0.0``.
A separate boolean *structural* mask expresses which key blocks a query is
ever allowed to see; structurally forbidden entries are excluded in both
modes.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .topomask import TopoMask, expand_mask

MODE_LITERAL = "literal"
MODE_HARD = "hard"


class DegenerateRowError(ValueError):
    """Raised when masking leaves a query row with nothing to attend to."""

    def __init__(self, row):
        self.row = row
        super().__init__("attention row %d has no allowed keys after masking" % row)


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    mode: str = MODE_HARD

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ValueError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                "d_model=%d is not divisible by n_heads=%d"
                % (self.d_model, self.n_heads)
            )
        if self.mode not in (MODE_LITERAL, MODE_HARD):
            raise ValueError("unknown attention mode %r" % (self.mode,))

    @property
    def d_head(self):
        return self.d_model // self.n_heads


def _as_tensor(x):
    if isinstance(x, nc.Tensor):
        return x
    return nc.Tensor(np.asarray(x, dtype=np.float64))


def topo_attention(q, k, v, mask, structural=None, mode=MODE_HARD, token_types=None):
    """Single-head attention with a multiplicative transition mask.

    q, k, v : (T_q, d), (T_k, d), (T_k, d_v) Tensors or arrays.
    mask : position-level (T_q, T_k) array/Tensor, or a TopoMask together
        with ``token_types`` (one type id per position, self-attention only).
    structural : optional boolean (T_q, T_k) array, True where attention is
        permitted at all.  Defaults to everything allowed.

    Returns ``(out, weights)`` where out is (T_q, d_v).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise nc.ShapeError("q, k, v must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise nc.ShapeError(
            "q and k widths differ: %s vs %s" % (q.shape, k.shape)
        )
    if v.shape[0] != k.shape[0]:
        raise nc.ShapeError(
            "k and v row counts differ: %s vs %s" % (k.shape, v.shape)
        )
    t_q, t_k = q.shape[0], k.shape[0]

    if isinstance(mask, TopoMask):
        if token_types is None:
            raise ValueError("token_types is required when mask is a TopoMask")
        if t_q != t_k:
            raise ValueError("TopoMask expansion assumes self-attention")
        mask = expand_mask(mask, token_types)
    mask_t = _as_tensor(mask)
    if mask_t.shape != (t_q, t_k):
        raise nc.ShapeError(
            "mask shape %s does not match attention shape %s"
            % (mask_t.shape, (t_q, t_k))
        )

    if structural is None:
        allowed = np.ones((t_q, t_k), dtype=bool)
    else:
        allowed = np.asarray(structural, dtype=bool).copy()
        if allowed.shape != (t_q, t_k):
            raise nc.ShapeError(
                "structural shape %s does not match attention shape %s"
                % (allowed.shape, (t_q, t_k))
            )
    if mode == MODE_HARD:
        allowed &= mask_t.array > 0.0
    elif mode != MODE_LITERAL:
        raise ValueError("unknown attention mode %r" % (mode,))

    empty = ~allowed.any(axis=1)
    if empty.any():
        raise DegenerateRowError(int(np.argmax(empty)))

    logits = nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    scores = nc.mul(logits, mask_t)
    weights = nc.masked_softmax_rows(scores, allowed)
    out = nc.matmul(weights, v)
    return out, weights


def blockwise_structural_mask(layout):
    """Boolean mask where each block sees itself and every earlier block.

    layout : sequence of positive block sizes, in temporal order.  With
    ``[2, 1, 3]`` the final three positions attend everywhere, the middle
    one sees the first three positions, and the leading pair only each
    other.
    """
    sizes = [int(s) for s in layout]
    if not sizes or any(s <= 0 for s in sizes):
        raise ValueError("layout must be non-empty positive block sizes")
    block_of = np.repeat(np.arange(len(sizes)), sizes)
    return block_of[None, :] <= block_of[:, None]

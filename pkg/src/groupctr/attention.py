"""Multi-head attention cores shared by the group and target networks.

Both cores run over stacked fixed-size blocks so a whole batch is one set
of grid operations.  A "block" is one instance's group list or behavior
subsequence; blocks never attend across their boundary.  With a single
block these are the plain per-instance operations, which is what the
oracle tests exercise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grids import (GridShapeError, Parameter, ParameterStore, ValueGrid,
                    head_mix, head_scores, matmul, scale, softmax_rows)


@dataclass
class SelfAttentionParams:
    """Fused projections for self-attention at a fixed width."""

    heads: int
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter


def self_attention_params(params: ParameterStore, prefix: str, width: int,
                          heads: int) -> SelfAttentionParams:
    if heads < 1 or width % heads:
        raise GridShapeError(
            f"{prefix}: width {width} not divisible into {heads} heads")
    return SelfAttentionParams(
        heads=heads,
        wq=params.weight(f"{prefix}.wq", width, width),
        wk=params.weight(f"{prefix}.wk", width, width),
        wv=params.weight(f"{prefix}.wv", width, width),
        wo=params.weight(f"{prefix}.wo", width, width),
    )


def self_attention(x: ValueGrid, p: SelfAttentionParams, block: int,
                   key_mask: np.ndarray | None = None) -> ValueGrid:
    """Per-block multi-head self-attention.

    x is (n_blocks * block, width); key_mask is (n_blocks, block) with True
    for rows that may be attended to.  Query rows are never masked here:
    callers drop outputs of padded rows themselves.
    """
    if x.rows % block:
        raise GridShapeError(f"self_attention: {x.rows} rows, block {block}")
    head_width = x.cols // p.heads
    q = matmul(x, p.wq.grid)
    k = matmul(x, p.wk.grid)
    v = matmul(x, p.wv.grid)
    expanded = None
    if key_mask is not None:
        # score rows run (block, head, query); each key-mask row covers all
        # of one block's heads and queries in a row
        expanded = np.repeat(np.asarray(key_mask, dtype=bool),
                             p.heads * block, axis=0)
    scores = head_scores(q, k, block, block, p.heads)
    weights = softmax_rows(scale(scores, 1.0 / math.sqrt(head_width)),
                           expanded)
    return matmul(head_mix(weights, v, block, block, p.heads), p.wo.grid)


@dataclass
class TargetAttentionParams:
    """Cross-attention with one query per block.

    kv_width is the total width the heads share; it is independent of the
    query and key input widths, so heavy key vectors can be attended with
    a modest parameter count.
    """

    heads: int
    wq: Parameter   # (query_width, kv_width)
    wk: Parameter   # (key_width, kv_width)
    wv: Parameter   # (key_width, kv_width)
    wo: Parameter   # (kv_width, out_width)


def target_attention_params(params: ParameterStore, prefix: str,
                            query_width: int, key_width: int,
                            kv_width: int, out_width: int,
                            heads: int) -> TargetAttentionParams:
    if heads < 1 or kv_width % heads:
        raise GridShapeError(
            f"{prefix}: kv width {kv_width} not divisible into {heads} heads")
    return TargetAttentionParams(
        heads=heads,
        wq=params.weight(f"{prefix}.wq", query_width, kv_width),
        wk=params.weight(f"{prefix}.wk", key_width, kv_width),
        wv=params.weight(f"{prefix}.wv", key_width, kv_width),
        wo=params.weight(f"{prefix}.wo", kv_width, out_width),
    )


def target_attention(queries: ValueGrid, keys: ValueGrid,
                     p: TargetAttentionParams, block: int,
                     key_mask: np.ndarray | None = None
                     ) -> tuple[ValueGrid, np.ndarray]:
    """queries is (n_blocks, qw), keys is (n_blocks * block, kw).

    Returns the (n_blocks, out_width) mixed output and, for inspection, the
    head-averaged attention weights as a plain (n_blocks, block) array.
    """
    if keys.rows != queries.rows * block:
        raise GridShapeError(
            f"target_attention: {queries.rows} queries for {keys.rows} keys, "
            f"block {block}")
    head_width = p.wq.grid.cols // p.heads
    q = matmul(queries, p.wq.grid)
    k = matmul(keys, p.wk.grid)
    v = matmul(keys, p.wv.grid)
    expanded = None
    if key_mask is not None:
        expanded = np.repeat(np.asarray(key_mask, dtype=bool), p.heads, axis=0)
    scores = head_scores(q, k, 1, block, p.heads)
    weights = softmax_rows(scale(scores, 1.0 / math.sqrt(head_width)),
                           expanded)
    out = matmul(head_mix(weights, v, 1, block, p.heads), p.wo.grid)
    seen = weights.data.reshape(queries.rows, p.heads, block).mean(axis=1)
    return out, seen

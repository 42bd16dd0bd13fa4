"""Target-aware interest over the candidate-keyed behavior subsequence.

A thin transformer: one self-attention encoder block over the subsequence
rows, then a decoder step in which the projected candidate is the single
query.  Both halves use residual connections and layer normalization around
the attention and the position-wise feed-forward.  Width is the full
behavior embedding width, so every stored attribute of an event reaches
the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (SelfAttentionParams, TargetAttentionParams,
                        self_attention, self_attention_params,
                        target_attention, target_attention_params)
from .features import EmbeddingSchema
from .grids import (Parameter, ParameterStore, ValueGrid, add, feed_forward,
                    layer_normalize, linear_map, row_scale)


@dataclass
class TargetNetParams:
    width: int
    proj_w: Parameter
    proj_b: Parameter
    enc: SelfAttentionParams
    enc_ln1_g: Parameter
    enc_ln1_b: Parameter
    enc_ff_w1: Parameter
    enc_ff_b1: Parameter
    enc_ff_w2: Parameter
    enc_ff_b2: Parameter
    enc_ln2_g: Parameter
    enc_ln2_b: Parameter
    dec: TargetAttentionParams
    dec_ln1_g: Parameter
    dec_ln1_b: Parameter
    dec_ff_w1: Parameter
    dec_ff_b1: Parameter
    dec_ff_w2: Parameter
    dec_ff_b2: Parameter
    dec_ln2_g: Parameter
    dec_ln2_b: Parameter
    null: Parameter


def build_target_net(params: ParameterStore, schema: EmbeddingSchema,
                     heads: int, prefix: str = "tm",
                     kv_width: int | None = None) -> TargetNetParams:
    width = schema.behavior_width
    hidden = 2 * width
    if kv_width is None:
        kv_width = width

    def ff(stage: str):
        return (params.weight(f"{prefix}.{stage}.ff.w1", width, hidden),
                params.zeros(f"{prefix}.{stage}.ff.b1", 1, hidden),
                params.weight(f"{prefix}.{stage}.ff.w2", hidden, width),
                params.zeros(f"{prefix}.{stage}.ff.b2", 1, width))

    def ln(name: str):
        return (params.ones(f"{prefix}.{name}.gain", 1, width),
                params.zeros(f"{prefix}.{name}.shift", 1, width))

    e_ff = ff("enc")
    d_ff = ff("dec")
    e_ln1 = ln("enc.ln1")
    e_ln2 = ln("enc.ln2")
    d_ln1 = ln("dec.ln1")
    d_ln2 = ln("dec.ln2")
    return TargetNetParams(
        width=width,
        proj_w=params.weight(f"{prefix}.proj.w", schema.candidate_width, width),
        proj_b=params.zeros(f"{prefix}.proj.b", 1, width),
        enc=self_attention_params(params, f"{prefix}.enc.attn", width, heads),
        enc_ln1_g=e_ln1[0], enc_ln1_b=e_ln1[1],
        enc_ff_w1=e_ff[0], enc_ff_b1=e_ff[1],
        enc_ff_w2=e_ff[2], enc_ff_b2=e_ff[3],
        enc_ln2_g=e_ln2[0], enc_ln2_b=e_ln2[1],
        dec=target_attention_params(params, f"{prefix}.dec.attn",
                                    query_width=width, key_width=width,
                                    kv_width=kv_width, out_width=width,
                                    heads=heads),
        dec_ln1_g=d_ln1[0], dec_ln1_b=d_ln1[1],
        dec_ff_w1=d_ff[0], dec_ff_b1=d_ff[1],
        dec_ff_w2=d_ff[2], dec_ff_b2=d_ff[3],
        dec_ln2_g=d_ln2[0], dec_ln2_b=d_ln2[1],
        null=params.zeros(f"{prefix}.null", 1, width),
    )


def encode_sequence(seq_e: ValueGrid, p: TargetNetParams, block: int,
                    key_mask: np.ndarray | None,
                    zero_col: np.ndarray | None) -> ValueGrid:
    """Self-attention encoder block with residual + layer norm twice."""
    x = seq_e if zero_col is None else row_scale(seq_e, zero_col)
    h = layer_normalize(add(x, self_attention(x, p.enc, block, key_mask)),
                        p.enc_ln1_g.grid, p.enc_ln1_b.grid)
    f = feed_forward(h, p.enc_ff_w1, p.enc_ff_b1, p.enc_ff_w2, p.enc_ff_b2)
    return layer_normalize(add(h, f), p.enc_ln2_g.grid, p.enc_ln2_b.grid)


def decode_interest(cand_e: ValueGrid, encoded: ValueGrid, p: TargetNetParams,
                    block: int, key_mask: np.ndarray | None
                    ) -> tuple[ValueGrid, np.ndarray]:
    """Single-query decoder step: projected candidate attends the encoding."""
    q = linear_map(cand_e, p.proj_w, p.proj_b)
    mixed, weights = target_attention(q, encoded, p.dec, block, key_mask)
    h = layer_normalize(add(q, mixed), p.dec_ln1_g.grid, p.dec_ln1_b.grid)
    f = feed_forward(h, p.dec_ff_w1, p.dec_ff_b1, p.dec_ff_w2, p.dec_ff_b2)
    return (layer_normalize(add(h, f), p.dec_ln2_g.grid, p.dec_ln2_b.grid),
            weights)


def target_interest(cand_e: ValueGrid, seq_e: ValueGrid, p: TargetNetParams,
                    block: int, key_mask: np.ndarray | None = None,
                    zero_col: np.ndarray | None = None
                    ) -> tuple[ValueGrid, np.ndarray]:
    """Full pass: encode the subsequence, decode one interest row per block."""
    encoded = encode_sequence(seq_e, p, block, key_mask, zero_col)
    return decode_interest(cand_e, encoded, p, block, key_mask)

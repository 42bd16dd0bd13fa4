"""Group interest network.

Each interest group is summarized as one row: identity embeddings, bucketed
statistic embeddings, and an aggregated member attribute obtained by
self-attention over the group's recent members followed by mean pooling.
The candidate then attends over the user's group rows with a single-query
multi-head attention, producing one group-side interest vector per instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (SelfAttentionParams, TargetAttentionParams,
                        self_attention, self_attention_params,
                        target_attention, target_attention_params)
from .features import EmbeddingSchema
from .grids import (Parameter, ParameterStore, ValueGrid, block_mean,
                    concat_cols, row_scale)


@dataclass
class GroupNetParams:
    agg: SelfAttentionParams       # over member rows, width = member_width
    mhta: TargetAttentionParams    # candidate query over group rows
    null: Parameter                # interest when the user has no groups


def build_group_net(params: ParameterStore, schema: EmbeddingSchema,
                    heads: int, kv_width: int | None = None) -> GroupNetParams:
    d_g = schema.group_width
    if kv_width is None:
        kv_width = d_g
    return GroupNetParams(
        agg=self_attention_params(params, "gm.agg", schema.member_width, heads),
        mhta=target_attention_params(params, "gm.mhta",
                                     query_width=schema.candidate_width,
                                     key_width=d_g, kv_width=kv_width,
                                     out_width=d_g, heads=heads),
        null=params.zeros("gm.null", 1, d_g),
    )


def aggregate_members(member_e: ValueGrid, p: GroupNetParams, block: int,
                      soft_mask: np.ndarray, zero_col: np.ndarray) -> ValueGrid:
    """Self-attention over each group's members, mean-pooled to one row.

    member_e is (n_groups * block, member_width).  soft_mask marks the rows
    each group may attend to and average over; zero_col additionally zeroes
    the input rows of absent members, so the one slot a padded group keeps
    open for the softmax contributes an all-zero vector.
    """
    x = row_scale(member_e, zero_col)
    y = self_attention(x, p.agg, block, soft_mask)
    return block_mean(y, soft_mask, block)


def build_group_rows(identity_e: ValueGrid, stats_e: ValueGrid,
                     member_e: ValueGrid, p: GroupNetParams, block: int,
                     soft_mask: np.ndarray, zero_col: np.ndarray) -> ValueGrid:
    """One (group_width)-wide row per group: identity | stats | aggregate."""
    attr = aggregate_members(member_e, p, block, soft_mask, zero_col)
    return concat_cols([identity_e, stats_e, attr])


def group_interest(cand_e: ValueGrid, group_rows: ValueGrid,
                   p: GroupNetParams, block: int,
                   group_mask: np.ndarray) -> tuple[ValueGrid, np.ndarray]:
    """Candidate-conditioned mix of group rows, one interest row per instance.

    Padded group rows must be masked out; they carry pooled-garbage values
    from the fake softmax slot otherwise.  Returns the interest rows and the
    head-averaged attention weights over groups.
    """
    return target_attention(cand_e, group_rows, p.mhta, block, group_mask)

"""The full click-through model and its ablation variants.

One Model owns every parameter a variant could need: the embedding tables,
the group network, the target network, a twin of the target network that
runs over the raw recent tail, and the scoring head.  A variant only
changes which feature slots carry signal; slots a variant ignores are
zero-filled at their usual width, so the head's geometry and the parameter
set never change and checkpoints stay interchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dataclass_fields

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .features import (CANDIDATE_FIELDS, EmbeddingSchema, EmbeddingSet,
                       IDENTITY_FIELDS, MEMBER_FIELDS, BEHAVIOR_FIELDS)
from .featurize import Batch, FeatureSet
from .grids import (ParameterStore, ValueGrid, add, add_scalar, clip,
                    concat_cols, gather_rows, linear_map, log, mean_all,
                    multiply, no_grad, relu, scale, scatter_rows, sigmoid,
                    tile_rows)
from .group_net import build_group_net, build_group_rows, group_interest
from .records import Instance
from .target_net import build_target_net, target_interest

PROB_FLOOR = 1e-12


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class VariantFlags:
    use_groups: bool
    use_stats: bool
    use_agg: bool
    use_subseq: bool
    use_recent: bool


# the first four form a ladder, each adding one ingredient; click_only is
# the full model trained on a click-filtered store; truncated drops the
# group side entirely and attends only over the raw recent tail
VARIANTS: dict[str, VariantFlags] = {
    "simple": VariantFlags(True, False, False, False, False),
    "stats": VariantFlags(True, True, False, False, False),
    "agg": VariantFlags(True, True, True, False, False),
    "full": VariantFlags(True, True, True, True, False),
    "click_only": VariantFlags(True, True, True, True, False),
    "truncated": VariantFlags(False, False, False, False, True),
}


@dataclass
class ModelConfig:
    d: int = 16
    heads: int = 2
    key_field: str = "item_id"
    member_limit: int = 20
    group_limit: int = 200
    subsequence_limit: int = 50
    recent_limit: int = 50
    mlp_widths: tuple[int, ...] = (256, 128, 64, 1)
    mhta_kv_width: int = 0          # 0 means match the key width
    variant: str = "full"
    seed: int = 0
    learning_rate: float = 1e-2
    batch_size: int = 256
    epochs: int = 2

    def check(self) -> None:
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; "
                             f"expected one of {sorted(VARIANTS)}")
        if self.key_field not in ("item_id", "category_id"):
            raise ModelError(f"unknown key field {self.key_field!r}")
        if not self.mlp_widths or self.mlp_widths[-1] != 1:
            raise ModelError("the head must end in a single output column")

    def as_dict(self) -> dict:
        out = {}
        for f in dataclass_fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if f.name == "mlp_widths" else value
        return out


def config_from_mapping(raw: dict[str, str]) -> ModelConfig:
    """Build a config from string key-value pairs, e.g. a flat config file."""
    kwargs = {}
    casts = {f.name: f for f in dataclass_fields(ModelConfig)}
    for key, value in raw.items():
        if key not in casts:
            raise ModelError(f"unknown model config key {key!r}")
        if key == "mlp_widths":
            kwargs[key] = tuple(int(v) for v in value.replace(",", " ").split())
        elif key in ("key_field", "variant"):
            kwargs[key] = value
        elif key == "learning_rate":
            kwargs[key] = float(value)
        else:
            kwargs[key] = int(value)
    config = ModelConfig(**kwargs)
    config.check()
    return config


@dataclass
class Slot:
    interest: ValueGrid
    weights: np.ndarray | None = None
    rows: np.ndarray | None = None   # batch positions the weights belong to


@dataclass
class ForwardOut:
    logits: ValueGrid
    group_slot: Slot
    target_slot: Slot

    @property
    def probabilities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))


@dataclass
class Prediction:
    """Single-instance output with the attention read-outs attached."""

    probability: float
    logit: float
    has_groups: bool
    has_subsequence: bool
    group_weights: np.ndarray | None
    target_weights: np.ndarray | None


class Model:
    def __init__(self, config: ModelConfig, schema: EmbeddingSchema):
        config.check()
        if schema.d != config.d or schema.key_field != config.key_field:
            raise ModelError(
                f"schema is d={schema.d}/{schema.key_field}, config wants "
                f"d={config.d}/{config.key_field}")
        self.config = config
        self.schema = schema
        self.flags = VARIANTS[config.variant]
        self.params = ParameterStore(config.seed)
        self.emb = EmbeddingSet(schema, self.params)
        kv = config.mhta_kv_width or None
        self.gm = build_group_net(self.params, schema, config.heads, kv)
        self.tm = build_target_net(self.params, schema, config.heads, "tm", kv)
        self.trunc = build_target_net(self.params, schema, config.heads,
                                      "trunc", kv)
        self.head: list[tuple] = []
        width = (3 * schema.d + schema.candidate_width + schema.group_width
                 + schema.behavior_width)
        self.input_width = width
        for i, out_w in enumerate(config.mlp_widths):
            self.head.append((self.params.weight(f"mlp.w{i}", width, out_w),
                              self.params.zeros(f"mlp.b{i}", 1, out_w)))
            width = out_w

    # -- forward --------------------------------------------------------

    def _embed_columns(self, field_names, idx) -> ValueGrid:
        return concat_cols([self.emb.lookup(name, idx[:, j])
                            for j, name in enumerate(field_names)])

    def _group_slot(self, batch: Batch, cand_e: ValueGrid) -> Slot:
        n = batch.size
        d_g = self.schema.group_width
        if not self.flags.use_groups:
            return Slot(ValueGrid.zeros(n, d_g))
        if batch.gm_rows.size == 0:
            return Slot(tile_rows(self.gm.null.grid, n))
        n_group_rows = batch.g_identity.shape[0]
        identity_e = self._embed_columns(IDENTITY_FIELDS, batch.g_identity)
        if self.flags.use_stats:
            stats_e = self._embed_columns(self.schema.stat_fields, batch.g_stats)
        else:
            stats_e = ValueGrid.zeros(n_group_rows,
                                      len(self.schema.stat_fields) * self.schema.d)
        if self.flags.use_agg:
            member_e = self._embed_columns(MEMBER_FIELDS, batch.g_members)
            rows = build_group_rows(identity_e, stats_e, member_e, self.gm,
                                    self.store_member_limit(batch),
                                    batch.g_member_soft, batch.g_member_zero)
        else:
            attr = ValueGrid.zeros(n_group_rows, self.schema.member_width)
            rows = concat_cols([identity_e, stats_e, attr])
        cand_sub = gather_rows(cand_e, batch.gm_rows)
        interest_sub, weights = group_interest(cand_sub, rows, self.gm,
                                               batch.g_max, batch.g_mask)
        interest = scatter_rows(interest_sub, batch.gm_rows, n)
        if batch.gm_empty_rows.size:
            nulls = tile_rows(self.gm.null.grid, batch.gm_empty_rows.size)
            interest = add(interest,
                           scatter_rows(nulls, batch.gm_empty_rows, n))
        return Slot(interest, weights, batch.gm_rows)

    @staticmethod
    def store_member_limit(batch: Batch) -> int:
        if batch.g_identity.shape[0] == 0:
            return 1
        return batch.g_member_soft.shape[1]

    def _sequence_slot(self, batch: Batch, cand_e: ValueGrid, net, rows,
                       empty_rows, block, idx, mask) -> Slot:
        n = batch.size
        if rows.size == 0:
            return Slot(tile_rows(net.null.grid, n))
        seq_e = self._embed_columns(BEHAVIOR_FIELDS, idx)
        cand_sub = gather_rows(cand_e, rows)
        interest_sub, weights = target_interest(
            cand_sub, seq_e, net, block, key_mask=mask,
            zero_col=mask.ravel().astype(np.float64))
        interest = scatter_rows(interest_sub, rows, n)
        if empty_rows.size:
            nulls = tile_rows(net.null.grid, empty_rows.size)
            interest = add(interest, scatter_rows(nulls, empty_rows, n))
        return Slot(interest, weights, rows)

    def _target_slot(self, batch: Batch, cand_e: ValueGrid) -> Slot:
        if self.flags.use_subseq:
            return self._sequence_slot(batch, cand_e, self.tm, batch.tm_rows,
                                       batch.tm_empty_rows, batch.t_max,
                                       batch.t_idx, batch.t_mask)
        if self.flags.use_recent:
            return self._sequence_slot(batch, cand_e, self.trunc,
                                       batch.tr_rows, batch.tr_empty_rows,
                                       batch.r_max, batch.r_idx, batch.r_mask)
        return Slot(ValueGrid.zeros(batch.size, self.schema.behavior_width))

    def forward_batch(self, batch: Batch) -> ForwardOut:
        user_e = self.emb.lookup("user_id", batch.user_idx)
        hour_e = self.emb.lookup("hour_of_week", batch.hour_idx)
        surface_e = self.emb.lookup("surface_id", batch.surface_idx)
        cand_e = self._embed_columns(CANDIDATE_FIELDS, batch.cand_idx)
        group_slot = self._group_slot(batch, cand_e)
        target_slot = self._target_slot(batch, cand_e)
        x = concat_cols([user_e, hour_e, surface_e, cand_e,
                         group_slot.interest, target_slot.interest])
        h = x
        for i, (w, b) in enumerate(self.head):
            h = linear_map(h, w, b)
            if i < len(self.head) - 1:
                h = relu(h)
        return ForwardOut(logits=h, group_slot=group_slot,
                          target_slot=target_slot)

    def loss_graph(self, batch: Batch) -> tuple[ValueGrid, ForwardOut]:
        """Mean binary cross-entropy as a grid graph, plus the forward pieces."""
        out = self.forward_batch(batch)
        p = clip(sigmoid(out.logits), PROB_FLOOR, 1.0 - PROB_FLOOR)
        y = ValueGrid(batch.labels)
        y_off = ValueGrid(1.0 - batch.labels)
        likelihood = add(multiply(y, log(p)),
                         multiply(y_off, log(add_scalar(scale(p, -1.0), 1.0))))
        return scale(mean_all(likelihood), -1.0), out

    def batch_loss(self, batch: Batch) -> float:
        """The same quantity as loss_graph, computed without any graph."""
        with no_grad():
            logits = self.forward_batch(batch).logits.data
        p = np.clip(1.0 / (1.0 + np.exp(-logits)), PROB_FLOOR, 1.0 - PROB_FLOOR)
        y = batch.labels
        return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())

    def predict_batch(self, batch: Batch) -> np.ndarray:
        with no_grad():
            return self.forward_batch(batch).probabilities.ravel()

    def predict_one(self, instance: Instance, features: FeatureSet) -> Prediction:
        prepared = features.prepare([instance],
                                    with_recent=self.flags.use_recent)
        batch = features.batch(prepared, [0],
                               with_groups=self.flags.use_groups,
                               with_subseq=self.flags.use_subseq,
                               with_recent=self.flags.use_recent)
        out = self.forward_batch(batch)
        gs, ts = out.group_slot, out.target_slot
        return Prediction(
            probability=float(out.probabilities[0, 0]),
            logit=float(out.logits.data[0, 0]),
            has_groups=bool(gs.rows is not None and gs.rows.size),
            has_subsequence=bool(ts.rows is not None and ts.rows.size),
            group_weights=None if gs.weights is None or not gs.weights.size
            else gs.weights[0][batch.g_mask[0]],
            target_weights=None if ts.weights is None or not ts.weights.size
            else ts.weights[0][: self._seq_len(batch)],
        )

    def _seq_len(self, batch: Batch) -> int:
        mask = batch.t_mask if self.flags.use_subseq else batch.r_mask
        return int(mask[0].sum()) if mask.size else 0

    # -- persistence ----------------------------------------------------

    def save(self, stem) -> None:
        save_checkpoint(stem, self.params, schema_hash=self.schema.hash())

    def load(self, stem) -> None:
        load_checkpoint(stem, self.params,
                        expect_schema_hash=self.schema.hash())

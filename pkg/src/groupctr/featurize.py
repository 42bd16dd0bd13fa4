"""Turning store views and instances into encoded index arrays.

The network consumes integer index arrays, one column per schema field.
Group blocks depend only on the user and the frozen store, so they are
built once per user: identity and statistic indices per group, member
attribute indices for the most recent B members, and presence masks.
Member ages are measured against the store's reference timestamp, which
keeps a user's group block identical across candidates and makes the
per-user group representation cacheable.

Candidate-keyed subsequences and the raw recent tail are decision-specific:
their age column is measured against the instance's decision timestamp, so
those arrays are prepared per instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import EmbeddingSchema
from .records import BehaviorEvent, Instance
from .store import BehaviorStore, GroupedSequence

INT = np.int64


def scan_cardinalities(store: BehaviorStore, instances: list[Instance],
                       n_surfaces_floor: int = 4):
    """Vocabulary sizes large enough for everything in the data."""
    from .features import CardinalitySpec

    max_user = max_item = max_cat = max_cell = max_surface = 0
    for user_id in store.user_ids():
        max_user = max(max_user, user_id)
        for state in store._users[user_id].values():
            for e in state.members:
                if e.item_id > max_item:
                    max_item = e.item_id
                if e.category_id > max_cat:
                    max_cat = e.category_id
                if e.location_cell > max_cell:
                    max_cell = e.location_cell
            for item in state.item_counts:
                if item > max_item:
                    max_item = item
    for inst in instances:
        max_user = max(max_user, inst.user_id)
        max_item = max(max_item, inst.candidate.item_id)
        max_cat = max(max_cat, inst.candidate.category_id)
        max_cell = max(max_cell, inst.candidate.location_cell)
        max_surface = max(max_surface, inst.context.surface_id)
    return CardinalitySpec(n_users=max_user, n_items=max_item,
                           n_categories=max_cat, n_cells=max_cell,
                           n_surfaces=max(max_surface, n_surfaces_floor))


@dataclass
class GroupBlock:
    """Encoded group features for one user (or an empty placeholder)."""

    identity: np.ndarray        # (n, 3)
    stats: np.ndarray           # (n, k_s)
    members: np.ndarray         # (n, B, 3)
    member_present: np.ndarray  # (n, B) bool

    @property
    def n_groups(self) -> int:
        return self.identity.shape[0]


def _stat_values(grouped: GroupedSequence, stat_fields) -> np.ndarray:
    rows = np.empty((len(grouped.groups), len(stat_fields)))
    for i, group in enumerate(grouped.groups):
        stats = group.stats
        row = list(stats.per_type_counts)
        row.append(stats.total_behaviors)
        row.append(stats.distinct_behavior_types)
        row.append(stats.avg_dwell_seconds)
        row.append(stats.avg_purchase_cents)
        if len(stat_fields) == 12:
            row.append(stats.distinct_item_count)
            row.append(stats.total_item_count)
        rows[i] = row
    return rows


def group_block(grouped: GroupedSequence, schema: EmbeddingSchema,
                reference_ts: int, member_limit: int) -> GroupBlock:
    """Encode one user's grouped view; ages run against reference_ts."""
    n = len(grouped.groups)
    if n == 0:
        return GroupBlock(np.zeros((0, 3), INT),
                          np.zeros((0, len(schema.stat_fields)), INT),
                          np.zeros((0, member_limit, 3), INT),
                          np.zeros((0, member_limit), bool))
    item_ids = np.array([g.item_id for g in grouped.groups], INT)
    cat_ids = np.array([g.category_id for g in grouped.groups], INT)
    prices = np.array([g.recent_price_cents for g in grouped.groups], INT)
    identity = np.stack([
        schema.encode_categorical("item_id", item_ids),
        schema.encode_categorical("category_id", cat_ids),
        schema.encode_numeric("price_bucket", prices),
    ], axis=1)

    raw_stats = _stat_values(grouped, schema.stat_fields)
    stats = np.stack([schema.encode_numeric(name, raw_stats[:, j])
                      for j, name in enumerate(schema.stat_fields)], axis=1)

    members = np.zeros((n, member_limit, 3), INT)
    present = np.zeros((n, member_limit), bool)
    ages = np.zeros((n, member_limit), INT)
    cells = np.zeros((n, member_limit), INT)
    types = np.zeros((n, member_limit), INT)
    for i, group in enumerate(grouped.groups):
        for j, member in enumerate(group.members):
            ages[i, j] = reference_ts - member.timestamp
            cells[i, j] = member.location_cell
            types[i, j] = member.behavior_type.index
            present[i, j] = True
    members[:, :, 0] = schema.encode_member_time(ages)
    members[:, :, 1] = schema.encode_categorical("location_cell", cells)
    members[:, :, 2] = schema.encode_categorical("behavior_type", types)
    members[~present] = 0
    return GroupBlock(identity, stats, members, present)


def behavior_indices(events: list[BehaviorEvent], schema: EmbeddingSchema,
                     decision_ts: int) -> np.ndarray:
    """(len, 7) encoded full-attribute rows; ages run against the decision."""
    n = len(events)
    out = np.zeros((n, 7), INT)
    if n == 0:
        return out
    items = np.array([e.item_id for e in events], INT)
    cats = np.array([e.category_id for e in events], INT)
    prices = np.array([e.price_cents for e in events], INT)
    ages = np.array([decision_ts - e.timestamp for e in events], INT)
    cells = np.array([e.location_cell for e in events], INT)
    types = np.array([e.behavior_type.index for e in events], INT)
    dwells = np.array([e.dwell_seconds for e in events], INT)
    out[:, 0] = schema.encode_categorical("item_id", items)
    out[:, 1] = schema.encode_categorical("category_id", cats)
    out[:, 2] = schema.encode_numeric("price_bucket", prices)
    out[:, 3] = schema.encode_numeric("age_bucket", ages)
    out[:, 4] = schema.encode_categorical("location_cell", cells)
    out[:, 5] = schema.encode_categorical("behavior_type", types)
    out[:, 6] = schema.encode_numeric("dwell_bucket", dwells)
    return out


def candidate_indices(instance: Instance, schema: EmbeddingSchema) -> np.ndarray:
    cand = instance.candidate
    return np.array([
        schema.encode_categorical("item_id", [cand.item_id])[0],
        schema.encode_categorical("category_id", [cand.category_id])[0],
        schema.encode_numeric("price_bucket", [cand.price_cents])[0],
        schema.encode_categorical("location_cell", [cand.location_cell])[0],
    ], INT)


@dataclass
class PreparedInstances:
    """Everything per-instance, encoded once and sliced into batches."""

    count: int
    labels: np.ndarray          # (N,) float64
    user_ids: list[int]
    user_idx: np.ndarray        # (N,) encoded
    hour_idx: np.ndarray
    surface_idx: np.ndarray
    cand_idx: np.ndarray        # (N, 4)
    subseq: list[np.ndarray]    # per instance (len, 7)
    recent: list[np.ndarray] | None   # per instance (len, 7), truncated path
    decision_ts: np.ndarray     # (N,)


@dataclass
class Batch:
    """Padded arrays for one forward pass over a set of instances."""

    size: int
    labels: np.ndarray
    user_idx: np.ndarray
    hour_idx: np.ndarray
    surface_idx: np.ndarray
    cand_idx: np.ndarray

    # group side, only for instances whose user has at least one group
    gm_rows: np.ndarray         # positions within the batch
    gm_empty_rows: np.ndarray
    g_max: int
    g_identity: np.ndarray      # (n_gm * G, 3)
    g_stats: np.ndarray         # (n_gm * G, k_s)
    g_members: np.ndarray       # (n_gm * G * B, 3)
    g_member_soft: np.ndarray   # (n_gm * G, B) bool, safe for softmax
    g_member_zero: np.ndarray   # (n_gm * G * B,) float, true presence
    g_mask: np.ndarray          # (n_gm, G) bool

    # candidate-keyed subsequence side
    tm_rows: np.ndarray
    tm_empty_rows: np.ndarray
    t_max: int
    t_idx: np.ndarray           # (n_tm * T, 7)
    t_mask: np.ndarray          # (n_tm, T) bool

    # recent-tail side (truncated baseline), same layout as tm
    tr_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, INT))
    tr_empty_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, INT))
    r_max: int = 0
    r_idx: np.ndarray = field(default_factory=lambda: np.zeros((0, 7), INT))
    r_mask: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), bool))


class FeatureSet:
    """Feature pipeline bound to one schema and one frozen store."""

    def __init__(self, schema: EmbeddingSchema, store: BehaviorStore,
                 subsequence_limit: int, recent_limit: int = 50):
        self.schema = schema
        self.store = store
        self.subsequence_limit = subsequence_limit
        self.recent_limit = recent_limit
        self._blocks: dict[int, GroupBlock] = {}
        self._tails: dict[int, list[BehaviorEvent]] = {}

    def user_block(self, user_id: int) -> GroupBlock:
        block = self._blocks.get(user_id)
        if block is None:
            grouped = self.store.grouped(user_id)
            block = group_block(grouped, self.schema, self.store.reference_ts,
                               self.store.member_limit)
            self._blocks[user_id] = block
        return block

    def user_recent_tail(self, user_id: int) -> list[BehaviorEvent]:
        """The user's most recent events across all groups, oldest first."""
        tail = self._tails.get(user_id)
        if tail is None:
            states = self.store._users.get(user_id, {})
            merged: list[BehaviorEvent] = []
            for state in states.values():
                merged.extend(state.members)
            merged.sort(key=lambda e: e.timestamp)
            tail = merged[-self.recent_limit:]
            self._tails[user_id] = tail
        return tail

    def prepare(self, instances: list[Instance],
                with_recent: bool = False) -> PreparedInstances:
        schema = self.schema
        n = len(instances)
        labels = np.array([i.label for i in instances], dtype=np.float64)
        user_ids = [i.user_id for i in instances]
        user_idx = schema.encode_categorical("user_id", [i.user_id for i in instances])
        hour_idx = schema.encode_categorical(
            "hour_of_week", [i.context.hour_of_week + 1 for i in instances])
        surface_idx = schema.encode_categorical(
            "surface_id", [i.context.surface_id for i in instances])
        cand_idx = np.stack([candidate_indices(i, schema) for i in instances]) \
            if n else np.zeros((0, 4), INT)
        subseq = []
        recent = [] if with_recent else None
        for inst in instances:
            # pull the whole retained tail, keep only what predates the
            # decision, then cap; capping first could hide visible history
            events = self.store.candidate_subsequence(
                inst.user_id, inst.candidate, self.store.retain)
            events = [e for e in events if e.timestamp < inst.decision_timestamp]
            events = events[-self.subsequence_limit:]
            subseq.append(behavior_indices(events, schema, inst.decision_timestamp))
            if with_recent:
                tail = [e for e in self.user_recent_tail(inst.user_id)
                        if e.timestamp < inst.decision_timestamp]
                recent.append(behavior_indices(tail, schema,
                                               inst.decision_timestamp))
        return PreparedInstances(
            count=n, labels=labels, user_ids=user_ids, user_idx=user_idx,
            hour_idx=hour_idx, surface_idx=surface_idx, cand_idx=cand_idx,
            subseq=subseq, recent=recent,
            decision_ts=np.array([i.decision_timestamp for i in instances], INT),
        )

    # -- batch assembly -------------------------------------------------

    def _event_side(self, arrays: list[np.ndarray]):
        lengths = np.array([a.shape[0] for a in arrays], INT)
        rows = np.flatnonzero(lengths > 0)
        empty_rows = np.flatnonzero(lengths == 0)
        t_max = int(lengths.max()) if rows.size else 0
        idx = np.zeros((rows.size * t_max, 7), INT)
        mask = np.zeros((rows.size, t_max), bool)
        for out_i, pos in enumerate(rows):
            a = arrays[pos]
            idx[out_i * t_max: out_i * t_max + a.shape[0]] = a
            mask[out_i, : a.shape[0]] = True
        return rows, empty_rows, t_max, idx, mask

    def batch(self, prepared: PreparedInstances, positions,
              with_groups: bool = True, with_subseq: bool = True,
              with_recent: bool = False) -> Batch:
        pos = np.asarray(positions, INT)
        n = pos.size
        k_s = len(self.schema.stat_fields)
        b_lim = self.store.member_limit

        if with_groups:
            blocks = [self.user_block(prepared.user_ids[p]) for p in pos]
            counts = np.array([b.n_groups for b in blocks], INT)
            gm_rows = np.flatnonzero(counts > 0)
            gm_empty = np.flatnonzero(counts == 0)
            g_max = int(counts.max()) if gm_rows.size else 0
            n_gm = gm_rows.size
            g_identity = np.zeros((n_gm, g_max, 3), INT)
            g_stats = np.zeros((n_gm, g_max, k_s), INT)
            g_members = np.zeros((n_gm, g_max, b_lim, 3), INT)
            g_soft = np.zeros((n_gm, g_max, b_lim), bool)
            g_zero = np.zeros((n_gm, g_max, b_lim), bool)
            g_mask = np.zeros((n_gm, g_max), bool)
            for out_i, pos_i in enumerate(gm_rows):
                block = blocks[pos_i]
                g = block.n_groups
                g_identity[out_i, :g] = block.identity
                g_stats[out_i, :g] = block.stats
                g_members[out_i, :g] = block.members
                g_soft[out_i, :g] = block.member_present
                g_zero[out_i, :g] = block.member_present
                g_mask[out_i, :g] = True
                # padded groups keep one attendable slot so the per-block
                # softmax stays defined; their rows are zeroed downstream
                g_soft[out_i, g:, 0] = True
        else:
            gm_rows = np.zeros(0, INT)
            gm_empty = np.arange(n, dtype=INT)
            g_max = 0
            g_identity = np.zeros((0, 0, 3), INT)
            g_stats = np.zeros((0, 0, k_s), INT)
            g_members = np.zeros((0, 0, b_lim, 3), INT)
            g_soft = np.zeros((0, 0, b_lim), bool)
            g_zero = np.zeros((0, 0, b_lim), bool)
            g_mask = np.zeros((0, 0), bool)

        if with_subseq:
            tm_rows, tm_empty, t_max, t_idx, t_mask = self._event_side(
                [prepared.subseq[p] for p in pos])
        else:
            tm_rows = np.zeros(0, INT)
            tm_empty = np.arange(n, dtype=INT)
            t_max, t_idx, t_mask = 0, np.zeros((0, 7), INT), np.zeros((0, 0), bool)

        batch = Batch(
            size=n,
            labels=prepared.labels[pos].reshape(-1, 1),
            user_idx=prepared.user_idx[pos],
            hour_idx=prepared.hour_idx[pos],
            surface_idx=prepared.surface_idx[pos],
            cand_idx=prepared.cand_idx[pos],
            gm_rows=gm_rows, gm_empty_rows=gm_empty, g_max=g_max,
            g_identity=g_identity.reshape(-1, 3),
            g_stats=g_stats.reshape(-1, k_s),
            g_members=g_members.reshape(-1, 3),
            g_member_soft=g_soft.reshape(-1, b_lim),
            g_member_zero=g_zero.reshape(-1).astype(np.float64),
            g_mask=g_mask,
            tm_rows=tm_rows, tm_empty_rows=tm_empty, t_max=t_max,
            t_idx=t_idx, t_mask=t_mask,
        )
        if with_recent:
            if prepared.recent is None:
                raise ValueError("prepare() was called without with_recent")
            (batch.tr_rows, batch.tr_empty_rows, batch.r_max,
             batch.r_idx, batch.r_mask) = self._event_side(
                [prepared.recent[p] for p in pos])
        return batch

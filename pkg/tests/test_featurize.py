"""Encoding store views and instances into padded index arrays."""

import numpy as np
import pytest

from groupctr.featurize import (FeatureSet, behavior_indices, group_block,
                                scan_cardinalities)
from groupctr.features import CardinalitySpec, EmbeddingSchema
from groupctr.records import (BehaviorEvent, BehaviorType, CandidateItem,
                              DecisionContext, Instance)
from groupctr.store import BehaviorStore


def ev(item, cat, ts, btype=BehaviorType.CLICK, price=0, cell=3, dwell=10):
    return BehaviorEvent(item_id=item, category_id=cat, price_cents=price,
                         timestamp=ts, location_cell=cell, behavior_type=btype,
                         dwell_seconds=dwell)


def make_instance(user, item=1, cat=1, ts=10_000, label=1, hour=37, surface=2):
    return Instance(user_id=user,
                    candidate=CandidateItem(item_id=item, category_id=cat,
                                            price_cents=1500, location_cell=4),
                    context=DecisionContext(hour_of_week=hour, surface_id=surface),
                    decision_timestamp=ts, label=label)


@pytest.fixture
def store():
    s = BehaviorStore(key_field="item_id", member_limit=3, group_limit=8)
    s.add_history(1, [
        ev(5, 2, 100), ev(5, 2, 200, BehaviorType.PURCHASE, price=900, dwell=0),
        ev(7, 3, 300), ev(5, 2, 400), ev(5, 2, 500),
    ])
    s.add_history(2, [ev(7, 3, 450)])
    return s


@pytest.fixture
def schema(store):
    cards = CardinalitySpec(n_users=4, n_items=10, n_categories=5,
                            n_cells=6, n_surfaces=3)
    return EmbeddingSchema(d=2, key_field="item_id", cards=cards)


def test_scan_cardinalities(store):
    insts = [make_instance(3, item=9, cat=4, surface=1)]
    cards = scan_cardinalities(store, insts)
    assert cards.n_users == 3
    assert cards.n_items == 9
    assert cards.n_categories == 4
    assert cards.n_cells == 4
    assert cards.n_surfaces >= 1


class TestGroupBlock:
    def test_identity_and_members(self, store, schema):
        block = group_block(store.grouped(1), schema, store.reference_ts, 3)
        assert block.n_groups == 2
        # serve order: item 5 (last_active 500) then item 7
        assert block.identity[0, 0] == 5
        assert block.identity[0, 1] == 2
        # recent price for group 5 is the purchase at ts=200
        assert block.identity[0, 2] == schema.encode_numeric("price_bucket", [900])[0]
        assert block.identity[1, 0] == 7
        # group 5 keeps its 3 most recent members; ages vs reference_ts=500
        assert block.member_present[0].tolist() == [True, True, True]
        assert block.member_present[1].tolist() == [True, False, False]
        want_times = schema.encode_member_time([300, 100, 0])
        assert block.members[0, :, 0].tolist() == want_times.tolist()
        # sub-day ages all collapse to the same joint code
        assert len(set(want_times.tolist())) == 1

    def test_stats_row_uses_full_history(self, store, schema):
        block = group_block(store.grouped(1), schema, store.reference_ts, 3)
        fields = list(schema.stat_fields)
        total_col = fields.index("count_total")
        # group for item 5 saw 4 events even though only 3 members remain
        assert block.stats[0, total_col] == schema.encode_numeric(
            "count_total", [4])[0]

    def test_empty_user(self, schema, store):
        block = group_block(store.grouped(99), schema, store.reference_ts, 3)
        assert block.n_groups == 0


def test_behavior_indices_ages_are_decision_relative(store, schema):
    events = [ev(5, 2, 100), ev(5, 2, 400)]
    rows = behavior_indices(events, schema, decision_ts=1000)
    want = schema.encode_numeric("age_bucket", [900, 600])
    assert rows[:, 3].tolist() == want.tolist()
    assert rows[0, 0] == 5
    assert rows[0, 5] == BehaviorType.CLICK.index


class TestFeatureSet:
    def test_prepare_filters_future_events(self, store, schema):
        fs = FeatureSet(schema, store, subsequence_limit=3)
        early = make_instance(1, item=5, cat=2, ts=250)
        late = make_instance(1, item=5, cat=2, ts=10_000)
        prep = fs.prepare([early, late])
        # user 1 has item-5 events at ts 100,200,400,500; decision at 250
        # must only see the first two
        assert prep.subseq[0].shape[0] == 2
        assert prep.subseq[1].shape[0] == 3  # capped by subsequence_limit
        assert prep.labels.tolist() == [1.0, 1.0]
        assert prep.hour_idx.tolist() == [38, 38]

    def test_recent_tail_merges_groups(self, store, schema):
        fs = FeatureSet(schema, store, subsequence_limit=3, recent_limit=4)
        tail = fs.user_recent_tail(1)
        assert [e.timestamp for e in tail] == [200, 300, 400, 500]

    def test_batch_padding_and_masks(self, store, schema):
        store.add_history(3, [])  # user with no events at all
        fs = FeatureSet(schema, store, subsequence_limit=3)
        insts = [make_instance(1, item=5, cat=2),
                 make_instance(2, item=9, cat=4),
                 make_instance(3, item=5, cat=2)]
        prep = fs.prepare(insts, with_recent=True)
        batch = fs.batch(prep, [0, 1, 2], with_recent=True)

        assert batch.size == 3
        assert batch.g_max == 2
        assert batch.gm_rows.tolist() == [0, 1]
        assert batch.gm_empty_rows.tolist() == [2]
        # user 2 has one group padded out to 2; the pad keeps one soft slot
        assert batch.g_mask.tolist() == [[True, True], [True, False]]
        pad_soft = batch.g_member_soft.reshape(2, 2, 3)[1, 1]
        assert pad_soft.tolist() == [True, False, False]
        pad_zero = batch.g_member_zero.reshape(2, 2, 3)[1, 1]
        assert pad_zero.tolist() == [0.0, 0.0, 0.0]

        # subsequence side: user 2 has no item-9 events, user 3 no events
        assert batch.tm_rows.tolist() == [0]
        assert sorted(batch.tm_empty_rows.tolist()) == [1, 2]
        assert batch.t_mask.shape == (1, 3)
        # recent tail side present because requested
        assert batch.tr_rows.tolist() == [0, 1]

    def test_batch_subset_and_order(self, store, schema):
        fs = FeatureSet(schema, store, subsequence_limit=3)
        insts = [make_instance(1, item=5, cat=2, label=1),
                 make_instance(2, item=7, cat=3, label=0)]
        prep = fs.prepare(insts)
        batch = fs.batch(prep, [1])
        assert batch.size == 1
        assert batch.labels.tolist() == [[0.0]]
        assert batch.cand_idx[0, 0] == 7

    def test_group_blocks_are_cached(self, store, schema):
        fs = FeatureSet(schema, store, subsequence_limit=3)
        a = fs.user_block(1)
        assert fs.user_block(1) is a

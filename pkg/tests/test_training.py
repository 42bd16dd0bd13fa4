"""Split discipline, the train loop, and the ablation ladder plumbing."""

import json

import numpy as np
import pytest

from groupctr.featurize import FeatureSet, scan_cardinalities
from groupctr.features import EmbeddingSchema
from groupctr.metrics import compute_auc, log_loss
from groupctr.model import Model, ModelConfig
from groupctr.records import (BehaviorEvent, BehaviorType, CandidateItem,
                              DecisionContext, Instance)
from groupctr.store import BehaviorStore
from groupctr.training import (LADDER, TrainingError, ablation_ladder,
                               click_filtered, evaluate, time_split, train)

from test_model import build

DAY = 86400


def decision(day, user_id=1, label=0, offset=100):
    return Instance(
        user_id=user_id,
        candidate=CandidateItem(item_id=1, category_id=1, price_cents=500,
                                location_cell=1),
        context=DecisionContext(hour_of_week=10, surface_id=1),
        decision_timestamp=day * DAY + offset,
        label=label,
    )


class TestTimeSplit:
    def test_splits_on_day_boundary(self):
        days = [1, 1, 1, 2, 2, 3, 3, 3, 3, 4]
        instances = [decision(d, offset=100 + i)
                     for i, d in enumerate(days)]
        train_part, test_part = time_split(instances, test_fraction=0.5)
        assert len(train_part) == 5 and len(test_part) == 5
        last_train = max(i.decision_timestamp for i in train_part) // DAY
        first_test = min(i.decision_timestamp for i in test_part) // DAY
        assert last_train < first_test

    def test_share_stays_at_or_below_fraction(self):
        days = [1, 1, 1, 2, 2, 3, 3, 3, 3, 4]
        instances = [decision(d) for d in days]
        _, test_part = time_split(instances, test_fraction=0.3)
        # day 3 would push the share to 0.5, so only day 4 is held out
        assert len(test_part) == 1

    def test_order_preserved_within_sides(self):
        instances = [decision(d, offset=o) for d, o in
                     [(1, 5), (2, 9), (1, 7), (3, 2), (2, 1), (3, 8)]]
        train_part, test_part = time_split(instances, test_fraction=0.4)
        for side in (train_part, test_part):
            positions = [instances.index(i) for i in side]
            assert positions == sorted(positions)

    def test_single_day_is_degenerate(self):
        with pytest.raises(TrainingError, match="degenerate"):
            time_split([decision(5) for _ in range(10)])

    def test_empty_rejected(self):
        with pytest.raises(TrainingError, match="nothing"):
            time_split([])

    def test_bad_fraction_rejected(self):
        with pytest.raises(TrainingError, match="fraction"):
            time_split([decision(1), decision(2)], test_fraction=1.0)


class TestEvaluate:
    def test_chunked_equals_single_batch(self):
        model, features, prepared, batch, instances = build("full")
        report = evaluate(model, features, prepared, batch_size=3)
        probs = model.predict_batch(batch)
        labels = prepared.labels.astype(np.int64)
        assert report.count == len(instances)
        assert report.positives == int(labels.sum())
        assert report.auc == pytest.approx(compute_auc(probs, labels),
                                           abs=1e-12)
        assert report.logloss == pytest.approx(log_loss(probs, labels),
                                               abs=1e-12)


class TestTrain:
    def run(self, tmp_path, seed=3, **kwargs):
        model, features, prepared, batch, instances = build("full", seed=seed)
        result = train(model, features, instances[:5], instances[5:],
                       **kwargs)
        return model, features, instances, result

    def test_records_every_epoch(self, tmp_path):
        model, _, _, result = self.run(tmp_path)
        assert not result.aborted
        assert len(result.epochs) == model.config.epochs
        for record in result.epochs:
            assert set(record) == {"epoch", "train_logloss", "test_auc",
                                   "test_logloss", "wall_seconds"}
            assert np.isfinite(record["train_logloss"])
        walls = [r["wall_seconds"] for r in result.epochs]
        assert walls == sorted(walls)
        assert result.final == result.epochs[-1]

    def test_same_seed_same_trajectory(self, tmp_path):
        _, _, _, a = self.run(tmp_path, seed=4)
        _, _, _, b = self.run(tmp_path, seed=4)
        # wall_seconds is clock noise, everything else must reproduce
        strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_seconds"}
                              for r in rows]
        assert strip(a.epochs) == strip(b.epochs)

    def test_log_and_checkpoint(self, tmp_path):
        log = tmp_path / "train.jsonl"
        stem = str(tmp_path / "ckpt")
        model, features, instances, result = self.run(
            tmp_path, log_path=str(log), checkpoint_stem=stem)
        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert lines == result.epochs
        clone = Model(model.config, model.schema)
        clone.load(stem)
        prep = features.prepare(instances, with_recent=False)
        batch = features.batch(prep, np.arange(len(instances)),
                               with_groups=True, with_subseq=True,
                               with_recent=False)
        assert np.array_equal(clone.predict_batch(batch),
                              model.predict_batch(batch))

    def test_nonfinite_gradient_aborts_cleanly(self, tmp_path):
        model, features, prepared, batch, instances = build("full")
        model.params["mlp.w0"].grid.data[0, 0] = float("nan")
        result = train(model, features, instances[:5], instances[5:])
        assert result.aborted
        assert "non-finite" in result.abort_reason
        assert result.epochs == []


def mixed_history(user_id, rng):
    events = []
    ts = 500
    for _ in range(10):
        ts += int(rng.integers(1, 40))
        btype = list(BehaviorType)[int(rng.integers(0, 6))]
        events.append(BehaviorEvent(
            item_id=int(rng.integers(1, 9)),
            category_id=int(rng.integers(1, 4)),
            price_cents=700 if btype is BehaviorType.PURCHASE else 0,
            timestamp=ts, location_cell=1, behavior_type=btype,
            dwell_seconds=0 if btype is BehaviorType.PURCHASE else 12))
    return events


class TestClickFiltered:
    def test_keeps_only_clicks_and_mirrors_settings(self):
        rng = np.random.default_rng(2)
        events_by_user = {u: mixed_history(u, rng) for u in (1, 2, 3)}
        store = BehaviorStore(key_field="item_id", member_limit=3,
                              group_limit=4, retain=6)
        for user, events in events_by_user.items():
            store.add_history(user, events)
        clicks = click_filtered(events_by_user, store)
        assert (clicks.key_field, clicks.member_limit, clicks.group_limit,
                clicks.retain) == (store.key_field, store.member_limit,
                                   store.group_limit, store.retain)
        for user, events in events_by_user.items():
            expected = sum(e.behavior_type is BehaviorType.CLICK
                           for e in events)
            assert clicks.total_behaviors(user) == expected


class TestLadder:
    def test_runs_all_variants_and_reports(self, tmp_path):
        rng = np.random.default_rng(7)
        events_by_user = {u: mixed_history(u, rng) for u in range(1, 7)}
        store = BehaviorStore(key_field="item_id", member_limit=3,
                              group_limit=4)
        for user, events in events_by_user.items():
            store.add_history(user, events)
        click_store = click_filtered(events_by_user, store)
        instances = [decision(1, user_id=u, label=int(rng.integers(0, 2)),
                              offset=u) for u in range(1, 7)]
        cards = scan_cardinalities(store, instances)
        schema = EmbeddingSchema(d=2, key_field="item_id", cards=cards)
        config = ModelConfig(d=2, heads=2, key_field="item_id",
                             member_limit=3, group_limit=4,
                             subsequence_limit=3, recent_limit=4,
                             mlp_widths=(4, 1), epochs=1, batch_size=4)
        log = tmp_path / "ladder.jsonl"
        rows = ablation_ladder(config, schema, store, click_store,
                               instances[:4], instances[4:],
                               seeds=(0, 1), log_path=str(log))
        assert [r["variant"] for r in rows] == list(LADDER)
        for row in rows:
            assert len(row["auc_per_seed"]) == 2
            assert row["auc_sd"] >= 0.0
            assert np.isfinite(row["logloss_mean"])
        logged = [json.loads(l) for l in log.read_text().splitlines()]
        assert logged == rows

    def test_needs_two_seeds(self):
        with pytest.raises(TrainingError, match="seeds"):
            ablation_ladder(ModelConfig(), None, None, None, [], [],
                            seeds=(0,))

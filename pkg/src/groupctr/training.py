"""Training loop, evaluation, time-based splitting, and the ablation ladder."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import grids
from .featurize import FeatureSet, PreparedInstances
from .features import EmbeddingSchema
from .metrics import MetricReport, compute_auc, log_loss
from .model import Model, ModelConfig, VARIANTS
from .optim import OptimizerError, adam_step
from .records import Instance
from .store import BehaviorStore

SECONDS_PER_DAY = 86400


class TrainingError(Exception):
    pass


def time_split(instances: list[Instance], test_fraction: float = 0.2
               ) -> tuple[list[Instance], list[Instance]]:
    """Split on a day boundary so no day straddles train and test.

    The boundary is the earliest day that keeps the test share at or below
    the requested fraction; within each side the original order is kept.
    """
    if not 0.0 < test_fraction < 1.0:
        raise TrainingError(f"test fraction {test_fraction} out of (0, 1)")
    if not instances:
        raise TrainingError("nothing to split")
    days = sorted({i.decision_timestamp // SECONDS_PER_DAY for i in instances})
    total = len(instances)
    boundary = days[-1] + 1
    running = 0
    for day in reversed(days):
        count = sum(1 for i in instances
                    if i.decision_timestamp // SECONDS_PER_DAY == day)
        if running + count > total * test_fraction:
            break
        running += count
        boundary = day
    train = [i for i in instances
             if i.decision_timestamp // SECONDS_PER_DAY < boundary]
    test = [i for i in instances
            if i.decision_timestamp // SECONDS_PER_DAY >= boundary]
    if not train or not test:
        raise TrainingError(
            f"degenerate split at day {boundary}: {len(train)} train, "
            f"{len(test)} test; need more than one day of decisions")
    return train, test


def evaluate(model: Model, features: FeatureSet, prepared: PreparedInstances,
             batch_size: int = 512) -> MetricReport:
    flags = model.flags
    probs = np.empty(prepared.count)
    for start in range(0, prepared.count, batch_size):
        span = np.arange(start, min(start + batch_size, prepared.count))
        batch = features.batch(prepared, span,
                               with_groups=flags.use_groups,
                               with_subseq=flags.use_subseq,
                               with_recent=flags.use_recent)
        probs[span] = model.predict_batch(batch)
    labels = prepared.labels.astype(np.int64)
    return MetricReport(count=prepared.count,
                        positives=int(labels.sum()),
                        auc=compute_auc(probs, labels),
                        logloss=log_loss(probs, labels))


@dataclass
class TrainResult:
    epochs: list[dict] = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""

    @property
    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}


def train(model: Model, features: FeatureSet,
          train_instances: list[Instance], test_instances: list[Instance],
          log_path: str | None = None,
          checkpoint_stem: str | None = None) -> TrainResult:
    """Mini-batch training with per-epoch held-out metrics.

    Shuffling is driven by the model seed, so a rerun with the same inputs
    walks the identical batch sequence.  If a step produces a non-finite
    gradient the optimizer refuses it; training stops there with the last
    good parameters still in place.
    """
    flags = model.flags
    prep_train = features.prepare(train_instances,
                                  with_recent=flags.use_recent)
    prep_test = features.prepare(test_instances, with_recent=flags.use_recent)
    return train_prepared(model, features, prep_train, prep_test,
                          log_path=log_path, checkpoint_stem=checkpoint_stem)


def train_prepared(model: Model, features: FeatureSet,
                   prep_train: PreparedInstances,
                   prep_test: PreparedInstances,
                   log_path: str | None = None,
                   checkpoint_stem: str | None = None) -> TrainResult:
    """train() against instances someone already ran through prepare().

    Preparation is variant-agnostic as long as it was done with the recent
    tail included, so the ablation ladder shares one prepared pair across
    every variant and seed instead of redoing per-instance extraction."""
    config = model.config
    flags = model.flags
    rng = np.random.default_rng(config.seed)
    params = list(model.params)
    result = TrainResult()
    started = time.monotonic()
    log = open(log_path, "a") if log_path else None
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(prep_train.count)
            loss_sum = 0.0
            for start in range(0, prep_train.count, config.batch_size):
                chunk = order[start:start + config.batch_size]
                batch = features.batch(prep_train, chunk,
                                       with_groups=flags.use_groups,
                                       with_subseq=flags.use_subseq,
                                       with_recent=flags.use_recent)
                model.params.zero_gradients()
                loss, _ = model.loss_graph(batch)
                grids.gradients(loss)
                try:
                    adam_step(params, lr=config.learning_rate)
                except OptimizerError as bad:
                    result.aborted = True
                    result.abort_reason = str(bad)
                    return result
                loss_sum += loss.item() * chunk.size
            report = evaluate(model, features, prep_test,
                              max(512, config.batch_size))
            record = {
                "epoch": epoch,
                "train_logloss": loss_sum / prep_train.count,
                "test_auc": report.auc,
                "test_logloss": report.logloss,
                "wall_seconds": round(time.monotonic() - started, 3),
            }
            result.epochs.append(record)
            if log:
                log.write(json.dumps(record) + "\n")
                log.flush()
            if checkpoint_stem:
                model.save(checkpoint_stem)
    finally:
        if log:
            log.close()
    return result


# -- ablation ----------------------------------------------------------------

LADDER = ("simple", "stats", "agg", "full", "click_only", "truncated")


def ablation_ladder(base_config: ModelConfig, schema: EmbeddingSchema,
                    store: BehaviorStore, click_store: BehaviorStore,
                    train_instances: list[Instance],
                    test_instances: list[Instance],
                    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
                    log_path: str | None = None) -> list[dict]:
    """Train every ladder variant over several seeds on the same split.

    Feature pipelines are shared wherever the variant allows: every row but
    click_only reads the full store, and the per-user group encodings are
    cached inside each FeatureSet, so repeated seeds pay only for training.
    """
    if len(seeds) < 2:
        raise TrainingError("the ladder needs at least two seeds for a spread")
    full_features = FeatureSet(schema, store, base_config.subsequence_limit,
                               base_config.recent_limit)
    click_features = FeatureSet(schema, click_store,
                                base_config.subsequence_limit,
                                base_config.recent_limit)
    # prepared with the recent tail, which supersets what any variant reads
    full_prep = (full_features.prepare(train_instances, with_recent=True),
                 full_features.prepare(test_instances, with_recent=True))
    click_prep = (click_features.prepare(train_instances, with_recent=True),
                  click_features.prepare(test_instances, with_recent=True))
    rows = []
    log = open(log_path, "a") if log_path else None
    try:
        for variant in LADDER:
            features, preps = (click_features, click_prep) \
                if variant == "click_only" else (full_features, full_prep)
            aucs, loglosses = [], []
            for seed in seeds:
                config = replace(base_config, variant=variant, seed=seed)
                model = Model(config, schema)
                outcome = train_prepared(model, features, preps[0], preps[1])
                if outcome.aborted:
                    raise TrainingError(
                        f"{variant} seed {seed} aborted: {outcome.abort_reason}")
                aucs.append(outcome.final["test_auc"])
                loglosses.append(outcome.final["test_logloss"])
            row = {
                "variant": variant,
                "seeds": list(seeds),
                "auc_per_seed": aucs,
                "auc_mean": float(np.mean(aucs)),
                "auc_sd": float(np.std(aucs, ddof=1)),
                "logloss_mean": float(np.mean(loglosses)),
            }
            rows.append(row)
            if log:
                log.write(json.dumps(row) + "\n")
                log.flush()
    finally:
        if log:
            log.close()
    return rows


def click_filtered(events_by_user: dict[int, list], store: BehaviorStore
                   ) -> BehaviorStore:
    """A parallel store holding only click events, mirroring store settings."""
    from .records import BehaviorType
    filtered = BehaviorStore(key_field=store.key_field,
                             member_limit=store.member_limit,
                             group_limit=store.group_limit,
                             retain=store.retain)
    for user_id, events in events_by_user.items():
        kept = [e for e in events if e.behavior_type is BehaviorType.CLICK]
        filtered.add_history(user_id, kept)
    return filtered

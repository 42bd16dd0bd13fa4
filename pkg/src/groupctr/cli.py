"""Command-line front end.

One process runs one command.  Every command that produces artifacts takes
--out and drops a manifest.json next to them recording what ran, the exact
configuration, the inputs, and a content hash per output, so two runs can be
compared by their manifests alone.

Exit codes: 0 success, 1 the inputs or artifacts failed validation, 2 the
invocation itself was broken (bad flag, bad config, missing file).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict

from . import synth
from .cache import (CacheError, check_group_cache, load_group_cache,
                    save_group_cache)
from .checkpoint import CheckpointError
from .features import CardinalitySpec, EmbeddingSchema, FeatureError
from .featurize import FeatureSet, scan_cardinalities
from .grids import GridError
from .metrics import MetricsError
from .model import Model, ModelConfig, ModelError, config_from_mapping
from .records import (BehaviorType, CandidateItem, DecisionContext,
                      EventLogReader, Instance, MalformedLinesError,
                      RecordError, event_to_obj, read_instances,
                      write_instances)
from .store import BehaviorStore, StoreError, store_from_event_log
from .synth import SynthError
from .training import (TrainingError, ablation_ladder, evaluate, time_split,
                       train)

VALIDATION_ERRORS = (RecordError, MalformedLinesError, CacheError,
                     CheckpointError, TrainingError, MetricsError)
USAGE_ERRORS = (SynthError, ModelError, StoreError, FeatureError, GridError,
                OSError, ValueError)


# -- manifests ---------------------------------------------------------------

def _file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()[:16]


def _config_hash(mapping: dict) -> str:
    flat = json.dumps({k: str(v) for k, v in sorted(mapping.items())})
    return hashlib.sha256(flat.encode()).hexdigest()[:16]


def write_manifest(out_dir: str, command: str, config: dict, seed,
                   inputs: list[str], outputs: list[str],
                   started: float) -> str:
    manifest = {
        "command": command,
        "config_hash": _config_hash(config),
        "config": {k: str(v) for k, v in sorted(config.items())},
        "seed": seed,
        "inputs": [os.path.abspath(p) for p in inputs],
        "outputs": {os.path.basename(p): _file_hash(p) for p in outputs},
        "wall_seconds": round(time.monotonic() - started, 3),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _status(text: str) -> None:
    print(text, file=sys.stderr)


# -- config plumbing ---------------------------------------------------------

def _resolved_config(path: str | None, sets: list[str],
                     seed: int | None) -> dict[str, str]:
    """File values first, then --set pairs, then --seed on top."""
    raw = synth.read_kv_file(path) if path else {}
    for item in sets or []:
        key, eq, value = item.partition("=")
        if not eq or not key:
            raise ValueError(f"--set wants key=value, got {item!r}")
        raw[key] = value
    if seed is not None:
        raw["seed"] = str(seed)
    return raw


def _store_retain(config: ModelConfig) -> int:
    # serving tails must hold enough events for the longest consumer
    return max(config.member_limit, config.subsequence_limit,
               config.recent_limit)


def _click_events(reader):
    for user_id, event in reader:
        if event.behavior_type is BehaviorType.CLICK:
            yield user_id, event


def _build_store(events_path: str, config: ModelConfig,
                 clicks_only: bool = False) -> BehaviorStore:
    reader = EventLogReader(events_path)
    source = _click_events(reader) if clicks_only else reader
    store, report = store_from_event_log(
        source, config.key_field, config.member_limit, config.group_limit,
        retain=_store_retain(config))
    if report.rejected:
        _status(f"skipped {len(report.rejected)} out-of-order events")
    return store


def _merge_cards(a: CardinalitySpec, b: CardinalitySpec) -> CardinalitySpec:
    return CardinalitySpec(*(max(x, y) for x, y in
                             zip(asdict(a).values(), asdict(b).values())))


def _data_world(data_dir: str, config: ModelConfig):
    """Store, schema, features, instances for one dataset directory.

    The store is rebuilt from the event log deterministically, so a schema
    built here matches the one the training run hashed into its checkpoint.
    click_only reads the same log through a click filter.
    """
    events_path = os.path.join(data_dir, "events.jsonl")
    instances = read_instances(os.path.join(data_dir, "instances.jsonl"))
    store = _build_store(events_path, config,
                         clicks_only=config.variant == "click_only")
    cards = scan_cardinalities(store, instances)
    schema = EmbeddingSchema(config.d, config.key_field, cards)
    features = FeatureSet(schema, store, config.subsequence_limit,
                          config.recent_limit)
    return store, schema, features, instances


def _save_model_meta(path: str, config: ModelConfig,
                     cards: CardinalitySpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"config": config.as_dict(), "cards": asdict(cards)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_model(ckpt_stem: str) -> Model:
    """Rebuild a model from <stem>.json + checkpoint weights."""
    with open(ckpt_stem + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    raw = dict(meta["config"])
    raw["mlp_widths"] = tuple(raw["mlp_widths"])
    config = ModelConfig(**raw)
    config.check()
    schema = EmbeddingSchema(config.d, config.key_field,
                             CardinalitySpec(**meta["cards"]))
    model = Model(config, schema)
    model.load(ckpt_stem)
    return model


# -- commands ----------------------------------------------------------------

def cmd_gen(args) -> int:
    started = time.monotonic()
    mapping = _resolved_config(args.config, args.set, args.seed)
    config = synth.gen_config_from_mapping(mapping)
    out = _out_dir(args)
    events = os.path.join(out, "events.jsonl")
    instances_path = os.path.join(out, "instances.jsonl")
    truth_path = os.path.join(out, "truth.jsonl")
    conf_path = os.path.join(out, "gen.conf")

    dataset = synth.generate_dataset(config, events_path=events,
                                     progress=_status)
    write_instances(instances_path, dataset.instances)
    synth.save_truth(truth_path, dataset.truth)
    synth.write_kv_file(conf_path, config.as_dict())

    labels = [inst.label for inst in dataset.instances]
    write_manifest(out, "gen", config.as_dict(), config.seed,
                   [args.config] if args.config else [],
                   [events, instances_path, truth_path, conf_path], started)
    _emit({"users": config.n_users, "instances": len(labels),
           "label_rate": round(sum(labels) / len(labels), 4)})
    return 0


def cmd_store_build(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    reader = EventLogReader(args.events)
    store, report = store_from_event_log(reader, args.key, args.member_limit,
                                         args.group_limit, retain=args.retain)
    path = os.path.join(out, "store.json")
    store.save(path)
    settings = {"key": args.key, "member_limit": args.member_limit,
                "group_limit": args.group_limit, "retain": store.retain}
    write_manifest(out, "store-build", settings, None, [args.events], [path],
                   started)
    _emit({"users": store.user_count, "applied": report.applied,
           "rejected": len(report.rejected)})
    return 0


def cmd_store_update(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    store = BehaviorStore.load(args.snapshot)
    report = store.streaming_update(EventLogReader(args.events))
    path = os.path.join(out, "store.json")
    store.save(path)
    write_manifest(out, "store-update", {"key": store.key_field}, None,
                   [args.snapshot, args.events], [path], started)
    _emit({"users": store.user_count, "applied": report.applied,
           "rejected": len(report.rejected)})
    return 0


def _parse_candidate(text: str) -> CandidateItem:
    obj = json.loads(text)
    if not isinstance(obj, dict):
        raise RecordError("candidate must be a JSON object")
    try:
        return CandidateItem(item_id=int(obj["item_id"]),
                             category_id=int(obj["category_id"]),
                             price_cents=int(obj.get("price_cents", 0)),
                             location_cell=int(obj.get("location_cell", 0)))
    except KeyError as missing:
        raise RecordError(f"candidate is missing {missing}") from None


def _stats_obj(stats) -> dict:
    return {"total_behaviors": stats.total_behaviors,
            "per_type_counts": list(stats.per_type_counts),
            "distinct_behavior_types": stats.distinct_behavior_types,
            "avg_dwell_seconds": stats.avg_dwell_seconds,
            "avg_purchase_cents": stats.avg_purchase_cents,
            "distinct_item_count": stats.distinct_item_count,
            "total_item_count": stats.total_item_count}


def cmd_store_query(args) -> int:
    started = time.monotonic()
    store = BehaviorStore.load(args.snapshot)
    if not store.has_user(args.user):
        _status(f"user {args.user} is not in the snapshot")
        return 1
    if args.candidate:
        candidate = _parse_candidate(args.candidate)
        limit = args.limit if args.limit else store.retain
        events = store.candidate_subsequence(args.user, candidate,
                                             limit=limit)
        result = {"user_id": args.user,
                  "candidate_key": candidate.item_id
                  if store.key_field == "item_id" else candidate.category_id,
                  "events": [event_to_obj(args.user, e) for e in events]}
    else:
        grouped = store.grouped(args.user)
        result = {
            "user_id": grouped.user_id,
            "key_field": grouped.key_field,
            "total_behaviors": grouped.total_behaviors,
            "dropped_groups": grouped.dropped_groups,
            "dropped_behaviors": grouped.dropped_behaviors,
            "groups": [{
                "interest_key": g.interest_key,
                "item_id": g.item_id,
                "category_id": g.category_id,
                "recent_price_cents": g.recent_price_cents,
                "last_active": g.last_active,
                "member_count": len(g.members),
                "stats": _stats_obj(g.stats),
            } for g in grouped.groups],
        }
    _emit(result)
    if args.out:
        out = _out_dir(args)
        path = os.path.join(out, "query.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(out, "store-query", {"user": args.user}, None,
                       [args.snapshot], [path], started)
    return 0


def cmd_train(args) -> int:
    started = time.monotonic()
    mapping = _resolved_config(args.config, args.set, args.seed)
    config = config_from_mapping(mapping)
    out = _out_dir(args)
    store, schema, features, instances = _data_world(args.data, config)
    train_part, test_part = time_split(instances, args.test_fraction)
    _status(f"{len(train_part)} train / {len(test_part)} test instances, "
            f"{store.user_count} users")

    model = Model(config, schema)
    stem = os.path.join(out, "ckpt")
    log_path = os.path.join(out, "train_log.jsonl")
    result = train(model, features, train_part, test_part,
                   log_path=log_path, checkpoint_stem=stem)
    if result.aborted:
        _status(f"training aborted: {result.abort_reason}")
        return 1
    _save_model_meta(stem + ".json", config, schema.cards)
    metrics_path = os.path.join(out, "metrics.json")
    summary = {"train_count": len(train_part), "test_count": len(test_part),
               "epochs": result.epochs, "final": result.final}
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "train", config.as_dict(), config.seed,
                   [args.data] + ([args.config] if args.config else []),
                   [stem + ".manifest", stem + ".bin", stem + ".json",
                    log_path, metrics_path], started)
    _emit(result.final)
    return 0


def cmd_eval(args) -> int:
    started = time.monotonic()
    model = _load_model(args.ckpt)
    config = model.config
    store, schema, features, instances = _data_world(args.data, config)
    if schema.hash() != model.schema.hash():
        raise CheckpointError(
            "data directory does not reproduce the checkpoint's schema; "
            "evaluate against the data the model was trained on")
    if args.split == "all":
        part = instances
    else:
        train_part, test_part = time_split(instances, args.test_fraction)
        part = train_part if args.split == "train" else test_part
    prepared = features.prepare(part, with_recent=model.flags.use_recent)
    report = evaluate(model, features, prepared, config.batch_size)
    result = {"split": args.split, **report.as_dict()}
    _emit(result)
    if args.out:
        out = _out_dir(args)
        path = os.path.join(out, "metrics.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(out, "eval", config.as_dict(), config.seed,
                       [args.data, args.ckpt + ".manifest"], [path], started)
    return 0


def cmd_ablate(args) -> int:
    started = time.monotonic()
    mapping = _resolved_config(args.config, args.set, args.seed)
    config = config_from_mapping(mapping)
    out = _out_dir(args)
    events_path = os.path.join(args.data, "events.jsonl")
    instances = read_instances(os.path.join(args.data, "instances.jsonl"))
    store = _build_store(events_path, config)
    click_store = _build_store(events_path, config, clicks_only=True)
    cards = _merge_cards(scan_cardinalities(store, instances),
                         scan_cardinalities(click_store, instances))
    schema = EmbeddingSchema(config.d, config.key_field, cards)
    train_part, test_part = time_split(instances, args.test_fraction)
    _status(f"{len(train_part)} train / {len(test_part)} test instances, "
            f"seeds 0..{args.seeds - 1}")

    log_path = os.path.join(out, "ablation_log.jsonl")
    rows = ablation_ladder(config, schema, store, click_store, train_part,
                           test_part, seeds=tuple(range(args.seeds)),
                           log_path=log_path)
    table_path = os.path.join(out, "ablation.json")
    with open(table_path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "ablate", config.as_dict(), None,
                   [args.data] + ([args.config] if args.config else []),
                   [table_path, log_path], started)
    for row in rows:
        _status(f"{row['variant']:>10}: auc {row['auc_mean']:.4f} "
                f"+- {row['auc_sd']:.4f}")
    _emit(rows)
    return 0


def cmd_cache_build(args) -> int:
    started = time.monotonic()
    model = _load_model(args.ckpt)
    store = BehaviorStore.load(args.snapshot)
    features = FeatureSet(model.schema, store,
                          model.config.subsequence_limit,
                          model.config.recent_limit)
    out = _out_dir(args)
    stem = os.path.join(out, "group_cache")
    summary = save_group_cache(stem, model, features, store.user_ids())
    write_manifest(out, "cache-build", model.config.as_dict(),
                   model.config.seed, [args.snapshot, args.ckpt + ".manifest"],
                   [stem + ".manifest", stem + ".bin"], started)
    _emit(summary)
    return 0


def _probe_instances(store: BehaviorStore) -> list[Instance]:
    """One decision per user, aimed at the user's most recent interest.

    Used when cache-check is run without a decision log: the probe candidate
    is taken from the newest retained behavior, so the interest computation
    runs over real group rows rather than cold-start nulls.
    """
    probes = []
    for user_id in store.user_ids():
        grouped = store.grouped(user_id)
        if grouped.groups:
            newest = max(grouped.groups, key=lambda g: g.last_active)
            event = newest.members[-1]
            candidate = CandidateItem(item_id=event.item_id,
                                      category_id=event.category_id,
                                      price_cents=event.price_cents,
                                      location_cell=event.location_cell)
        else:
            candidate = CandidateItem(item_id=1, category_id=1,
                                      price_cents=0, location_cell=0)
        probes.append(Instance(
            user_id=user_id, candidate=candidate,
            context=DecisionContext(hour_of_week=0, surface_id=1),
            decision_timestamp=store.reference_ts + 1, label=0))
    return probes


def cmd_cache_check(args) -> int:
    started = time.monotonic()
    model = _load_model(args.ckpt)
    store = BehaviorStore.load(args.snapshot)
    features = FeatureSet(model.schema, store,
                          model.config.subsequence_limit,
                          model.config.recent_limit)
    instances = read_instances(args.instances) if args.instances \
        else _probe_instances(store)
    report = check_group_cache(args.cache, model, features, instances)
    result = report.as_dict()
    _emit(result)
    if args.out:
        out = _out_dir(args)
        path = os.path.join(out, "cache_check.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(out, "cache-check", model.config.as_dict(),
                       model.config.seed, [args.snapshot, args.cache], [path],
                       started)
    return 0 if report.ok else 1


# -- wiring ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groupctr",
        description="Grouped lifelong-behavior CTR models, end to end.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True, config=True):
        if config:
            p.add_argument("--config", help="flat key-value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config entry (repeatable)")
            p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", required=out_required,
                       help="directory for artifacts and the run manifest")

    p = sub.add_parser("gen", help="generate a labeled synthetic dataset")
    common(p)
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("store-build", help="build a store from an event log")
    p.add_argument("--events", required=True)
    p.add_argument("--key", default="item_id",
                   choices=("item_id", "category_id"))
    p.add_argument("--member-limit", type=int, default=16)
    p.add_argument("--group-limit", type=int, default=256)
    p.add_argument("--retain", type=int, default=None,
                   help="events kept per group (default covers member-limit)")
    common(p, config=False)
    p.set_defaults(handler=cmd_store_build)

    p = sub.add_parser("store-update",
                       help="stream another event batch into a snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--events", required=True)
    common(p, config=False)
    p.set_defaults(handler=cmd_store_update)

    p = sub.add_parser("store-query", help="inspect one user's groups")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--candidate", metavar="JSON",
                   help="item JSON; returns the candidate subsequence")
    p.add_argument("--limit", type=int, default=None,
                   help="subsequence length (default: store retention)")
    common(p, out_required=False, config=False)
    p.set_defaults(handler=cmd_store_query)

    p = sub.add_parser("train", help="train one model on a dataset directory")
    p.add_argument("--data", required=True,
                   help="directory holding events.jsonl and instances.jsonl")
    p.add_argument("--test-fraction", type=float, default=0.2)
    common(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint stem from train")
    p.add_argument("--split", default="test",
                   choices=("test", "train", "all"))
    p.add_argument("--test-fraction", type=float, default=0.2)
    common(p, out_required=False, config=False)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="run the variant ladder over seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=5,
                   help="number of seeds, used as 0..N-1")
    p.add_argument("--test-fraction", type=float, default=0.2)
    common(p)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("cache-build",
                       help="precompute group rows for every user")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--ckpt", required=True)
    common(p, config=False)
    p.set_defaults(handler=cmd_cache_build)

    p = sub.add_parser("cache-check",
                       help="verify a cache against fresh computation")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cache", required=True, help="cache stem to verify")
    p.add_argument("--instances", help="decision log to probe with")
    common(p, out_required=False, config=False)
    p.set_defaults(handler=cmd_cache_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except VALIDATION_ERRORS as err:
        _status(f"error: {err}")
        return 1
    except USAGE_ERRORS as err:
        _status(f"error: {err}")
        return 2


if __name__ == "__main__":
    sys.exit(main())

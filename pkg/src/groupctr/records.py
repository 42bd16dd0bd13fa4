"""Typed behavior and decision records plus their JSON-lines wire formats.

Two kinds of files move through the pipeline: event logs (one behavior per
line) and instance files (one labeled decision per line).  Both are plain
JSON-lines with fixed keys.  Parsers count malformed lines instead of dying
on the first one; a file whose malformed share exceeds 1% is rejected as a
whole, since at that point the producer is broken rather than unlucky.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterable, Iterator


MALFORMED_LIMIT = 0.01


class RecordError(Exception):
    """A record or file violates the data contract."""


class MalformedLinesError(RecordError):
    """Too large a share of a file failed to parse."""


class BehaviorType(enum.Enum):
    CLICK = "click"
    ADD_TO_CART = "add_to_cart"
    ADD_TO_FAVORITE = "add_to_favorite"
    BROWSE_DISHES = "browse_dishes"
    VIEW_COMMENTS = "view_comments"
    PURCHASE = "purchase"

    @property
    def index(self) -> int:
        """Stable 1-based code; 0 stays reserved for out-of-vocabulary."""
        return _TYPE_ORDER[self]


_TYPE_ORDER = {t: i + 1 for i, t in enumerate(BehaviorType)}
BEHAVIOR_TYPE_COUNT = len(BehaviorType)


@dataclass(frozen=True, slots=True)
class BehaviorEvent:
    item_id: int
    category_id: int
    price_cents: int
    timestamp: int
    location_cell: int
    behavior_type: BehaviorType
    dwell_seconds: int

    def check(self) -> None:
        if self.timestamp <= 0:
            raise RecordError(f"timestamp must be positive, got {self.timestamp}")
        if self.price_cents < 0:
            raise RecordError(f"price_cents must be nonnegative, got {self.price_cents}")
        if self.price_cents > 0 and self.behavior_type is not BehaviorType.PURCHASE:
            raise RecordError(
                f"price_cents set on non-purchase {self.behavior_type.value}")
        if self.dwell_seconds < 0:
            raise RecordError(f"dwell_seconds must be nonnegative, got {self.dwell_seconds}")
        for field in ("item_id", "category_id", "location_cell"):
            if getattr(self, field) < 0:
                raise RecordError(f"{field} must be nonnegative")


@dataclass(frozen=True, slots=True)
class CandidateItem:
    item_id: int
    category_id: int
    price_cents: int
    location_cell: int


@dataclass(frozen=True, slots=True)
class DecisionContext:
    hour_of_week: int
    surface_id: int


@dataclass(frozen=True, slots=True)
class Instance:
    user_id: int
    candidate: CandidateItem
    context: DecisionContext
    decision_timestamp: int
    label: int


_EVENT_KEYS = {"user_id", "item_id", "category_id", "price_cents", "timestamp",
               "location_cell", "behavior_type", "dwell_seconds"}
_INSTANCE_KEYS = {"user_id", "candidate", "context", "decision_timestamp", "label"}
_CANDIDATE_KEYS = {"item_id", "category_id", "price_cents", "location_cell"}
_CONTEXT_KEYS = {"hour_of_week", "surface_id"}


def _require_int(obj: dict, key: str) -> int:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise RecordError(f"{key} must be an integer, got {value!r}")
    return value


def event_from_obj(obj: dict) -> tuple[int, BehaviorEvent]:
    if not isinstance(obj, dict) or set(obj) != _EVENT_KEYS:
        raise RecordError(f"event keys must be exactly {sorted(_EVENT_KEYS)}")
    try:
        btype = BehaviorType(obj["behavior_type"])
    except ValueError:
        raise RecordError(f"unknown behavior_type {obj['behavior_type']!r}") from None
    event = BehaviorEvent(
        item_id=_require_int(obj, "item_id"),
        category_id=_require_int(obj, "category_id"),
        price_cents=_require_int(obj, "price_cents"),
        timestamp=_require_int(obj, "timestamp"),
        location_cell=_require_int(obj, "location_cell"),
        behavior_type=btype,
        dwell_seconds=_require_int(obj, "dwell_seconds"),
    )
    event.check()
    return _require_int(obj, "user_id"), event


def event_to_obj(user_id: int, event: BehaviorEvent) -> dict:
    return {
        "user_id": user_id,
        "item_id": event.item_id,
        "category_id": event.category_id,
        "price_cents": event.price_cents,
        "timestamp": event.timestamp,
        "location_cell": event.location_cell,
        "behavior_type": event.behavior_type.value,
        "dwell_seconds": event.dwell_seconds,
    }


def instance_from_obj(obj: dict) -> Instance:
    if not isinstance(obj, dict) or set(obj) != _INSTANCE_KEYS:
        raise RecordError(f"instance keys must be exactly {sorted(_INSTANCE_KEYS)}")
    cand = obj["candidate"]
    ctx = obj["context"]
    if not isinstance(cand, dict) or set(cand) != _CANDIDATE_KEYS:
        raise RecordError(f"candidate keys must be exactly {sorted(_CANDIDATE_KEYS)}")
    if not isinstance(ctx, dict) or set(ctx) != _CONTEXT_KEYS:
        raise RecordError(f"context keys must be exactly {sorted(_CONTEXT_KEYS)}")
    label = _require_int(obj, "label")
    if label not in (0, 1):
        raise RecordError(f"label must be 0 or 1, got {label}")
    hour = _require_int(ctx, "hour_of_week")
    if not 0 <= hour < 168:
        raise RecordError(f"hour_of_week must be in [0, 168), got {hour}")
    ts = _require_int(obj, "decision_timestamp")
    if ts <= 0:
        raise RecordError(f"decision_timestamp must be positive, got {ts}")
    return Instance(
        user_id=_require_int(obj, "user_id"),
        candidate=CandidateItem(
            item_id=_require_int(cand, "item_id"),
            category_id=_require_int(cand, "category_id"),
            price_cents=_require_int(cand, "price_cents"),
            location_cell=_require_int(cand, "location_cell"),
        ),
        context=DecisionContext(hour_of_week=hour,
                                surface_id=_require_int(ctx, "surface_id")),
        decision_timestamp=ts,
        label=label,
    )


def instance_to_obj(instance: Instance) -> dict:
    return {
        "user_id": instance.user_id,
        "candidate": {
            "item_id": instance.candidate.item_id,
            "category_id": instance.candidate.category_id,
            "price_cents": instance.candidate.price_cents,
            "location_cell": instance.candidate.location_cell,
        },
        "context": {
            "hour_of_week": instance.context.hour_of_week,
            "surface_id": instance.context.surface_id,
        },
        "decision_timestamp": instance.decision_timestamp,
        "label": instance.label,
    }


class _JsonLinesReader:
    """Streams parsed lines, counting malformed ones.

    Iteration yields parsed records.  After exhaustion, malformed/total are
    available; the 1% ceiling is enforced at the end so a long healthy tail
    can still absorb early noise, matching how the share is defined.
    """

    def __init__(self, path: str, parse_obj):
        self.path = path
        self.parse_obj = parse_obj
        self.total_lines = 0
        self.malformed_lines = 0
        self.first_errors: list[str] = []

    def __iter__(self) -> Iterator:
        with open(self.path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                self.total_lines += 1
                try:
                    obj = json.loads(line)
                    yield self.parse_obj(obj)
                except (json.JSONDecodeError, RecordError, KeyError, TypeError) as exc:
                    self.malformed_lines += 1
                    if len(self.first_errors) < 5:
                        self.first_errors.append(f"line {lineno}: {exc}")
        if self.total_lines and self.malformed_lines / self.total_lines > MALFORMED_LIMIT:
            raise MalformedLinesError(
                f"{self.path}: {self.malformed_lines}/{self.total_lines} lines "
                f"malformed (limit {MALFORMED_LIMIT:.0%}); first errors: "
                + "; ".join(self.first_errors))


class EventLogReader(_JsonLinesReader):
    def __init__(self, path: str):
        super().__init__(path, event_from_obj)


class InstanceReader(_JsonLinesReader):
    def __init__(self, path: str):
        super().__init__(path, instance_from_obj)


def read_instances(path: str) -> list[Instance]:
    reader = InstanceReader(path)
    return list(reader)


def write_event_log(path: str, rows: Iterable[tuple[int, BehaviorEvent]]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for user_id, event in rows:
            fh.write(json.dumps(event_to_obj(user_id, event)) + "\n")
            count += 1
    return count


def write_instances(path: str, instances: Iterable[Instance]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for instance in instances:
            fh.write(json.dumps(instance_to_obj(instance)) + "\n")
            count += 1
    return count


def validate_instance(instance: Instance, store) -> list[str]:
    """Collect every contract violation for one instance against a store.

    The store only needs has_user(user_id) and grouped(user_id); unknown
    users are reported (downstream handles them as cold starts) and any
    stored event at or after the decision timestamp is flagged as leakage.
    """
    violations: list[str] = []
    if instance.label not in (0, 1):
        violations.append(f"label out of range: {instance.label}")
    if instance.decision_timestamp <= 0:
        violations.append(f"decision_timestamp not positive: {instance.decision_timestamp}")
    if not 0 <= instance.context.hour_of_week < 168:
        violations.append(f"hour_of_week out of range: {instance.context.hour_of_week}")
    if instance.candidate.price_cents < 0:
        violations.append(f"candidate price negative: {instance.candidate.price_cents}")
    if not store.has_user(instance.user_id):
        violations.append(f"unknown user: {instance.user_id}")
    else:
        grouped = store.grouped(instance.user_id)
        latest = max((g.last_active for g in grouped.groups), default=0)
        if latest >= instance.decision_timestamp:
            violations.append(
                f"leakage: stored event at {latest} is not before the "
                f"decision at {instance.decision_timestamp}")
    return violations

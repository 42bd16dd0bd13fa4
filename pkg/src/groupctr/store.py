"""Lifelong behavior store: a per-user index of interest groups.

Behaviors are keyed by item_id (or category_id) into interest groups.  The
index retains exact statistics over everything it ever ingested, while the
member lists it keeps per group are capped at `retain` recent events, which
is all any consumer reads.  Serving truncates further: a grouped view keeps
the B most recent members of each of the G most recently active groups, and
the candidate subsequence keeps the most recent `limit` events of one group.

Two routes build the same answer.  group_sequence() is the one-shot batch
grouping over a full chronological history; BehaviorStore applies per-event
streaming updates.  Their results must be field-identical for any partition
of a history into ordered batches, so neither may borrow the other's
arithmetic: the one-shot route recounts from scratch via compute_stats, the
streaming route maintains running integer sums.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .records import BehaviorEvent, BehaviorType, CandidateItem, RecordError

KEY_FIELDS = ("item_id", "category_id")
DEFAULT_SUBSEQUENCE_LIMIT = 50

SNAPSHOT_MAGIC = "behavior-store v1"
_TYPE_BY_INDEX = {t.index: t for t in BehaviorType}


class StoreError(Exception):
    """The store was asked for something its contract forbids."""


def event_key(event: BehaviorEvent, key_field: str) -> int:
    if key_field == "item_id":
        return event.item_id
    if key_field == "category_id":
        return event.category_id
    raise StoreError(f"key_field must be one of {KEY_FIELDS}, got {key_field!r}")


def candidate_key(candidate: CandidateItem, key_field: str) -> int:
    if key_field == "item_id":
        return candidate.item_id
    if key_field == "category_id":
        return candidate.category_id
    raise StoreError(f"key_field must be one of {KEY_FIELDS}, got {key_field!r}")


@dataclass(frozen=True)
class GroupStats:
    """Exact accumulators over every behavior a group ever absorbed.

    Integer sums rather than means are stored so that streaming updates and
    one-shot recounts agree exactly; the averages are derived views.
    """

    total_behaviors: int
    per_type_counts: tuple[int, ...]
    dwell_seconds_total: int
    purchase_cents_total: int
    item_counts: dict[int, int] = field(compare=True)

    @property
    def distinct_behavior_types(self) -> int:
        return sum(1 for c in self.per_type_counts if c > 0)

    @property
    def avg_dwell_seconds(self) -> float:
        return self.dwell_seconds_total / self.total_behaviors

    @property
    def avg_purchase_cents(self) -> float:
        purchases = self.per_type_counts[BehaviorType.PURCHASE.index - 1]
        if purchases == 0:
            return -1.0
        return self.purchase_cents_total / purchases

    @property
    def distinct_item_count(self) -> int:
        return len(self.item_counts)

    @property
    def total_item_count(self) -> int:
        return sum(self.item_counts.values())


def compute_stats(members: Iterable[BehaviorEvent]) -> GroupStats:
    """Full recount over a member list; the oracle route for streaming sums."""
    type_counts = [0] * len(BehaviorType)
    dwell_total = 0
    purchase_total = 0
    item_counts: dict[int, int] = {}
    total = 0
    for event in members:
        total += 1
        type_counts[event.behavior_type.index - 1] += 1
        dwell_total += event.dwell_seconds
        if event.behavior_type is BehaviorType.PURCHASE:
            purchase_total += event.price_cents
        item_counts[event.item_id] = item_counts.get(event.item_id, 0) + 1
    if total == 0:
        raise StoreError("compute_stats: a group cannot be empty")
    return GroupStats(total, tuple(type_counts), dwell_total, purchase_total,
                      item_counts)


@dataclass(frozen=True)
class InterestGroup:
    """Serving view of one group: identity, recent members, exact stats."""

    interest_key: int
    item_id: int          # 0 when grouping by category (no single item applies)
    category_id: int
    recent_price_cents: int
    members: tuple[BehaviorEvent, ...]
    stats: GroupStats
    last_active: int


@dataclass(frozen=True)
class GroupedSequence:
    user_id: int
    key_field: str
    groups: tuple[InterestGroup, ...]
    total_behaviors: int
    dropped_groups: int
    dropped_behaviors: int


class _GroupState:
    """Mutable streaming accumulator for one (user, key) group."""

    __slots__ = ("key", "members", "last_active", "total", "type_counts",
                 "dwell_total", "purchase_total", "item_counts")

    def __init__(self, key: int, retain: int):
        self.key = key
        self.members: deque[BehaviorEvent] = deque(maxlen=retain)
        self.last_active = 0
        self.total = 0
        self.type_counts = [0] * len(BehaviorType)
        self.dwell_total = 0
        self.purchase_total = 0
        self.item_counts: dict[int, int] = {}

    def absorb(self, event: BehaviorEvent) -> None:
        self.members.append(event)
        self.last_active = event.timestamp
        self.total += 1
        self.type_counts[event.behavior_type.index - 1] += 1
        self.dwell_total += event.dwell_seconds
        if event.behavior_type is BehaviorType.PURCHASE:
            self.purchase_total += event.price_cents
        self.item_counts[event.item_id] = self.item_counts.get(event.item_id, 0) + 1

    def stats(self) -> GroupStats:
        return GroupStats(self.total, tuple(self.type_counts), self.dwell_total,
                          self.purchase_total, dict(self.item_counts))


def _view_group(key_field: str, key: int, members_tail: list[BehaviorEvent],
                stats: GroupStats, last_active: int) -> InterestGroup:
    newest = members_tail[-1]
    if key_field == "item_id":
        item_id, category_id = key, newest.category_id
    else:
        item_id, category_id = 0, key
    # price only rides on purchases, so "recent price" means the price at
    # the latest retained purchase; 0 when the user never bought here
    price = 0
    for event in reversed(members_tail):
        if event.behavior_type is BehaviorType.PURCHASE:
            price = event.price_cents
            break
    return InterestGroup(
        interest_key=key,
        item_id=item_id,
        category_id=category_id,
        recent_price_cents=price,
        members=tuple(members_tail),
        stats=stats,
        last_active=last_active,
    )


def _serve_order(entries: list[tuple[int, int, int]]) -> list[int]:
    """Order group keys for serving: most recently active first, ties to the
    busier group, then lexicographic key.  entries = (key, last_active, total)."""
    ranked = sorted(entries, key=lambda e: (-e[1], -e[2], str(e[0])))
    return [key for key, _, _ in ranked]


def group_sequence(user_id: int, events: list[BehaviorEvent], key_field: str,
                   member_limit: int, group_limit: int) -> GroupedSequence:
    """One-shot grouping of a full chronological history.

    Statistics cover the whole history of each key; only the member lists
    are truncated to the most recent member_limit events.  When more than
    group_limit keys exist, the most recently active ones are kept and the
    dropped share is reported, never silently discarded.
    """
    if key_field not in KEY_FIELDS:
        raise StoreError(f"key_field must be one of {KEY_FIELDS}, got {key_field!r}")
    if member_limit < 1 or group_limit < 1:
        raise StoreError("member_limit and group_limit must be positive")
    previous = 0
    buckets: dict[int, list[BehaviorEvent]] = {}
    for event in events:
        if event.timestamp < previous:
            raise RecordError(
                f"history not chronological: {event.timestamp} after {previous}")
        previous = event.timestamp
        buckets.setdefault(event_key(event, key_field), []).append(event)
    order = _serve_order([(key, evs[-1].timestamp, len(evs))
                          for key, evs in buckets.items()])
    kept = order[:group_limit]
    groups = []
    for key in kept:
        evs = buckets[key]
        groups.append(_view_group(key_field, key, evs[-member_limit:],
                                  compute_stats(evs), evs[-1].timestamp))
    dropped_keys = order[group_limit:]
    dropped_behaviors = sum(len(buckets[key]) for key in dropped_keys)
    return GroupedSequence(
        user_id=user_id,
        key_field=key_field,
        groups=tuple(groups),
        total_behaviors=len(events),
        dropped_groups=len(dropped_keys),
        dropped_behaviors=dropped_behaviors,
    )


@dataclass
class RejectedEvent:
    user_id: int
    event: BehaviorEvent
    reason: str


@dataclass
class UpdateReport:
    applied: int = 0
    rejected: list[RejectedEvent] = field(default_factory=list)


class BehaviorStore:
    """Two-level index user_id -> interest_key -> group state."""

    def __init__(self, key_field: str, member_limit: int, group_limit: int,
                 retain: int | None = None):
        if key_field not in KEY_FIELDS:
            raise StoreError(f"key_field must be one of {KEY_FIELDS}, got {key_field!r}")
        if member_limit < 1 or group_limit < 1:
            raise StoreError("member_limit and group_limit must be positive")
        self.key_field = key_field
        self.member_limit = member_limit
        self.group_limit = group_limit
        self.retain = max(member_limit, DEFAULT_SUBSEQUENCE_LIMIT) if retain is None \
            else max(retain, member_limit)
        self.reference_ts = 0
        self._users: dict[int, dict[int, _GroupState]] = {}
        self._latest: dict[int, int] = {}

    # -- ingest ---------------------------------------------------------

    def streaming_update(self, batch: Iterable[tuple[int, BehaviorEvent]],
                         report: UpdateReport | None = None) -> UpdateReport:
        """Absorb (user_id, event) pairs arriving in per-user time order.

        An event older than the user's newest stored timestamp is rejected
        with a diagnostic and skipped; the rest of the batch proceeds.  The
        result is field-identical to a one-shot rebuild over everything
        accepted so far, for any partition of the history into batches.
        """
        if report is None:
            report = UpdateReport()
        key_field = self.key_field
        for user_id, event in batch:
            latest = self._latest.get(user_id, 0)
            if event.timestamp < latest:
                report.rejected.append(RejectedEvent(
                    user_id, event,
                    f"out of order: {event.timestamp} before stored {latest}"))
                continue
            groups = self._users.get(user_id)
            if groups is None:
                groups = self._users[user_id] = {}
            key = event_key(event, key_field)
            state = groups.get(key)
            if state is None:
                state = groups[key] = _GroupState(key, self.retain)
            state.absorb(event)
            self._latest[user_id] = event.timestamp
            if event.timestamp > self.reference_ts:
                self.reference_ts = event.timestamp
            report.applied += 1
        return report

    def add_history(self, user_id: int, events: Iterable[BehaviorEvent]) -> UpdateReport:
        return self.streaming_update((user_id, e) for e in events)

    # -- queries --------------------------------------------------------

    def has_user(self, user_id: int) -> bool:
        return user_id in self._users

    def user_ids(self) -> list[int]:
        return list(self._users)

    @property
    def user_count(self) -> int:
        return len(self._users)

    def total_behaviors(self, user_id: int) -> int:
        groups = self._users.get(user_id, {})
        return sum(s.total for s in groups.values())

    def latest_timestamp(self, user_id: int) -> int:
        return self._latest.get(user_id, 0)

    def grouped(self, user_id: int) -> GroupedSequence:
        """Serving view: top-G groups by recency, last-B members each."""
        states = self._users.get(user_id, {})
        order = _serve_order([(s.key, s.last_active, s.total)
                              for s in states.values()])
        kept = order[:self.group_limit]
        groups = []
        for key in kept:
            state = states[key]
            tail = list(state.members)[-self.member_limit:]
            groups.append(_view_group(self.key_field, key, tail, state.stats(),
                                      state.last_active))
        dropped_keys = order[self.group_limit:]
        dropped_behaviors = sum(states[key].total for key in dropped_keys)
        return GroupedSequence(
            user_id=user_id,
            key_field=self.key_field,
            groups=tuple(groups),
            total_behaviors=sum(s.total for s in states.values()),
            dropped_groups=len(dropped_keys),
            dropped_behaviors=dropped_behaviors,
        )

    def candidate_subsequence(self, user_id: int, candidate: CandidateItem,
                              limit: int = DEFAULT_SUBSEQUENCE_LIMIT
                              ) -> list[BehaviorEvent]:
        """Most recent events sharing the candidate's key, oldest first.

        Served from the full index, not the truncated view, so a stale group
        still answers.  Empty when the user or the key is unknown.
        """
        if limit < 1:
            raise StoreError("subsequence limit must be positive")
        if limit > self.retain:
            raise StoreError(
                f"subsequence limit {limit} exceeds store retention {self.retain}")
        states = self._users.get(user_id)
        if not states:
            return []
        state = states.get(candidate_key(candidate, self.key_field))
        if state is None:
            return []
        return list(state.members)[-limit:]

    # -- snapshots ------------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            manifest = {
                "format": SNAPSHOT_MAGIC,
                "key_field": self.key_field,
                "member_limit": self.member_limit,
                "group_limit": self.group_limit,
                "retain": self.retain,
                "reference_ts": self.reference_ts,
                "user_count": len(self._users),
            }
            fh.write(json.dumps(manifest) + "\n")
            for user_id, states in self._users.items():
                record = {
                    "user_id": user_id,
                    "latest": self._latest[user_id],
                    "groups": [self._encode_group(s) for s in states.values()],
                }
                fh.write(json.dumps(record) + "\n")

    @staticmethod
    def _encode_group(state: _GroupState) -> dict:
        return {
            "key": state.key,
            "last_active": state.last_active,
            "total": state.total,
            "type_counts": state.type_counts,
            "dwell_total": state.dwell_total,
            "purchase_total": state.purchase_total,
            "item_counts": [[k, v] for k, v in sorted(state.item_counts.items())],
            "members": [[e.item_id, e.category_id, e.price_cents, e.timestamp,
                         e.location_cell, e.behavior_type.index, e.dwell_seconds]
                        for e in state.members],
        }

    @classmethod
    def load(cls, path: str) -> "BehaviorStore":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline()
            try:
                manifest = json.loads(header)
            except json.JSONDecodeError as exc:
                raise StoreError(f"unreadable snapshot manifest: {exc}") from exc
            if manifest.get("format") != SNAPSHOT_MAGIC:
                raise StoreError(f"not a store snapshot: {path}")
            store = cls(manifest["key_field"], manifest["member_limit"],
                        manifest["group_limit"], retain=manifest["retain"])
            store.reference_ts = manifest["reference_ts"]
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                user_id = record["user_id"]
                states: dict[int, _GroupState] = {}
                for enc in record["groups"]:
                    state = _GroupState(enc["key"], store.retain)
                    state.last_active = enc["last_active"]
                    state.total = enc["total"]
                    state.type_counts = list(enc["type_counts"])
                    state.dwell_total = enc["dwell_total"]
                    state.purchase_total = enc["purchase_total"]
                    state.item_counts = {int(k): v for k, v in enc["item_counts"]}
                    for row in enc["members"]:
                        state.members.append(BehaviorEvent(
                            item_id=row[0], category_id=row[1], price_cents=row[2],
                            timestamp=row[3], location_cell=row[4],
                            behavior_type=_TYPE_BY_INDEX[row[5]],
                            dwell_seconds=row[6]))
                    states[state.key] = state
                store._users[user_id] = states
                store._latest[user_id] = record["latest"]
            if len(store._users) != manifest["user_count"]:
                raise StoreError(
                    f"snapshot truncated: manifest says {manifest['user_count']} "
                    f"users, found {len(store._users)}")
        return store

    def content_equal(self, other: "BehaviorStore") -> bool:
        """Deep equality of configuration and every stored field."""
        if (self.key_field, self.member_limit, self.group_limit, self.retain,
                self.reference_ts) != (other.key_field, other.member_limit,
                                       other.group_limit, other.retain,
                                       other.reference_ts):
            return False
        if self._latest != other._latest:
            return False
        if set(self._users) != set(other._users):
            return False
        for user_id, states in self._users.items():
            theirs = other._users[user_id]
            if list(states) != list(theirs):
                return False
            for key, state in states.items():
                peer = theirs[key]
                if (state.last_active != peer.last_active
                        or state.total != peer.total
                        or state.type_counts != peer.type_counts
                        or state.dwell_total != peer.dwell_total
                        or state.purchase_total != peer.purchase_total
                        or state.item_counts != peer.item_counts
                        or list(state.members) != list(peer.members)):
                    return False
        return True


def store_from_event_log(reader: Iterable[tuple[int, BehaviorEvent]],
                         key_field: str, member_limit: int, group_limit: int,
                         retain: int | None = None) -> tuple[BehaviorStore, UpdateReport]:
    store = BehaviorStore(key_field, member_limit, group_limit, retain=retain)
    report = store.streaming_update(reader)
    return store, report

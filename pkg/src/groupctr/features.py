"""Field schemas, log-bucketing, and embedding tables.

Every raw attribute flows through a named field: categorical fields map ids
straight to rows of that field's table (row 0 is the shared out-of-vocabulary
fold), numeric fields are discretized first by a log-scale bucket rule.
Bucket index 0 stays reserved like any other row, 1 is the "not applicable"
sentinel (raw value -1), 2 is exact zero, and 3 upward covers the positive
range in powers of the rule's base.

The schema (field order, cardinalities, rules, embedding width) is written
to a manifest whose hash travels with checkpoints; a model never silently
reads rows through a different schema than it was trained with.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .grids import ParameterStore, ValueGrid, gather_rows
from .records import BEHAVIOR_TYPE_COUNT

SCHEMA_MAGIC = "embedding-schema v1"

# index layout shared by every bucket rule
OOV_BUCKET = 0
SENTINEL_BUCKET = 1
ZERO_BUCKET = 2
FIRST_LOG_BUCKET = 3

_LOG_EPS = 1e-9  # guards floor() at exact powers of the base


class FeatureError(Exception):
    """A value or schema violates the embedding contract."""


@dataclass(frozen=True)
class BucketRule:
    """Log-scale discretization: -1 -> 1, 0 -> 2, v>0 -> 3 + floor(log_base v)."""

    base: float
    buckets: int

    def __post_init__(self):
        if self.base <= 1.0:
            raise FeatureError(f"bucket base must exceed 1, got {self.base}")
        if self.buckets < FIRST_LOG_BUCKET + 1:
            raise FeatureError(f"need at least {FIRST_LOG_BUCKET + 1} buckets")

    def bucketize(self, value: float) -> int:
        if isinstance(value, float) and math.isnan(value):
            raise FeatureError("cannot bucketize NaN")
        if value == -1:
            return SENTINEL_BUCKET
        if value == 0:
            return ZERO_BUCKET
        if value < 0:
            raise FeatureError(f"negative value {value} is not the -1 sentinel")
        raw = FIRST_LOG_BUCKET + math.floor(
            math.log(value) / math.log(self.base) + _LOG_EPS)
        return int(min(max(raw, FIRST_LOG_BUCKET), self.buckets - 1))

    def bucketize_array(self, values) -> np.ndarray:
        """Vectorized bucketize; must agree with the scalar rule exactly."""
        v = np.asarray(values, dtype=np.float64)
        if np.isnan(v).any():
            raise FeatureError("cannot bucketize NaN")
        bad = (v < 0) & (v != -1)
        if bad.any():
            raise FeatureError(
                f"negative value {v[bad].flat[0]} is not the -1 sentinel")
        out = np.full(v.shape, ZERO_BUCKET, dtype=np.int64)
        out[v == -1] = SENTINEL_BUCKET
        positive = v > 0
        if positive.any():
            raw = FIRST_LOG_BUCKET + np.floor(
                np.log(v[positive]) / math.log(self.base) + _LOG_EPS)
            out[positive] = np.clip(raw, FIRST_LOG_BUCKET,
                                    self.buckets - 1).astype(np.int64)
        return out


@dataclass(frozen=True)
class FieldSchema:
    name: str
    cardinality: int
    rule: BucketRule | None = None  # None marks a categorical field

    @property
    def is_categorical(self) -> bool:
        return self.rule is None


# member attributes aggregated inside a group (width 3d); the time slot is a
# joint recency/weekday code so weekly rhythms survive the discretization
MEMBER_FIELDS = ("member_time", "location_cell", "behavior_type")
# full behavior attributes for candidate-keyed subsequences (width 7d)
BEHAVIOR_FIELDS = ("item_id", "category_id", "price_bucket", "age_bucket",
                   "location_cell", "behavior_type", "dwell_bucket")
CANDIDATE_FIELDS = ("item_id", "category_id", "price_bucket", "location_cell")
IDENTITY_FIELDS = ("item_id", "category_id", "price_bucket")
USER_FIELDS = ("user_id",)
CONTEXT_FIELDS = ("hour_of_week", "surface_id")

BASE_STAT_FIELDS = ("count_click", "count_add_to_cart", "count_add_to_favorite",
                    "count_browse_dishes", "count_view_comments", "count_purchase",
                    "count_total", "distinct_types", "avg_dwell_bucket",
                    "avg_price_bucket")
CATEGORY_EXTRA_STAT_FIELDS = ("distinct_items", "total_items")

COUNT_RULE = BucketRule(base=2.0, buckets=26)
DWELL_RULE = BucketRule(base=2.0, buckets=24)
PRICE_RULE = BucketRule(base=2.0, buckets=30)
AGE_RULE = BucketRule(base=2.0, buckets=40)
SMALL_COUNT_RULE = BucketRule(base=1.15, buckets=18)


@dataclass(frozen=True)
class CardinalitySpec:
    """Vocabulary sizes discovered from (or declared for) a dataset."""

    n_users: int
    n_items: int
    n_categories: int
    n_cells: int
    n_surfaces: int


class EmbeddingSchema:
    """Ordered field set with a stable manifest and hash."""

    def __init__(self, d: int, key_field: str, cards: CardinalitySpec):
        if d < 1:
            raise FeatureError(f"embedding width must be positive, got {d}")
        self.d = d
        self.key_field = key_field
        self.cards = cards
        fields = [
            FieldSchema("user_id", cards.n_users + 1),
            FieldSchema("item_id", cards.n_items + 1),
            FieldSchema("category_id", cards.n_categories + 1),
            FieldSchema("location_cell", cards.n_cells + 1),
            FieldSchema("behavior_type", BEHAVIOR_TYPE_COUNT + 1),
            FieldSchema("hour_of_week", 169),
            FieldSchema("surface_id", cards.n_surfaces + 1),
            FieldSchema("price_bucket", PRICE_RULE.buckets, PRICE_RULE),
            FieldSchema("age_bucket", AGE_RULE.buckets, AGE_RULE),
            FieldSchema("dwell_bucket", DWELL_RULE.buckets, DWELL_RULE),
            FieldSchema("member_time", AGE_RULE.buckets * 7),
        ]
        for name in BASE_STAT_FIELDS:
            if name == "distinct_types":
                fields.append(FieldSchema(name, SMALL_COUNT_RULE.buckets,
                                          SMALL_COUNT_RULE))
            elif name == "avg_dwell_bucket":
                fields.append(FieldSchema(name, DWELL_RULE.buckets, DWELL_RULE))
            elif name == "avg_price_bucket":
                fields.append(FieldSchema(name, PRICE_RULE.buckets, PRICE_RULE))
            else:
                fields.append(FieldSchema(name, COUNT_RULE.buckets, COUNT_RULE))
        if key_field == "category_id":
            for name in CATEGORY_EXTRA_STAT_FIELDS:
                fields.append(FieldSchema(name, COUNT_RULE.buckets, COUNT_RULE))
        self.fields: dict[str, FieldSchema] = {f.name: f for f in fields}

    @property
    def stat_fields(self) -> tuple[str, ...]:
        if self.key_field == "category_id":
            return BASE_STAT_FIELDS + CATEGORY_EXTRA_STAT_FIELDS
        return BASE_STAT_FIELDS

    @property
    def member_width(self) -> int:
        return len(MEMBER_FIELDS) * self.d

    @property
    def behavior_width(self) -> int:
        return len(BEHAVIOR_FIELDS) * self.d

    @property
    def candidate_width(self) -> int:
        return len(CANDIDATE_FIELDS) * self.d

    @property
    def group_width(self) -> int:
        # identity block + statistics block + aggregated member block
        return (len(IDENTITY_FIELDS) + len(self.stat_fields)) * self.d \
            + self.member_width

    def encode_categorical(self, field: str, ids) -> np.ndarray:
        """Map raw ids to table rows, folding anything out of range to row 0."""
        schema = self.fields[field]
        if not schema.is_categorical:
            raise FeatureError(f"{field} is numeric, use encode_numeric")
        idx = np.asarray(ids, dtype=np.int64)
        return np.where((idx >= 1) & (idx < schema.cardinality), idx, OOV_BUCKET)

    def encode_numeric(self, field: str, values) -> np.ndarray:
        schema = self.fields[field]
        if schema.is_categorical:
            raise FeatureError(f"{field} is categorical, use encode_categorical")
        return schema.rule.bucketize_array(values)

    def encode_member_time(self, age_seconds) -> np.ndarray:
        """Joint member-time code: log-bucketed age in days, times 7, plus
        the age's day-of-week offset.  The offset keeps weekly rhythms
        readable after bucketing; a plain log bucket erases them."""
        days = np.asarray(age_seconds, dtype=np.int64) // 86400
        return AGE_RULE.bucketize_array(days) * 7 + days % 7

    def manifest(self) -> str:
        lines = [SCHEMA_MAGIC, f"d {self.d}", f"key_field {self.key_field}"]
        for f in self.fields.values():
            if f.is_categorical:
                lines.append(f"field {f.name} categorical {f.cardinality}")
            else:
                lines.append(f"field {f.name} log base={f.rule.base:g} "
                             f"buckets={f.rule.buckets}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.manifest().encode("utf-8")).hexdigest()[:16]


class EmbeddingSet:
    """One d-wide table per schema field, registered on a ParameterStore."""

    def __init__(self, schema: EmbeddingSchema, params: ParameterStore):
        self.schema = schema
        self.params = params
        self.oov_lookups: dict[str, int] = {}
        for f in schema.fields.values():
            params.weight(f"emb.{f.name}", f.cardinality, schema.d)

    def table(self, field: str):
        return self.params[f"emb.{field}"]

    def lookup(self, field: str, indices: np.ndarray) -> ValueGrid:
        """Rows of the field's table for already encoded indices."""
        idx = np.asarray(indices, dtype=np.int64)
        folded = int((idx == OOV_BUCKET).sum())
        if folded:
            self.oov_lookups[field] = self.oov_lookups.get(field, 0) + folded
        return gather_rows(self.table(field).grid, idx)

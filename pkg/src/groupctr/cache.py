"""Offline cache of per-user group representations.

The group rows a user presents to the candidate attention depend only on
the frozen store and the model parameters, not on the candidate.  They can
therefore be computed offline, stored, and served.  Rows are always built
one user at a time, here and in the checker, so a stored row and a fresh
recomputation go through identical arithmetic and must agree to the bit;
any drift means the cache no longer belongs to this store and model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featurize import FeatureSet, candidate_indices
from .features import CANDIDATE_FIELDS, IDENTITY_FIELDS, MEMBER_FIELDS
from .grids import ValueGrid, no_grad
from .group_net import build_group_rows, group_interest
from .model import Model

CACHE_MAGIC = "group-cache v1"


class CacheError(Exception):
    pass


def user_group_rows(model: Model, features: FeatureSet,
                    user_id: int) -> np.ndarray:
    """The (n_groups, group_width) representation for one user's groups."""
    block = features.user_block(user_id)
    if block.n_groups == 0:
        return np.zeros((0, model.schema.group_width))
    soft = block.member_present.copy()
    with no_grad():
        identity_e = model._embed_columns(IDENTITY_FIELDS, block.identity)
        stats_e = model._embed_columns(model.schema.stat_fields, block.stats)
        member_e = model._embed_columns(
            MEMBER_FIELDS, block.members.reshape(-1, 3))
        rows = build_group_rows(
            identity_e, stats_e, member_e, model.gm,
            block.members.shape[1], soft,
            block.member_present.ravel().astype(np.float64))
    return rows.data


def interest_from_rows(model: Model, rows: np.ndarray,
                       cand_idx: np.ndarray) -> np.ndarray:
    """Group-side interest for one candidate against prebuilt rows."""
    with no_grad():
        cand_e = model._embed_columns(CANDIDATE_FIELDS,
                                      cand_idx.reshape(1, -1))
        out, _ = group_interest(cand_e, ValueGrid(rows), model.gm,
                                rows.shape[0],
                                np.ones((1, rows.shape[0]), dtype=bool))
    return out.data


def save_group_cache(stem: str, model: Model, features: FeatureSet,
                     user_ids) -> dict:
    """Write <stem>.manifest and <stem>.bin; returns a small summary."""
    lines = [CACHE_MAGIC, f"schema {model.schema.hash()}",
             f"reference_ts {features.store.reference_ts}"]
    offset = 0
    chunks = []
    cached = 0
    for user_id in user_ids:
        rows = user_group_rows(model, features, user_id)
        raw = rows.astype("<f8").tobytes()
        lines.append(f"{user_id} {rows.shape[0]} {rows.shape[1]} {offset}")
        chunks.append(raw)
        offset += len(raw)
        cached += 1
    with open(f"{stem}.manifest", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(f"{stem}.bin", "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)
    return {"users": cached, "bytes": offset}


def load_group_cache(stem: str) -> tuple[dict, dict[int, np.ndarray]]:
    with open(f"{stem}.manifest", "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CACHE_MAGIC:
        raise CacheError(f"{stem}.manifest is not a group cache")
    meta = {"schema": lines[1].split()[1],
            "reference_ts": int(lines[2].split()[1])}
    blob = open(f"{stem}.bin", "rb").read()
    rows_by_user: dict[int, np.ndarray] = {}
    for line in lines[3:]:
        user_id, n_rows, n_cols, offset = (int(p) for p in line.split())
        count = n_rows * n_cols
        data = np.frombuffer(blob, dtype="<f8", count=count,
                             offset=offset).reshape(n_rows, n_cols)
        rows_by_user[user_id] = data
    return meta, rows_by_user


@dataclass
class CacheCheckReport:
    users_checked: int
    row_mismatches: int
    interest_mismatches: int
    missing_users: int

    @property
    def ok(self) -> bool:
        return (self.row_mismatches == 0 and self.interest_mismatches == 0
                and self.missing_users == 0)

    def as_dict(self) -> dict:
        return {"users_checked": self.users_checked,
                "row_mismatches": self.row_mismatches,
                "interest_mismatches": self.interest_mismatches,
                "missing_users": self.missing_users,
                "ok": self.ok}


def check_group_cache(stem: str, model: Model, features: FeatureSet,
                      instances) -> CacheCheckReport:
    """Bit-exact comparison of cached rows and the interest they induce.

    For each instance's user: recompute the group rows fresh and compare to
    the cached bytes, then run the candidate attention over both copies and
    compare the interest vectors.  Serving from cache is only sound if both
    agree exactly.
    """
    meta, cached = load_group_cache(stem)
    if meta["schema"] != model.schema.hash():
        raise CacheError(
            f"cache was built for schema {meta['schema']}, model has "
            f"{model.schema.hash()}")
    if meta["reference_ts"] != features.store.reference_ts:
        raise CacheError("cache was built against a different store state")
    checked = row_bad = interest_bad = missing = 0
    seen: set[int] = set()
    for instance in instances:
        user_id = instance.user_id
        if user_id in seen:
            continue
        seen.add(user_id)
        if user_id not in cached:
            missing += 1
            continue
        checked += 1
        fresh = user_group_rows(model, features, user_id)
        stored = cached[user_id]
        if fresh.shape != stored.shape \
                or fresh.tobytes() != stored.tobytes():
            row_bad += 1
            continue
        if fresh.shape[0] == 0:
            continue
        cand = candidate_indices(instance, model.schema)
        a = interest_from_rows(model, stored, cand)
        b = interest_from_rows(model, fresh, cand)
        if a.tobytes() != b.tobytes():
            interest_bad += 1
    return CacheCheckReport(users_checked=checked, row_mismatches=row_bad,
                            interest_mismatches=interest_bad,
                            missing_users=missing)

"""Shared builders for randomized fixtures (seeded, never time-dependent)."""

import numpy as np

from groupctr.records import BehaviorEvent, BehaviorType

TYPES = list(BehaviorType)


def random_event(rng: np.random.Generator, ts: int, n_items: int = 12,
                 n_categories: int = 4, n_cells: int = 5) -> BehaviorEvent:
    item = int(rng.integers(1, n_items + 1))
    btype = TYPES[int(rng.integers(0, len(TYPES)))]
    price = int(rng.integers(100, 5000)) if btype is BehaviorType.PURCHASE else 0
    dwell = 0 if btype is BehaviorType.PURCHASE else int(rng.integers(0, 300))
    return BehaviorEvent(
        item_id=item,
        category_id=1 + (item % n_categories),
        price_cents=price,
        timestamp=ts,
        location_cell=int(rng.integers(1, n_cells + 1)),
        behavior_type=btype,
        dwell_seconds=dwell,
    )


def random_history(rng: np.random.Generator, count: int, start_ts: int = 1000,
                   **kwargs) -> list[BehaviorEvent]:
    """Chronological history with occasional repeated timestamps."""
    ts = start_ts
    out = []
    for _ in range(count):
        ts += int(rng.integers(0, 500))
        out.append(random_event(rng, ts, **kwargs))
    return out

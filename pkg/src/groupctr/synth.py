"""Synthetic multi-type behavior data with planted, pathway-specific signals.

Every user gets a persistent persona: a personal menu of items with
affinities and per-item weekly habits, a home location, and per-item
trajectories (warming, flat, cooling).  Histories are drawn from that
persona; decision labels are then driven by four components, each designed
to be readable mainly through one model pathway:

  intensity        how much the user has engaged this item, ever; the
                   presence part needs only group identities, the magnitude
                   part needs the count statistics
  repeat_purchase  purchase count and purchase recency for the item; counts
                   sit in the statistics, recency is only visible through
                   member ages and behavior types, and none of it survives
                   a click-only history
  weekday_pattern  how strongly the user's engagement with the candidate
                   item sticks to one weekday; the habit is per user and
                   per item, so it cannot be memorized by user or item
                   embeddings and must be read off member timestamps
  decision_habit   the item's warming/cooling trajectory, expressed through
                   dwell times drifting over successive events; readable
                   from the ordered subsequence, not from averages

Generation is deterministic: every stream is keyed by (seed, stream, user),
so reruns write byte-identical files and users can be regenerated in
isolation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from .records import (BehaviorEvent, BehaviorType, CandidateItem,
                      DecisionContext, Instance, event_to_obj)

SECONDS_PER_DAY = 86400

# order used when sampling an event's type; index into this, then read
# BehaviorType.index for the stored 1-based code
TYPE_ORDER = (BehaviorType.BROWSE_DISHES, BehaviorType.CLICK,
              BehaviorType.VIEW_COMMENTS, BehaviorType.ADD_TO_FAVORITE,
              BehaviorType.ADD_TO_CART, BehaviorType.PURCHASE)
BASE_TYPE_WEIGHTS = np.array([0.34, 0.28, 0.12, 0.08, 0.10])  # non-purchase


class SynthError(Exception):
    pass


@dataclass
class GenConfig:
    seed: int = 0
    n_users: int = 1000
    n_items: int = 20000
    n_categories: int = 200
    n_cells: int = 50
    n_surfaces: int = 3
    horizon_days: int = 180
    decision_days: int = 2
    mean_events_per_user: int = 8000
    decisions_per_user: int = 20
    base_ctr: float = 0.1
    w_intensity: float = 1.0
    w_repeat_purchase: float = 1.2
    w_weekday_pattern: float = 1.5
    w_decision_habit: float = 1.2

    def check(self) -> None:
        if self.n_users < 1 or self.n_items < 2 or self.n_categories < 1:
            raise SynthError("catalog too small to generate anything")
        if self.horizon_days <= self.decision_days:
            raise SynthError("horizon must extend beyond the decision window")
        if not 0.0 < self.base_ctr < 1.0:
            raise SynthError(f"base_ctr {self.base_ctr} out of (0, 1)")
        if self.mean_events_per_user < 1 or self.decisions_per_user < 1:
            raise SynthError("need at least one event and one decision per user")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclass_fields(self)}


def read_kv_file(path) -> dict[str, str]:
    """Flat `key value` lines; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise SynthError(f"{path} line {lineno}: expected 'key value'")
            out[parts[0]] = parts[1].strip()
    return out


def write_kv_file(path, values: dict) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for key, value in values.items():
            handle.write(f"{key} {value}\n")


def gen_config_from_mapping(raw: dict[str, str]) -> GenConfig:
    kwargs = {}
    floats = {"base_ctr", "w_intensity", "w_repeat_purchase",
              "w_weekday_pattern", "w_decision_habit"}
    known = {f.name for f in dataclass_fields(GenConfig)}
    for key, value in raw.items():
        if key not in known:
            raise SynthError(f"unknown generator config key {key!r}")
        kwargs[key] = float(value) if key in floats else int(value)
    config = GenConfig(**kwargs)
    config.check()
    return config


class Catalog:
    """Global item world: popularity, categories, prices."""

    def __init__(self, config: GenConfig):
        rng = np.random.default_rng([config.seed, 0])
        n = config.n_items
        ranks = rng.permutation(n) + 1
        weights = ranks.astype(np.float64) ** -1.1
        self.popularity = weights / weights.sum()
        self.categories = rng.integers(1, config.n_categories + 1, size=n)
        self.prices = np.clip(
            np.round(np.exp(rng.normal(math.log(1500.0), 0.5, size=n))),
            100, 60000).astype(np.int64)

    def category_of(self, item_id: int) -> int:
        return int(self.categories[item_id - 1])

    def price_of(self, item_id: int) -> int:
        return int(self.prices[item_id - 1])


@dataclass
class UserHistory:
    """One user's persona and full event history as parallel arrays."""

    user_id: int
    menu: np.ndarray            # 1-based item ids
    affinity: np.ndarray
    trend: np.ndarray           # -1 cooling, 0 flat, +1 warming, per menu slot
    buyer: np.ndarray           # bool per menu slot
    pref_dow: np.ndarray        # habitual weekday per menu slot, 0..6
    periodic: np.ndarray        # bool per menu slot: does the habit bind
    home_cell: int
    # per event, chronological
    items: np.ndarray
    categories: np.ndarray
    prices: np.ndarray
    timestamps: np.ndarray
    cells: np.ndarray
    type_codes: np.ndarray      # 1-based BehaviorType.index
    dwells: np.ndarray

    @property
    def event_count(self) -> int:
        return int(self.items.size)

    @property
    def distinct_items(self) -> int:
        return int(np.unique(self.items).size)


def _occurrence_index(items: np.ndarray) -> np.ndarray:
    """For each event, how many earlier events hit the same item."""
    n = items.size
    order = np.argsort(items, kind="stable")
    grouped = items[order]
    starts = np.flatnonzero(np.r_[True, grouped[1:] != grouped[:-1]])
    lengths = np.diff(np.r_[starts, n])
    within = np.arange(n) - np.repeat(starts, lengths)
    occ = np.empty(n, dtype=np.int64)
    occ[order] = within
    return occ


def generate_user(config: GenConfig, catalog: Catalog,
                  user_id: int) -> UserHistory:
    rng = np.random.default_rng([config.seed, 1, user_id])
    n_events = max(1, int(rng.poisson(config.mean_events_per_user)))

    span = max(5, int(config.mean_events_per_user * rng.uniform(0.02, 0.05))
               + 10)
    span = min(span, 450, config.n_items)
    keys = np.log(catalog.popularity) + rng.gumbel(size=config.n_items)
    menu = np.argsort(-keys, kind="stable")[:span] + 1
    affinity = rng.dirichlet(np.full(span, 0.8))
    trend = rng.choice(np.array([-1, 0, 1]), size=span, p=[0.25, 0.5, 0.25])
    buyer = rng.random(span) < 0.25
    pref_dow = rng.integers(0, 7, size=span)
    periodic = rng.random(span) < 0.6
    home_cell = int(rng.integers(1, config.n_cells + 1))

    slot = rng.choice(span, size=n_events, p=affinity)

    event_days = config.horizon_days - config.decision_days
    # each menu item has its own era: events cluster around a center day,
    # so older interests age out of any short recent-behavior window while
    # staying visible to the lifelong group index
    center = rng.uniform(1.0, event_days + 1.0, size=span)
    width = rng.uniform(25.0, 70.0, size=span)
    day = np.clip(np.round(center[slot] + width[slot]
                           * rng.uniform(-0.5, 0.5, size=n_events)),
                  1, event_days).astype(np.int64)
    # periodic menu items snap most of their events onto the item's habitual
    # weekday, moved forward within the same week to keep the era intact
    snap = periodic[slot] & (rng.random(n_events) < 0.7)
    snapped = day + (pref_dow[slot] - day) % 7
    snapped = np.where(snapped > event_days, snapped - 7, snapped)
    day = np.where(snap & (snapped >= 1), snapped, day)
    peak_hour = rng.uniform(10.0, 21.0)
    hour = np.clip(np.round(rng.normal(peak_hour, 3.0, n_events)), 0, 23)
    second = rng.integers(0, 3600, size=n_events)
    ts = day * SECONDS_PER_DAY + hour.astype(np.int64) * 3600 + second
    order = np.argsort(ts, kind="stable")
    slot, ts = slot[order], ts[order]

    occ = _occurrence_index(slot)
    trend_e = trend[slot]
    buyer_e = buyer[slot]

    p_purchase = 0.05 * np.where(buyer_e, 4.0, 0.5)
    tilt = 1.0 + 0.25 * trend_e * np.minimum(occ, 8) / 8.0
    weights = np.tile(BASE_TYPE_WEIGHTS, (n_events, 1))
    weights[:, 1] *= tilt            # click
    weights[:, 4] *= tilt            # add_to_cart
    weights *= ((1.0 - p_purchase) / weights.sum(axis=1))[:, None]
    weights = np.column_stack([weights, p_purchase])
    cdf = np.cumsum(weights, axis=1)
    draw = rng.random(n_events)
    type_pos = (cdf < draw[:, None]).sum(axis=1)
    type_codes = np.array([t.index for t in TYPE_ORDER])[type_pos]

    purchase = type_pos == len(TYPE_ORDER) - 1
    # dwell baselines are per item, so absolute dwell says nothing about the
    # trajectory; only the within-item drift across occurrences does
    dwell_base = rng.lognormal(math.log(25.0), 0.5, size=span)
    drift = 1.0 + 0.07 * trend_e * np.minimum(occ, 12)
    dwell = np.maximum(1, np.round(
        dwell_base[slot] * drift
        * rng.lognormal(0.0, 0.35, n_events))).astype(np.int64)
    dwell[purchase] = 0

    items = menu[slot]
    prices = np.where(purchase, catalog.prices[items - 1], 0)
    cells = np.where(rng.random(n_events) < 0.8, home_cell,
                     rng.integers(1, config.n_cells + 1, size=n_events))

    return UserHistory(
        user_id=user_id, menu=menu, affinity=affinity, trend=trend,
        buyer=buyer, pref_dow=pref_dow, periodic=periodic,
        home_cell=home_cell,
        items=items, categories=catalog.categories[items - 1],
        prices=prices, timestamps=ts, cells=cells,
        type_codes=type_codes, dwells=dwell,
    )


_TYPE_BY_CODE = {t.index: t for t in BehaviorType}


def user_events(history: UserHistory) -> list[BehaviorEvent]:
    """Materialize the arrays as records, oldest first."""
    return [BehaviorEvent(
        item_id=int(history.items[i]),
        category_id=int(history.categories[i]),
        price_cents=int(history.prices[i]),
        timestamp=int(history.timestamps[i]),
        location_cell=int(history.cells[i]),
        behavior_type=_TYPE_BY_CODE[int(history.type_codes[i])],
        dwell_seconds=int(history.dwells[i]),
    ) for i in range(history.event_count)]


@dataclass
class UserDecisions:
    """Raw decision features and label components for one user, pre-label."""

    user_id: int
    items: np.ndarray
    timestamps: np.ndarray
    surfaces: np.ndarray
    c_intensity: np.ndarray
    c_repeat: np.ndarray
    c_weekday: np.ndarray
    c_habit: np.ndarray


PURCHASE_CODE = BehaviorType.PURCHASE.index


def generate_decisions(config: GenConfig, catalog: Catalog,
                       history: UserHistory) -> UserDecisions:
    rng = np.random.default_rng([config.seed, 2, history.user_id])
    k = config.decisions_per_user

    # menu candidates are drawn uniformly, not by affinity, so a user's
    # busiest items do not dominate and leak their habits into user-level
    # averages a plain embedding could memorize
    from_menu = rng.random(k) < 0.85
    menu_pick = history.menu[rng.integers(0, history.menu.size, size=k)]
    cold_pick = rng.integers(1, config.n_items + 1, size=k)
    cand = np.where(from_menu, menu_pick, cold_pick)

    first_day = config.horizon_days - config.decision_days + 1
    day = rng.integers(first_day, config.horizon_days + 1, size=k)
    hour = rng.integers(8, 23, size=k)
    second = rng.integers(0, 3600, size=k)
    ts = day * SECONDS_PER_DAY + hour * 3600 + second
    order = np.argsort(ts, kind="stable")
    cand, ts, day = cand[order], ts[order], day[order]
    surfaces = rng.integers(1, config.n_surfaces + 1, size=k)

    menu_slot = {int(item): j for j, item in enumerate(history.menu)}
    c_int = np.zeros(k)
    c_rep = np.zeros(k)
    c_week = np.zeros(k)
    c_habit = np.zeros(k)
    purchases = history.type_codes == PURCHASE_CODE
    event_dow = (history.timestamps // SECONDS_PER_DAY) % 7
    for i in range(k):
        hits = history.items == cand[i]
        count = int(hits.sum())
        # presence dominates: knowing the item at all is the big step, how
        # often is the refinement
        c_int[i] = (1.6 if count else 0.0) + math.log1p(count) / 3.0
        bought = hits & purchases
        n_bought = int(bought.sum())
        if n_bought:
            age_days = (ts[i] - history.timestamps[bought].max()) \
                / SECONDS_PER_DAY
            c_rep[i] = math.log1p(n_bought) + 1.2 * math.exp(-age_days / 10.0)
        slot = menu_slot.get(int(cand[i]))
        if slot is not None and count:
            # excess share of this item's events on its habitual weekday;
            # ~0.4 when the habit binds, noise around 0 when it does not
            share = float((event_dow[hits] == history.pref_dow[slot]).mean())
            c_week[i] = share - 1.0 / 7.0
            c_habit[i] = history.trend[slot] * min(count, 6) / 6.0
    return UserDecisions(user_id=history.user_id, items=cand, timestamps=ts,
                         surfaces=surfaces, c_intensity=c_int, c_repeat=c_rep,
                         c_weekday=c_week, c_habit=c_habit)


def _standardize(values: np.ndarray) -> np.ndarray:
    sd = values.std()
    if sd == 0.0:
        return np.zeros_like(values)
    return (values - values.mean()) / sd


def _solve_intercept(signal: np.ndarray, base_ctr: float) -> float:
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = (lo + hi) / 2.0
        mean_p = float((1.0 / (1.0 + np.exp(-(mid + signal)))).mean())
        if mean_p < base_ctr:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


@dataclass
class GroundTruth:
    """Latent click probabilities and their planted components."""

    intercept: float
    weights: dict[str, float]
    probabilities: np.ndarray
    components: dict[str, np.ndarray]   # standardized, per instance

    def logits(self) -> np.ndarray:
        total = np.full(self.probabilities.size, self.intercept)
        for name, weight in self.weights.items():
            total = total + weight * self.components[name]
        return total


@dataclass
class Dataset:
    config: GenConfig
    instances: list[Instance]
    truth: GroundTruth


def generate_dataset(config: GenConfig, events_path=None,
                     progress=None) -> Dataset:
    """Histories (optionally streamed to a file) plus labeled decisions.

    Pass one walks users, writes their events, and collects raw decision
    components.  Pass two standardizes components over the whole population,
    solves the intercept for the requested base rate, and samples labels.
    """
    config.check()
    catalog = Catalog(config)
    rows: list[tuple[int, int, int, int]] = []   # user, item, ts, surface
    raw = {"intensity": [], "repeat_purchase": [], "weekday_pattern": [],
           "decision_habit": []}
    writer = open(events_path, "w", encoding="utf-8") if events_path else None
    try:
        for user_id in range(1, config.n_users + 1):
            history = generate_user(config, catalog, user_id)
            if writer is not None:
                for event in user_events(history):
                    writer.write(json.dumps(event_to_obj(user_id, event))
                                 + "\n")
            decided = generate_decisions(config, catalog, history)
            for i in range(decided.items.size):
                rows.append((user_id, int(decided.items[i]),
                             int(decided.timestamps[i]),
                             int(decided.surfaces[i])))
            raw["intensity"].append(decided.c_intensity)
            raw["repeat_purchase"].append(decided.c_repeat)
            raw["weekday_pattern"].append(decided.c_weekday)
            raw["decision_habit"].append(decided.c_habit)
            if progress and user_id % 500 == 0:
                progress(f"generated {user_id}/{config.n_users} users")
    finally:
        if writer is not None:
            writer.close()

    components = {name: _standardize(np.concatenate(parts))
                  for name, parts in raw.items()}
    weights = {"intensity": config.w_intensity,
               "repeat_purchase": config.w_repeat_purchase,
               "weekday_pattern": config.w_weekday_pattern,
               "decision_habit": config.w_decision_habit}
    signal = sum(weights[name] * components[name] for name in weights)
    intercept = _solve_intercept(signal, config.base_ctr)
    probabilities = 1.0 / (1.0 + np.exp(-(intercept + signal)))
    label_rng = np.random.default_rng([config.seed, 3])
    labels = (label_rng.random(len(rows)) < probabilities).astype(int)

    instances = []
    for i, (user_id, item, ts, surface) in enumerate(rows):
        instances.append(Instance(
            user_id=user_id,
            candidate=CandidateItem(item_id=item,
                                    category_id=catalog.category_of(item),
                                    price_cents=catalog.price_of(item),
                                    location_cell=0),
            context=DecisionContext(hour_of_week=int((ts // 3600) % 168),
                                    surface_id=surface),
            decision_timestamp=ts,
            label=int(labels[i]),
        ))
    truth = GroundTruth(intercept=intercept, weights=weights,
                        probabilities=probabilities, components=components)
    return Dataset(config=config, instances=instances, truth=truth)


def save_truth(path, truth: GroundTruth) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        header = {"intercept": truth.intercept, "weights": truth.weights}
        handle.write(json.dumps(header) + "\n")
        names = sorted(truth.components)
        for i in range(truth.probabilities.size):
            row = {"p": float(truth.probabilities[i])}
            for name in names:
                row[name] = float(truth.components[name][i])
            handle.write(json.dumps(row) + "\n")


def load_truth(path) -> GroundTruth:
    with open(path, "r", encoding="utf-8") as handle:
        header = json.loads(handle.readline())
        probs, columns = [], {}
        for line in handle:
            row = json.loads(line)
            probs.append(row.pop("p"))
            for name, value in row.items():
                columns.setdefault(name, []).append(value)
    return GroundTruth(
        intercept=header["intercept"], weights=header["weights"],
        probabilities=np.array(probs),
        components={name: np.array(vals) for name, vals in columns.items()})


def oracle_report(truth: GroundTruth, labels: np.ndarray) -> dict:
    """Best achievable AUC, and how much each planted component carries."""
    from .metrics import compute_auc

    full_auc = compute_auc(truth.probabilities, labels)
    report = {"oracle_auc": full_auc, "component_drops": {}}
    base_logits = truth.logits()
    for name, weight in truth.weights.items():
        reduced = base_logits - weight * truth.components[name]
        auc = compute_auc(1.0 / (1.0 + np.exp(-reduced)), labels)
        report["component_drops"][name] = full_auc - auc
    return report


def population_shape(config: GenConfig, sample_users: int) -> dict:
    """Event and distinct-item counts for the first N users, history only."""
    catalog = Catalog(config)
    counts = np.zeros(sample_users, dtype=np.int64)
    distinct = np.zeros(sample_users, dtype=np.int64)
    for i in range(sample_users):
        history = generate_user(config, catalog, i + 1)
        counts[i] = history.event_count
        distinct[i] = history.distinct_items
    return {"event_counts": counts, "group_counts": distinct}

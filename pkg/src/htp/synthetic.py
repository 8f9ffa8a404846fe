"""Synthetic interaction logs with planted sequential or temporal structure."""

from __future__ import annotations

import numpy as np

from .dataset import SECONDS_PER_DAY, InteractionLog, calendar_arrays, from_triples

EPOCH_2015 = 1_420_070_400  # 2015-01-01T00:00Z


def cyclic_log(n_users: int = 100, n_items: int = 30, length: int = 20, seed: int = 0) -> InteractionLog:
    """Each user walks the item ring ``i -> i + 1`` from a random start, one step every 1-5 days."""
    rng = np.random.default_rng(seed)
    triples = []
    for u in range(n_users):
        item = int(rng.integers(n_items))
        t = EPOCH_2015 + int(rng.integers(0, 365)) * SECONDS_PER_DAY
        for _ in range(length):
            triples.append((u, item + 1, t))
            item = (item + 1) % n_items
            t += int(rng.integers(1, 6)) * SECONDS_PER_DAY
    return from_triples(triples)


def seasonal_log(n_users: int = 400, items_per_month: int = 20, length: int = 30, years: int = 3,
                 in_season: float = 0.9, seed: int = 0) -> InteractionLog:
    """Items belong to one calendar month; an interaction at time ``t`` picks an item
    of ``month(t)`` with probability ``in_season``, otherwise any item.

    Timestamps are uniform over ``years`` years, so the month of the next
    interaction cannot be read off the order of the history.
    """
    rng = np.random.default_rng(seed)
    n_items = 12 * items_per_month
    triples = []
    span = years * 365
    for u in range(n_users):
        days = np.sort(rng.choice(span, size=length, replace=False))
        ts = EPOCH_2015 + days * SECONDS_PER_DAY + int(rng.integers(0, SECONDS_PER_DAY))
        months, _, _ = calendar_arrays(ts)
        used: set[int] = set()
        for t, m in zip(ts.tolist(), months.tolist()):
            for _ in range(100):
                if rng.random() < in_season:
                    item = int(m) * items_per_month + int(rng.integers(items_per_month))
                else:
                    item = int(rng.integers(n_items))
                if item not in used:
                    break
            used.add(item)
            triples.append((u, item + 1, t))
    return from_triples(triples)


def weekly_routine_log(n_users: int = 300, clusters_per_day: int = 4, items_per_cluster: int = 8,
                       length: int = 25, seed: int = 0) -> InteractionLog:
    """Every item belongs to one weekday; every user keeps a personal cluster per weekday.

    Item clusters are indexed by ``(weekday, k)``. On weekday ``w`` a user takes
    an unused item from cluster ``(w, route[user][w])``. Gaps between
    interactions are random (1-4 days), so the history items that predict the
    next one are those a multiple of seven days before it; their positions in
    the sequence vary.
    """
    rng = np.random.default_rng(seed)
    triples = []
    for u in range(n_users):
        route = rng.integers(clusters_per_day, size=7)
        t = EPOCH_2015 + int(rng.integers(0, 365)) * SECONDS_PER_DAY + int(rng.integers(0, SECONDS_PER_DAY))
        used: set[int] = set()
        for _ in range(length):
            (wd,) = calendar_arrays(np.array([t]))[2]
            base = (int(wd) * clusters_per_day + int(route[wd])) * items_per_cluster
            for _ in range(100):
                item = base + int(rng.integers(items_per_cluster))
                if item not in used:
                    break
            used.add(item)
            triples.append((u, item + 1, t))
            t += int(rng.integers(1, 5)) * SECONDS_PER_DAY
    return from_triples(triples)

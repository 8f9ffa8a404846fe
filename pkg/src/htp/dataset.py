"""Interaction logs: parsing, k-core filtering, leave-one-out splits, sequences,
calendar features, negative sampling and per-item day histograms."""

from __future__ import annotations

import csv
import datetime as dt
import gzip
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

PAD_ITEM = 0
N_MONTH, N_WEEK, N_DAY = 12, 53, 7
# One extra row per granularity holds the padding feature.
PAD_MONTH, PAD_WEEK, PAD_DAY = N_MONTH, N_WEEK, N_DAY
SECONDS_PER_DAY = 86_400

FORMATS = ("csv", "tafeng", "amazon")


class TimeFeature(NamedTuple):
    month: int
    week: int
    day: int


PAD_FEATURE = TimeFeature(PAD_MONTH, PAD_WEEK, PAD_DAY)


@dataclass
class InteractionLog:
    """Remapped interactions sorted by (user, timestamp), ties in file order.

    Users are ``0..user_count-1``, items ``1..item_count``; item 0 is padding.
    """

    users: np.ndarray
    items: np.ndarray
    times: np.ndarray
    user_labels: list[str]
    item_labels: list[str]

    @property
    def user_count(self) -> int:
        return len(self.user_labels)

    @property
    def item_count(self) -> int:
        return len(self.item_labels)

    def __len__(self) -> int:
        return len(self.users)

    def per_user(self) -> list[tuple[np.ndarray, np.ndarray]]:
        bounds = np.searchsorted(self.users, np.arange(self.user_count + 1))
        return [
            (self.items[a:b], self.times[a:b]) for a, b in zip(bounds[:-1], bounds[1:])
        ]

    def summary(self) -> dict:
        n = len(self)
        return {
            "users": self.user_count,
            "items": self.item_count,
            "interactions": n,
            "avg_items_per_user": round(n / self.user_count, 2) if self.user_count else 0.0,
        }


def from_triples(triples: Iterable[tuple], *, sort_labels: bool = True) -> InteractionLog:
    """Build a log from raw ``(user, item, timestamp)`` triples (labels are stringified)."""
    rows = [(str(u), str(i), int(t)) for u, i, t in triples]
    if not rows:
        raise DataError("no interactions")
    return _remap(rows)


def _label_order(labels: set[str]) -> list[str]:
    if all(s.lstrip("-").isdigit() for s in labels):
        return sorted(labels, key=int)
    return sorted(labels)


def _remap(rows: list[tuple[str, str, int]]) -> InteractionLog:
    user_labels = _label_order({r[0] for r in rows})
    item_labels = _label_order({r[1] for r in rows})
    uid = {u: k for k, u in enumerate(user_labels)}
    iid = {i: k + 1 for k, i in enumerate(item_labels)}
    users = np.fromiter((uid[r[0]] for r in rows), dtype=np.int64, count=len(rows))
    items = np.fromiter((iid[r[1]] for r in rows), dtype=np.int64, count=len(rows))
    times = np.fromiter((r[2] for r in rows), dtype=np.int64, count=len(rows))
    # lexsort is stable: equal (user, time) keep file order.
    order = np.lexsort((times, users))
    return InteractionLog(users[order], items[order], times[order], user_labels, item_labels)


def _rows_from_log(log_: InteractionLog, keep: np.ndarray | None = None):
    users, items, times = log_.users, log_.items, log_.times
    if keep is not None:
        users, items, times = users[keep], items[keep], times[keep]
    return [
        (log_.user_labels[u], log_.item_labels[i - 1], int(t))
        for u, i, t in zip(users, items, times)
    ]


# ------------------------------------------------------------------- parsing


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8", newline="")
    return open(path, "r", encoding="utf-8", newline="")


def _parse_int_time(value: str, lineno: int) -> int:
    try:
        return int(float(value)) if "." in value else int(value)
    except ValueError:
        raise DataError(f"line {lineno}: unparseable timestamp {value!r}") from None


def _read_plain_csv(path: Path) -> list[tuple[str, str, int]]:
    rows = []
    with _open_text(path) as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if lineno == 1 and [c.strip().lower() for c in rec] == ["user", "item", "timestamp"]:
                continue
            if len(rec) != 3:
                raise DataError(f"line {lineno}: expected 3 columns user,item,timestamp, got {len(rec)}")
            u, i, t = (c.strip() for c in rec)
            if not t:
                raise DataError(f"line {lineno}: missing timestamp")
            rows.append((u, i, _parse_int_time(t, lineno)))
    return rows


def _parse_tafeng_date(value: str, lineno: int) -> int:
    value = value.strip()
    for fmt in ("%m/%d/%Y", "%Y-%m-%d", "%Y-%m-%d %H:%M:%S"):
        try:
            d = dt.datetime.strptime(value, fmt).replace(tzinfo=dt.timezone.utc)
            return int(d.timestamp())
        except ValueError:
            continue
    raise DataError(f"line {lineno}: unparseable timestamp {value!r}")


def _read_tafeng(path: Path) -> list[tuple[str, str, int]]:
    """Kaggle Ta-Feng dump: header with TRANSACTION_DT, CUSTOMER_ID, PRODUCT_ID."""
    rows = []
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        cols = [h.strip().upper() for h in header]
        try:
            ct, cu, ci = (cols.index(c) for c in ("TRANSACTION_DT", "CUSTOMER_ID", "PRODUCT_ID"))
        except ValueError:
            raise DataError("line 1: Ta-Feng header must contain TRANSACTION_DT, CUSTOMER_ID, PRODUCT_ID") from None
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(cols):
                raise DataError(f"line {lineno}: expected {len(cols)} columns, got {len(rec)}")
            rows.append((rec[cu].strip(), rec[ci].strip(), _parse_tafeng_date(rec[ct], lineno)))
    return rows


def _read_amazon(path: Path) -> list[tuple[str, str, int]]:
    """Amazon reviews: ratings-only CSV (user,item,rating,time) or JSON lines with
    reviewerID / asin / unixReviewTime."""
    rows = []
    with _open_text(path) as fh:
        first = fh.read(1)
        fh.seek(0)
        if first == "{":
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    rows.append((str(rec["reviewerID"]), str(rec["asin"]), int(rec["unixReviewTime"])))
                except (ValueError, KeyError) as exc:
                    raise DataError(f"line {lineno}: malformed review record ({exc})") from None
        else:
            for lineno, rec in enumerate(csv.reader(fh), start=1):
                if not rec:
                    continue
                if len(rec) != 4:
                    raise DataError(f"line {lineno}: expected 4 columns user,item,rating,timestamp, got {len(rec)}")
                rows.append((rec[0].strip(), rec[1].strip(), _parse_int_time(rec[3].strip(), lineno)))
    return rows


def parse_interactions(path, format: str = "csv") -> InteractionLog:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    readers = {"csv": _read_plain_csv, "tafeng": _read_tafeng, "amazon": _read_amazon}
    if format not in readers:
        raise DataError(f"unknown format {format!r}; expected one of {', '.join(FORMATS)}")
    rows = readers[format](path)
    if not rows:
        raise DataError("no interactions")
    return _remap(rows)


# ---------------------------------------------------------------- filtering


def kcore_filter(log_: InteractionLog, k: int = 5, iterate: bool = False) -> InteractionLog:
    """Drop users with fewer than ``k`` interactions, then items with fewer than ``k``.

    The default is one pass. ``iterate=True`` repeats until every remaining
    user and item has at least ``k`` interactions.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = np.ones(len(log_), dtype=bool)
    while True:
        ucount = np.bincount(log_.users[keep], minlength=log_.user_count)
        keep &= ucount[log_.users] >= k
        icount = np.bincount(log_.items[keep], minlength=log_.item_count + 1)
        keep &= icount[log_.items] >= k
        if not iterate:
            break
        ucount = np.bincount(log_.users[keep], minlength=log_.user_count)
        icount = np.bincount(log_.items[keep], minlength=log_.item_count + 1)
        if (ucount[log_.users[keep]] >= k).all() and (icount[log_.items[keep]] >= k).all():
            break
    if not keep.any():
        raise DataError("filter removed everything")
    return _remap(_rows_from_log(log_, keep))


# -------------------------------------------------------------------- split


@dataclass
class UserHistory:
    items: np.ndarray
    times: np.ndarray


@dataclass
class SplitSpec:
    """Per-user leave-one-out split. ``full`` keeps every interaction for
    negative-candidate pools at evaluation time."""

    train: list[UserHistory]
    valid: list[tuple[int, int]]
    test: list[tuple[int, int]]
    full: list[UserHistory]
    item_count: int

    @property
    def user_count(self) -> int:
        return len(self.train)

    def train_interactions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        users = np.concatenate([np.full(len(h.items), u) for u, h in enumerate(self.train)])
        items = np.concatenate([h.items for h in self.train])
        times = np.concatenate([h.times for h in self.train])
        return users, items, times


def split_leave_one_out(log_: InteractionLog) -> SplitSpec:
    train, valid, test, full = [], [], [], []
    for u, (items, times) in enumerate(log_.per_user()):
        if len(items) < 3:
            raise DataError(f"user {log_.user_labels[u]} has {len(items)} interactions; need >= 3")
        train.append(UserHistory(items[:-2].copy(), times[:-2].copy()))
        valid.append((int(items[-2]), int(times[-2])))
        test.append((int(items[-1]), int(times[-1])))
        full.append(UserHistory(items.copy(), times.copy()))
    return SplitSpec(train, valid, test, full, log_.item_count)


# --------------------------------------------------------- calendar features


def calendar_arrays(ts, tz_offset: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised month-of-year, ISO-week-of-year minus one and weekday (Monday 0)."""
    ts = np.asarray(ts, dtype=np.int64) + int(tz_offset)
    days = np.floor_divide(ts, SECONDS_PER_DAY)
    weekday = (days + 3) % 7  # 1970-01-01 was a Thursday
    d64 = days.astype("datetime64[D]")
    month = (d64.astype("datetime64[M]").astype(np.int64) % 12).astype(np.int64)
    thursday = (days - weekday + 3).astype("datetime64[D]")
    year_start = thursday.astype("datetime64[Y]").astype("datetime64[D]")
    week = (thursday - year_start).astype(np.int64) // 7
    return month, week, weekday


def calendar_features(timestamp: int, tz_offset: int = 0) -> TimeFeature:
    m, w, d = calendar_arrays(np.array([timestamp]), tz_offset)
    return TimeFeature(int(m[0]), int(w[0]), int(d[0]))


def day_bucket(ts, tz_offset: int = 0):
    return np.floor_divide(np.asarray(ts, dtype=np.int64) + int(tz_offset), SECONDS_PER_DAY)


# ---------------------------------------------------------------- sequences


@dataclass
class UserSequence:
    item_ids: np.ndarray
    months: np.ndarray
    weeks: np.ndarray
    days: np.ndarray
    valid_mask: np.ndarray
    target_item: int
    target_time: TimeFeature
    user: int = -1

    @property
    def time_features(self) -> list[TimeFeature]:
        return [TimeFeature(int(m), int(w), int(d)) for m, w, d in zip(self.months, self.weeks, self.days)]


@dataclass
class SequenceBatch:
    items: np.ndarray  # (B, L)
    months: np.ndarray
    weeks: np.ndarray
    days: np.ndarray
    mask: np.ndarray  # (B, L) bool
    target_items: np.ndarray  # (B,)
    target_months: np.ndarray
    target_weeks: np.ndarray
    target_days: np.ndarray
    users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.items)

    @property
    def seq_len(self) -> int:
        return self.items.shape[1]


def build_sequence(
    history_items: Sequence[int],
    history_times: Sequence[int],
    L: int,
    target_item: int,
    target_time: int,
    tz_offset: int = 0,
    user: int = -1,
) -> UserSequence:
    """Keep the ``L`` most recent items, front-padded with item 0."""
    items = np.asarray(history_items, dtype=np.int64)[-L:] if L > 0 else np.zeros(0, np.int64)
    times = np.asarray(history_times, dtype=np.int64)[-L:] if L > 0 else np.zeros(0, np.int64)
    n = len(items)
    pad = L - n
    m, w, d = calendar_arrays(times, tz_offset)
    out_items = np.concatenate([np.zeros(pad, np.int64), items])
    months = np.concatenate([np.full(pad, PAD_MONTH), m]).astype(np.int64)
    weeks = np.concatenate([np.full(pad, PAD_WEEK), w]).astype(np.int64)
    days = np.concatenate([np.full(pad, PAD_DAY), d]).astype(np.int64)
    mask = np.concatenate([np.zeros(pad, bool), np.ones(n, bool)])
    return UserSequence(out_items, months, weeks, days, mask, int(target_item),
                        calendar_features(target_time, tz_offset), user)


def stack_sequences(seqs: Sequence[UserSequence]) -> SequenceBatch:
    return SequenceBatch(
        items=np.stack([s.item_ids for s in seqs]),
        months=np.stack([s.months for s in seqs]),
        weeks=np.stack([s.weeks for s in seqs]),
        days=np.stack([s.days for s in seqs]),
        mask=np.stack([s.valid_mask for s in seqs]),
        target_items=np.array([s.target_item for s in seqs], dtype=np.int64),
        target_months=np.array([s.target_time.month for s in seqs], dtype=np.int64),
        target_weeks=np.array([s.target_time.week for s in seqs], dtype=np.int64),
        target_days=np.array([s.target_time.day for s in seqs], dtype=np.int64),
        users=np.array([s.user for s in seqs], dtype=np.int64),
    )


class SequenceBuilder:
    """Vectorised batch assembly from per-user histories with precomputed calendar features."""

    def __init__(self, histories: Sequence[UserHistory], L: int, tz_offset: int = 0):
        self.L = L
        self.tz_offset = tz_offset
        self.items = [h.items for h in histories]
        self.times = [h.times for h in histories]
        self.feats = [calendar_arrays(h.times, tz_offset) for h in histories]

    def batch(self, users, ends, target_items, target_times) -> SequenceBatch:
        """Sequence for each ``(user, end)``: history ``[:end]`` of that user."""
        B, L = len(users), self.L
        items = np.zeros((B, L), np.int64)
        months = np.full((B, L), PAD_MONTH, np.int64)
        weeks = np.full((B, L), PAD_WEEK, np.int64)
        days = np.full((B, L), PAD_DAY, np.int64)
        mask = np.zeros((B, L), bool)
        for b, (u, e) in enumerate(zip(users, ends)):
            s = max(0, e - L)
            n = e - s
            if n == 0:
                continue
            items[b, L - n:] = self.items[u][s:e]
            m, w, d = self.feats[u]
            months[b, L - n:] = m[s:e]
            weeks[b, L - n:] = w[s:e]
            days[b, L - n:] = d[s:e]
            mask[b, L - n:] = True
        tm, tw, td = calendar_arrays(np.asarray(target_times), self.tz_offset)
        return SequenceBatch(items, months, weeks, days, mask,
                             np.asarray(target_items, dtype=np.int64), tm, tw, td,
                             np.asarray(users, dtype=np.int64))


# --------------------------------------------------------- negative sampling


class NegativeSampler:
    """Uniform draws over items a user had not interacted with strictly before a time."""

    def __init__(self, histories: Sequence[UserHistory], item_count: int):
        self.item_count = item_count
        self.items = [h.items for h in histories]
        self.times = [h.times for h in histories]

    def seen_before(self, user: int, time: int) -> set[int]:
        times = self.times[user]
        end = np.searchsorted(times, time, side="left")
        return set(self.items[user][:end].tolist())

    def eligible(self, user: int, time: int, exclude: Iterable[int] = ()) -> np.ndarray:
        banned = self.seen_before(user, time) | set(exclude)
        return np.array([i for i in range(1, self.item_count + 1) if i not in banned], dtype=np.int64)

    def sample(self, user: int, time: int, rng: np.random.Generator, exclude: Iterable[int] = ()) -> int:
        return int(self.sample_many(user, time, 1, rng, exclude)[0])

    def sample_many(
        self,
        user: int,
        time: int,
        n: int,
        rng: np.random.Generator,
        exclude: Iterable[int] = (),
        replace: bool = True,
        banned: set[int] | None = None,
    ) -> np.ndarray:
        if banned is None:
            banned = self.seen_before(user, time)
        banned = banned | set(exclude)
        n_ok = self.item_count - len(banned - {PAD_ITEM})
        if n_ok <= 0:
            raise DataError(f"user {user}: no eligible negative item before time {time}")
        if not replace and n > n_ok:
            replace = True
        if n_ok < 0.25 * self.item_count:
            pool = np.array([i for i in range(1, self.item_count + 1) if i not in banned], dtype=np.int64)
            return rng.choice(pool, size=n, replace=replace)
        out: list[int] = []
        taken: set[int] = set()
        while len(out) < n:
            for c in rng.integers(1, self.item_count + 1, size=2 * (n - len(out)) + 4):
                c = int(c)
                if c in banned or (not replace and c in taken):
                    continue
                out.append(c)
                taken.add(c)
                if len(out) == n:
                    break
        return np.array(out, dtype=np.int64)


# --------------------------------------------------------------- histograms


class ItemHistograms:
    """Day-bucket interaction counts per item, from training interactions only."""

    def __init__(self, item_count: int, buckets: dict[int, Counter], tz_offset: int = 0):
        self.item_count = item_count
        self.buckets = buckets
        self.tz_offset = tz_offset

    @classmethod
    def from_interactions(cls, items, times, item_count: int, tz_offset: int = 0) -> "ItemHistograms":
        items = np.asarray(items, dtype=np.int64)
        days = day_bucket(times, tz_offset)
        buckets: dict[int, Counter] = {}
        for i, d in zip(items.tolist(), days.tolist()):
            buckets.setdefault(i, Counter())[d] += 1
        return cls(item_count, buckets, tz_offset)

    @classmethod
    def from_split(cls, split: SplitSpec, tz_offset: int = 0) -> "ItemHistograms":
        _, items, times = split.train_interactions()
        return cls.from_interactions(items, times, split.item_count, tz_offset)

    def histogram(self, item: int) -> list[tuple[int, float]]:
        """``(bucket start timestamp, weight)`` pairs sorted by day; empty if the item has no training data."""
        counts = self.buckets.get(item)
        if not counts:
            return []
        total = sum(counts.values())
        return [(d * SECONDS_PER_DAY - self.tz_offset, c / total) for d, c in sorted(counts.items())]

    def weight_matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Histogram mass per month/week/day index for every item (rows: items incl. pad).

        A profile is then ``Am @ M_month + Aw @ M_week + Ad @ M_day``.
        """
        n = self.item_count + 1
        Am = np.zeros((n, N_MONTH + 1))
        Aw = np.zeros((n, N_WEEK + 1))
        Ad = np.zeros((n, N_DAY + 1))
        for item, counts in self.buckets.items():
            days = np.fromiter(counts.keys(), dtype=np.int64)
            cnt = np.fromiter(counts.values(), dtype=np.float64)
            alpha = cnt / cnt.sum()
            m, w, d = calendar_arrays(days * SECONDS_PER_DAY)
            np.add.at(Am[item], m, alpha)
            np.add.at(Aw[item], w, alpha)
            np.add.at(Ad[item], d, alpha)
        return Am, Aw, Ad

    def monthly_shares(self, item: int) -> np.ndarray:
        counts = self.buckets.get(item)
        if not counts:
            raise DataError(f"item {item} has no training interactions")
        shares = np.zeros(N_MONTH)
        days = np.fromiter(counts.keys(), dtype=np.int64)
        cnt = np.fromiter(counts.values(), dtype=np.float64)
        m, _, _ = calendar_arrays(days * SECONDS_PER_DAY)
        np.add.at(shares, m, cnt)
        return shares / shares.sum()

    def to_rows(self) -> list[tuple[int, int, int]]:
        return [(i, d, c) for i in sorted(self.buckets) for d, c in sorted(self.buckets[i].items())]

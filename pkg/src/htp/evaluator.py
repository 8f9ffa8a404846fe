"""Sampled leave-one-out ranking evaluation: HR@M, NDCG@M and AUC."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import NegativeSampler, SequenceBatch, SequenceBuilder, SplitSpec
from .errors import DataError

log = logging.getLogger(__name__)

Scorer = Callable[[SequenceBatch, np.ndarray], np.ndarray]

METRICS = ("HR", "NDCG", "AUC")

REPORT_SCHEMA = {
    "type": "object",
    "required": ["dataset", "config_hash", "runs", "mean", "std"],
    "properties": {
        "dataset": {"type": "string"},
        "config_hash": {"type": "string"},
        "split": {"type": "string"},
        "M": {"type": "integer", "minimum": 1},
        "runs": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["seed", "metrics"],
                "properties": {
                    "seed": {"type": "integer"},
                    "metrics": {"$ref": "#/$defs/metrics"},
                },
            },
        },
        "mean": {"$ref": "#/$defs/metrics"},
        "std": {"$ref": "#/$defs/metrics"},
    },
    "$defs": {
        "metrics": {
            "type": "object",
            "required": list(METRICS),
            "properties": {m: {"type": "number", "minimum": 0, "maximum": 1} for m in METRICS},
        }
    },
}


@dataclass(frozen=True)
class EvalConfig:
    M: int = 10
    negatives_per_user: int = 100
    runs: int = 5
    seed: int = 0
    batch_size: int = 512
    full_auc: bool = False

    def __post_init__(self):
        if self.negatives_per_user < self.M:
            raise ValueError("negatives_per_user must be >= M")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


@dataclass
class RankingResult:
    user: int
    ranked: np.ndarray  # candidate ids, best first
    rank: int  # 1-based position of the ground truth


@dataclass
class EvalResult:
    metrics: dict[str, float]
    ranks: np.ndarray
    auc: np.ndarray
    users: np.ndarray
    rankings: list[RankingResult] = field(default_factory=list)


def hit_at_m(rank: int, M: int) -> int:
    return int(rank <= M)


def ndcg_at_m(rank: int, M: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= M else 0.0


def auc_sampled(pos_score: float, neg_scores) -> float:
    neg = np.asarray(neg_scores, dtype=np.float64)
    return float(((neg < pos_score).sum() + 0.5 * (neg == pos_score).sum()) / len(neg))


def rank_candidates(candidates: np.ndarray, scores: np.ndarray, truth: int) -> RankingResult:
    """Order by descending score, ties by smaller item id."""
    order = np.lexsort((candidates, -scores))
    ranked = candidates[order]
    rank = int(np.flatnonzero(ranked == truth)[0]) + 1
    return RankingResult(-1, ranked, rank)


def ground_truth_rank(candidates: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Rank of column 0 in each row, with the same tie rule as :func:`rank_candidates`."""
    pos = scores[:, :1]
    pos_id = candidates[:, :1]
    neg, neg_id = scores[:, 1:], candidates[:, 1:]
    above = (neg > pos) | ((neg == pos) & (neg_id < pos_id))
    return 1 + above.sum(axis=1)


def _targets(split: SplitSpec, which: str):
    if which == "test":
        return split.test, 1
    if which in ("valid", "validation"):
        return split.valid, 2
    raise ValueError(f"unknown split {which!r}")


def evaluate(scorer: Scorer, split: SplitSpec, which: str = "test", config: EvalConfig = EvalConfig(),
             L: int = 50, run: int = 0, tz_offset: int = 0, keep_rankings: bool = False,
             builder: SequenceBuilder | None = None) -> EvalResult:
    """Score the held-out item against sampled negatives for every user.

    For the test split the history includes the validation item; for the
    validation split it excludes the test item. Negatives are items the user
    had not interacted with before the target time, drawn with an rng seeded
    from ``(seed, run, user)``.
    """
    targets, back = _targets(split, which)
    builder = builder or SequenceBuilder(split.full, L, tz_offset)
    sampler = NegativeSampler(split.full, split.item_count)
    users, cands = [], []
    for u, (item, t) in enumerate(targets):
        rng = np.random.default_rng([config.seed, run, u])
        try:
            if config.full_auc:
                negs = sampler.eligible(u, t, exclude=(item,))
                if len(negs) == 0:
                    raise DataError("no eligible negatives")
            else:
                negs = sampler.sample_many(u, t, config.negatives_per_user, rng, exclude=(item,), replace=False)
        except DataError:
            log.warning("user %d skipped: no eligible negative items", u)
            continue
        users.append(u)
        cands.append(np.concatenate([[item], negs]))
    if not users:
        raise DataError("no user could be evaluated")

    ranks, aucs, rankings = [], [], []
    for start in range(0, len(users), config.batch_size):
        bu = users[start:start + config.batch_size]
        ends = [len(split.full[u].items) - back for u in bu]
        batch = builder.batch(bu, ends, [targets[u][0] for u in bu], [targets[u][1] for u in bu])
        if config.full_auc:
            for k, u in enumerate(bu):
                sub = _slice_batch(batch, k)
                c = cands[start + k][None, :]
                s = np.asarray(scorer(sub, c), dtype=np.float64)
                ranks.append(int(ground_truth_rank(c, s)[0]))
                aucs.append(auc_sampled(s[0, 0], s[0, 1:]))
                if keep_rankings:
                    rr = rank_candidates(c[0], s[0], c[0, 0])
                    rr.user = u
                    rankings.append(rr)
            continue
        c = np.stack(cands[start:start + len(bu)])
        s = np.asarray(scorer(batch, c), dtype=np.float64)
        ranks.extend(ground_truth_rank(c, s).tolist())
        pos = s[:, :1]
        aucs.extend((((s[:, 1:] < pos).sum(1) + 0.5 * (s[:, 1:] == pos).sum(1)) / (c.shape[1] - 1)).tolist())
        if keep_rankings:
            for k, u in enumerate(bu):
                rr = rank_candidates(c[k], s[k], c[k, 0])
                rr.user = u
                rankings.append(rr)

    ranks = np.asarray(ranks)
    aucs = np.asarray(aucs)
    hits = (ranks <= config.M).astype(np.float64)
    ndcg = np.where(ranks <= config.M, 1.0 / np.log2(ranks + 1), 0.0)
    metrics = {"HR": float(hits.mean()), "NDCG": float(ndcg.mean()), "AUC": float(aucs.mean())}
    return EvalResult(metrics, ranks, aucs, np.asarray(users), rankings)


def _slice_batch(batch: SequenceBatch, k: int) -> SequenceBatch:
    sl = slice(k, k + 1)
    return SequenceBatch(batch.items[sl], batch.months[sl], batch.weeks[sl], batch.days[sl],
                         batch.mask[sl], batch.target_items[sl], batch.target_months[sl],
                         batch.target_weeks[sl], batch.target_days[sl], batch.users[sl])


def summarize_runs(run_metrics: Sequence[dict[str, float]]) -> tuple[dict, dict]:
    mean = {m: float(np.mean([r[m] for r in run_metrics])) for m in METRICS}
    std = {m: float(np.std([r[m] for r in run_metrics])) for m in METRICS}
    return mean, std


def multi_run_report(train_and_evaluate: Callable[[int], dict[str, float]], runs: int, seed: int,
                     dataset: str, config_hash: str, split: str = "test", M: int = 10) -> dict:
    """Train/evaluate ``runs`` times with seeds ``seed + run`` and aggregate."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    records = []
    for run in range(runs):
        s = seed + run
        records.append({"seed": s, "metrics": dict(train_and_evaluate(s))})
    mean, std = summarize_runs([r["metrics"] for r in records])
    return {"dataset": dataset, "config_hash": config_hash, "split": split, "M": M,
            "runs": records, "mean": mean, "std": std}


def random_rank_ndcg(n_candidates: int = 101, M: int = 10) -> float:
    """Expected NDCG@M when the ground truth lands uniformly among ``n_candidates``."""
    return sum(1.0 / math.log2(r + 1) for r in range(1, min(M, n_candidates) + 1)) / n_candidates

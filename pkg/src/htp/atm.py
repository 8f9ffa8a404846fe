"""Absolute time module: item-level calendar profiles matched against the
recommendation time with scaled dot-product attention."""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from . import diffcore as dc
from .dataset import N_MONTH, ItemHistograms
from .embeddings import EmbeddingTables


class TimeProfiles:
    """Histogram mass per calendar index, kept constant; profiles are
    recomputed from the live embedding tables on every call."""

    def __init__(self, histograms: ItemHistograms):
        self.histograms = histograms
        self.month_w, self.week_w, self.day_w = histograms.weight_matrices()

    def build(self, tables: EmbeddingTables, items, use_month=True, use_week=True, use_day=True) -> dc.Tensor:
        """Profiles of ``items`` (any int array shape) -> shape ``items.shape + (d,)``.

        Items without training interactions get the zero profile.
        """
        items = np.asarray(items)
        parts = []
        if use_month:
            parts.append(dc.matmul(self.month_w[items], tables.month))
        if use_week:
            parts.append(dc.matmul(self.week_w[items], tables.week))
        if use_day:
            parts.append(dc.matmul(self.day_w[items], tables.day))
        if not parts:
            return dc.Tensor(np.zeros(items.shape + (tables.dim,)))
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out


def build_time_profiles(histograms: ItemHistograms, tables: EmbeddingTables, items, **flags) -> dc.Tensor:
    return TimeProfiles(histograms).build(tables, items, **flags)


def atm_attention(query: dc.Tensor, keys: dc.Tensor, values: dc.Tensor, mask) -> dc.Tensor:
    """``softmax(q K^T / sqrt(d)) V`` over valid positions.

    ``query`` is ``(..., d)``, ``keys``/``values`` ``(..., L, d)``. A sequence
    with no valid position yields the zero vector.
    """
    d = keys.shape[-1]
    scores = dc.matmul(keys, dc.expand_dims(query, -1))  # (..., L, 1)
    scores = dc.reshape(scores, scores.shape[:-1]) * (1.0 / math.sqrt(d))
    weights = dc.softmax(scores, mask, allow_empty=True)
    out = dc.matmul(dc.expand_dims(weights, -2), values)  # (..., 1, d)
    return dc.reshape(out, out.shape[:-2] + (d,))


def export_seasonal_profile(histograms: ItemHistograms, item: int) -> list[tuple[int, int, float]]:
    """``(item, month_index, share)`` rows, one per calendar month."""
    shares = histograms.monthly_shares(item)
    return [(item, m, float(shares[m])) for m in range(N_MONTH)]


def profiles_csv(histograms: ItemHistograms, items=None) -> str:
    items = sorted(histograms.buckets) if items is None else items
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["item_id", "month_index", "share"])
    for i in items:
        for row in export_seasonal_profile(histograms, i):
            w.writerow([row[0], row[1], f"{row[2]:.6f}"])
    return buf.getvalue()

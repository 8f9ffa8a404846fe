"""Item, position and calendar embedding tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .dataset import N_DAY, N_MONTH, N_WEEK, PAD_DAY, PAD_ITEM, PAD_MONTH, PAD_WEEK, TimeFeature

INIT_STD = 0.01


@dataclass
class EmbeddingTables:
    item: dc.Tensor  # (N+1, d), row 0 = pad
    position: dc.Tensor  # (L, d)
    month: dc.Tensor  # (13, d), last row = pad
    week: dc.Tensor  # (54, d)
    day: dc.Tensor  # (8, d)

    @classmethod
    def init(cls, item_count: int, L: int, d: int, rng: np.random.Generator, std: float = INIT_STD):
        def table(rows, pad_row=None, name=None):
            w = rng.normal(0.0, std, size=(rows, d))
            if pad_row is not None:
                w[pad_row] = 0.0
            return dc.Tensor(w, requires_grad=True, name=name)

        return cls(
            item=table(item_count + 1, PAD_ITEM, "item"),
            position=table(L, None, "position"),
            month=table(N_MONTH + 1, PAD_MONTH, "month"),
            week=table(N_WEEK + 1, PAD_WEEK, "week"),
            day=table(N_DAY + 1, PAD_DAY, "day"),
        )

    @property
    def dim(self) -> int:
        return self.item.shape[1]

    def tensors(self) -> dict[str, dc.Tensor]:
        return {"item": self.item, "position": self.position, "month": self.month,
                "week": self.week, "day": self.day}


def embed_sequence_items(tables: EmbeddingTables, items, mask) -> dc.Tensor:
    """Position-aware item embeddings ``e_i + p_i``; pad slots are zero rows."""
    items = np.asarray(items)
    if items.size and (items.min() < 0 or items.max() >= tables.item.shape[0]):
        raise IndexError(f"item id out of range [0, {tables.item.shape[0] - 1}]")
    if items.shape[-1] != tables.position.shape[0]:
        raise ValueError(f"sequence length {items.shape[-1]} != position table size {tables.position.shape[0]}")
    m = np.asarray(mask, dtype=np.float64)[..., None]
    return (dc.gather(tables.item, items) + tables.position) * m


def embed_timestamp(tables: EmbeddingTables, months, weeks, days,
                    use_month: bool = True, use_week: bool = True, use_day: bool = True) -> dc.Tensor:
    """Sum of month, week and day rows. Disabled granularities contribute nothing.

    Pad indices are masked out so their rows never receive gradient.
    """
    months = np.asarray(months)
    parts = []
    for on, table, idx, pad in ((use_month, tables.month, months, PAD_MONTH),
                                (use_week, tables.week, weeks, PAD_WEEK),
                                (use_day, tables.day, days, PAD_DAY)):
        if on:
            idx = np.asarray(idx)
            parts.append(dc.gather(table, idx) * (idx != pad)[..., None].astype(np.float64))
    if not parts:
        return dc.Tensor(np.zeros(months.shape + (tables.dim,)))
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def embed_feature(tables: EmbeddingTables, tf: TimeFeature, **flags) -> dc.Tensor:
    return embed_timestamp(tables, np.array(tf.month), np.array(tf.week), np.array(tf.day), **flags)


def interval_embed(tables: EmbeddingTables, tf_i: TimeFeature, tf_j: TimeFeature, **flags) -> dc.Tensor:
    """``e_{t_i} - e_{t_j}``."""
    return embed_feature(tables, tf_i, **flags) - embed_feature(tables, tf_j, **flags)

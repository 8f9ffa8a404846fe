"""Item time interval module: H layers of top-K, interval-aware cosine aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

PAIR_SENTINEL = -1e9


@dataclass
class ItimLayer:
    W1: dc.Tensor
    W2: dc.Tensor
    W3: dc.Tensor
    Wt: dc.Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, std: float | None = None):
        std = std if std is not None else 1.0 / np.sqrt(d)
        return cls(*(dc.Tensor(rng.normal(0.0, std, (d, d)), requires_grad=True, name=n)
                     for n in ("W1", "W2", "W3", "Wt")))

    def tensors(self) -> dict[str, dc.Tensor]:
        return {"W1": self.W1, "W2": self.W2, "W3": self.W3, "Wt": self.Wt}


def pair_intervals(times: dc.Tensor) -> dc.Tensor:
    """``out[..., i, j, :] = e_{t_i} - e_{t_j}`` (the interval r_ji)."""
    return dc.expand_dims(times, -2) - dc.expand_dims(times, -3)


def pair_scores(items: dc.Tensor, times: dc.Tensor, layer: ItimLayer, mask) -> dc.Tensor:
    """``a_ij = cos(e_i W2, e_j W3 + Wt r_ji)`` with ``r_ji = e_{t_i} - e_{t_j}``.

    Pairs touching a pad get :data:`PAIR_SENTINEL`. ``items`` and ``times`` are
    (..., L, d). ``Wt r_ji`` is split as ``Wt e_{t_i} - Wt e_{t_j}`` so the only
    (L, L, d) tensors are the broadcast key and the cosine itself.
    """
    mask = np.asarray(mask, dtype=bool)
    query = dc.expand_dims(dc.matmul(items, layer.W2), -2)  # (..., L, 1, d)
    t_proj = dc.matmul(times, dc.transpose(layer.Wt))  # rows: Wt e_t
    key_j = dc.expand_dims(dc.matmul(items, layer.W3) - t_proj, -3)  # (..., 1, L, d)
    key = key_j + dc.expand_dims(t_proj, -2)  # (..., L, L, d)
    cos = dc.cosine(query, key)
    valid = mask[..., :, None] & mask[..., None, :]
    return cos * valid + np.where(valid, 0.0, PAIR_SENTINEL)


def topk_select(scores: np.ndarray, K: int, mask) -> np.ndarray:
    """Boolean selection of the K best valid columns in every row.

    Rows of padded positions select nothing. Ties go to the lower index.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    scores = np.asarray(scores)
    mask = np.asarray(mask, dtype=bool)
    L = scores.shape[-1]
    valid = mask[..., :, None] & mask[..., None, :]
    keyed = np.where(valid, scores, -np.inf)
    # Stable sort of the negated scores keeps index order among equal values.
    order = np.argsort(-keyed, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(L), axis=-1)
    return (rank < K) & valid


def aggregate_layer(items: dc.Tensor, times: dc.Tensor, intervals_state: dc.Tensor | None,
                    scores: dc.Tensor, selected: np.ndarray, layer: ItimLayer):
    """One aggregation step.

    ``e_i + sum_{j in topK(i)} a_ij e_j W1`` and ``r_i = sum_{j in topK(i)} a_ij r_ji``.
    Returns ``(items, intervals_state)``. The incoming interval state does not
    feed the update; it is accepted so layers chain uniformly.
    """
    weights = scores * selected.astype(np.float64)  # (..., L, L), zero off top-K
    new_items = items + dc.matmul(weights, dc.matmul(items, layer.W1))
    # sum_j a_ij (t_i - t_j) = (sum_j a_ij) t_i - sum_j a_ij t_j
    new_r = dc.sum_(weights, axis=-1, keepdims=True) * times - dc.matmul(weights, times)
    return new_items, new_r


def itim_forward(items: dc.Tensor, times: dc.Tensor, layers: list[ItimLayer], K: int, mask,
                 dropout: float = 0.0, rng: np.random.Generator | None = None,
                 training: bool = False):
    """Run all layers; returns ``(e_c, r)``, both (..., L, d).

    ``times`` are the timestamp embeddings of the sequence positions (pads zero).
    """
    if not layers:
        raise ValueError("ITIM needs at least one layer")
    r = None
    for layer in layers:
        scores = pair_scores(items, times, layer, mask)
        selected = topk_select(scores.data, K, mask)
        items, r = aggregate_layer(items, times, r, scores, selected, layer)
        items = dc.dropout(items, dropout, rng, training)
    return items, r

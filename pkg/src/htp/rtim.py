"""Recommendation time interval module."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass
class RtimParams:
    w: dc.Tensor  # (d,)
    Wr: dc.Tensor  # (d, d)

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, std: float | None = None):
        std = std if std is not None else 1.0 / np.sqrt(d)
        return cls(dc.Tensor(rng.normal(0.0, std, d), requires_grad=True, name="w"),
                   dc.Tensor(rng.normal(0.0, std, (d, d)), requires_grad=True, name="Wr"))

    def tensors(self) -> dict[str, dc.Tensor]:
        return {"w": self.w, "Wr": self.Wr}


def rec_intervals(target_time: dc.Tensor, times: dc.Tensor, mask) -> dc.Tensor:
    """Rows ``e_{t_{L+1}} - e_{t_i}``; pad rows are zero. ``target_time``: (..., d)."""
    m = np.asarray(mask, dtype=np.float64)[..., None]
    return (dc.expand_dims(target_time, -2) - times) * m


def time_decay_weights(intervals: dc.Tensor, w: dc.Tensor, mask) -> dc.Tensor:
    """Softmax over ``c_i = <r_{i,L+1}, w>`` restricted to valid positions."""
    return dc.softmax(dc.matmul(intervals, w), mask, allow_empty=True)


def alignment_weights(intervals: dc.Tensor, item_intervals: dc.Tensor, Wr: dc.Tensor, mask) -> dc.Tensor:
    """Softmax over ``g_i = r_{i,L+1}^T Wr r_i`` restricted to valid positions."""
    g = dc.sum_(dc.matmul(intervals, Wr) * item_intervals, axis=-1)
    return dc.softmax(g, mask, allow_empty=True)


def cascade_aggregate(phi_time: dc.Tensor, phi_align: dc.Tensor, items: dc.Tensor) -> dc.Tensor:
    """``sum_i phi_align(i) phi_time(i) e_i``, deliberately not renormalised."""
    weights = phi_align * phi_time  # (..., L)
    out = dc.matmul(dc.expand_dims(weights, -2), items)
    return dc.reshape(out, out.shape[:-2] + (items.shape[-1],))


def rtim_forward(target_time: dc.Tensor, times: dc.Tensor, e_c: dc.Tensor, r: dc.Tensor,
                 params: RtimParams, mask) -> dc.Tensor:
    R = rec_intervals(target_time, times, mask)
    phi_t = time_decay_weights(R, params.w, mask)
    phi_a = alignment_weights(R, r, params.Wr, mask)
    return cascade_aggregate(phi_t, phi_a, e_c)

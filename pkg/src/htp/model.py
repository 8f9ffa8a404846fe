"""HTP: fusion of the absolute-time, item-interval and recommendation-interval
modules, candidate scoring and the training objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .atm import TimeProfiles, atm_attention
from .dataset import PAD_ITEM, ItemHistograms, SequenceBatch
from .embeddings import EmbeddingTables, embed_sequence_items, embed_timestamp
from .itim import ItimLayer, itim_forward
from .rtim import RtimParams, rtim_forward

LOG_FLOOR = 1e-12
REGULARIZED = ("item", "week", "day", "month", "position")

ABLATIONS = ("no-atm", "no-itim-rtim", "no-month", "no-week", "no-day", "no-time")


@dataclass(frozen=True)
class AblationConfig:
    use_atm: bool = True
    use_itim_rtim: bool = True
    use_month: bool = True
    use_week: bool = True
    use_day: bool = True
    time_as_position_only: bool = False

    def __post_init__(self):
        if not (self.use_atm or self.use_itim_rtim or self.time_as_position_only):
            raise ValueError("at least one of ATM or ITIM+RTIM must be enabled")

    @classmethod
    def from_name(cls, name: str | None) -> "AblationConfig":
        if name in (None, "", "full", "none"):
            return cls()
        table = {
            "no-atm": {"use_atm": False},
            "no-itim-rtim": {"use_itim_rtim": False},
            "no-month": {"use_month": False},
            "no-week": {"use_week": False},
            "no-day": {"use_day": False},
            "no-time": {"time_as_position_only": True},
        }
        if name not in table:
            raise ValueError(f"unknown ablation {name!r}; expected one of {', '.join(ABLATIONS)}")
        return cls(**table[name])

    def time_flags(self) -> dict:
        on = not self.time_as_position_only
        return {"use_month": on and self.use_month, "use_week": on and self.use_week,
                "use_day": on and self.use_day}


@dataclass(frozen=True)
class ModelConfig:
    d: int = 50
    L: int = 50
    H: int = 2
    K: int = 3
    dropout: float = 0.5
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return asdict(self)


class HTPModel:
    def __init__(self, config: ModelConfig, item_count: int, histograms: ItemHistograms,
                 rng: np.random.Generator, table_std: float = 0.01, weight_std: float | None = None):
        if config.H < 1 or config.K < 1:
            raise ValueError("H and K must be >= 1")
        self.config = config
        self.item_count = item_count
        self.histograms = histograms
        self.profiles = TimeProfiles(histograms)
        self.tables = EmbeddingTables.init(item_count, config.L, config.d, rng, std=table_std)
        self.itim_layers = [ItimLayer.init(config.d, rng, weight_std) for _ in range(config.H)]
        self.rtim = RtimParams.init(config.d, rng, weight_std)

    # ------------------------------------------------------------ parameters

    def parameters(self) -> dict[str, dc.Tensor]:
        out = dict(self.tables.tensors())
        for h, layer in enumerate(self.itim_layers):
            for k, t in layer.tensors().items():
                out[f"itim.{h}.{k}"] = t
        for k, t in self.rtim.tensors().items():
            out[f"rtim.{k}"] = t
        return out

    def regularized(self) -> list[dc.Tensor]:
        return [self.tables.tensors()[k] for k in REGULARIZED]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise KeyError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
            t.zero_grad()

    def zero_grad(self) -> None:
        dc.zero_grad(self.parameters().values())

    # --------------------------------------------------------------- forward

    def forward_parts(self, batch: SequenceBatch, training: bool = False,
                      rng: np.random.Generator | None = None) -> dict[str, dc.Tensor]:
        cfg, abl = self.config, self.config.ablation
        flags = abl.time_flags()
        mask = batch.mask
        p = cfg.dropout if training else 0.0
        e_s = embed_sequence_items(self.tables, batch.items, mask)
        e_s = dc.dropout(e_s, p, rng, training)
        times = embed_timestamp(self.tables, batch.months, batch.weeks, batch.days, **flags)
        times = times * mask[..., None].astype(np.float64)
        target = embed_timestamp(self.tables, batch.target_months, batch.target_weeks,
                                 batch.target_days, **flags)
        zero = dc.Tensor(np.zeros((len(batch), cfg.d)))
        parts = {"atm": zero, "rtim": zero}

        if abl.use_atm:
            keys = self.profiles.build(self.tables, batch.items, **flags)
            parts["atm"] = atm_attention(target, keys, e_s, mask)

        if abl.use_itim_rtim:
            e_c, r = itim_forward(e_s, times, self.itim_layers, cfg.K, mask, p, rng, training)
            parts["rtim"] = rtim_forward(target, times, e_c, r, self.rtim, mask)
        else:
            e_c = e_s
        # Sequences are front-padded, so the latest item sits in the last slot.
        parts["last"] = dc.take(e_c, (slice(None), -1))
        return parts

    def forward(self, batch: SequenceBatch, training: bool = False,
                rng: np.random.Generator | None = None) -> dc.Tensor:
        parts = self.forward_parts(batch, training, rng)
        return parts["atm"] + parts["rtim"] + parts["last"]

    def score(self, e_u: dc.Tensor, candidates) -> dc.Tensor:
        """Inner products of ``e_u`` (B, d) with raw item embeddings of ``candidates`` (B, C)."""
        return score_candidates(self.tables.item, e_u, candidates)

    def score_candidates_batch(self, batch: SequenceBatch, candidates) -> np.ndarray:
        """Evaluation-mode scores as a plain array (no graph is kept)."""
        e_u = self.forward(batch, training=False)
        return self.score(dc.Tensor(e_u.data), candidates).data

    def loss(self, batch: SequenceBatch, negatives, lam: float, training: bool = True,
             rng: np.random.Generator | None = None) -> dc.Tensor:
        e_u = self.forward(batch, training, rng)
        cands = np.stack([batch.target_items, np.asarray(negatives)], axis=1)
        s = self.score(e_u, cands)
        return bce_loss(dc.take(s, (slice(None), 0)), dc.take(s, (slice(None), 1)),
                        self.regularized(), lam)


def score_candidates(item_table: dc.Tensor, e_u: dc.Tensor, candidates) -> dc.Tensor:
    candidates = np.asarray(candidates, dtype=np.int64)
    if (candidates == PAD_ITEM).any():
        raise ValueError("pad item cannot be scored as a candidate")
    emb = dc.gather(item_table, candidates)  # (..., C, d)
    s = dc.matmul(emb, dc.expand_dims(e_u, -1))
    return dc.reshape(s, candidates.shape)


def bce_loss(pos: dc.Tensor, neg: dc.Tensor, reg: list[dc.Tensor] | tuple = (), lam: float = 0.0) -> dc.Tensor:
    """Mean over pairs of ``-[log s(r+) + log(1 - s(r-))]`` plus ``lam * sum ||T||_F^2``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    pos_term = dc.log(dc.sigmoid(pos), floor=LOG_FLOOR)
    neg_term = dc.log(dc.sigmoid(-dc.as_tensor(neg)), floor=LOG_FLOOR)
    loss = -dc.mean(pos_term + neg_term)
    if lam > 0:
        for t in reg:
            loss = loss + lam * dc.sum_(t * t)
    return loss

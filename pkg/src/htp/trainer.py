"""Mini-batch training with per-epoch negative resampling, Adam, early stopping
on validation NDCG and resumable checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataset import ItemHistograms, SequenceBuilder, SplitSpec
from .errors import CheckpointError, TrainingError
from .evaluator import EvalConfig, evaluate
from .model import AblationConfig, HTPModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "htp-checkpoint"
CHECKPOINT_VERSION = 1


class Adam:
    def __init__(self, params: dict[str, dc.Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


@dataclass
class TrainingInstances:
    """Every training interaction with a non-empty history becomes one positive."""

    users: np.ndarray
    ends: np.ndarray  # history is train[user][:end], target is train[user][end]
    targets: np.ndarray
    times: np.ndarray

    @classmethod
    def from_split(cls, split: SplitSpec) -> "TrainingInstances":
        users, ends, targets, times = [], [], [], []
        for u, h in enumerate(split.train):
            n = len(h.items)
            if n < 2:
                continue
            users.append(np.full(n - 1, u))
            ends.append(np.arange(1, n))
            targets.append(h.items[1:])
            times.append(h.times[1:])
        if not users:
            raise TrainingError("no training instances: every user has fewer than two training interactions")
        return cls(*(np.concatenate(a).astype(np.int64) for a in (users, ends, targets, times)))

    def __len__(self) -> int:
        return len(self.users)


def sample_training_negatives(split: SplitSpec, inst: TrainingInstances, seed: int, epoch: int) -> np.ndarray:
    """One negative per positive: an item the user had not trained on strictly
    before the positive's time, never the positive itself.

    Draws come from a generator seeded by ``(seed, epoch, user)`` so they do not
    depend on batching or worker layout.
    """
    N = split.item_count
    out = np.empty(len(inst), dtype=np.int64)
    bounds = np.searchsorted(inst.users, np.arange(split.user_count + 1))
    for u in range(split.user_count):
        a, b = bounds[u], bounds[u + 1]
        if a == b:
            continue
        rng = np.random.default_rng([seed, epoch, u])
        items, times = split.train[u].items, split.train[u].times
        seen: set[int] = set()
        cursor = 0
        for k in range(a, b):
            t = inst.times[k]
            while cursor < len(times) and times[cursor] < t:
                seen.add(int(items[cursor]))
                cursor += 1
            pos = int(inst.targets[k])
            n_bad = len(seen | {pos})
            if n_bad >= N:
                raise TrainingError(f"user {u}: no eligible negative item")
            if n_bad > 0.75 * N:
                pool = np.array([i for i in range(1, N + 1) if i not in seen and i != pos])
                out[k] = pool[rng.integers(len(pool))]
                continue
            while True:
                c = int(rng.integers(1, N + 1))
                if c != pos and c not in seen:
                    out[k] = c
                    break
    return out


@dataclass
class FitResult:
    best_epoch: int
    best_metrics: dict
    history: list[dict] = field(default_factory=list)
    epochs_run: int = 0


class Trainer:
    def __init__(self, model: HTPModel, split: SplitSpec, config, eval_config: EvalConfig = EvalConfig(),
                 config_hash: str = ""):
        self.model = model
        self.split = split
        self.config = config
        self.eval_config = eval_config
        self.config_hash = config_hash
        self.params = model.parameters()
        self.optimizer = Adam(self.params, config.lr, config.beta1, config.beta2, config.adam_eps)
        self.instances = TrainingInstances.from_split(split)
        self.builder = SequenceBuilder(split.train, model.config.L, config.tz_offset)
        self.eval_builder = SequenceBuilder(split.full, model.config.L, config.tz_offset)
        self.rng = np.random.default_rng([config.seed, 1])
        self.epoch = 0
        self.best_metric = -math.inf
        self.best_epoch = -1
        self.best_state: dict | None = None
        self.bad_epochs = 0
        self.history: list[dict] = []

    # ----------------------------------------------------------- one epoch

    def train_epoch(self) -> float:
        cfg = self.config
        inst = self.instances
        negatives = sample_training_negatives(self.split, inst, cfg.seed, self.epoch)
        order = self.rng.permutation(len(inst))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = self.builder.batch(inst.users[idx], inst.ends[idx], inst.targets[idx], inst.times[idx])
            self.model.zero_grad()
            loss = self.model.loss(batch, negatives[idx], cfg.lam, training=True, rng=self.rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {self.epoch}, batch starting {start}")
            dc.backward(loss)
            self.optimizer.step()
            losses.append(value)
        self.epoch += 1
        return float(np.mean(losses))

    def validate(self) -> dict:
        scorer = self.model.score_candidates_batch
        return evaluate(scorer, self.split, "valid", self.eval_config, L=self.model.config.L,
                        run=0, tz_offset=self.config.tz_offset, builder=self.eval_builder).metrics

    # ------------------------------------------------------------------ fit

    def fit(self, log_path=None, checkpoint_path=None, stop_after: int | None = None) -> FitResult:
        """Train until early stopping or ``max_epochs``; leaves the best weights in the model.

        ``stop_after`` interrupts after that many epochs of this call, leaving
        the trainer resumable (used to simulate interruptions).
        """
        cfg = self.config
        ran = 0
        log_fh = open(log_path, "a") if log_path else None
        try:
            while self.epoch < cfg.max_epochs and self.bad_epochs <= cfg.patience:
                t0 = time.perf_counter()
                loss = self.train_epoch()
                metrics = self.validate()
                record = {"epoch": self.epoch, "loss": loss,
                          "val": {f"{k}@{self.eval_config.M}" if k != "AUC" else k: v for k, v in metrics.items()},
                          "wall_time": round(time.perf_counter() - t0, 4)}
                self.history.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                log.info("epoch %d loss %.5f val NDCG %.4f HR %.4f", self.epoch, loss, metrics["NDCG"], metrics["HR"])
                if metrics["NDCG"] > self.best_metric:
                    self.best_metric = metrics["NDCG"]
                    self.best_epoch = self.epoch
                    self.best_state = self.model.state_dict()
                    self.bad_epochs = 0
                else:
                    self.bad_epochs += 1
                if checkpoint_path:
                    self.save(checkpoint_path)
                ran += 1
                if stop_after is not None and ran >= stop_after:
                    return self._result(restore=False)
        finally:
            if log_fh:
                log_fh.close()
        return self._result(restore=True)

    def _result(self, restore: bool) -> FitResult:
        if restore and self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        best = next((h for h in self.history if h["epoch"] == self.best_epoch), {})
        return FitResult(self.best_epoch, best.get("val", {}), list(self.history), self.epoch)

    # ---------------------------------------------------------- checkpoints

    def save(self, path) -> None:
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "adam_t": self.optimizer.t,
            "rng_state": self.rng.bit_generator.state,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "bad_epochs": self.bad_epochs,
            "history": self.history,
        }
        save_checkpoint(path, meta, self.model.state_dict(), self.optimizer, self.best_state)

    def restore(self, path) -> None:
        ckpt = load_checkpoint(path, expected_hash=self.config_hash or None)
        self.model.load_state_dict(ckpt.params)
        self.optimizer.t = ckpt.meta["adam_t"]
        for k in self.params:
            self.optimizer.m[k] = ckpt.adam_m[k]
            self.optimizer.v[k] = ckpt.adam_v[k]
        self.rng.bit_generator.state = ckpt.meta["rng_state"]
        self.epoch = ckpt.meta["epoch"]
        self.best_metric = ckpt.meta["best_metric"]
        self.best_epoch = ckpt.meta["best_epoch"]
        self.bad_epochs = ckpt.meta["bad_epochs"]
        self.history = list(ckpt.meta["history"])
        self.best_state = ckpt.best


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    best: dict[str, np.ndarray] | None


def save_checkpoint(path, meta: dict, params: dict, optimizer: Adam | None = None, best: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in params.items()}
    if optimizer is not None:
        arrays.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
    if best is not None:
        arrays.update({f"best/{k}": v for k, v in best.items()})
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **meta}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if "__meta__" not in data:
        raise CheckpointError(f"corrupt checkpoint {path}: missing metadata")
    try:
        meta = json.loads(data.pop("__meta__").tobytes().decode())
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an HTP checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise CheckpointError(f"config hash mismatch: checkpoint {meta.get('config_hash')}, expected {expected_hash}")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in data.items() if k.startswith(prefix)}

    best = group("best/")
    return Checkpoint(meta, group("param/"), group("adam_m/"), group("adam_v/"), best or None)


def build_model(split: SplitSpec, config, ablation: AblationConfig = AblationConfig(),
                histograms: ItemHistograms | None = None) -> HTPModel:
    histograms = histograms or ItemHistograms.from_split(split, config.tz_offset)
    rng = np.random.default_rng([config.seed, 0])
    return HTPModel(config.model_config(ablation), split.item_count, histograms, rng, table_std=config.table_std)


def train_model(split: SplitSpec, config, eval_config: EvalConfig = EvalConfig(),
                ablation: AblationConfig = AblationConfig(), **fit_kwargs) -> tuple[HTPModel, FitResult]:
    model = build_model(split, config, ablation)
    trainer = Trainer(model, split, config, eval_config)
    result = trainer.fit(**fit_kwargs)
    return model, result

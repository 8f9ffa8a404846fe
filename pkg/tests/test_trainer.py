import json

import numpy as np
import pytest

from htp import diffcore as dc
from htp.config import TrainConfig
from htp.dataset import split_leave_one_out
from htp.errors import CheckpointError, TrainingError
from htp.evaluator import EvalConfig
from htp.model import AblationConfig
from htp.synthetic import cyclic_log
from htp.trainer import (
    Adam,
    Trainer,
    TrainingInstances,
    build_model,
    load_checkpoint,
    sample_training_negatives,
    save_checkpoint,
    train_model,
)

EVAL = EvalConfig(negatives_per_user=20, runs=1)


@pytest.fixture(scope="module")
def split():
    return split_leave_one_out(cyclic_log(n_users=30, n_items=25, length=10, seed=3))


def cfg(**kw):
    base = dict(d=8, L=6, H=1, K=2, lr=0.01, dropout=0.0, batch_size=64, lam=0.0, max_epochs=3,
                patience=5, table_std=0.1)
    return TrainConfig(**{**base, **kw})


def test_adam_matches_reference_update():
    rng = np.random.default_rng(0)
    p = dc.Tensor(rng.normal(size=4), requires_grad=True)
    ref = p.data.copy()
    opt = Adam({"p": p}, lr=0.1)
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-13)


def test_instances_cover_every_prefix(split):
    inst = TrainingInstances.from_split(split)
    assert len(inst) == sum(len(h.items) - 1 for h in split.train)
    for u, e, tgt, t in zip(inst.users, inst.ends, inst.targets, inst.times):
        assert e >= 1
        assert split.train[u].items[e] == tgt and split.train[u].times[e] == t


def test_training_negatives_valid_and_seeded(split):
    inst = TrainingInstances.from_split(split)
    a = sample_training_negatives(split, inst, seed=1, epoch=0)
    b = sample_training_negatives(split, inst, seed=1, epoch=0)
    c = sample_training_negatives(split, inst, seed=1, epoch=1)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    for k, (u, e) in enumerate(zip(inst.users, inst.ends)):
        h = split.train[u]
        before = set(h.items[h.times < inst.times[k]].tolist())
        assert a[k] not in before and a[k] != inst.targets[k]
        assert 1 <= a[k] <= split.item_count


def test_zero_learning_rate_leaves_parameters(split):
    model = build_model(split, cfg(lr=0.0))
    before = model.state_dict()
    Trainer(model, split, cfg(lr=0.0), EVAL).train_epoch()
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_same_seed_same_trajectory(split):
    runs = []
    for _ in range(2):
        model = build_model(split, cfg(dropout=0.3))
        tr = Trainer(model, split, cfg(dropout=0.3), EVAL)
        runs.append([tr.train_epoch() for _ in range(3)])
    assert runs[0] == runs[1]


def test_loss_trend_decreases_under_defaults(split):
    config = TrainConfig(d=8, L=6, H=1, K=2, batch_size=64, max_epochs=10)
    model = build_model(split, config)
    tr = Trainer(model, split, config, EVAL)
    losses = [tr.train_epoch() for _ in range(10)]
    slope = np.polyfit(np.arange(10), losses, 1)[0]
    assert slope < 0


def test_nan_loss_aborts(split):
    model = build_model(split, cfg())
    model.tables.item.data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        Trainer(model, split, cfg(), EVAL).train_epoch()


def test_patience_zero_stops_after_first_bad_epoch(split, monkeypatch):
    model = build_model(split, cfg(max_epochs=20, patience=0))
    tr = Trainer(model, split, cfg(max_epochs=20, patience=0), EVAL)
    scripted = iter([0.3, 0.5, 0.4, 0.9, 0.9])
    monkeypatch.setattr(tr, "validate", lambda: {"HR": 0.0, "NDCG": next(scripted), "AUC": 0.0})
    res = tr.fit()
    assert res.epochs_run == 3 and res.best_epoch == 2


def test_fit_restores_best_weights(split, monkeypatch):
    config = cfg(max_epochs=4, patience=10)
    model = build_model(split, config)
    tr = Trainer(model, split, config, EVAL)
    scripted = iter([0.1, 0.8, 0.2, 0.3])
    snapshots = []

    def fake_validate():
        snapshots.append(model.state_dict())
        return {"HR": 0.0, "NDCG": next(scripted), "AUC": 0.0}

    monkeypatch.setattr(tr, "validate", fake_validate)
    res = tr.fit()
    assert res.best_epoch == 2
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, snapshots[1][k])


def test_fit_writes_log(split, tmp_path):
    _, res = train_model(split, cfg(max_epochs=2), EVAL, log_path=tmp_path / "log.jsonl")
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]
    assert set(records[0]) == {"epoch", "loss", "val", "wall_time"}
    assert set(records[0]["val"]) == {"HR@10", "NDCG@10", "AUC"}
    assert res.epochs_run == 2


def test_checkpoint_round_trip_bit_identical(split, tmp_path):
    model = build_model(split, cfg())
    tr = Trainer(model, split, cfg(), EVAL, config_hash="abc")
    tr.train_epoch()
    tr.save(tmp_path / "c.npz")
    ck = load_checkpoint(tmp_path / "c.npz", expected_hash="abc")
    for k, v in model.state_dict().items():
        assert ck.params[k].tobytes() == v.tobytes()


def test_checkpoint_hash_mismatch(tmp_path):
    save_checkpoint(tmp_path / "c.npz", {"config_hash": "aaa"}, {"w": np.ones(2)})
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(tmp_path / "c.npz", expected_hash="bbb")


def test_checkpoint_version_mismatch(tmp_path):
    save_checkpoint(tmp_path / "c.npz", {"version": 99}, {"w": np.ones(2)})
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "c.npz")


def test_checkpoint_corrupt_and_missing(tmp_path):
    (tmp_path / "bad.npz").write_bytes(b"not a zip at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.npz")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")


def test_resume_matches_uninterrupted(split, tmp_path):
    config = cfg(max_epochs=4, dropout=0.2)
    model_a = build_model(split, config)
    full = Trainer(model_a, split, config, EVAL, config_hash="h")
    res_a = full.fit()

    model_b = build_model(split, config)
    first = Trainer(model_b, split, config, EVAL, config_hash="h")
    first.fit(checkpoint_path=tmp_path / "c.npz", stop_after=2)
    model_c = build_model(split, config)
    resumed = Trainer(model_c, split, config, EVAL, config_hash="h")
    resumed.restore(tmp_path / "c.npz")
    res_c = resumed.fit()

    assert [h["loss"] for h in res_a.history] == [h["loss"] for h in res_c.history]
    for k, v in model_a.state_dict().items():
        assert v.tobytes() == model_c.state_dict()[k].tobytes()


def test_ablation_reaches_model(split):
    model = build_model(split, cfg(), AblationConfig.from_name("no-atm"))
    assert model.config.ablation.use_atm is False

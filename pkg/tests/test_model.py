import math

import numpy as np
import pytest

from htp import diffcore as dc
from htp.dataset import SECONDS_PER_DAY, ItemHistograms, build_sequence, stack_sequences
from htp.model import ABLATIONS, AblationConfig, HTPModel, ModelConfig, bce_loss, score_candidates
from htp.synthetic import EPOCH_2015

DAY = SECONDS_PER_DAY


def toy_model(L=4, d=6, H=2, K=2, ablation=None, n_items=9, seed=0):
    rng = np.random.default_rng(seed)
    items = rng.integers(1, n_items + 1, size=60)
    times = EPOCH_2015 + rng.integers(0, 700 * DAY, size=60)
    hist = ItemHistograms.from_interactions(items, times, item_count=n_items)
    cfg = ModelConfig(d=d, L=L, H=H, K=K, dropout=0.0, ablation=ablation or AblationConfig())
    return HTPModel(cfg, n_items, hist, rng, table_std=0.4, weight_std=0.5)


def toy_batch(L=4, n_items=9, seed=1, B=3):
    rng = np.random.default_rng(seed)
    seqs = []
    for b in range(B):
        n = int(rng.integers(1, L + 2))
        ts = np.sort(EPOCH_2015 + rng.integers(0, 600 * DAY, size=n))
        seqs.append(build_sequence(rng.integers(1, n_items + 1, size=n), ts, L,
                                   int(rng.integers(1, n_items + 1)), int(ts[-1]) + int(rng.integers(1, 40)) * DAY))
    return stack_sequences(seqs)


# ------------------------------------------------------------ dense oracle


def _softmax(s, mask):
    if not mask.any():
        return np.zeros_like(s)
    e = np.where(mask, np.exp(s - s[mask].max()), 0.0)
    return e / e.sum()


def _cos(a, b):
    return a @ b / (max(np.linalg.norm(a), 1e-8) * max(np.linalg.norm(b), 1e-8))


def oracle_user_vector(model, batch, b):
    """Per-sequence loop re-implementation of the whole forward pass."""
    P = {k: v.data for k, v in model.parameters().items()}
    cfg, abl = model.config, model.config.ablation
    flags = abl.time_flags()
    L, d = cfg.L, cfg.d
    mask = batch.mask[b]

    def t_emb(m, w, dd):
        out = np.zeros(d)
        if flags["use_month"] and m != 12:
            out += P["month"][m]
        if flags["use_week"] and w != 53:
            out += P["week"][w]
        if flags["use_day"] and dd != 7:
            out += P["day"][dd]
        return out

    E = np.array([(P["item"][batch.items[b, i]] + P["position"][i]) if mask[i] else np.zeros(d) for i in range(L)])
    Tm = np.array([t_emb(batch.months[b, i], batch.weeks[b, i], batch.days[b, i]) if mask[i] else np.zeros(d)
                   for i in range(L)])
    tgt = t_emb(batch.target_months[b], batch.target_weeks[b], batch.target_days[b])

    e_atm = np.zeros(d)
    if abl.use_atm:
        keys = []
        for i in range(L):
            prof = np.zeros(d)
            for ts, w in model.histograms.histogram(int(batch.items[b, i])):
                days_ = (ts // DAY + 3) % 7
                dt64 = np.datetime64(int(ts), "s").astype(object)
                iso_week = dt64.isocalendar()[1]
                prof += w * t_emb(dt64.month - 1, iso_week - 1, int(days_))
            keys.append(prof)
        a = _softmax(np.array([k @ tgt for k in keys]) / math.sqrt(d), mask)
        e_atm = a @ E

    e_c, e_rt = E, np.zeros(d)
    if abl.use_itim_rtim:
        r = np.zeros((L, d))
        for h in range(cfg.H):
            W1, W2, W3, Wt = (P[f"itim.{h}.{n}"] for n in ("W1", "W2", "W3", "Wt"))
            S = np.array([[_cos(e_c[i] @ W2, e_c[j] @ W3 + Wt @ (Tm[i] - Tm[j])) for j in range(L)] for i in range(L)])
            new_e, r = e_c.copy(), np.zeros((L, d))
            for i in range(L):
                if not mask[i]:
                    continue
                order = sorted((j for j in range(L) if mask[j]), key=lambda j: (-S[i, j], j))[: cfg.K]
                for j in order:
                    new_e[i] += S[i, j] * (e_c[j] @ W1)
                    r[i] += S[i, j] * (Tm[i] - Tm[j])
            e_c = new_e
        R = (tgt - Tm) * mask[:, None]
        pt = _softmax(R @ P["rtim.w"], mask)
        pa = _softmax(np.array([R[i] @ P["rtim.Wr"] @ r[i] for i in range(L)]), mask)
        e_rt = (pt * pa) @ e_c
    return e_atm + e_rt + e_c[-1]


@pytest.mark.parametrize("ablation", [None, *ABLATIONS])
def test_forward_matches_dense_oracle(ablation):
    model = toy_model(ablation=AblationConfig.from_name(ablation))
    batch = toy_batch()
    out = model.forward(batch).data
    for b in range(len(batch)):
        np.testing.assert_allclose(out[b], oracle_user_vector(model, batch, b), atol=1e-12)


def test_ablation_flag_semantics():
    batch = toy_batch()
    full = toy_model()
    parts = full.forward_parts(batch)
    no_atm = toy_model(ablation=AblationConfig.from_name("no-atm"))
    np.testing.assert_allclose(no_atm.forward(batch).data, (parts["rtim"] + parts["last"]).data, atol=1e-14)
    no_ir = toy_model(ablation=AblationConfig.from_name("no-itim-rtim"))
    e_s_last = no_ir.forward_parts(batch)["last"].data
    np.testing.assert_allclose(no_ir.forward(batch).data, parts["atm"].data + e_s_last, atol=1e-14)


def test_no_time_zeroes_every_time_embedding():
    model = toy_model(ablation=AblationConfig.from_name("no-time"))
    assert model.config.ablation.time_flags() == {"use_month": False, "use_week": False, "use_day": False}
    batch = toy_batch()
    before = model.forward(batch).data
    for name in ("month", "week", "day"):
        model.parameters()[name].data += 5.0
    np.testing.assert_array_equal(model.forward(batch).data, before)


def test_ablation_names():
    assert AblationConfig.from_name("no-week").use_week is False
    assert AblationConfig.from_name(None) == AblationConfig()
    with pytest.raises(ValueError):
        AblationConfig.from_name("no-everything")
    with pytest.raises(ValueError):
        AblationConfig(use_atm=False, use_itim_rtim=False)


def test_zero_parts_give_zero_user_vector():
    model = toy_model()
    for t in model.parameters().values():
        t.data[:] = 0.0
    assert not model.forward(toy_batch()).data.any()


def test_score_self_is_squared_norm():
    table = dc.Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    e_u = dc.Tensor(table.data[2][None])
    s = score_candidates(table, e_u, np.array([[2, 1]])).data
    assert s[0, 0] == pytest.approx(float(table.data[2] @ table.data[2]))
    assert s[0, 1] == pytest.approx(float(table.data[1] @ table.data[2]))


def test_score_rejects_pad():
    table = dc.Tensor(np.ones((3, 2)))
    with pytest.raises(ValueError):
        score_candidates(table, dc.Tensor(np.ones((1, 2))), np.array([[0, 1]]))


def test_bce_at_zero():
    loss = bce_loss(dc.Tensor(np.zeros(4)), dc.Tensor(np.zeros(4))).item()
    assert loss == pytest.approx(2 * math.log(2), abs=1e-12)


def test_bce_saturation_leaves_regulariser():
    w = dc.Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    loss = bce_loss(dc.Tensor([60.0]), dc.Tensor([-60.0]), [w], lam=0.1).item()
    assert loss == pytest.approx(0.5, abs=1e-12)


def test_bce_rejects_negative_lambda():
    with pytest.raises(ValueError):
        bce_loss(dc.Tensor([0.0]), dc.Tensor([0.0]), [], -1.0)


def test_bce_finite_at_extremes():
    loss = bce_loss(dc.Tensor([-1e4]), dc.Tensor([1e4])).item()
    assert np.isfinite(loss)


def test_full_model_gradient_check():
    model = toy_model()
    batch = toy_batch()
    negatives = np.array([1, 2, 3])
    params = list(model.parameters().values())
    err = dc.grad_check(lambda: model.loss(batch, negatives, lam=0.01, training=False), params)
    assert err < 1e-4


def test_pad_rows_get_no_gradient():
    model = toy_model()
    model.zero_grad()
    dc.backward(model.loss(toy_batch(), np.array([1, 2, 3]), lam=0.1, training=False))
    P = model.parameters()
    for name, pad in [("item", 0), ("month", 12), ("week", 53), ("day", 7)]:
        assert P[name].grad is None or not P[name].grad[pad].any(), name


def test_state_dict_round_trip():
    a, b = toy_model(), toy_model()
    for t in b.parameters().values():
        t.data = t.data + 1.0
    b.load_state_dict(a.state_dict())
    batch = toy_batch()
    np.testing.assert_array_equal(a.forward(batch).data, b.forward(batch).data)
    with pytest.raises(KeyError):
        b.load_state_dict({"item": a.state_dict()["item"]})


def test_training_dropout_is_seeded():
    model = toy_model()
    model.config = ModelConfig(d=6, L=4, H=2, K=2, dropout=0.5)
    batch = toy_batch()
    x = model.forward(batch, training=True, rng=np.random.default_rng(3)).data
    y = model.forward(batch, training=True, rng=np.random.default_rng(3)).data
    z = model.forward(batch, training=False).data
    np.testing.assert_array_equal(x, y)
    assert not np.allclose(x, z)

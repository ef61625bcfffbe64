import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import kgenrich.rotate as rot
from kgenrich.kg import KnowledgeGraph
from kgenrich.rotate import (
    Adam,
    NegativeSampler,
    RotateParams,
    TrainConfig,
    TrainingError,
    distances,
    init_params,
    load_checkpoint,
    negative_batch,
    positive_loss_term,
    save_checkpoint,
    score,
    total_loss,
    train,
    write_history,
)

from oracles import adversarial_weights, batch_loss, rotate_distance


def params_from_complex(h, t, theta, gamma=9.0):
    ent = np.array([[h.real, h.imag], [t.real, t.imag]])
    return RotateParams(ent, np.array([[theta]]), gamma)


def random_instance(seed, max_d=8, max_neg=5, max_batch=4):
    rng = np.random.default_rng(seed)
    E, R = int(rng.integers(3, 7)), int(rng.integers(1, 4))
    d, n, B = int(rng.integers(1, max_d + 1)), int(rng.integers(1, max_neg + 1)), int(rng.integers(1, max_batch + 1))
    params = RotateParams(rng.normal(size=(E, 2 * d)), rng.uniform(-np.pi, np.pi, size=(R, d)), float(rng.uniform(1, 6)))
    pos = np.stack([rng.integers(E, size=B), rng.integers(R, size=B), rng.integers(E, size=B)], 1)
    neg = np.repeat(pos[:, None, :], n, 1).copy()
    side = rng.integers(2, size=(B, n)) * 2
    for b in range(B):
        for j in range(n):
            neg[b, j, side[b, j]] = rng.integers(E)
    return params, pos, neg, rng.uniform(0.05, 1.0, size=B), float(rng.uniform(0.1, 2.0))


def test_config_defaults():
    c = TrainConfig()
    assert (c.dim, c.batch_size, c.learning_rate, c.margin) == (256, 512, 0.004, 9.0)
    assert (c.adversarial_temperature, c.negatives, c.epochs, c.loss_mode) == (0.34, 33, 200, "weighted")


@pytest.mark.parametrize("bad", [dict(dim=0), dict(learning_rate=0.0), dict(loss_mode="x"), dict(negatives=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_init_is_deterministic_and_in_range():
    a, b = init_params(1, 1, 2, 9.0, 7), init_params(1, 1, 2, 9.0, 7)
    assert np.array_equal(a.entity, b.entity) and np.array_equal(a.phase, b.phase)
    big = init_params(50, 400, 8, 9.0, 1)
    assert big.phase.min() >= -np.pi and big.phase.max() < np.pi
    assert np.abs(big.entity).max() <= (9.0 + 2) / 8


def test_init_entity_mean_is_zero():
    p = init_params(12500, 1, 4, 9.0, 3)
    x = p.entity.astype(np.float64).ravel()
    assert x.size == 100_000
    bound = 11.0 / 4
    se = bound / math.sqrt(3) / math.sqrt(x.size)
    assert abs(x.mean()) < 3 * se


def test_score_examples():
    assert score(params_from_complex(1 + 0j, 1 + 0j, 0.0), (0, 0, 1)) == 9.0
    assert score(params_from_complex(1 + 0j, 1 + 0j, math.pi), (0, 0, 1)) == pytest.approx(7.0, abs=1e-15)
    with pytest.raises(IndexError):
        score(params_from_complex(1, 1, 0.0), (0, 0, 2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_distance_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    p = RotateParams(rng.normal(size=(5, 8)), rng.uniform(-np.pi, np.pi, size=(3, 4)), 9.0)
    tr = np.stack([rng.integers(5, size=10), rng.integers(3, size=10), rng.integers(5, size=10)], 1)
    want = [rotate_distance(p.entity, p.phase, *row) for row in tr.tolist()]
    assert np.allclose(distances(p, tr), want, rtol=1e-13, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_rotation_preserves_modulus_and_identity(seed):
    rng = np.random.default_rng(seed)
    ent = rng.normal(size=(2, 6))
    zero = RotateParams(np.vstack([ent[0], np.zeros(6)]), rng.uniform(-np.pi, np.pi, size=(1, 3)), 5.0)
    # distance to the origin is the sum of the rotated moduli, which must equal the head's moduli
    mod = np.hypot(ent[0, :3], ent[0, 3:])
    assert np.allclose(rot._modulus(zero, np.array([0]), np.array([0]), np.array([1]))[0], mod, rtol=1e-15, atol=0)
    same = RotateParams(np.vstack([ent[0], ent[0]]), np.zeros((1, 3)), 5.0)
    assert score(same, (0, 0, 1)) == 5.0


def test_negatives_exhaust_and_accept():
    g = KnowledgeGraph(("a", "b"), ("r",), np.array([[0, 0, 0], [0, 0, 1], [1, 0, 0], [1, 0, 1]]))
    nb = negative_batch(g, np.array([[0, 0, 0]]), 1, seed=0)
    assert nb.triples.shape == (1, 1, 3)
    assert NegativeSampler(g.triples, 2, 1).is_known(nb.triples).all()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), n=st.integers(1, 8))
def test_negatives_change_exactly_one_slot(seed, n):
    rng = np.random.default_rng(seed)
    tr = np.unique(np.stack([rng.integers(20, size=60), rng.integers(3, size=60), rng.integers(20, size=60)], 1), axis=0)
    g = KnowledgeGraph(tuple(str(i) for i in range(20)), ("r", "s", "t"), tr)
    pos = tr[:10]
    nb = negative_batch(g, pos, n, seed)
    diff = nb.triples != pos[:, None, :]
    assert (diff.sum(axis=2) == 1).all()
    assert (diff[..., 1] == 0).all()
    assert np.array_equal(diff[..., 0], nb.head_side)
    # with 20 entities known triples are avoidable, so none should survive
    assert not NegativeSampler(tr, 20, 3).is_known(nb.triples).any()


def test_negative_side_frequency():
    g = KnowledgeGraph(tuple(str(i) for i in range(50)), ("r",), np.array([[0, 0, 1]]))
    nb = negative_batch(g, np.array([[0, 0, 1]]), 10_000, seed=4)
    frac = nb.head_side.mean()
    assert abs(frac - 0.5) < 3 * math.sqrt(0.25 / 10_000)


def test_negative_sampling_is_deterministic():
    g = KnowledgeGraph(tuple(str(i) for i in range(30)), ("r",), np.array([[0, 0, 1], [2, 0, 3]]))
    a = negative_batch(g, g.triples, 7, seed=9)
    b = negative_batch(g, g.triples, 7, seed=9)
    assert np.array_equal(a.triples, b.triples) and np.array_equal(a.head_side, b.head_side)


def test_positive_loss_examples():
    # distances equal to the margin on both sides
    p = RotateParams(np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]), np.zeros((1, 1)), 3.0)
    loss, _ = positive_loss_term(p, (0, 0, 1), [(0, 0, 2)], alpha=0.7)
    assert loss == pytest.approx(2 * math.log(2), rel=1e-15)
    probs = adversarial_weights(p.entity, p.phase, 3.0, [(0, 0, 1), (0, 0, 2)], 5.0)
    assert probs == [0.5, 0.5]
    loss2, _ = positive_loss_term(p, (0, 0, 1), [(0, 0, 1), (0, 0, 2)], alpha=5.0)
    assert loss2 == pytest.approx(2 * math.log(2), rel=1e-15)
    with pytest.raises(ValueError):
        positive_loss_term(p, (0, 0, 1), np.zeros((0, 3)), 1.0)


def numeric_grad(params, pos, neg, w, alpha, step):
    ent, ph = params.entity.copy(), params.phase.copy()
    _, probs = batch_loss(ent, ph, params.gamma, pos.tolist(), neg.tolist(), w, alpha)

    def f():
        return batch_loss(ent, ph, params.gamma, pos.tolist(), neg.tolist(), w, alpha, probs)[0]

    out = []
    for arr in (ent, ph):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            o = arr[idx]
            vals = []
            for k in (2, 1, -1, -2):
                arr[idx] = o + k * step
                vals.append(f())
            arr[idx] = o
            g[idx] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step)
        out.append(g)
    return out


@pytest.mark.parametrize("seed", range(25))
def test_gradients_elementwise_against_five_point_stencil(seed):
    params, pos, neg, w, alpha = random_instance(seed)
    cfg = TrainConfig(dim=params.dim, margin=params.gamma, adversarial_temperature=alpha)
    loss, grads = total_loss(params, pos, neg, w, cfg)
    oracle_loss, _ = batch_loss(params.entity, params.phase, params.gamma, pos.tolist(), neg.tolist(), w, alpha)
    assert loss == pytest.approx(oracle_loss, rel=1e-12)
    for got, want in zip(grads.dense(params), numeric_grad(params, pos, neg, w, alpha, 2e-4)):
        rel = np.abs(got - want) / np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-6)
        assert rel.max() < 1e-4


def test_weighting_is_linear():
    params, pos, neg, _, alpha = random_instance(3, max_batch=4)
    pos, neg = np.vstack([pos, pos[:1]]), np.concatenate([neg, neg[:1]])
    w = np.ones(len(pos))
    w[-1] = 0.5
    cfg = TrainConfig(dim=params.dim, margin=params.gamma, adversarial_temperature=alpha)
    weighted, _ = total_loss(params, pos, neg, w, cfg)
    standard, _ = total_loss(params, pos, neg, w, TrainConfig(**(cfg.to_dict() | {"loss_mode": "standard"})))
    term, _ = positive_loss_term(params, pos[-1], neg[-1], alpha)
    assert weighted == pytest.approx(standard - 0.5 * term, rel=1e-12)


def test_weighted_gradient_differs_only_where_link_triples_touch():
    rng = np.random.default_rng(0)
    params = RotateParams(rng.normal(size=(10, 6)), rng.uniform(-3, 3, size=(3, 3)), 4.0)
    pos = np.array([[0, 0, 1], [2, 1, 3], [6, 2, 7]])
    neg = np.array([[[0, 0, 4]], [[5, 1, 3]], [[6, 2, 8]]])
    w = np.array([1.0, 1.0, 0.3])  # the last positive is a link triple
    cfg = TrainConfig(dim=3, margin=4.0)
    _, gw = total_loss(params, pos, neg, w, cfg)
    _, gs = total_loss(params, pos, neg, w, TrainConfig(dim=3, margin=4.0, loss_mode="standard"))
    (ew, pw), (es, ps) = gw.dense(params), gs.dense(params)
    untouched = [e for e in range(10) if e not in (6, 7, 8)]
    assert np.array_equal(ew[untouched], es[untouched]) and np.array_equal(pw[:2], ps[:2])
    assert not np.array_equal(ew[6], es[6])


def test_weights_must_be_in_unit_interval():
    params, pos, neg, _, _ = random_instance(1, max_batch=1)
    for bad in (0.0, 1.5, float("nan")):
        with pytest.raises(ValueError):
            total_loss(params, pos, neg, np.array([bad]), TrainConfig(dim=params.dim))


def test_adam_matches_reference_update():
    rng = np.random.default_rng(0)
    params = RotateParams(rng.normal(size=(3, 4)), rng.uniform(-1, 1, size=(2, 2)), 9.0)
    ent0 = params.entity.copy()
    opt = Adam(params, lr=0.1)
    m = v = np.zeros_like(ent0)
    x = ent0.copy()
    for t in range(1, 4):
        g = rng.normal(size=(1, 4))
        grads = rot.Gradients(np.array([1]), g, np.zeros(0, dtype=np.int64), np.zeros((0, 2)))
        opt.step(params, grads)
        dense = np.zeros_like(x)
        dense[1] = g
        m = 0.9 * m + 0.1 * dense
        v = 0.999 * v + 0.001 * dense**2
        x = x - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(params.entity, x, rtol=0, atol=1e-14)


def test_adam_keeps_phases_wrapped():
    params = RotateParams(np.zeros((1, 2)), np.array([[np.pi - 1e-3]], dtype=np.float32), 9.0)
    grads = rot.Gradients(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.array([0]), np.array([[-1.0]]))
    Adam(params, lr=0.5).step(params, grads)
    assert params.phase.dtype == np.float32
    assert -np.pi <= params.phase[0, 0] < np.pi and params.phase[0, 0] < 0


def ring(n=30):
    tr = np.array([[i, 0, (i + 1) % n] for i in range(n)] + [[i, 1, (i + 2) % n] for i in range(n)])
    return KnowledgeGraph(tuple(f"e{i}" for i in range(n)), ("next", "skip"), tr)


def test_training_reduces_loss_and_is_deterministic():
    cfg = TrainConfig(dim=8, batch_size=16, epochs=50, negatives=4, learning_rate=0.01, seed=2)
    p1, h1 = train(ring(), cfg)
    p2, h2 = train(ring(), cfg)
    assert h1[-1].mean_loss < h1[0].mean_loss
    assert np.array_equal(p1.entity, p2.entity) and np.array_equal(p1.phase, p2.phase)
    assert [h.mean_loss for h in h1] == [h.mean_loss for h in h2]


def test_every_triple_is_trained_once_per_epoch(monkeypatch):
    seen = []
    real = rot.total_loss

    def spy(params, pos, neg, w, cfg):
        seen.append(np.asarray(pos).copy())
        return real(params, pos, neg, w, cfg)

    monkeypatch.setattr(rot, "total_loss", spy)
    g = ring(12)
    train(g, TrainConfig(dim=2, batch_size=5, epochs=2, negatives=2))
    per_epoch = np.concatenate(seen)
    assert len(per_epoch) == 2 * len(g)
    first = per_epoch[: len(g)]
    assert sorted(map(tuple, first.tolist())) == sorted(map(tuple, g.triples.tolist()))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    g = ring(6)
    params = init_params(6, 2, 2, 9.0, 0)
    params.entity[0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 0, batch 0"):
        train(g, TrainConfig(dim=2, batch_size=100, epochs=1, negatives=1), params=params)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    params = init_params(7, 3, 5, 6.5, 1)
    save_checkpoint(tmp_path / "c.bin", params)
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.gamma == 6.5
    assert back.entity.tobytes() == params.entity.tobytes() and back.phase.tobytes() == params.phase.tobytes()
    save_checkpoint(tmp_path / "d.bin", back)
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOPE" + (tmp_path / "c.bin").read_bytes()[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")


def test_history_file(tmp_path):
    write_history(tmp_path / "h.tsv", [rot.EpochRecord(0, 1.5, 0.25), rot.EpochRecord(1, 1.25, 0.5)])
    lines = (tmp_path / "h.tsv").read_text().splitlines()
    assert lines[0] == "epoch\tmean_loss\tseconds"
    assert lines[1].split("\t")[:2] == ["0", "1.5"] and len(lines) == 3

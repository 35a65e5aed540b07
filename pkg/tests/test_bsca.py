import numpy as np
import pytest

from bitglow.bsca import (
    BscaConfig, all_lines, bit_gradient_rank, bitset_delta, bsca_line, bsca_search, draw_batch,
    replay_on_simulator,
)
from bitglow.nn import DenseLayer, FloatModel
from bitglow.quant import QLayer, QuantizedModel, from_byte, q_accuracy, to_byte


@pytest.fixture(scope="module")
def mnist_setup(mnist):
    ds = mnist.dataset
    xb, yb = draw_batch(ds.x_train, ds.y_train, 100, 0)
    xe, ye = ds.eval_subset(100, 0)
    return mnist, xb, yb, xe, ye


@pytest.fixture(scope="module")
def msb_attack(mnist_setup):
    fx, xb, yb, xe, ye = mnist_setup
    return bsca_line(fx.qmodel, fx.image, 1, 7, BscaConfig(budget=20), xb, yb, xe, ye)


def linear_qmodel(weights, dec=7):
    return QuantizedModel([QLayer(np.array(weights), dec, 0, 7, "none")], 0)


def test_config_validation():
    with pytest.raises(ValueError):
        BscaConfig(budget=-1)
    with pytest.raises(ValueError):
        BscaConfig(line=(4, 0))
    with pytest.raises(ValueError):
        BscaConfig(batch_size=0)


def test_delta_signs():
    q = linear_qmodel([[1, 2, 3, 4]], dec=5)
    assert np.all(bitset_delta(q, 7) == -128 * 2.0 ** -5)
    assert np.all(bitset_delta(q, 2) == 4 * 2.0 ** -5)


def test_rank_excludes_set_bits(mnist):
    q = mnist.qmodel
    stored = to_byte(q.flat_weights()).copy()
    stored[1] = 0xFF
    ds = mnist.dataset
    ranked = bit_gradient_rank(q, q.dequantized(), ds.x_train[:50], ds.y_train[:50], (1, 7), stored)
    ids = {c.weight_id for c in ranked}
    assert 1 not in ids
    assert all(i % 4 == 1 and not stored[i] & 0x80 for i in ids)


def test_rank_sign_ordering(monkeypatch):
    import bitglow.bsca as B
    q = linear_qmodel([[0] * 8])
    g = np.array([0.0, 0.5, 0.0, 0.0, 0.0, -0.5, 0.0, 0.0])
    monkeypatch.setattr(B, "flat_gradient", lambda shadow, x, y: g)
    ranked = bit_gradient_rank(q, None, None, None, (1, 2))
    assert [c.weight_id for c in ranked] == [1, 5]
    # on the MSB the delta is negative: a positive gradient scores below zero
    ranked = bit_gradient_rank(q, None, None, None, (1, 7))
    assert [c.weight_id for c in ranked] == [5, 1]
    assert ranked[1].score < 0 < ranked[0].score


def test_msb_positive_gradient_ranks_below_zero_score(monkeypatch):
    import bitglow.bsca as B
    q = linear_qmodel([[0] * 8])
    g = np.zeros(8)
    g[1] = 1.0
    monkeypatch.setattr(B, "flat_gradient", lambda shadow, x, y: g)
    ranked = bit_gradient_rank(q, None, None, None, (1, 7))
    assert [c.weight_id for c in ranked] == [5, 1]
    assert ranked[0].score == 0


def test_zero_budget(mnist_setup):
    fx, xb, yb, xe, ye = mnist_setup
    res = bsca_line(fx.qmodel, fx.image, 1, 7, BscaConfig(budget=0), xb, yb, xe, ye)
    assert res.log == [] and res.notice
    assert np.array_equal(res.model.flat_weights(), fx.qmodel.flat_weights())


def test_exhausted_line():
    w = np.full((3, 4), -1)
    w[:, 0] = 3
    q = QuantizedModel([QLayer(w, 7, 0, 7, "none")], 0)
    from bitglow.flash import layout
    x = np.random.default_rng(0).uniform(-0.5, 0.5, (20, 4))
    y = np.arange(20) % 3
    res = bsca_line(q, layout(q), 1, 7, BscaConfig(budget=5), x, y, x, y)
    assert res.log == [] and "exhausted" in res.notice
    res = bsca_line(q, layout(q), 0, 7, BscaConfig(budget=5), x, y, x, y)
    assert len(res.log) == 3 and "exhausted" in res.notice


def test_log_invariants(msb_attack, mnist):
    stored = mnist.image.as_array()
    log = msb_attack.log
    assert len(log) <= 20
    assert len({r.weight_id for r in log}) == len(log)
    for r in log:
        assert r.weight_id % 4 == 1 and r.bit == 7
        assert r.byte_after == r.byte_before | 0x80 != r.byte_before
        assert r.byte_before == stored[r.weight_id]
        if r.best_alternative_loss is not None:
            assert r.loss_after >= r.best_alternative_loss
    after = to_byte(msb_attack.model.flat_weights())
    hd = int(np.unpackbits(after ^ stored).sum())
    assert hd == len(log)


def test_canonical_image_untouched(msb_attack, mnist):
    assert np.array_equal(from_byte(mnist.image.as_array()), mnist.qmodel.flat_weights())


def test_trace_matches_model(msb_attack, mnist_setup):
    fx, xb, yb, xe, ye = mnist_setup
    assert q_accuracy(msb_attack.model, xe, ye) == msb_attack.final_accuracy


def test_replay_agrees(msb_attack, mnist_setup):
    fx, xb, yb, xe, ye = mnist_setup
    curve = replay_on_simulator(msb_attack.log, fx.qmodel, fx.image, 1, 7, xe, ye)
    assert curve[0] == (0, msb_attack.baseline_accuracy)
    assert [a for _, a in curve] == msb_attack.trace()
    assert curve[-1][1] == msb_attack.final_accuracy


def test_deterministic(msb_attack, mnist_setup):
    fx, xb, yb, xe, ye = mnist_setup
    again = bsca_line(fx.qmodel, fx.image, 1, 7, BscaConfig(budget=20), xb, yb, xe, ye)
    assert again.weight_ids == msb_attack.weight_ids


def test_search_iris_b(iris_b):
    ds = iris_b.dataset
    xb, yb = draw_batch(ds.x_train, ds.y_train, 100, 0)
    rep = bsca_search(iris_b.qmodel, iris_b.image, BscaConfig(budget=20), xb, yb, ds.x_test, ds.y_test)
    assert len(rep.table) == 32
    assert rep.winner.final_accuracy == min(r["final_accuracy"] for r in rep.table)
    assert rep.winner.final_accuracy <= 0.45


def test_search_subset_lines(mnist_setup):
    fx, xb, yb, xe, ye = mnist_setup
    lines = [(0, 7), (1, 7), (2, 0)]
    rep = bsca_search(fx.qmodel, fx.image, BscaConfig(budget=3), xb, yb, xe, ye, lines)
    assert [(r["column"], r["bit"]) for r in rep.table] == lines
    assert len(all_lines()) == 32


def test_draw_batch():
    x = np.arange(20).reshape(10, 2)
    y = np.arange(10)
    a = draw_batch(x, y, 4, 3)
    b = draw_batch(x, y, 4, 3)
    assert np.array_equal(a[0], b[0]) and len(a[1]) == 4
    assert len(draw_batch(x, y, 50, 0)[1]) == 10

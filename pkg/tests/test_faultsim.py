import numpy as np
import pytest
from hypothesis import given, strategies as st

from bitglow.faultsim import (
    CampaignResult, TriggerSet, apply_bitset, dual_spot_sweep, effective_bits, fault_mask,
    faulted_inference, mask_hook, positions_um, sweep,
)
from bitglow.flash import SpotConfig, bitline_to_x, line_to_column_bit, spots_targets
from bitglow.quant import from_byte, q_accuracy, q_forward, q_infer, to_byte


def static_rewrite_sweep(fx, x, y):
    """Accuracy per bit line by editing the weights and running the plain kernel."""
    q = fx.qmodel
    out = []
    for line in range(32):
        col, bit = line_to_column_bit(line)
        flat = to_byte(q.flat_weights()).copy()
        for wid in range(col, q.n_weights, 4):
            flat[wid] = apply_bitset(int(flat[wid]), bit)
        out.append(q_accuracy(q.with_flat_weights(from_byte(flat)), x, y))
    return out


@pytest.mark.parametrize("byte, bit, expected", [(0x00, 7, 0x80), (0xFF, 3, 0xFF), (0x05, 7, 0x85)])
def test_apply_bitset(byte, bit, expected):
    assert apply_bitset(byte, bit) == expected


def test_plus_five_becomes_minus_123():
    assert from_byte(np.uint8(apply_bitset(5, 7))) == -123


def test_bitset_exhaustive():
    for byte in range(256):
        for bit in range(8):
            out = apply_bitset(byte, bit)
            assert out >> bit & 1
            assert out & ~(1 << bit) & 0xFF == byte & ~(1 << bit) & 0xFF
            assert apply_bitset(out, bit) == out
            assert out & byte == byte  # no bit ever cleared
            assert bin(out).count("1") >= bin(byte).count("1")


def test_bad_bit_index():
    with pytest.raises(ValueError):
        apply_bitset(0, 8)


def test_trigger_validation(iris_b):
    with pytest.raises(ValueError):
        TriggerSet.only([1, 1])
    with pytest.raises(ValueError):
        fault_mask(iris_b.image, [SpotConfig(0)], TriggerSet.only([999]))


def test_empty_trigger_is_fault_free(iris_b):
    q, img = iris_b.qmodel, iris_b.image
    for row in q.quantize_input(iris_b.dataset.x_test[:10]):
        label, count = faulted_inference(q, img, [SpotConfig(0)], TriggerSet.only([]), row)
        assert label == q_infer(q, row)[1] and count == 0


def test_spot_on_ones_is_fault_free(iris_b):
    q, img = iris_b.qmodel, iris_b.image
    neg = [i for i in range(img.n_weights) if img.byte(i) & 0x80]
    trig = TriggerSet.only(neg)
    for row in q.quantize_input(iris_b.dataset.x_test[:10]):
        for col in range(4):
            label, count = faulted_inference(q, img, [SpotConfig(31 - 8 * col - 7)], trig, row)
            assert count == 0 and label == q_infer(q, row)[1]


def test_faulted_inference_matches_static_rewrite(iris_a):
    q, img = iris_a.qmodel, iris_a.image
    xq = q.quantize_input(iris_a.dataset.x_test)
    for col in range(4):
        flat = to_byte(q.flat_weights()).copy()
        flat[col] |= 0x80
        rewritten = q.with_flat_weights(from_byte(flat))
        line = 31 - 8 * col - 7
        for row in xq:
            label, _ = faulted_inference(q, img, [SpotConfig(line)], TriggerSet.only([col]), row)
            assert label == q_infer(rewritten, row)[1]


def test_iris_a_sweep_equals_static_rewrite(iris_a):
    x, y = iris_a.dataset.x_test, iris_a.dataset.y_test
    res = sweep(iris_a.qmodel, iris_a.image, None, x, y)
    assert [r.accuracy for r in res.rows] == static_rewrite_sweep(iris_a, x, y)


def test_hook_and_mask_paths_agree(iris_b):
    q, img = iris_b.qmodel, iris_b.image
    xq = q.quantize_input(iris_b.dataset.x_test)
    for line in range(32):
        mask = fault_mask(img, [SpotConfig(line, 2)], TriggerSet())
        res = sweep(q, img, [bitline_to_x(line)], xq, iris_b.dataset.y_test, width=2,
                    quantized_input=True)
        hook_acc = q_accuracy(q, xq, iris_b.dataset.y_test, mask_hook(mask), quantized_input=True)
        assert res.rows[0].accuracy == hook_acc


def test_fault_count_input_independent(iris_b):
    q, img = iris_b.qmodel, iris_b.image
    for line in (0, 8, 16, 24, 5):
        counts = {faulted_inference(q, img, [SpotConfig(line)], TriggerSet(), row)[1]
                  for row in q.quantize_input(iris_b.dataset.x_test)}
        assert len(counts) == 1


def test_fault_count_is_zero_bits(iris_b):
    img = iris_b.image
    for line in range(32):
        targets = spots_targets(img, [SpotConfig(line)])
        expect = sum(1 for wid, bit in targets if not img.byte(wid) >> bit & 1)
        assert effective_bits(img, fault_mask(img, [SpotConfig(line)], TriggerSet())) == expect


def test_flash_is_never_modified(iris_b):
    before = bytes(iris_b.image.data)
    ds = iris_b.dataset
    sweep(iris_b.qmodel, iris_b.image, None, ds.x_test, ds.y_test, width=2)
    assert iris_b.image.data == before
    dual_spot_sweep(iris_b.qmodel, iris_b.image, None, ds.x_test, ds.y_test)
    assert iris_b.image.data == before


def test_position_off_array(iris_b):
    ds = iris_b.dataset
    res = sweep(iris_b.qmodel, iris_b.image, [-500.0, 5000.0], ds.x_test, ds.y_test)
    for row in res.rows:
        assert row.accuracy == res.baseline_accuracy and row.faulted_bits == 0 and row.lines == ()


def test_iris_b_msb_lines_hurt(iris_b):
    ds = iris_b.dataset
    res = sweep(iris_b.qmodel, iris_b.image, None, ds.x_test, ds.y_test)
    assert min(res.rows[l].accuracy for l in (0, 8, 16, 24)) <= 0.45


def test_mnist_sweep_has_large_drop(mnist):
    x, y = mnist.dataset.eval_subset(100, 0)
    res = sweep(mnist.qmodel, mnist.image, None, x, y)
    assert res.baseline_accuracy - res.worst().accuracy >= 0.50


def test_dual_spot_union(iris_b):
    q, img, ds = iris_b.qmodel, iris_b.image, iris_b.dataset
    single = sweep(q, img, None, ds.x_test, ds.y_test)
    dual = dual_spot_sweep(q, img, None, ds.x_test, ds.y_test)
    for line, (s, d) in enumerate(zip(single.rows, dual.rows)):
        assert d.faulted_bits >= s.faulted_bits
        spots = [SpotConfig(line)] + ([SpotConfig(line + 16)] if line + 16 < 32 else [])
        union = spots_targets(img, [spots[0]])
        if len(spots) > 1:
            union |= spots_targets(img, [spots[1]])
        assert spots_targets(img, spots) == union
        mask = fault_mask(img, spots, TriggerSet())
        assert d.faulted_bits == effective_bits(img, mask)


def test_dual_spot_max_faults(iris_b):
    ds = iris_b.dataset
    res = dual_spot_sweep(iris_b.qmodel, iris_b.image, None, ds.x_test, ds.y_test)
    assert max(r.faulted_bits for r in res.rows) >= 8


def test_overlapping_dual_spots_rejected(iris_b):
    ds = iris_b.dataset
    with pytest.raises(ValueError):
        dual_spot_sweep(iris_b.qmodel, iris_b.image, None, ds.x_test, ds.y_test, width=2, offset=1)


def test_csv_format(iris_b):
    ds = iris_b.dataset
    res = dual_spot_sweep(iris_b.qmodel, iris_b.image, [0.0, 640.0], ds.x_test, ds.y_test)
    lines = res.to_csv().splitlines()
    assert lines[0] == "x_um,bitline,accuracy,faulted_bits"
    assert lines[1].split(",")[1] == "0|16"
    assert lines[2].split(",")[1] == "16"


def test_threaded_rows_identical(iris_b, monkeypatch):
    ds = iris_b.dataset
    one = sweep(iris_b.qmodel, iris_b.image, None, ds.x_test, ds.y_test).to_csv()
    monkeypatch.setenv("BITGLOW_THREADS", "4")
    assert sweep(iris_b.qmodel, iris_b.image, None, ds.x_test, ds.y_test).to_csv() == one


def test_summary_worst(iris_b):
    ds = iris_b.dataset
    res = sweep(iris_b.qmodel, iris_b.image, None, ds.x_test, ds.y_test)
    s = res.summary()
    assert s["worst_accuracy"] == min(r.accuracy for r in res.rows)
    assert s["baseline_accuracy"] == res.baseline_accuracy


@given(st.integers(0, 31), st.integers(0, 31))
def test_dual_targets_disjoint_unless_overlapping(a, b):
    from bitglow.flash import layout
    from bitglow.quant import QLayer, QuantizedModel
    q = QuantizedModel([QLayer(np.zeros((2, 8)), 7, 0, 7, "none")], 0)
    img = layout(q)
    ta, tb = spots_targets(img, [SpotConfig(a)]), spots_targets(img, [SpotConfig(b)])
    assert (ta & tb == set()) == (a != b)


def test_positions():
    assert positions_um(0, 120, 40) == [0, 40, 80, 120]
    with pytest.raises(ValueError):
        positions_um(0, 10, 0)

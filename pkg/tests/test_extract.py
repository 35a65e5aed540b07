import numpy as np
import pytest

from bitglow.extract import extract_msbs, probe_weight, random_probes
from bitglow.flash import layout
from bitglow.quant import QLayer, QuantizedModel


def two_layer(w1, w2, in_range=(0, 127)):
    q = QuantizedModel([QLayer(np.array(w1), 7, 7, 7, "relu"),
                        QLayer(np.array(w2), 7, 7, 7, "none")], 7)
    q.metadata["input_q_range"] = list(in_range)
    return q


def test_msb_already_set_guesses_one():
    q = two_layer([[-3, 5], [7, -9]], [[4, -4], [-1, 2]])
    probes = random_probes(q, 50, 0)
    assert probe_weight(q, layout(q), 0, probes) == 1


def test_live_weight_guesses_zero():
    q = two_layer([[127, 5], [7, 9]], [[40, -40], [10, 20]])
    probes = random_probes(q, 50, 0)
    assert probe_weight(q, layout(q), 0, probes) == 0


def test_dead_unit_is_a_silent_miss():
    # neuron 1 only sees negative weights on non-negative inputs: never fires
    q = two_layer([[20, 20], [-50, -60]], [[30, 0], [5, 0]])
    probes = random_probes(q, 100, 0)
    rep = extract_msbs(q, layout(q), probes)
    # weight 5 (w2[0,1]) multiplies the dead unit: stored MSB 0, never observed
    assert rep.truth[5] == 0 and rep.guesses[5] == 1
    assert rep.incorrect_zero_guesses == 0


def test_all_negative_model_fully_recovered():
    rng = np.random.default_rng(0)
    q = two_layer(rng.integers(-128, 0, (6, 8)), rng.integers(-128, 0, (3, 6)))
    rep = extract_msbs(q, layout(q), random_probes(q, 20, 0))
    assert rep.recovered_fraction == 1.0 and rep.guessed_zero == 0


@pytest.mark.parametrize("compare", ["logits", "label"])
def test_fast_equals_direct(mnist, compare):
    probes = random_probes(mnist.qmodel, 60, 3)
    fast = extract_msbs(mnist.qmodel, mnist.image, probes, compare=compare, method="fast")
    direct = extract_msbs(mnist.qmodel, mnist.image, probes, compare=compare, method="direct")
    assert np.array_equal(fast.guesses, direct.guesses)


def test_fast_equals_direct_deep_subset(mnist_deep):
    probes = random_probes(mnist_deep.qmodel, 40, 1)
    ids = np.random.default_rng(0).choice(mnist_deep.image.n_weights, 150, replace=False)
    fast = extract_msbs(mnist_deep.qmodel, mnist_deep.image, probes, weight_ids=ids)
    direct = extract_msbs(mnist_deep.qmodel, mnist_deep.image, probes, method="direct", weight_ids=ids)
    assert np.array_equal(fast.guesses, direct.guesses)


def test_soundness_and_error_shape(mnist):
    rep = extract_msbs(mnist.qmodel, mnist.image, random_probes(mnist.qmodel, 200, 0))
    assert rep.incorrect_zero_guesses == 0
    assert rep.incorrect == int(np.sum((rep.truth == 0) & (rep.guesses == 1)))
    assert rep.recovered_fraction == rep.correct / len(rep.guesses)
    assert rep.guessed_zero + rep.guessed_one == mnist.image.n_weights


def test_more_probes_never_lose_zero_guesses(mnist):
    probes = random_probes(mnist.qmodel, 200, 5)
    small = extract_msbs(mnist.qmodel, mnist.image, probes[:100])
    big = extract_msbs(mnist.qmodel, mnist.image, probes)
    assert np.all(big.guesses[small.guesses == 0] == 0)
    assert big.recovered_fraction >= small.recovered_fraction


def test_label_mode_is_weaker(mnist):
    probes = random_probes(mnist.qmodel, 100, 0)
    logits = extract_msbs(mnist.qmodel, mnist.image, probes)
    label = extract_msbs(mnist.qmodel, mnist.image, probes, compare="label")
    assert np.all(logits.guesses[label.guesses == 0] == 0)


def test_probes_in_input_range(mnist_deep):
    p = random_probes(mnist_deep.qmodel, 10, 0)
    lo, hi = mnist_deep.qmodel.metadata["input_q_range"]
    assert p.shape == (10, 784) and p.min() >= lo and p.max() <= hi
    assert np.array_equal(p, random_probes(mnist_deep.qmodel, 10, 0))


def test_report_csv(mnist):
    ids = np.array([7, 3, 11])
    rep = extract_msbs(mnist.qmodel, mnist.image, random_probes(mnist.qmodel, 20, 0), weight_ids=ids)
    rows = rep.to_csv().splitlines()
    assert rows[0] == "weight_id,true_msb,guess,correct"
    assert [r.split(",")[0] for r in rows[1:]] == ["7", "3", "11"]


def test_empty_probes_rejected(mnist):
    with pytest.raises(ValueError):
        extract_msbs(mnist.qmodel, mnist.image, np.zeros((0, 50), dtype=np.int8))

"""
Network Tests - forward pass, gradients, masks and deterministic training
"""
import numpy as np
import pytest

from common.errors import DimensionMismatchError, FormatError, InvalidSpecError
from experiment.pruning import flops
from network.datasets import blobs, split
from network.mlp import (DenseParams, InitScheme, LayerSpec, Mask, OutputHead, TrainConfig,
                         classification_scores, connection_count, evaluate, forward, gradients,
                         init_params, numeric_gradients, sigmoid_lipschitz_check)
from network.trainer import batch_schedule, iterations_per_epoch, train


class Sink:
    def __init__(self):
        self.seen = []

    def record(self, iteration, params):
        self.seen.append((iteration, params.weights[0].copy()))


def _hand_params():
    # 2-2-1: identity hidden layer, output sums the hidden units with bias -1
    return DenseParams([np.eye(2), np.array([[1.0, 1.0]])], [np.zeros(2), np.array([-1.0])])


# ============================================================================
# Layer specs / FLOPs
# ============================================================================

@pytest.mark.parametrize("sizes, expected", [
    ((9, 6, 1), 60),
    ((6, 8, 1), 56),
    ((4, 8, 1), 40),
    ((4, 6, 3), 42),
    ((3, 6, 3), 36),
    ((784, 50, 30, 10), 41000),
])
def test_dense_flops_of_reference_architectures(sizes, expected):
    head = OutputHead.SIGMOID_BCE if sizes[-1] == 1 else OutputHead.SOFTMAX_CE
    spec = LayerSpec(sizes, output_head=head)
    assert connection_count(sizes) == expected
    assert spec.n_connections == expected
    assert flops(spec) == expected
    assert flops(spec, Mask.ones(spec)) == expected


def test_for_classes_picks_head():
    assert LayerSpec.for_classes(4, (8,), 2).sizes == (4, 8, 1)
    multi = LayerSpec.for_classes(4, (6,), 3)
    assert multi.sizes == (4, 6, 3)
    assert multi.output_head is OutputHead.SOFTMAX_CE
    assert multi.label() == "4-6-3"


@pytest.mark.parametrize("sizes, head", [
    ((3,), OutputHead.SIGMOID_BCE),
    ((3, 0, 1), OutputHead.SIGMOID_BCE),
    ((3, 2), OutputHead.SIGMOID_BCE),
    ((3, 1), OutputHead.SOFTMAX_CE),
])
def test_invalid_layer_spec(sizes, head):
    with pytest.raises(InvalidSpecError):
        LayerSpec(sizes, output_head=head)


# ============================================================================
# Forward
# ============================================================================

def test_forward_hand_computed():
    params = _hand_params()
    # hidden = (0.5, 0.5), logit = 0
    assert forward(params, None, np.zeros(2)) == pytest.approx([0.5])
    out = forward(params, None, np.array([[0.0, 0.0], [50.0, 50.0]]))
    assert out.shape == (2, 1)
    # hidden ~ (1, 1), logit ~ 1
    assert out[1, 0] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), abs=1e-12)


def test_mask_equals_zeroed_weights():
    spec = LayerSpec((3, 4, 2), output_head=OutputHead.SOFTMAX_CE)
    params = init_params(spec, TrainConfig(seed=7, init=InitScheme.GAUSSIAN))
    mask = Mask.ones(spec)
    mask.keep[0][1, 2] = 0
    mask.keep[1][0, 3] = 0
    zeroed = params.copy()
    for w, k in zip(zeroed.weights, mask.keep):
        w[k == 0] = 0.0
    X = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_allclose(forward(params, mask, X), forward(zeroed, None, X), rtol=0, atol=1e-15)


def test_softmax_rows_sum_to_one():
    spec = LayerSpec((3, 5, 4), output_head=OutputHead.SOFTMAX_CE)
    params = init_params(spec, TrainConfig(seed=1))
    out = forward(params, None, np.random.default_rng(1).normal(size=(6, 3)))
    np.testing.assert_allclose(out.sum(axis=1), 1.0)


def test_forward_rejects_wrong_input_width():
    with pytest.raises(DimensionMismatchError):
        forward(_hand_params(), None, np.zeros(3))


def test_mask_shape_checked():
    spec = LayerSpec((2, 2, 1))
    bad = Mask([np.ones((2, 2), dtype=np.uint8)])
    with pytest.raises(DimensionMismatchError):
        forward(_hand_params(), bad, np.zeros(2), spec=spec)


def test_sigmoid_derivative_bound():
    assert sigmoid_lipschitz_check() == 0.25


# ============================================================================
# Gradients
# ============================================================================

def _relative_error(a, b):
    a, b = np.concatenate([g.ravel() for g in a]), np.concatenate([g.ravel() for g in b])
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a) + np.abs(b)), 1e-12)


@pytest.mark.parametrize("sizes, head, labels", [
    ((3, 2, 2), OutputHead.SOFTMAX_CE, [0, 1, 0, 1, 1]),
    ((3, 4, 1), OutputHead.SIGMOID_BCE, [1, 0, 0, 1, 1]),
    ((3, 4, 3, 3), OutputHead.SOFTMAX_CE, [2, 0, 1, 1, 2]),
])
def test_gradients_match_finite_differences(sizes, head, labels):
    spec = LayerSpec(sizes, output_head=head)
    params = init_params(spec, TrainConfig(seed=3, init=InitScheme.GAUSSIAN))
    for b in params.biases:
        b[:] = np.random.default_rng(5).normal(scale=0.1, size=b.shape)
    X = np.random.default_rng(4).normal(size=(5, sizes[0]))
    labels = np.array(labels)

    _, analytic, _ = gradients(spec, params, None, X, labels)
    numeric = numeric_gradients(spec, params, X, labels, step=1e-5)
    assert _relative_error(analytic, numeric) <= 1e-4


def test_masked_gradients_are_zero():
    spec = LayerSpec((3, 4, 1))
    params = init_params(spec, TrainConfig(seed=2))
    mask = Mask.ones(spec)
    mask.keep[0][:, 0] = 0
    X = np.random.default_rng(2).normal(size=(8, 3))
    _, grad_w, _ = gradients(spec, params, mask, X, np.arange(8) % 2)
    assert np.all(grad_w[0][:, 0] == 0.0)
    assert np.any(grad_w[0][:, 1] != 0.0)


# ============================================================================
# Initialization / Persistence
# ============================================================================

def test_uniform_init_bounds_and_zero_biases():
    spec = LayerSpec((4, 16, 3), output_head=OutputHead.SOFTMAX_CE)
    params = init_params(spec, TrainConfig(seed=0))
    assert np.max(np.abs(params.weights[0])) <= 1.0 / np.sqrt(16)
    assert np.max(np.abs(params.weights[1])) <= 1.0 / np.sqrt(16)
    assert all(np.all(b == 0.0) for b in params.biases)


def test_init_is_seed_determined():
    spec = LayerSpec((4, 6, 3), output_head=OutputHead.SOFTMAX_CE)
    a = init_params(spec, TrainConfig(seed=11))
    b = init_params(spec, TrainConfig(seed=11))
    c = init_params(spec, TrainConfig(seed=12))
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_params_and_mask_files(tmp_path):
    spec = LayerSpec((4, 6, 3), output_head=OutputHead.SOFTMAX_CE)
    params = init_params(spec, TrainConfig(seed=5))
    params.save(tmp_path / "p.lgcp")
    loaded = DenseParams.load(tmp_path / "p.lgcp")
    loaded.check(spec)
    assert all(np.array_equal(x, y) for x, y in zip(params.weights, loaded.weights))

    mask = Mask.ones(spec)
    mask.keep[1][2, 4] = 0
    mask.save(tmp_path / "m.lgcm")
    assert Mask.load(tmp_path / "m.lgcm").n_kept == spec.n_connections - 1

    with pytest.raises(FormatError):
        DenseParams.load(tmp_path / "m.lgcm")


def test_params_csv_export(tmp_path):
    spec = LayerSpec((4, 6, 3), output_head=OutputHead.SOFTMAX_CE)
    params = init_params(spec, TrainConfig(seed=6))
    params.biases[1][:] = [0.25, -0.5, 1.0]
    params.to_csv(tmp_path / "csv")
    for i, (w, b) in enumerate(zip(params.weights, params.biases), start=1):
        table = np.loadtxt(tmp_path / "csv" / f"layer{i}.csv", delimiter=",", ndmin=2)
        # %.17g text reads back to the same doubles
        np.testing.assert_array_equal(table[:, :-1], w)
        np.testing.assert_array_equal(table[:, -1], b)


def test_invalid_train_config():
    with pytest.raises(InvalidSpecError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(InvalidSpecError):
        TrainConfig(batch_size=0)


# ============================================================================
# Metrics
# ============================================================================

def test_classification_scores():
    accuracy, f1, per_class = classification_scores([0, 1, 1, 0], [0, 1, 0, 0], 2)
    assert accuracy == pytest.approx(0.75)
    assert per_class == pytest.approx([0.8, 2.0 / 3.0])
    assert f1 == pytest.approx((0.8 + 2.0 / 3.0) / 2)


def test_absent_class_counts_as_zero_f1():
    with pytest.warns(RuntimeWarning):
        _, f1, per_class = classification_scores([0, 1, 1, 0], [0, 1, 1, 0], 3)
    assert per_class == pytest.approx([1.0, 1.0, 0.0])
    assert f1 == pytest.approx(2.0 / 3.0)


# ============================================================================
# Training
# ============================================================================

def test_separable_blobs_reach_high_accuracy():
    data = split(blobs(n_samples=200, n_features=4, seed=1), test_fraction=0.2, seed=0)
    spec = LayerSpec((4, 2, 1))
    cfg = TrainConfig(seed=0)
    result = train(spec, init_params(spec, cfg), None, data, cfg)
    assert result.accuracy >= 0.95
    accuracy, _, _ = evaluate(result.final_params, None, data.test, spec=spec)
    assert accuracy == result.accuracy


def test_training_is_bitwise_reproducible(blob_split):
    spec = LayerSpec((2, 4, 1))
    cfg = TrainConfig(seed=9, max_epochs=20)
    params0 = init_params(spec, cfg)
    a = train(spec, params0, None, blob_split, cfg)
    b = train(spec, params0, None, blob_split, cfg)
    assert a.epochs_run == b.epochs_run
    assert all(np.array_equal(x, y) for x, y in zip(a.final_params.weights, b.final_params.weights))
    assert a.loss_history == b.loss_history


def test_mask_of_ones_matches_dense(blob_split):
    spec = LayerSpec((2, 4, 1))
    cfg = TrainConfig(seed=4, max_epochs=15)
    params0 = init_params(spec, cfg)
    dense = train(spec, params0, None, blob_split, cfg)
    ones = train(spec, params0, Mask.ones(spec), blob_split, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(dense.final_params.weights, ones.final_params.weights))
    assert dense.accuracy == ones.accuracy


def test_pruned_weights_stay_zero(blob_split):
    spec = LayerSpec((2, 4, 1))
    cfg = TrainConfig(seed=4, max_epochs=15)
    mask = Mask.ones(spec)
    mask.keep[0][0, :] = 0
    mask.keep[1][0, 2] = 0
    result = train(spec, init_params(spec, cfg), mask, blob_split, cfg)
    assert np.all(result.final_params.weights[0][0, :] == 0.0)
    assert result.final_params.weights[1][0, 2] == 0.0


def test_recorder_sees_initial_and_every_step(blob_split):
    spec = LayerSpec((2, 4, 1))
    cfg = TrainConfig(seed=1, max_epochs=3, convergence_tol=1e-12, patience=10)
    params0 = init_params(spec, cfg)
    sink = Sink()
    result = train(spec, params0, None, blob_split, cfg, recorder=sink)

    per_epoch = iterations_per_epoch(len(blob_split.train), cfg.batch_size)
    assert per_epoch == 6
    assert result.iterations == 3 * per_epoch
    assert [i for i, _ in sink.seen] == list(range(result.iterations + 1))
    assert np.array_equal(sink.seen[0][1], params0.weights[0])
    assert np.array_equal(sink.seen[-1][1], result.final_params.weights[0])


def test_batch_schedule_covers_each_epoch():
    batches = list(batch_schedule(seed=3, n_train=90, batch_size=16, epochs=2))
    assert len(batches) == 12
    first_epoch = np.concatenate(batches[:6])
    assert sorted(first_epoch.tolist()) == list(range(90))
    assert len(batches[5]) == 90 - 5 * 16


def test_batch_larger_than_training_set_rejected(blob_split):
    spec = LayerSpec((2, 4, 1))
    cfg = TrainConfig(batch_size=1000)
    with pytest.raises(InvalidSpecError):
        train(spec, init_params(spec, cfg), None, blob_split, cfg)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.errors import DivergenceError
from fedsim.models import (
    ArchDescriptor,
    Dataset,
    EvalReport,
    Hyperparameters,
    ParameterVector,
    central_difference,
    evaluate,
    finite_difference_gradient,
    init_params,
    load_checkpoint,
    local_train,
    loss_and_gradient,
    pack,
    predict,
    save_checkpoint,
    unpack,
    weight_mask,
)

LOGISTIC = ArchDescriptor("logistic", input_dim=4, hidden_dim=0, num_classes=3)
MLP = ArchDescriptor("mlp", input_dim=4, hidden_dim=5, num_classes=3)


def _blob_data(n, seed, input_dim=4, num_classes=2, spread=3.0):
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, spread, size=(num_classes, input_dim))
    labels = rng.integers(0, num_classes, size=n)
    feats = means[labels] + rng.normal(0.0, 0.4, size=(n, input_dim))
    return Dataset(feats, labels, num_classes)


# ---------------------------------------------------------------------------
# independent oracles, coded with plain python loops
# ---------------------------------------------------------------------------


def _oracle_probs(values, arch, row):
    """Forward pass recomputed without the library's linear algebra."""
    v = list(values)
    d, h, k = arch.input_dim, arch.hidden_dim, arch.num_classes
    if arch.kind == "logistic":
        logits = []
        for c in range(k):
            z = v[d * k + c]  # bias
            for j in range(d):
                z += row[j] * v[j * k + c]
            logits.append(z)
    else:
        off_w1, off_b1 = 0, d * h
        off_w2, off_b2 = d * h + h, d * h + h + h * k
        hidden = []
        for u in range(h):
            z = v[off_b1 + u]
            for j in range(d):
                z += row[j] * v[off_w1 + j * h + u]
            hidden.append(math.tanh(z))
        logits = []
        for c in range(k):
            z = v[off_b2 + c]
            for u in range(h):
                z += hidden[u] * v[off_w2 + u * k + c]
            logits.append(z)
    m = max(logits)
    exps = [math.exp(z - m) for z in logits]
    s = sum(exps)
    return [e / s for e in exps]


def _oracle_eval(values, arch, data):
    """Loss and accuracy recomputed independently."""
    losses = []
    hits = 0
    for row, label in zip(data.features, data.labels):
        probs = _oracle_probs(values, arch, row)
        losses.append(-math.log(probs[label]))
        best = max(range(len(probs)), key=lambda c: (probs[c], -c))
        if best == label:
            hits += 1
    total = 0.0
    for term in losses:
        total += term
    return total / len(losses), hits / len(losses)


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def test_predict_zero_params_binary_is_uniform():
    arch = ArchDescriptor("logistic", 4, 0, 2)
    params = init_params(arch, "zeros")
    probs = predict(params, arch, np.ones((3, 4)))
    assert np.allclose(probs, 0.5, atol=0)


def test_predict_saturated_logit():
    arch = ArchDescriptor("logistic", 1, 0, 2)
    # bias pushes class-1 logit to 50, class-0 stays at 0
    params = ParameterVector(np.array([0.0, 0.0, 0.0, 50.0]))
    probs = predict(params, arch, np.zeros((1, 1)))
    assert probs[0, 1] >= 1.0 - 1e-20


@pytest.mark.parametrize("arch", [LOGISTIC, MLP])
def test_predict_matches_independent_forward(arch):
    params = init_params(arch, "seeded_uniform", seed=42)
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(3, arch.input_dim))
    probs = predict(params, arch, rows)
    for i in range(3):
        expect = _oracle_probs(params.values, arch, rows[i])
        assert np.max(np.abs(probs[i] - np.asarray(expect))) <= 1e-12


def test_predict_rows_sum_to_one():
    params = init_params(MLP, "seeded_uniform", seed=9)
    rows = np.random.default_rng(11).normal(size=(20, 4))
    probs = predict(params, MLP, rows)
    assert np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(probs >= 0.0)


def test_predict_shape_mismatch_rejected():
    params = init_params(LOGISTIC, "zeros")
    with pytest.raises(ValueError):
        predict(params, LOGISTIC, np.zeros((2, 7)))


# ---------------------------------------------------------------------------
# loss and gradient
# ---------------------------------------------------------------------------


def test_loss_uniform_predictor_is_ln2():
    arch = ArchDescriptor("logistic", 3, 0, 2)
    params = init_params(arch, "zeros")
    rng = np.random.default_rng(0)
    data = Dataset(rng.normal(size=(10, 3)), np.array([0, 1] * 5), 2)
    loss, _ = loss_and_gradient(params, arch, data)
    assert abs(loss - math.log(2.0)) <= 1e-12


def test_l2_gradient_on_weights_only():
    # equal weight columns + equal biases null the data gradient exactly,
    # leaving only the penalty term
    arch = ArchDescriptor("logistic", 2, 0, 2)
    w = np.array([0.7, 0.7, -0.3, -0.3, 0.2, 0.2])  # cols equal, biases equal
    params = ParameterVector(w)
    data = Dataset(np.array([[1.0, 2.0], [1.0, 2.0]]), np.array([0, 1]), 2)
    l2 = 0.25
    _, grad = loss_and_gradient(params, arch, data, l2=l2)
    mask = weight_mask(arch)
    assert np.array_equal(grad.values[mask], l2 * w[mask])
    assert np.array_equal(grad.values[~mask], np.zeros(2))


def test_empty_batch_rejected():
    with pytest.raises(ValueError, match="empty"):
        loss_and_gradient(
            init_params(LOGISTIC, "zeros"),
            LOGISTIC,
            Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int), 3),
        )


@pytest.mark.parametrize("arch", [LOGISTIC, MLP])
def test_gradient_matches_central_differences(arch):
    params = init_params(arch, "seeded_uniform", seed=7)
    rng = np.random.default_rng(7)
    data = Dataset(rng.normal(size=(8, 4)), rng.integers(0, 3, size=8), 3)
    _, grad = loss_and_gradient(params, arch, data, l2=0.01)
    fd = finite_difference_gradient(params, arch, data, eps=1e-5, l2=0.01)
    denom = max(1.0, float(np.max(np.abs(fd.values))))
    rel = float(np.max(np.abs(grad.values - fd.values))) / denom
    assert rel <= 1e-5


def test_central_difference_quadratic():
    fd = central_difference(lambda w: float(w[0] ** 2), np.array([3.0]), eps=1e-4)
    assert abs(fd[0] - 6.0) <= 1e-8


def test_central_difference_zero_eps_rejected():
    with pytest.raises(ValueError):
        central_difference(lambda w: 0.0, np.array([1.0]), eps=0.0)


# ---------------------------------------------------------------------------
# local_train
# ---------------------------------------------------------------------------


def test_single_sample_full_batch_is_one_sgd_step():
    arch = ArchDescriptor("logistic", 2, 0, 2)
    params = init_params(arch, "seeded_uniform", seed=1)
    data = Dataset(np.array([[0.5, -1.0]]), np.array([1]), 2)
    hp = Hyperparameters(learning_rate=0.3, epochs=1, batch_size=1, l2=0.0, seed=0)
    out = local_train(params, arch, data, hp)
    _, grad = loss_and_gradient(params, arch, data)
    assert np.array_equal(out.values, params.values - 0.3 * grad.values)


def test_zero_epochs_rejected_at_construction():
    with pytest.raises(ValueError):
        Hyperparameters(learning_rate=0.1, epochs=0, batch_size=1, l2=0.0, seed=0)


def test_zero_learning_rate_is_identity():
    data = _blob_data(20, seed=2)
    arch = ArchDescriptor("logistic", 4, 0, 2)
    params = init_params(arch, "seeded_uniform", seed=3)
    hp = Hyperparameters(learning_rate=0.0, epochs=1, batch_size=5, l2=0.0, seed=4)
    out = local_train(params, arch, data, hp)
    assert np.array_equal(out.values, params.values)


def test_separable_blob_reaches_95_percent():
    data = _blob_data(200, seed=3)
    arch = ArchDescriptor("logistic", 4, 0, 2)

    # oracle: independent full-batch gradient descent on the same data
    w = np.zeros((4, 2))
    b = np.zeros(2)
    y1h = np.eye(2)[data.labels]
    for _ in range(200):
        logits = data.features @ w + b
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        g = (p - y1h) / len(data)
        w -= 0.5 * (data.features.T @ g)
        b -= 0.5 * g.sum(axis=0)
    oracle_acc = float(np.mean(np.argmax(data.features @ w + b, axis=1) == data.labels))
    assert oracle_acc >= 0.95

    hp = Hyperparameters(learning_rate=0.5, epochs=20, batch_size=20, l2=0.0, seed=5)
    trained = local_train(init_params(arch, "zeros"), arch, data, hp)
    report = evaluate(trained, arch, data)
    assert report.accuracy >= 0.95


def test_local_train_bit_deterministic():
    data = _blob_data(60, seed=8, num_classes=3)
    params = init_params(MLP, "seeded_uniform", seed=21)
    hp = Hyperparameters(learning_rate=0.1, epochs=3, batch_size=16, l2=0.001, seed=6)
    a = local_train(params, MLP, data, hp)
    b = local_train(params, MLP, data, hp)
    assert np.array_equal(a.values, b.values)


def test_batch_size_larger_than_shard_rejected():
    data = _blob_data(5, seed=1)
    hp = Hyperparameters(learning_rate=0.1, epochs=1, batch_size=6, l2=0.0, seed=0)
    arch = ArchDescriptor("logistic", 4, 0, 2)
    with pytest.raises(ValueError, match="batch_size"):
        local_train(init_params(arch, "zeros"), arch, data, hp)


def test_divergence_aborts_loudly():
    # absurd learning rate on steep data blows the loss up
    rng = np.random.default_rng(0)
    data = Dataset(rng.normal(0, 50, size=(16, 4)), rng.integers(0, 2, size=16), 2)
    arch = ArchDescriptor("logistic", 4, 0, 2)
    hp = Hyperparameters(learning_rate=1e307, epochs=50, batch_size=4, l2=0.0, seed=1)
    with pytest.raises(DivergenceError, match="epoch"):
        local_train(init_params(arch, "seeded_uniform", seed=2), arch, data, hp)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def test_evaluate_empty_is_degenerate():
    arch = ArchDescriptor("logistic", 4, 0, 3)
    empty = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int), 3)
    report = evaluate(init_params(arch, "zeros"), arch, empty)
    assert report == EvalReport(0.0, 0.0, 0, (0, 0, 0), degenerate=True)


def test_evaluate_perfect_separable():
    data = _blob_data(100, seed=12, spread=6.0)
    arch = ArchDescriptor("logistic", 4, 0, 2)
    hp = Hyperparameters(learning_rate=0.5, epochs=30, batch_size=10, l2=0.0, seed=0)
    trained = local_train(init_params(arch, "zeros"), arch, data, hp)
    report = evaluate(trained, arch, data)
    assert report.accuracy == 1.0


@pytest.mark.parametrize("arch", [LOGISTIC, MLP])
def test_evaluate_matches_independent_recomputation(arch):
    params = init_params(arch, "seeded_uniform", seed=13)
    rng = np.random.default_rng(13)
    data = Dataset(rng.normal(size=(40, 4)), rng.integers(0, 3, size=40), 3)
    report = evaluate(params, arch, data)
    oracle_loss, oracle_acc = _oracle_eval(params.values, arch, data)
    assert abs(report.loss - oracle_loss) <= 1e-12
    assert report.accuracy == oracle_acc
    assert sum(report.per_class_counts) == report.n_samples
    assert abs(report.accuracy * report.n_samples - round(report.accuracy * report.n_samples)) <= 1e-9


def test_argmax_ties_break_to_lowest_class():
    arch = ArchDescriptor("logistic", 2, 0, 3)
    params = init_params(arch, "zeros")  # every class ties
    data = Dataset(np.array([[1.0, 1.0]]), np.array([0]), 3)
    assert evaluate(params, arch, data).accuracy == 1.0
    data2 = Dataset(np.array([[1.0, 1.0]]), np.array([2]), 3)
    assert evaluate(params, arch, data2).accuracy == 0.0


# ---------------------------------------------------------------------------
# parameter plumbing
# ---------------------------------------------------------------------------


def test_parameter_vector_rejects_non_finite():
    with pytest.raises(ValueError):
        ParameterVector(np.array([1.0, np.inf]))


def test_parameter_vector_is_read_only():
    pv = ParameterVector(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        pv.values[0] = 9.0


def test_pack_unpack_round_trip():
    params = init_params(MLP, "seeded_uniform", seed=99)
    assert np.array_equal(pack(unpack(params, MLP)).values, params.values)


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchDescriptor("logistic", 4, 2, 3)  # logistic must have hidden_dim 0
    with pytest.raises(ValueError):
        ArchDescriptor("mlp", 4, 0, 3)
    with pytest.raises(ValueError):
        ArchDescriptor("tree", 4, 0, 3)
    assert LOGISTIC.parameter_count == 4 * 3 + 3
    assert MLP.parameter_count == 4 * 5 + 5 + 5 * 3 + 3
    assert MLP.shared_parameter_count == 4 * 5 + 5


def test_checkpoint_round_trip(tmp_path):
    params = init_params(MLP, "seeded_uniform", seed=1234)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, params, MLP)
    loaded, arch = load_checkpoint(path)
    assert arch == MLP
    assert np.array_equal(loaded.values, params.values)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(2, 15),
    k=st.integers(2, 4),
)
def test_probability_rows_always_sum_to_one(seed, n, k):
    arch = ArchDescriptor("logistic", 3, 0, k)
    params = init_params(arch, "seeded_uniform", seed=seed)
    rows = np.random.default_rng(seed).normal(0, 4, size=(n, 3))
    probs = predict(params, arch, rows)
    assert np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_local_train_pure(seed):
    rng = np.random.default_rng(seed)
    data = Dataset(rng.normal(size=(12, 4)), rng.integers(0, 2, size=12), 2)
    arch = ArchDescriptor("logistic", 4, 0, 2)
    hp = Hyperparameters(learning_rate=0.2, epochs=2, batch_size=4, l2=0.01, seed=seed)
    start = init_params(arch, "seeded_uniform", seed=seed)
    assert np.array_equal(
        local_train(start, arch, data, hp).values,
        local_train(start, arch, data, hp).values,
    )

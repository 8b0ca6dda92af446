import numpy as np
import pytest

from spkadapt.exceptions import DataError, DimensionMismatchError, DuplicateSlotError, InvalidParameterError
from spkadapt.models.acoustic import (TrainConfig, backward, focal_loss, forward, frame_accuracy, insert_affine,
                                      loss_value, Optimizer, predict_labels, train_model)

from .utils import random_features, small_model

NO_DROPOUT = TrainConfig(dropout_prob=0.0, l2_scale=0.01, grad_noise_variance=0.0, focal_gamma=2.0)


def _numeric_gradient(m, f, iv, targets, config, name, value, **kwargs):
    """Central differences of the loss over every entry of one parameter array."""
    epsilon = 1e-6
    numeric = np.zeros_like(value)
    for index in np.ndindex(value.shape):
        original = value[index]
        value[index] = original + epsilon
        plus = loss_value(m, f, iv, targets, config, **kwargs)
        value[index] = original - epsilon
        minus = loss_value(m, f, iv, targets, config, **kwargs)
        value[index] = original
        numeric[index] = (plus - minus) / (2 * epsilon)
    return numeric

@pytest.mark.parametrize("layer_sizes, positions, activation", [
    ((2, 2), (0, 1, 2), "identity"),
    ((2, 2), (0, 1, 2), "sigmoid"),
    ((8, 8), (0, 1), "identity"),
])
def test_gradients_match_finite_differences(layer_sizes, positions, activation):
    m = small_model(input_dim=3, ivector_dim=2, layer_sizes=layer_sizes, output_dim=3, seed=1)
    rng = np.random.default_rng(2)
    for position in positions:
        transform = insert_affine(m, position, "spk", activation)
        for weight, bias in (transform.pair(d) for d in transform.directions):
            weight += 0.1 * rng.standard_normal(weight.shape)
            bias += 0.1 * rng.standard_normal(bias.shape)
    f = random_features(num_frames=5, dim=3, seed=3)
    iv = rng.standard_normal(2)
    targets = rng.integers(0, 3, 5)
    kwargs = dict(partitions=("spk",), at_l2=0.05)

    _, grads = backward(m, f, iv, targets, NO_DROPOUT, **kwargs)
    for name, value in m.parameters("all").items():
        numeric = _numeric_gradient(m, f, iv, targets, NO_DROPOUT, name, value, **kwargs)
        assert np.allclose(grads[name], numeric, atol=1e-6, rtol=1e-4), name

def test_identity_transforms_are_neutral():
    m = small_model(seed=4)
    f = random_features(seed=5)
    before = forward(m, f)
    for position in range(m.num_layers + 1):
        insert_affine(m, position, "env")
    assert np.allclose(forward(m, f, partitions=("env",)), before, atol=1e-12, rtol=0)
    # slots of a partition that isn't active are ignored
    assert np.array_equal(forward(m, f, partitions=("other",)), before)

def test_fresh_transform_is_identity():
    m = small_model()
    transform = insert_affine(m, 1, "spk")
    assert np.array_equal(transform.weight_fwd, np.eye(3))
    assert np.array_equal(transform.weight_bwd, np.eye(3))
    assert not transform.bias_fwd.any() and not transform.bias_bwd.any()
    assert transform.distance_from_identity() == 0.0
    assert insert_affine(m, 0, "spk").directions == ("fwd",)

def test_insert_affine_errors():
    m = small_model()
    insert_affine(m, 1, "spk")
    with pytest.raises(DuplicateSlotError):
        insert_affine(m, 1, "spk")
    with pytest.raises(InvalidParameterError):
        insert_affine(m, m.num_layers + 1, "spk")
    with pytest.raises(InvalidParameterError):
        insert_affine(m, 1, "a/b")
    with pytest.raises(InvalidParameterError):
        insert_affine(m, 2, "spk", activation="tanh")

def test_forward_shapes_and_inputs():
    m = small_model(ivector_dim=2)
    f = random_features()
    posteriors = forward(m, f, np.ones(2))
    assert posteriors.shape == (f.num_frames, 4)
    assert np.allclose(posteriors.sum(axis=1), 1.0)
    assert np.array_equal(predict_labels(m, f, np.ones(2)), np.argmax(posteriors, axis=1))

    with pytest.raises(DimensionMismatchError):
        forward(m, f)
    with pytest.raises(DimensionMismatchError):
        forward(m, f, np.ones(3))
    with pytest.raises(DimensionMismatchError):
        forward(small_model(), f, np.ones(2))
    with pytest.raises(DimensionMismatchError):
        forward(m, random_features(dim=4), np.ones(2))

def test_train_mode_dropout_is_seeded():
    m = small_model()
    f = random_features()
    first = forward(m, f, mode="train", seed=3, dropout_prob=0.5)
    assert np.array_equal(first, forward(m, f, mode="train", seed=3, dropout_prob=0.5))
    assert not np.allclose(first, forward(m, f))

def test_focal_loss():
    posteriors = np.array([[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]])
    targets = np.array([0, 1, 0])
    cross_entropy = -np.mean(np.log([0.5, 0.8, 0.9]))
    assert focal_loss(posteriors, targets, gamma=0.0) == pytest.approx(cross_entropy, abs=1e-12)
    assert focal_loss([[0.5, 0.5]], [1], gamma=2.0) == pytest.approx(0.25 * np.log(2.0), abs=1e-12)
    assert focal_loss(posteriors, targets, gamma=2.0) < cross_entropy
    with pytest.raises(InvalidParameterError):
        focal_loss(posteriors, [0, 2, 0])

def test_frozen_base_gets_no_gradient():
    m = small_model()
    insert_affine(m, 1, "spk")
    _, grads = backward(m, random_features(), None, np.zeros(12, dtype=int), NO_DROPOUT, partitions=("spk",), trainable="affine")
    assert all(grads[name].size == 0 for name in m.params)
    assert grads["affine/1/spk/fwd/weight"].shape == (3, 3)

def test_optimizers_move_against_the_gradient():
    for name in ("sgd", "momentum", "rmsprop", "nadam"):
        value = np.array([1.0, -1.0])
        Optimizer(name).step({"w": value}, {"w": np.array([1.0, -1.0])}, 0.1)
        assert value[0] < 1.0 and value[1] > -1.0, name
    with pytest.raises(InvalidParameterError):
        Optimizer("adagrad")

def _dataset(num_utterances, seed):
    rng = np.random.default_rng(seed)
    data = []
    for i in range(num_utterances):
        f = random_features(f"u{i}", num_frames=10, dim=5, seed=seed + i)
        data.append((f, None, (f.frames[:, 0] > 0).astype(int) + 2 * (f.frames[:, 1] > 0)))
    return data

def test_train_model_log_and_learning_rate_rule():
    m = small_model()
    config = TrainConfig(initial_lr=0.01, max_epochs=4, grad_noise_variance=0.01, dropout_prob=0.1)
    m, log = train_model(m, _dataset(6, 0), _dataset(2, 50), config)
    assert list(log.columns) == ["Layers", "Train_Loss", "CVFA", "Learning_Rate"]
    assert log.index.name == "Epoch"
    assert list(log["Layers"]) == [1, 2, 2, 2][:len(log)]
    assert m.training_log is log

    rates = log["Learning_Rate"].to_numpy()
    for before, after in zip(rates[:-1], rates[1:]):
        assert after == pytest.approx(before) or after == pytest.approx(before / config.lr_decay_factor)
    assert 0.0 <= frame_accuracy(m, _dataset(2, 50)) <= 1.0

def test_train_model_is_deterministic():
    config = TrainConfig(initial_lr=0.01, max_epochs=2)
    first, _ = train_model(small_model(), _dataset(4, 0), _dataset(2, 50), config)
    second, _ = train_model(small_model(), _dataset(4, 0), _dataset(2, 50), config)
    assert first.fingerprint() == second.fingerprint()

def test_train_model_checks():
    with pytest.raises(InvalidParameterError):
        train_model(small_model(layer_sizes=(3, 4)), _dataset(2, 0), _dataset(1, 9), TrainConfig(max_epochs=1))
    with pytest.raises(DataError):
        train_model(small_model(), _dataset(2, 0), [], TrainConfig(max_epochs=1))
    with pytest.raises(InvalidParameterError):
        TrainConfig(optimizer="adagrad")
    with pytest.raises(InvalidParameterError):
        TrainConfig(lr_decay_factor=1.0)

import numpy as np
import pytest

from convshard.cluster import TrainConfig, master_train
from convshard.data import synthetic_cifar
from convshard.errors import ConfigurationError, DimensionError
from convshard.network import (
    PRESETS,
    Conv,
    FullyConnected,
    NetworkSpec,
    Norm,
    Pool,
    SoftmaxLoss,
    backward,
    custom_net,
    evaluate,
    forward,
    init_params,
    preset,
    train_step,
)
from convshard import tensor as T

from gradcheck import numeric_grad, rel_error


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_follow_the_reference_shape_chain(name):
    c1, c2 = PRESETS[name]
    shapes = preset(name).shapes()
    assert shapes == [(c1, 28, 28), (c1, 28, 28), (c1, 14, 14), (c2, 10, 10), (c2, 10, 10), (c2, 5, 5), (10,), (10,)]


def test_unknown_preset_is_rejected():
    with pytest.raises(ConfigurationError):
        preset("10:20")


def test_conv_geometry_reports_each_conv_layer():
    geo = preset("150:800").conv_geometry()
    assert [(g.ordinal, g.in_channels, g.in_h, g.num_kernels, g.out_h) for g in geo] == [
        (0, 3, 32, 150, 28),
        (1, 150, 14, 800, 10),
    ]


def test_invalid_chains_are_rejected():
    with pytest.raises(DimensionError):
        NetworkSpec((Conv(4, 5, 5), Pool(), Conv(4, 5, 5), Pool(), Conv(4, 5, 5)), (3, 8, 8))
    with pytest.raises(ConfigurationError):
        NetworkSpec((SoftmaxLoss(10), FullyConnected(10)), (3, 8, 8))
    with pytest.raises(DimensionError):
        NetworkSpec((FullyConnected(5), SoftmaxLoss(10)), (3, 8, 8))


def test_spec_dict_round_trip():
    spec = custom_net(4, 6, (3, 16, 16), 5, 5, Norm(3, 0.1, 0.5, 1.0))
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_init_params_is_seeded_and_scaled():
    spec = preset("50:500")
    a, b = init_params(spec, 3), init_params(spec, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert sorted(a) == ["conv0.weight", "conv3.weight", "fc6.bias", "fc6.weight"]
    assert a["conv3.weight"].std() == pytest.approx((50 * 25) ** -0.5, rel=0.05)
    assert init_params(spec, 3, std=0.5)["conv0.weight"].std() == pytest.approx(0.5, rel=0.05)


def test_whole_network_gradient_matches_finite_differences():
    spec = custom_net(3, 4, (2, 14, 14), 3, 4, Norm(3, 0.2, 0.75, 1.0), "tiny")
    rng = np.random.default_rng(5)
    params = init_params(spec, 1, std=0.5)
    x = rng.standard_normal((3, 2, 14, 14))
    y = rng.integers(0, 4, 3)

    def loss():
        logits, _ = forward(spec, params, x)
        return T.softmax_loss(logits, y)[0]

    logits, cache = forward(spec, params, x)
    _, g = T.softmax_loss(logits, y)
    grads = backward(spec, params, cache, g)
    for name, p in params.items():
        assert rel_error(grads[name], numeric_grad(loss, p)) < 1e-6, name


def test_forward_without_cache_gives_same_logits():
    spec = preset("50:500")
    params = init_params(spec, 0)
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    keep = x.copy()
    a, cache = forward(spec, params, x)
    b, none = forward(spec, params, x, keep_cache=False)
    assert a.tobytes() == b.tobytes() and none == [] and len(cache) == 7
    np.testing.assert_array_equal(x, keep)


def test_train_step_reduces_loss_on_a_fixed_batch():
    spec = custom_net(4, 6, (3, 16, 16), 5, 3, name="small")
    rng = np.random.default_rng(0)
    x, y = rng.random((8, 3, 16, 16)), rng.integers(0, 3, 8)
    params = init_params(spec, 0)
    first = train_step(spec, params, x, y, 0.1)
    params = first.params
    for _ in range(10):
        params = train_step(spec, params, x, y, 0.1).params
    assert train_step(spec, params, x, y, 0.1).loss < first.loss


def test_forward_rejects_wrong_image_shape():
    spec = preset("50:500")
    with pytest.raises(DimensionError):
        forward(spec, init_params(spec), np.zeros((1, 3, 28, 28)))


def test_evaluate_counts_correct_predictions():
    spec = custom_net(2, 2, (1, 16, 16), 5, 2, name="e")
    params = init_params(spec, 0)
    x = np.random.default_rng(1).random((10, 1, 16, 16))
    logits, _ = forward(spec, params, x)
    pred = logits.argmax(axis=1)
    loss, acc = evaluate(spec, params, x, pred, batch=3)
    assert acc == 1.0 and loss > 0


def test_two_epochs_on_synthetic_images_beat_chance_on_held_out_data():
    spec = preset("50:500")
    data = synthetic_cifar(700, seed=5)
    train_x, train_y = data.images[:600], data.labels[:600]
    result = master_train(spec, train_x, train_y, TrainConfig(batch=64, epochs=2, seed=5))
    initial, _ = evaluate(spec, init_params(spec, 5), train_x, train_y)
    final, _ = evaluate(spec, result.params, train_x, train_y)
    _, accuracy = evaluate(spec, result.params, data.images[600:], data.labels[600:])
    assert final < initial
    assert accuracy > 0.2

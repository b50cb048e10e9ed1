import numpy as np
import pytest

from margintrack import idx
from margintrack import network as N
from margintrack import tensor as T
from gradcheck import numeric_grad, rel_error


def small_dense(seed=0):
    arch = N.Architecture((6,), (N.dense(5), N.relu(), N.dense(4), N.relu(), N.dense(3)), num_classes=3)
    return N.init_model(arch, seed)


def small_cnn(seed=0):
    arch = N.Architecture((1, 6, 6), (N.conv(2, 3), N.relu(), N.conv(3, 3, "same"), N.relu(),
                                      N.maxpool(2), N.flatten(), N.dense(5), N.relu(), N.dense(4)),
                          num_classes=4)
    return N.init_model(arch, seed)


def test_dense_parameter_count():
    assert N.dense_mnist().num_params == 784 * 256 + 256 + 256 * 128 + 128 + 128 * 10 + 10 == 235_146


def test_cnn_architecture_shapes():
    arch = N.cnn_mnist()
    shapes = arch.param_shapes()
    assert shapes[0] == (32, 1, 3, 3) and shapes[2] == (64, 32, 3, 3)
    assert shapes[4] == (128, 64 * 12 * 12)


@pytest.mark.parametrize("layers, shape", [
    ((N.dense(10),), (1, 28, 28)),
    ((N.dense(5),), (784,)),
    ((N.conv(3, 3), N.flatten(), N.dense(10)), (784,)),
    ((N.Layer("softplus"), N.dense(10)), (784,)),
    ((), (784,)),
])
def test_bad_architectures(layers, shape):
    with pytest.raises(N.BadArchitecture):
        N.Architecture(shape, layers)


def test_init_deterministic_and_seed_dependent():
    arch = N.dense_mnist()
    a, b, c = N.init_model(arch, 0), N.init_model(arch, 0), N.init_model(arch, 1)
    assert a.epoch == 0
    np.testing.assert_array_equal(a.parameters, b.parameters)
    assert not np.array_equal(a.parameters, c.parameters)


def test_snapshot_is_immutable():
    m = small_dense()
    with pytest.raises(ValueError):
        m.parameters[0] = 1.0
    with pytest.raises(Exception):
        m.epoch = 3


def test_zero_final_layer_gives_uniform_prediction():
    m = small_dense()
    p = m.parameters.copy()
    n_last = 3 * 4 + 3
    p[-n_last:] = 0.0
    m0 = N.ModelSnapshot(m.architecture, p)
    pred = N.predict(m0, np.ones(6))
    np.testing.assert_allclose(pred.probs, np.full(3, 1 / 3))
    assert pred.decided_class == 0


def test_predict_shape_mismatch():
    with pytest.raises(T.ShapeMismatch):
        N.predict(small_dense(), np.ones(7))


def test_argmax_consistency():
    rng = np.random.default_rng(1)
    m = small_dense(3)
    for _ in range(50):
        pred = N.predict(m, rng.normal(size=6))
        assert pred.decided_class == int(np.argmax(pred.logits)) == int(np.argmax(pred.probs))
        assert int(np.argmax(T.softmax(pred.logits).data)) == pred.decided_class
        assert pred.probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_affine_gradients_are_weight_rows():
    rng = np.random.default_rng(2)
    w, b = rng.normal(size=(4, 7)), rng.normal(size=4)
    m = N.affine_model(w, b)
    for _ in range(3):
        x = rng.normal(size=7)
        scores, grads = N.class_scores_and_gradients(m, x, range(4))
        np.testing.assert_allclose(scores, w @ x + b, atol=1e-12)
        np.testing.assert_array_equal(grads, w)


def test_all_classes_shape_contract():
    m = N.init_model(N.dense_mnist(), 0)
    x = np.random.default_rng(0).uniform(size=(28, 28))
    scores, grads = N.class_scores_and_gradients(m, x, range(10))
    assert scores.shape == (10,)
    assert grads.shape == (10, 28, 28)


def test_class_out_of_range():
    with pytest.raises(N.ClassOutOfRange):
        N.class_scores_and_gradients(small_dense(), np.ones(6), [3])


@pytest.mark.parametrize("make, shape", [(small_dense, (6,)), (small_cnn, (1, 6, 6))])
@pytest.mark.parametrize("seed", range(3))
def test_class_gradients_match_finite_differences(make, shape, seed):
    m = make(seed)
    x = np.random.default_rng(seed).uniform(size=shape)
    _, grads = N.class_scores_and_gradients(m, x, range(m.num_classes))
    for k in range(m.num_classes):
        num = numeric_grad(lambda v: N.predict(m, v).logits[k], x)
        assert rel_error(grads[k], num) < 1e-4


def test_softmax_gradients_sum_to_zero():
    m = small_dense(4)
    x = T.Tensor(np.random.default_rng(4).normal(size=(1, 6)), requires_grad=True)
    p = T.softmax(N.forward(m.architecture, m.weights(), x))
    total = np.zeros((1, 6))
    for k in range(3):
        (g,) = T.grad(T.tsum(T.index(p, (slice(None), k))), [x], retain_graph=True)
        total += g
    np.testing.assert_allclose(total, 0.0, atol=1e-14)


def test_parameter_gradients_match_finite_differences():
    m = small_cnn(1)
    rng = np.random.default_rng(1)
    xb, labels = rng.uniform(size=(3, 1, 6, 6)), np.array([0, 3, 1])
    arch = m.architecture
    _, g = N.loss_and_param_grads(arch, m.parameters, xb, labels)
    pick = rng.choice(arch.num_params, 40, replace=False)

    def f(sub):
        p = m.parameters.copy()
        p[pick] = sub
        return N.loss_and_param_grads(arch, p, xb, labels)[0]

    assert rel_error(g[pick], numeric_grad(f, m.parameters[pick])) < 1e-4


def test_input_loss_gradient_is_per_image():
    m = small_dense(5)
    rng = np.random.default_rng(5)
    xb, labels = rng.normal(size=(2, 6)), np.array([1, 2])
    g = N.input_loss_grad(m.architecture, m.parameters, xb, labels)
    single = numeric_grad(lambda v: float(T.cross_entropy(m.logits(v[None])[0], 2).data), xb[1])
    assert rel_error(g[1], single) < 1e-4


def test_sgd_lr_zero_is_identity():
    p = np.arange(4.0)
    new, _ = N.sgd_step(p, np.ones(4), lr=0.0)
    np.testing.assert_array_equal(new, p)


def test_sgd_plain_step():
    p, g = np.arange(4.0), np.array([1.0, -2.0, 0.5, 0.0])
    new, _ = N.sgd_step(p, g, lr=1.0, momentum=0.0)
    np.testing.assert_array_equal(new, p - g)


def test_sgd_momentum_two_steps():
    p0, g = np.zeros(3), np.array([1.0, 2.0, -1.0])
    p1, v = N.sgd_step(p0, g, 1.0, None, 0.9)
    p2, _ = N.sgd_step(p1, g, 1.0, v, 0.9)
    np.testing.assert_allclose(p0 - p2, g + 1.9 * g)


def test_sgd_shape_mismatch():
    with pytest.raises(T.ShapeMismatch):
        N.sgd_step(np.zeros(3), np.zeros(4), 0.1)


def test_snapshot_json_roundtrip():
    m = N.ModelSnapshot(small_cnn(2).architecture, small_cnn(2).parameters, epoch=7)
    back = N.snapshot_from_json(N.snapshot_to_json(m))
    assert back.epoch == 7
    assert back.architecture == m.architecture
    assert back.parameters.tobytes() == m.parameters.tobytes()


def test_snapshot_json_rejects_tampering():
    import json
    d = json.loads(N.snapshot_to_json(small_dense()))
    d["sha256"] = "0" * 64
    with pytest.raises(ValueError):
        N.snapshot_from_json(json.dumps(d))


def test_loss_decreases_over_first_epoch(mnist_dir):
    train = idx.load_split(mnist_dir, "train").subset(range(3000))
    arch = N.dense_mnist()
    params = N.init_model(arch, 0).parameters.copy()
    velocity = None
    order = np.random.default_rng(0).permutation(len(train))
    losses = []
    for start in range(0, len(order), 64):
        b = order[start:start + 64]
        loss, g = N.loss_and_param_grads(arch, params, train.images[b], train.labels[b])
        params, velocity = N.sgd_step(params, g, 0.01, velocity, 0.9)
        losses.append(loss)
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])

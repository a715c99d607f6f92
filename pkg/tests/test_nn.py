import numpy as np
import pytest

from gradcheck import GRAD_CASES, case_error
from microunify.data import Dataset, synthetic_classify, synthetic_images
from microunify.nn import (Adam, Model, StaleCacheError, TrainConfig, adam_step, evaluate, fit, loss_and_grad,
                           parse_arch, psnr, sgd_step)
from microunify.tensor import ShapeError


@pytest.mark.parametrize("name,arch,shape,loss", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_gradients_match_finite_differences(name, arch, shape, loss):
    assert case_error(arch, shape, loss) <= 1e-4


def test_parse_arch_and_shapes():
    layers = parse_arch("conv(8,1,3,3,1,1) relu maxpool flatten fc(10,128)")
    assert [l.describe() for l in layers][0] == "conv(8,1,3,3,1,1)"
    m = Model(layers, (1, 8, 8))
    assert m.shapes[-1] == (10,)
    with pytest.raises(ShapeError, match="layer 1"):
        Model.from_arch("fc(4,5) fc(3,5)", (5,))
    with pytest.raises(ValueError):
        parse_arch("fc(1)")


def test_stale_cache_rejected():
    m = Model.from_arch("fc(2,3)", (3,))
    _, cache = m.forward(np.zeros((1, 3)))
    m.touch()
    with pytest.raises(StaleCacheError):
        m.backward(cache, np.zeros((1, 2)))


def test_losses():
    loss, g = loss_and_grad("softmax_cross_entropy", np.zeros((1, 2)), np.array([0]))
    assert loss == pytest.approx(np.log(2)) and g.tolist() == [[-0.5, 0.5]]
    loss, g = loss_and_grad("mse", np.array([[1.0, 3.0]]), np.array([[0.0, 1.0]]))
    assert loss == 2.5 and g.tolist() == [[1.0, 2.0]]


def test_sgd_step():
    w = np.array([1.0, -2.0], np.float32)
    out = sgd_step(w, np.array([0.5, 0.5]), lr=0.1, weight_decay=0.0)
    np.testing.assert_allclose(out, [0.95, -2.05], rtol=1e-6)
    with pytest.raises(FloatingPointError):
        sgd_step(w, np.array([np.nan, 0.0]), 0.1)


def test_adam_first_step_is_lr_times_sign():
    w, m, v = adam_step(np.zeros(3), np.array([2.0, -0.5, 1e-3]), 0.0, 0.0, 1, lr=0.01)
    np.testing.assert_allclose(w, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_psnr():
    assert psnr(np.zeros(4), np.zeros(4)) == float("inf")
    x = np.full(100, 0.1)
    assert psnr(x, np.zeros(100)) == pytest.approx(20.0)


def test_fit_deterministic_and_accurate():
    train, test = synthetic_classify(0, n=600).split(0.25)
    cfg = TrainConfig(epochs=20)
    a = Model.from_arch("fc(64,32) relu fc(3,64)", (32,), seed=1)
    b = Model.from_arch("fc(64,32) relu fc(3,64)", (32,), seed=1)
    fit(a, train, cfg)
    fit(b, train, cfg)
    assert all(np.array_equal(a.weights()[i], b.weights()[i]) for i in a.weights())
    assert evaluate(a, test) >= 0.95


def test_autoencoder_trains():
    train, test = synthetic_images(0, n=128).split(0.25)
    m = Model.from_arch("conv(4,1,3,3,1,1) relu conv(1,4,3,3,1,1)", (1, 8, 8), "mse", seed=0)
    before = evaluate(m, test)
    fit(m, train, TrainConfig(epochs=15, optimizer="adam", lr=0.003))
    assert evaluate(m, test) > before + 3


def test_evaluate_empty_rejected():
    m = Model.from_arch("fc(2,3)", (3,))
    with pytest.raises(ValueError):
        evaluate(m, Dataset(np.zeros((0, 3), np.float32), np.zeros(0, np.int64)))

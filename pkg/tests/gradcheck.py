"""Central finite-difference gradient oracle for float64 models."""

import numpy as np

GRAD_CASES = [
    ("fc", "fc(4,5)", (5,), "softmax_cross_entropy"),
    ("relu", "fc(6,5) relu fc(3,6)", (5,), "softmax_cross_entropy"),
    ("conv", "conv(3,2,3,3,1,1) flatten fc(2,48)", (2, 4, 4), "softmax_cross_entropy"),
    ("conv-stride", "conv(2,2,2,2,2,0) flatten fc(2,8)", (2, 4, 4), "softmax_cross_entropy"),
    ("maxpool", "conv(2,1,3,3,1,1) maxpool flatten fc(3,8)", (1, 4, 4), "softmax_cross_entropy"),
    ("mse", "conv(2,1,3,3,1,1) relu conv(1,2,3,3,1,1)", (1, 4, 4), "mse"),
]


def numeric_grads(model, x, y, eps=1e-6):
    out = {}
    for key, p in model.params().items():
        g = np.zeros(p.shape)
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            model.touch()
            lp, _ = model.loss_and_grads(x, y)
            flat[i] = old - eps
            model.touch()
            lm, _ = model.loss_and_grads(x, y)
            flat[i] = old
            model.touch()
            g.reshape(-1)[i] = (lp - lm) / (2 * eps)
        out[key] = g
    return out


def max_rel_error(model, x, y):
    _, analytic = model.loss_and_grads(x, y)
    numeric = numeric_grads(model, x, y)
    worst = 0.0
    for key, n in numeric.items():
        a = np.asarray(analytic[key], np.float64)
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, np.linalg.norm(a - n) / scale)
    return worst


def case_error(arch, shape, loss, seed=7):
    """Worst relative gradient error of a small float64 model on a random batch."""
    from microunify.nn import Model

    rng = np.random.default_rng(seed)
    model = Model.from_arch(arch, shape, loss, seed=3, dtype=np.float64)
    for layer in model.trainable_layers().values():
        layer.b[...] = rng.standard_normal(layer.b.shape) * 0.1
    x = rng.standard_normal((3, *shape))
    out = model.shapes[-1]
    y = rng.integers(0, out[0], 3) if loss != "mse" else rng.standard_normal((3, *out))
    return max_rel_error(model, x, y)

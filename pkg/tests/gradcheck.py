"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

H = 1e-5


def numeric_grad(f, x, h=H):
    """d f() / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """Largest elementwise |a - n| / (|a| + |n|), floored for near-zero entries."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_layer(layer, x, training=False, seed=0):
    """Compare a layer's backward pass with finite differences of a random projection of its output.

    Returns the worst relative error over the input and every parameter.
    Dropout-style layers get a freshly seeded generator on each forward so
    the mask stays fixed.
    """
    rng = np.random.default_rng(seed)
    out = layer.forward(x, training=training, rng=np.random.default_rng(seed + 1))
    w = rng.normal(size=out.shape)

    def loss():
        return float(np.sum(layer.forward(x, training=training, rng=np.random.default_rng(seed + 1)) * w))

    layer.forward(x, training=training, rng=np.random.default_rng(seed + 1))
    dx = layer.backward(w)
    grads = {k: g.copy() for k, g in layer.grads.items()}
    worst = rel_error(dx, numeric_grad(loss, x))
    for name, p in layer.params.items():
        worst = max(worst, rel_error(grads[name], numeric_grad(loss, p)))
    return worst


def check_model(model, x, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=model.forward(x).shape)

    def loss():
        return float(np.sum(model.forward(x) * w))

    model.forward(x)
    model.backward(w)
    worst = 0.0
    for _, p, g, _ in model.parameters():
        g = g.copy()
        worst = max(worst, rel_error(g, numeric_grad(loss, p)))
    return worst


def kink_margin(model, x):
    """Smallest distance of any ReLU pre-activation from 0 and of any positive max-pool winner from its runner-up.

    Finite differences are only meaningful where this margin is well above
    the perturbation size.
    """
    from trafficrnn.layers import Conv1D, Dense, MaxPool1D

    margin = np.inf
    h = np.asarray(x, dtype=float)
    for layer in model.layers:
        if isinstance(layer, (Conv1D, Dense)) and layer.activation == "relu":
            layer.forward(h)
            margin = min(margin, float(np.min(np.abs(layer._z))))
        if isinstance(layer, MaxPool1D):
            B, T, C = h.shape
            s = layer.pool_size
            win = np.sort(h[:, :T // s * s].reshape(B, T // s, s, C), axis=2)
            gap = win[:, :, -1] - win[:, :, -2]
            # ties among ReLU zeros are stable once the ReLU margin holds
            live = win[:, :, -1] > 0
            if live.any():
                margin = min(margin, float(np.min(gap[live])))
        h = layer.forward(h)
    return margin

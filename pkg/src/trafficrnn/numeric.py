"""Dense float64 primitives with paired derivatives.

Arrays are plain ``numpy.ndarray`` objects in float64, row-major. Every
activation has a derivative routine expressed in terms of the *output*
where that is cheaper (sigmoid, tanh), which is how the layers call them.
"""

import numpy as np

from trafficrnn.errors import DivergenceError, ShapeError

DTYPE = np.float64


def as_tensor(x):
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x):
    # tanh form never overflows, unlike 1/(1+exp(-x)) for large negative x
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def sigmoid_grad_from_output(y):
    return y * (1.0 - y)


def sigmoid_grad(x):
    return sigmoid_grad_from_output(sigmoid(x))


def tanh(x):
    return np.tanh(np.asarray(x, dtype=DTYPE))


def tanh_grad_from_output(y):
    return 1.0 - y * y


def tanh_grad(x):
    return tanh_grad_from_output(tanh(x))


def relu(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_grad(x):
    return (np.asarray(x) > 0).astype(DTYPE)


def linear(x):
    return np.asarray(x, dtype=DTYPE)


def linear_grad(x):
    return np.ones_like(x, dtype=DTYPE)


ACTIVATIONS = {
    "linear": (linear, linear_grad),
    "relu": (relu, relu_grad),
    "sigmoid": (sigmoid, sigmoid_grad),
    "tanh": (tanh, tanh_grad),
}


def activation(name):
    """Return ``(f, f_prime)`` for an activation name."""
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def check_finite(x, what="value"):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite {what} encountered")
    return x

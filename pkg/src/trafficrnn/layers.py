"""Layers with explicit forward and backward passes.

All layers work on a leading batch axis: sequences are ``(B, T, C)`` and
vectors are ``(B, n)``. Shapes passed to :meth:`Layer.build` exclude the
batch axis. ``backward`` must be called after the matching ``forward`` and
stores parameter gradients in ``layer.grads`` (overwriting, not adding).
"""

import enum
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from trafficrnn.errors import ShapeError
from trafficrnn.numeric import (
    DTYPE,
    activation as get_activation,
    sigmoid,
    sigmoid_grad_from_output,
    tanh_grad_from_output,
)


class CellKind(str, enum.Enum):
    LSTM = "lstm"
    GRU = "gru"


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Layer:
    """Base class. Subclasses fill ``params`` in :meth:`build`."""

    def __init__(self, name=None):
        self.name = name or type(self).__name__.lower()
        self.params = {}
        self.grads = {}
        # names of params that count as weights for L2 (biases excluded)
        self.weight_names = ()
        self.input_shape = None
        self.output_shape = None

    def build(self, input_shape, rng):
        self.input_shape = tuple(input_shape)
        self.output_shape = self._infer(self.input_shape)
        self._init_params(rng)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        return self.output_shape

    def _infer(self, shape):
        return shape

    def _init_params(self, rng):
        pass

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def param_count(self):
        return sum(int(p.size) for p in self.params.values())

    def _check_input(self, x):
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"{self.name}: expected input (batch, {', '.join(map(str, self.input_shape))}), "
                f"got {tuple(x.shape)}"
            )

    def config(self):
        return {"type": type(self).__name__}


class Dense(Layer):
    """Affine map plus activation on the last axis; time-distributed on 3-D input."""

    def __init__(self, units, activation="linear", name=None):
        super().__init__(name)
        self.units = int(units)
        self.activation = activation
        self._f, self._df = get_activation(activation)
        self.weight_names = ("W",)

    def _infer(self, shape):
        if len(shape) not in (1, 2):
            raise ShapeError(f"{self.name}: dense expects (n,) or (T, n) input, got {shape}")
        return shape[:-1] + (self.units,)

    def _init_params(self, rng):
        n = self.input_shape[-1]
        self.params = {
            "W": glorot_uniform(rng, (n, self.units), n, self.units),
            "b": np.zeros(self.units, dtype=DTYPE),
        }

    def forward(self, x, training=False, rng=None):
        self._check_input(x)
        self._x = x
        self._z = x @ self.params["W"] + self.params["b"]
        return self._f(self._z)

    def backward(self, dy):
        dz = dy * self._df(self._z)
        n = self.input_shape[-1]
        self.grads["W"] = self._x.reshape(-1, n).T @ dz.reshape(-1, self.units)
        self.grads["b"] = dz.reshape(-1, self.units).sum(axis=0)
        return dz @ self.params["W"].T

    def config(self):
        return {"type": "Dense", "units": self.units, "activation": self.activation}


class Conv1D(Layer):
    """Valid (no padding), stride-1 cross-correlation along the time axis."""

    def __init__(self, filters, kernel_size, activation="relu", name=None):
        super().__init__(name)
        self.filters = int(filters)
        self.kernel_size = int(kernel_size)
        self.activation = activation
        self._f, self._df = get_activation(activation)
        self.weight_names = ("W",)

    def _infer(self, shape):
        if len(shape) != 2:
            raise ShapeError(f"{self.name}: conv1d expects (T, C) input, got {shape}")
        T, _ = shape
        if T < self.kernel_size:
            raise ShapeError(f"{self.name}: window of {T} steps is shorter than kernel {self.kernel_size}")
        return (T - self.kernel_size + 1, self.filters)

    def _init_params(self, rng):
        k, C, F = self.kernel_size, self.input_shape[1], self.filters
        self.params = {
            "W": glorot_uniform(rng, (k, C, F), k * C, k * F),
            "b": np.zeros(F, dtype=DTYPE),
        }

    def forward(self, x, training=False, rng=None):
        if x.shape[1] < self.kernel_size:
            raise ShapeError(f"{self.name}: window of {x.shape[1]} steps is shorter than kernel {self.kernel_size}")
        self._check_input(x)
        # (B, T', C, k)
        self._win = sliding_window_view(x, self.kernel_size, axis=1)
        self._z = np.einsum("btck,kcf->btf", self._win, self.params["W"], optimize=True) + self.params["b"]
        return self._f(self._z)

    def backward(self, dy):
        dz = dy * self._df(self._z)
        W = self.params["W"]
        self.grads["W"] = np.einsum("btck,btf->kcf", self._win, dz, optimize=True)
        self.grads["b"] = dz.sum(axis=(0, 1))
        B, Tout, _ = dz.shape
        dx = np.zeros((B, Tout + self.kernel_size - 1, W.shape[1]), dtype=DTYPE)
        for j in range(self.kernel_size):
            dx[:, j:j + Tout, :] += dz @ W[j].T
        return dx

    def config(self):
        return {"type": "Conv1D", "filters": self.filters, "kernel_size": self.kernel_size,
                "activation": self.activation}


class MaxPool1D(Layer):
    """Non-overlapping max pooling; a trailing remainder shorter than the pool is dropped."""

    def __init__(self, pool_size, name=None):
        super().__init__(name)
        self.pool_size = int(pool_size)

    def _infer(self, shape):
        if len(shape) != 2:
            raise ShapeError(f"{self.name}: maxpool1d expects (T, C) input, got {shape}")
        if shape[0] < self.pool_size:
            raise ShapeError(f"{self.name}: window of {shape[0]} steps is shorter than pool {self.pool_size}")
        return (shape[0] // self.pool_size, shape[1])

    def forward(self, x, training=False, rng=None):
        B, T, C = x.shape
        s = self.pool_size
        if T < s:
            raise ShapeError(f"{self.name}: window of {T} steps is shorter than pool {s}")
        Tout = T // s
        xr = x[:, :Tout * s, :].reshape(B, Tout, s, C)
        # argmax picks the first maximum on ties
        self._arg = xr.argmax(axis=2)
        self._xshape = x.shape
        return np.take_along_axis(xr, self._arg[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(self, dy):
        B, T, C = self._xshape
        s = self.pool_size
        Tout = dy.shape[1]
        dxr = np.zeros((B, Tout, s, C), dtype=DTYPE)
        np.put_along_axis(dxr, self._arg[:, :, None, :], dy[:, :, None, :], axis=2)
        dx = np.zeros(self._xshape, dtype=DTYPE)
        dx[:, :Tout * s, :] = dxr.reshape(B, Tout * s, C)
        return dx

    def config(self):
        return {"type": "MaxPool1D", "pool_size": self.pool_size}


def _check_rate(rate):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    return float(rate)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) in training mode."""

    def __init__(self, rate, name=None):
        super().__init__(name)
        self.rate = _check_rate(rate)

    def _mask_shape(self, x):
        return x.shape

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError(f"{self.name}: training-mode dropout needs a random generator")
        keep = rng.random(self._mask_shape(x)) >= self.rate
        self._mask = keep / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask

    def config(self):
        return {"type": type(self).__name__, "rate": self.rate}


class SpatialDropout1D(Dropout):
    """Drops whole channels across every timestep of a ``(B, T, C)`` sequence."""

    def _mask_shape(self, x):
        return (x.shape[0], 1, x.shape[2])


class Flatten(Layer):
    def _infer(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, training=False, rng=None):
        self._xshape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._xshape)


class RepeatVector(Layer):
    def __init__(self, n, name=None):
        super().__init__(name)
        self.n = int(n)

    def _infer(self, shape):
        if len(shape) != 1:
            raise ShapeError(f"{self.name}: repeat expects a vector, got {shape}")
        return (self.n, shape[0])

    def forward(self, x, training=False, rng=None):
        return np.repeat(x[:, None, :], self.n, axis=1)

    def backward(self, dy):
        return dy.sum(axis=1)

    def config(self):
        return {"type": "RepeatVector", "n": self.n}


class Reshape(Layer):
    def __init__(self, target_shape, name=None):
        super().__init__(name)
        self.target_shape = tuple(int(d) for d in target_shape)

    def _infer(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.target_shape)):
            raise ShapeError(f"{self.name}: cannot reshape {shape} into {self.target_shape}")
        return self.target_shape

    def forward(self, x, training=False, rng=None):
        self._xshape = x.shape
        return x.reshape((x.shape[0],) + self.target_shape)

    def backward(self, dy):
        return dy.reshape(self._xshape)

    def config(self):
        return {"type": "Reshape", "target_shape": list(self.target_shape)}


# --- functional API ----------------------------------------------------------

def flatten(x):
    return np.asarray(x, dtype=DTYPE).reshape(-1)


def repeat_vector(v, n):
    return np.repeat(np.asarray(v, dtype=DTYPE)[None, :], n, axis=0)


def reshape(x, shape):
    x = np.asarray(x, dtype=DTYPE)
    if x.size != int(np.prod(shape)):
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) into {tuple(shape)}")
    return x.reshape(shape)


def dense_forward(x, W, b, activation_name="linear"):
    f, _ = get_activation(activation_name)
    W = np.asarray(W, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input last dim {x.shape[-1]} does not match weights {W.shape}")
    return f(x @ W + np.asarray(b, dtype=DTYPE))


def conv1d_forward(x, W, b, activation_name="linear"):
    """``x`` is ``(T, C)``, ``W`` is ``(k, C, F)``."""
    x = np.asarray(x, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    if x.shape[0] < W.shape[0]:
        raise ShapeError(f"conv1d: window of {x.shape[0]} steps is shorter than kernel {W.shape[0]}")
    layer = Conv1D(W.shape[2], W.shape[0], activation_name)
    layer.params = {"W": W, "b": np.asarray(b, dtype=DTYPE)}
    return layer.forward(x[None])[0]


def maxpool1d_forward(x, size):
    x = np.asarray(x, dtype=DTYPE)
    return MaxPool1D(size).forward(x[None])[0]


def dropout_forward(x, rate, training, rng=None, spatial=False):
    layer = SpatialDropout1D(rate) if spatial else Dropout(rate)
    x = np.asarray(x, dtype=DTYPE)
    if spatial:
        return layer.forward(x[None], training, rng)[0]
    return layer.forward(x, training, rng)


# --- recurrent cells ---------------------------------------------------------

def lstm_cell_step(x, h, c, W, b):
    """One LSTM step. ``W`` is ``(n+m, 4m)`` acting on ``[x; h]`` with gate order i, f, o, g."""
    m = h.shape[-1]
    a = np.concatenate([x, h], axis=-1) @ W + b
    i = sigmoid(a[..., :m])
    f = sigmoid(a[..., m:2 * m])
    o = sigmoid(a[..., 2 * m:3 * m])
    g = np.tanh(a[..., 3 * m:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def gru_cell_step(x, h, W_zr, b_zr, W_h, b_h):
    """One GRU step with the reset gate applied before the candidate matmul."""
    m = h.shape[-1]
    a = np.concatenate([x, h], axis=-1) @ W_zr + b_zr
    z = sigmoid(a[..., :m])
    r = sigmoid(a[..., m:])
    h_cand = np.tanh(np.concatenate([x, r * h], axis=-1) @ W_h + b_h)
    return z * h + (1.0 - z) * h_cand


def recurrent_param_count(kind, n, m):
    gates = 4 if CellKind(kind) is CellKind.LSTM else 3
    return gates * (m * (n + m) + m)


class Recurrent(Layer):
    """LSTM or GRU layer unrolled over the full window, zero initial state.

    Backward runs full backpropagation through time; there is no truncation.
    """

    def __init__(self, kind, units, return_sequences=False, name=None):
        super().__init__(name)
        self.kind = CellKind(kind)
        self.units = int(units)
        self.return_sequences = bool(return_sequences)

    def _infer(self, shape):
        if len(shape) != 2:
            raise ShapeError(f"{self.name}: recurrent layer expects (T, n) input, got {shape}")
        if shape[0] < 1:
            raise ShapeError(f"{self.name}: empty sequence")
        return (shape[0], self.units) if self.return_sequences else (self.units,)

    def _init_params(self, rng):
        n, m = self.input_shape[1], self.units
        if self.kind is CellKind.LSTM:
            self.params = {
                "W": glorot_uniform(rng, (n + m, 4 * m), n + m, 4 * m),
                "b": np.zeros(4 * m, dtype=DTYPE),
            }
            self.weight_names = ("W",)
        else:
            self.params = {
                "W_zr": glorot_uniform(rng, (n + m, 2 * m), n + m, 2 * m),
                "b_zr": np.zeros(2 * m, dtype=DTYPE),
                "W_h": glorot_uniform(rng, (n + m, m), n + m, m),
                "b_h": np.zeros(m, dtype=DTYPE),
            }
            self.weight_names = ("W_zr", "W_h")

    def forward(self, x, training=False, rng=None):
        if x.ndim != 3 or x.shape[1] == 0:
            raise ShapeError(f"{self.name}: need a non-empty (B, T, n) sequence, got {x.shape}")
        self._check_input(x)
        self._x = x
        if self.kind is CellKind.LSTM:
            hs = self._lstm_forward(x)
        else:
            hs = self._gru_forward(x)
        return hs if self.return_sequences else hs[:, -1, :]

    def backward(self, dy):
        B, T, _ = self._x.shape
        if self.return_sequences:
            dH = dy
        else:
            dH = np.zeros((B, T, self.units), dtype=DTYPE)
            dH[:, -1, :] = dy
        if self.kind is CellKind.LSTM:
            return self._lstm_backward(dH)
        return self._gru_backward(dH)

    # LSTM ------------------------------------------------------------------
    def _lstm_forward(self, x):
        B, T, n = x.shape
        m = self.units
        W, b = self.params["W"], self.params["b"]
        xw = x @ W[:n] + b
        Wh = W[n:]
        h = np.zeros((B, m), dtype=DTYPE)
        c = np.zeros((B, m), dtype=DTYPE)
        hs = np.empty((B, T, m), dtype=DTYPE)
        # per-step caches: h_prev, c_prev, gates (i, f, o, g), tanh(c)
        self._h_prev = np.empty((B, T, m), dtype=DTYPE)
        self._c_prev = np.empty((B, T, m), dtype=DTYPE)
        self._gates = np.empty((B, T, 4 * m), dtype=DTYPE)
        self._tc = np.empty((B, T, m), dtype=DTYPE)
        for t in range(T):
            a = xw[:, t] + h @ Wh
            gates = np.empty_like(a)
            gates[:, :3 * m] = sigmoid(a[:, :3 * m])
            gates[:, 3 * m:] = np.tanh(a[:, 3 * m:])
            i, f, o, g = gates[:, :m], gates[:, m:2 * m], gates[:, 2 * m:3 * m], gates[:, 3 * m:]
            self._h_prev[:, t] = h
            self._c_prev[:, t] = c
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            self._gates[:, t] = gates
            self._tc[:, t] = tc
            hs[:, t] = h
        return hs

    def _lstm_backward(self, dH):
        x = self._x
        B, T, n = x.shape
        m = self.units
        W = self.params["W"]
        Wh = W[n:]
        dA = np.empty((B, T, 4 * m), dtype=DTYPE)
        dWh = np.zeros_like(Wh)
        dh_next = np.zeros((B, m), dtype=DTYPE)
        dc_next = np.zeros((B, m), dtype=DTYPE)
        for t in reversed(range(T)):
            gates = self._gates[:, t]
            i, f, o, g = gates[:, :m], gates[:, m:2 * m], gates[:, 2 * m:3 * m], gates[:, 3 * m:]
            tc = self._tc[:, t]
            dh = dH[:, t] + dh_next
            dc = dc_next + dh * o * tanh_grad_from_output(tc)
            da = dA[:, t]
            da[:, :m] = dc * g * sigmoid_grad_from_output(i)
            da[:, m:2 * m] = dc * self._c_prev[:, t] * sigmoid_grad_from_output(f)
            da[:, 2 * m:3 * m] = dh * tc * sigmoid_grad_from_output(o)
            da[:, 3 * m:] = dc * i * tanh_grad_from_output(g)
            dc_next = dc * f
            dWh += self._h_prev[:, t].T @ da
            dh_next = da @ Wh.T
        dA2 = dA.reshape(B * T, 4 * m)
        self.grads["W"] = np.concatenate([x.reshape(B * T, n).T @ dA2, dWh], axis=0)
        self.grads["b"] = dA2.sum(axis=0)
        return dA @ W[:n].T

    # GRU -------------------------------------------------------------------
    def _gru_forward(self, x):
        B, T, n = x.shape
        m = self.units
        Wzr, bzr = self.params["W_zr"], self.params["b_zr"]
        Wc, bc = self.params["W_h"], self.params["b_h"]
        xzr = x @ Wzr[:n] + bzr
        xc = x @ Wc[:n] + bc
        Wzr_h, Wc_h = Wzr[n:], Wc[n:]
        h = np.zeros((B, m), dtype=DTYPE)
        hs = np.empty((B, T, m), dtype=DTYPE)
        self._h_prev = np.empty((B, T, m), dtype=DTYPE)
        self._zr = np.empty((B, T, 2 * m), dtype=DTYPE)
        self._hc = np.empty((B, T, m), dtype=DTYPE)
        for t in range(T):
            zr = sigmoid(xzr[:, t] + h @ Wzr_h)
            z, r = zr[:, :m], zr[:, m:]
            hc = np.tanh(xc[:, t] + (r * h) @ Wc_h)
            self._h_prev[:, t] = h
            self._zr[:, t] = zr
            self._hc[:, t] = hc
            h = z * h + (1.0 - z) * hc
            hs[:, t] = h
        return hs

    def _gru_backward(self, dH):
        x = self._x
        B, T, n = x.shape
        m = self.units
        Wzr, Wc = self.params["W_zr"], self.params["W_h"]
        Wzr_h, Wc_h = Wzr[n:], Wc[n:]
        dAzr = np.empty((B, T, 2 * m), dtype=DTYPE)
        dAc = np.empty((B, T, m), dtype=DTYPE)
        dWzr_h = np.zeros_like(Wzr_h)
        dWc_h = np.zeros_like(Wc_h)
        dh_next = np.zeros((B, m), dtype=DTYPE)
        for t in reversed(range(T)):
            zr = self._zr[:, t]
            z, r = zr[:, :m], zr[:, m:]
            hc = self._hc[:, t]
            h_prev = self._h_prev[:, t]
            dh = dH[:, t] + dh_next
            dac = dh * (1.0 - z) * tanh_grad_from_output(hc)
            dAc[:, t] = dac
            dWc_h += (r * h_prev).T @ dac
            drh = dac @ Wc_h.T
            dazr = dAzr[:, t]
            dazr[:, :m] = dh * (h_prev - hc) * sigmoid_grad_from_output(z)
            dazr[:, m:] = drh * h_prev * sigmoid_grad_from_output(r)
            dWzr_h += h_prev.T @ dazr
            dh_next = dh * z + drh * r + dazr @ Wzr_h.T
        x2 = x.reshape(B * T, n)
        dAzr2 = dAzr.reshape(B * T, 2 * m)
        dAc2 = dAc.reshape(B * T, m)
        self.grads["W_zr"] = np.concatenate([x2.T @ dAzr2, dWzr_h], axis=0)
        self.grads["b_zr"] = dAzr2.sum(axis=0)
        self.grads["W_h"] = np.concatenate([x2.T @ dAc2, dWc_h], axis=0)
        self.grads["b_h"] = dAc2.sum(axis=0)
        return dAzr @ Wzr[:n].T + dAc @ Wc[:n].T

    def config(self):
        return {"type": "Recurrent", "kind": self.kind.value, "units": self.units,
                "return_sequences": self.return_sequences}


def recurrent_forward(x, kind, params, return_sequences=False):
    """Unroll a cell over ``x`` of shape ``(T, n)`` using the given parameter dict."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"recurrent: need a non-empty (T, n) sequence, got {x.shape}")
    kind = CellKind(kind)
    units = params["b"].size // 4 if kind is CellKind.LSTM else params["b_h"].size
    layer = Recurrent(kind, units, return_sequences)
    layer.params = {k: np.asarray(v, dtype=DTYPE) for k, v in params.items()}
    return layer.forward(x[None])[0]


def param_count(obj):
    """Trainable element count of a layer or anything exposing ``layers``."""
    if hasattr(obj, "layers"):
        return sum(param_count(layer) for layer in obj.layers)
    return obj.param_count()

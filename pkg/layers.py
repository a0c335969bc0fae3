"""Layer primitives built on autodiff.Tensor, plus parameter bookkeeping for models.

Sequence layout follows the models: convolutions take channels x time,
dense and recurrent layers take time x features.
"""

from collections import OrderedDict
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from autodiff import Parameter, Tensor, _result, concat, matmul
from errors import ShapeError, StateError, UnknownCodeError


class ParamFactory:
    """Creates named parameters from one seeded generator."""

    def __init__(self, seed: int = 0, dtype: str = "float32"):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()

    def _add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise StateError(f"duplicate parameter name '{name}'")
        param = Parameter(name, data.astype(self.dtype))
        self.params[name] = param
        return param

    def xavier(self, name: str, shape, fan_in: int, fan_out: int, gain: float = 1.0) -> Parameter:
        bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
        return self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def normal(self, name: str, shape, std: float) -> Parameter:
        return self._add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Parameter:
        return self._add(name, np.zeros(shape))

    def constant(self, name: str, shape, value: float) -> Parameter:
        return self._add(name, np.full(shape, value))

    def array(self, name: str, data: np.ndarray) -> Parameter:
        return self._add(name, np.asarray(data))


class Model:
    """Named parameters plus non-trainable buffers, both saved in checkpoints."""

    def __init__(self, seed: int = 0, dtype: str = "float32"):
        self.factory = ParamFactory(seed, dtype)
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    @property
    def params(self) -> "OrderedDict[str, Parameter]":
        return self.factory.params

    @property
    def dtype(self):
        return self.factory.dtype

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_arrays(self) -> Dict[str, np.ndarray]:
        state = OrderedDict((name, p.data) for name, p in self.params.items())
        for name, value in self.buffers.items():
            state[f"buffer.{name}"] = value
        return state

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        expected = set(self.params) | {f"buffer.{n}" for n in self.buffers}
        missing = expected - set(arrays)
        if missing:
            raise StateError(f"checkpoint lacks entries: {sorted(missing)[:5]}")
        for name, param in self.params.items():
            value = arrays[name]
            if value.shape != param.shape:
                raise ShapeError(f"parameter '{name}' has shape {value.shape}, expected {param.shape}")
            param.data = value.astype(self.dtype)
        for name in self.buffers:
            self.buffers[name] = np.asarray(arrays[f"buffer.{name}"]).copy()

    def zero_grad(self):
        for param in self.params.values():
            param.grad = None


# ---------------------------------------------------------------------------
# Affine layers
# ---------------------------------------------------------------------------

def dense(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x[..., in] @ W[in, out] + b[out]."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense input width {x.shape[-1]} does not match weight {W.shape}")
    out = matmul(x, W)
    return out + b if b is not None else out


def pointwise(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution: W[out, in] @ x[in, T] (+ b[out] per channel)."""
    if W.shape[1] != x.shape[0]:
        raise ShapeError(f"1x1 conv expects {W.shape[1]} input channels, got {x.shape[0]}")
    out = matmul(W, x)
    return out + b.reshape(-1, 1) if b is not None else out


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def conv1d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    dilation: int = 1,
    causal: bool = True,
) -> Tensor:
    """Length-preserving dilated convolution, x[C_in, T] with kernel[C_out, C_in, K].

    Causal mode pads (K-1)*d zeros on the left, so tap K-1 reads the current sample.
    """
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    if x.ndim != 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1d input {x.shape} incompatible with kernel {kernel.shape}")
    c_in, steps = x.shape
    c_out, _, width = kernel.shape
    total = (width - 1) * dilation
    left = total if causal else total // 2
    padded = np.pad(x.data, ((0, 0), (left, total - left)))
    columns = np.stack(
        [padded[:, k * dilation : k * dilation + steps] for k in range(width)], axis=1
    ).reshape(c_in * width, steps)
    flat_kernel = kernel.data.reshape(c_out, c_in * width)
    out = flat_kernel @ columns
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        grad_kernel = (g @ columns.T).reshape(kernel.shape)
        grad_columns = (flat_kernel.T @ g).reshape(c_in, width, steps)
        grad_padded = np.zeros_like(padded)
        for k in range(width):
            grad_padded[:, k * dilation : k * dilation + steps] += grad_columns[:, k]
        grad_x = grad_padded[:, left : left + steps]
        if bias is None:
            return grad_x, grad_kernel
        return grad_x, grad_kernel, g.sum(axis=1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward, "conv1d")


def _scatter_taps(x: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    c_in, steps = x.shape
    _, c_out, width = kernel.shape
    full = np.zeros((c_out, (steps - 1) * stride + width), dtype=np.result_type(x, kernel))
    for k in range(width):
        full[:, k : k + (steps - 1) * stride + 1 : stride] += kernel[:, :, k].T @ x
    return full


def _gather_taps(y: np.ndarray, width: int, stride: int, steps: int) -> np.ndarray:
    """Per-tap views y[:, t*stride + k] for t < steps, zero beyond the end of y."""
    needed = (steps - 1) * stride + width
    if y.shape[1] < needed:
        y = np.pad(y, ((0, 0), (0, needed - y.shape[1])))
    return np.stack([y[:, k : k + (steps - 1) * stride + 1 : stride] for k in range(width)], axis=2)


def transposed_conv1d(x: Tensor, kernel: Tensor, stride: int, bias: Optional[Tensor] = None) -> Tensor:
    """Upsampling by `stride`: x[C_in, T], kernel[C_in, C_out, K] -> [C_out, T*stride]."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if x.ndim != 2 or kernel.ndim != 3 or kernel.shape[0] != x.shape[0]:
        raise ShapeError(f"transposed_conv1d input {x.shape} incompatible with kernel {kernel.shape}")
    steps = x.shape[1]
    width = kernel.shape[2]
    length = steps * stride
    full = _scatter_taps(x.data, kernel.data, stride)
    if full.shape[1] < length:
        full = np.pad(full, ((0, 0), (0, length - full.shape[1])))
    out = full[:, :length]
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        taps = _gather_taps(g, width, stride, steps)  # [C_out, T, K]
        grad_x = np.einsum("iok,otk->it", kernel.data, taps)
        grad_kernel = np.einsum("it,otk->iok", x.data, taps)
        if bias is None:
            return grad_x, grad_kernel
        return grad_x, grad_kernel, g.sum(axis=1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(np.ascontiguousarray(out), parents, backward, "transposed_conv1d")


def strided_conv1d(y: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """Adjoint of transposed_conv1d: y[C_out, T*stride] -> [C_in, T] with the same kernel."""
    width = kernel.shape[2]
    steps = y.shape[1] // stride
    taps = _gather_taps(y.data, width, stride, steps)
    out = np.einsum("iok,otk->it", kernel.data, taps)

    def backward(g):
        full = _scatter_taps(g, kernel.data, stride)
        length = y.shape[1]
        if full.shape[1] < length:
            full = np.pad(full, ((0, 0), (0, length - full.shape[1])))
        return full[:, :length], np.einsum("it,otk->iok", g, taps)

    return _result(out, (y, kernel), backward, "strided_conv1d")


# ---------------------------------------------------------------------------
# Recurrent layers
# ---------------------------------------------------------------------------

def lstm_sequence(
    x: Tensor,
    W_ih: Tensor,
    W_hh: Tensor,
    b: Tensor,
    reverse: bool = False,
) -> Tensor:
    """Single-direction LSTM over x[T, in]; gates ordered input, forget, cell, output.

    Runs as one graph node with its own backpropagation-through-time, zero initial state.
    """
    hidden = W_hh.shape[0]
    if x.ndim != 2 or W_ih.shape != (x.shape[1], 4 * hidden) or W_hh.shape != (hidden, 4 * hidden):
        raise ShapeError(
            f"lstm input {x.shape} incompatible with W_ih {W_ih.shape}, W_hh {W_hh.shape}"
        )
    if b.shape != (4 * hidden,):
        raise ShapeError(f"lstm bias must have shape ({4 * hidden},), got {b.shape}")
    steps = x.shape[0]
    xs = x.data[::-1] if reverse else x.data
    dtype = np.result_type(x.data, W_ih.data)
    projected = xs @ W_ih.data + b.data

    gates = np.zeros((steps, 4 * hidden), dtype=dtype)
    cells = np.zeros((steps + 1, hidden), dtype=dtype)
    states = np.zeros((steps + 1, hidden), dtype=dtype)
    for t in range(steps):
        z = projected[t] + states[t] @ W_hh.data
        i = expit(z[:hidden])
        f = expit(z[hidden : 2 * hidden])
        c_hat = np.tanh(z[2 * hidden : 3 * hidden])
        o = expit(z[3 * hidden :])
        gates[t] = np.concatenate([i, f, c_hat, o])
        cells[t + 1] = f * cells[t] + i * c_hat
        states[t + 1] = o * np.tanh(cells[t + 1])
    outputs = states[1:]

    def backward(g):
        g = g[::-1] if reverse else g
        d_pre = np.zeros((steps, 4 * hidden), dtype=dtype)
        dh_next = np.zeros(hidden, dtype=dtype)
        dc_next = np.zeros(hidden, dtype=dtype)
        for t in range(steps - 1, -1, -1):
            i = gates[t, :hidden]
            f = gates[t, hidden : 2 * hidden]
            c_hat = gates[t, 2 * hidden : 3 * hidden]
            o = gates[t, 3 * hidden :]
            tanh_c = np.tanh(cells[t + 1])
            dh = g[t] + dh_next
            dc = dh * o * (1.0 - tanh_c * tanh_c) + dc_next
            d_pre[t] = np.concatenate(
                [
                    dc * c_hat * i * (1.0 - i),
                    dc * cells[t] * f * (1.0 - f),
                    dc * i * (1.0 - c_hat * c_hat),
                    dh * tanh_c * o * (1.0 - o),
                ]
            )
            dc_next = dc * f
            dh_next = d_pre[t] @ W_hh.data.T
        grad_x = d_pre @ W_ih.data.T
        if reverse:
            grad_x = grad_x[::-1]
        return (
            np.ascontiguousarray(grad_x),
            xs.T @ d_pre,
            states[:-1].T @ d_pre,
            d_pre.sum(axis=0),
        )

    result = outputs[::-1] if reverse else outputs
    return _result(np.ascontiguousarray(result), (x, W_ih, W_hh, b), backward, "lstm")


def bilstm(x: Tensor, forward_params: Tuple[Tensor, Tensor, Tensor], backward_params: Tuple[Tensor, Tensor, Tensor]) -> Tensor:
    """Concatenate forward and backward LSTM outputs per frame: [T, 2*hidden]."""
    fwd = lstm_sequence(x, *forward_params)
    bwd = lstm_sequence(x, *backward_params, reverse=True)
    return concat([fwd, bwd], axis=1)


def add_lstm_params(factory: ParamFactory, prefix: str, in_dim: int, hidden: int, forget_bias: float = 1.0):
    W_ih = factory.xavier(f"{prefix}.W_ih", (in_dim, 4 * hidden), in_dim, 4 * hidden)
    W_hh = factory.xavier(f"{prefix}.W_hh", (hidden, 4 * hidden), hidden, 4 * hidden)
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = forget_bias
    b = factory.array(f"{prefix}.b", bias)
    return W_ih, W_hh, b


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

def embedding(code: int, table: Tensor) -> Tensor:
    """Row lookup; the gradient lands on the selected row only."""
    code = int(code)
    if not 0 <= code < table.shape[0]:
        raise UnknownCodeError(f"code {code} outside embedding table of {table.shape[0]} entries")

    def backward(g):
        grad = np.zeros_like(table.data)
        grad[code] = g
        return (grad,)

    return _result(table.data[code].copy(), (table,), backward, "embedding")


def embedding_lookup(codes, table: Tensor) -> Tensor:
    """Row lookup for a sequence of codes: [T] -> [T, D]."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= table.shape[0]):
        raise UnknownCodeError(f"codes outside embedding table of {table.shape[0]} entries")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, codes, g)
        return (grad,)

    return _result(table.data[codes], (table,), backward, "embedding_lookup")

# (c) 2024 Niels Provos
#
'''
Minimal Reverse-Mode Differentiation

A Tape records every primitive applied to Tensors together with a function that maps
output cotangents to input cotangents (the vector-Jacobian product). backward walks
the tape in reverse and accumulates gradients into every Tensor that requires them.

The op set is exactly what the predictor networks need: conv2d, linear, relu, tanh,
sigmoid, concat, flatten, add, scale, a fused LSTM cell and the horizon-weighted
velocity loss. All arithmetic is float64.
'''

import struct
from pathlib import Path

import numba as nb
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

import constants as C
from utils import canonical_json, load_json


class ShapeMismatch(ValueError):
    pass


class NotScalarLoss(ValueError):
    pass


class Tensor:
    __slots__ = ('data', 'grad', 'requires_grad', 'name')

    def __init__(self, data, requires_grad=True, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(name={self.name}, shape={self.shape})"


def _expect(condition, message):
    if not condition:
        raise ShapeMismatch(message)


@nb.jit(nopython=True, cache=True)
def _col2im(cols, height, width, stride):
    """Scatter-adds window gradients [C, Ho, Wo, kh, kw] back into [C, H, W]."""
    channels, out_h, out_w, kh, kw = cols.shape
    result = np.zeros((channels, height, width))
    for c in range(channels):
        for i in range(out_h):
            for j in range(out_w):
                for a in range(kh):
                    for b in range(kw):
                        result[c, i * stride + a, j * stride + b] += cols[c, i, j, a, b]
    return result


def conv_output_size(size, kernel, stride):
    return (size - kernel) // stride + 1


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def _record(self, outputs, inputs, vjp):
        self.entries.append((outputs, inputs, vjp))

    @staticmethod
    def constant(data):
        return Tensor(data, requires_grad=False)

    def conv2d(self, x, kernels, bias=None, stride=1):
        """
        Valid cross-correlation of a [C, H, W] input with [K, C, kh, kw] kernels.

        Returns:
            Tensor: [K, (H - kh) // stride + 1, (W - kw) // stride + 1]
        """
        _expect(x.data.ndim == 3, f"conv2d input must be [C, H, W], got {x.shape}")
        _expect(kernels.data.ndim == 4, f"conv2d kernels must be 4D, got {kernels.shape}")
        n_out, channels, kh, kw = kernels.shape
        _, height, width = x.shape
        _expect(channels == x.shape[0],
                f"conv2d kernels expect {channels} channels, input has {x.shape[0]}")
        _expect(kh <= height and kw <= width, "conv2d kernel larger than input")
        _expect(stride >= 1, "conv2d stride must be positive")
        if bias is not None:
            _expect(bias.shape == (n_out,), f"conv2d bias must be [{n_out}], got {bias.shape}")

        windows = sliding_window_view(x.data, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        out = np.einsum('chwij,kcij->khw', windows, kernels.data)
        if bias is not None:
            out = out + bias.data[:, None, None]
        result = Tensor(out)

        def vjp(grads):
            g = grads[0]
            g_kernels = np.einsum('khw,chwij->kcij', g, windows)
            cols = np.ascontiguousarray(np.einsum('khw,kcij->chwij', g, kernels.data))
            g_x = _col2im(cols, height, width, stride)
            g_bias = g.sum(axis=(1, 2)) if bias is not None else None
            return [g_x, g_kernels, g_bias]

        self._record((result,), (x, kernels, bias), vjp)
        return result

    def linear(self, x, weights, bias):
        """y = W x + b for x [n], W [m, n], b [m]."""
        _expect(x.data.ndim == 1, f"linear input must be a vector, got {x.shape}")
        _expect(weights.data.ndim == 2 and weights.shape[1] == x.shape[0],
                f"linear weights {weights.shape} do not match input {x.shape}")
        _expect(bias.shape == (weights.shape[0],),
                f"linear bias {bias.shape} does not match weights {weights.shape}")
        result = Tensor(weights.data @ x.data + bias.data)

        def vjp(grads):
            g = grads[0]
            return [weights.data.T @ g, np.outer(g, x.data), g]

        self._record((result,), (x, weights, bias), vjp)
        return result

    def relu(self, x):
        active = x.data > 0
        result = Tensor(np.where(active, x.data, 0.0))
        self._record((result,), (x,), lambda grads: [grads[0] * active])
        return result

    def tanh(self, x):
        y = np.tanh(x.data)
        result = Tensor(y)
        self._record((result,), (x,), lambda grads: [grads[0] * (1.0 - y * y)])
        return result

    def sigmoid(self, x):
        y = expit(x.data)
        result = Tensor(y)
        self._record((result,), (x,), lambda grads: [grads[0] * y * (1.0 - y)])
        return result

    def concat(self, tensors):
        for t in tensors:
            _expect(t.data.ndim == 1, f"concat takes vectors, got {t.shape}")
        sizes = [t.shape[0] for t in tensors]
        result = Tensor(np.concatenate([t.data for t in tensors]))
        splits = np.cumsum(sizes)[:-1]
        self._record((result,), tuple(tensors), lambda grads: np.split(grads[0], splits))
        return result

    def flatten(self, x):
        shape = x.shape
        result = Tensor(x.data.reshape(-1))
        self._record((result,), (x,), lambda grads: [grads[0].reshape(shape)])
        return result

    def reshape(self, x, shape):
        original = x.shape
        result = Tensor(x.data.reshape(shape))
        self._record((result,), (x,), lambda grads: [grads[0].reshape(original)])
        return result

    def add(self, a, b):
        _expect(a.shape == b.shape, f"add shapes differ: {a.shape} vs {b.shape}")
        result = Tensor(a.data + b.data)
        self._record((result,), (a, b), lambda grads: [grads[0], grads[0]])
        return result

    def add_n(self, tensors):
        shapes = {t.shape for t in tensors}
        _expect(len(shapes) == 1, f"add_n shapes differ: {shapes}")
        result = Tensor(np.sum([t.data for t in tensors], axis=0))
        self._record((result,), tuple(tensors), lambda grads: [grads[0]] * len(tensors))
        return result

    def scale(self, x, factor):
        result = Tensor(x.data * factor)
        self._record((result,), (x,), lambda grads: [grads[0] * factor])
        return result

    def lstm_cell(self, x, h_prev, c_prev, weights, bias):
        """
        One LSTM step with gates ordered (input, forget, candidate, output).

        Args:
            x (Tensor): Input [n].
            h_prev (Tensor): Hidden state [H].
            c_prev (Tensor): Cell state [H].
            weights (Tensor): [4H, n + H] acting on concat(x, h_prev).
            bias (Tensor): [4H].

        Returns:
            tuple: (h, c)
        """
        hidden = h_prev.shape[0]
        _expect(x.data.ndim == 1 and h_prev.data.ndim == 1, "lstm_cell takes vectors")
        _expect(c_prev.shape == (hidden,), f"cell state {c_prev.shape} != hidden {hidden}")
        _expect(weights.shape == (4 * hidden, x.shape[0] + hidden),
                f"lstm weights {weights.shape} do not match input {x.shape[0]} "
                f"and hidden {hidden}")
        _expect(bias.shape == (4 * hidden,), f"lstm bias {bias.shape} != {4 * hidden}")

        xh = np.concatenate([x.data, h_prev.data])
        z = weights.data @ xh + bias.data
        i = expit(z[:hidden])
        f = expit(z[hidden:2 * hidden])
        g = np.tanh(z[2 * hidden:3 * hidden])
        o = expit(z[3 * hidden:])
        c = f * c_prev.data + i * g
        tc = np.tanh(c)
        h = o * tc
        h_out, c_out = Tensor(h), Tensor(c)

        def vjp(grads):
            g_h, g_c = grads
            d_o = g_h * tc
            d_c = g_c + g_h * o * (1.0 - tc * tc)
            d_z = np.concatenate([
                d_c * g * i * (1.0 - i),
                d_c * c_prev.data * f * (1.0 - f),
                d_c * i * (1.0 - g * g),
                d_o * o * (1.0 - o),
            ])
            d_xh = weights.data.T @ d_z
            return [d_xh[:x.shape[0]], d_xh[x.shape[0]:], d_c * f, np.outer(d_z, xh), d_z]

        self._record((h_out, c_out), (x, h_prev, c_prev, weights, bias), vjp)
        return h_out, c_out

    def weighted_horizon_loss(self, pred, target, weights, mask=None):
        """
        Sum over k of w_k * m_k * |pred_k - target_k|^2 for [h, 2] velocity sequences.

        Masked steps contribute exactly zero to the loss and to the gradients.
        """
        target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        _expect(pred.data.ndim == 2 and pred.shape[0] >= 1, f"prediction must be [h, 2], got {pred.shape}")
        _expect(pred.shape == target.shape, f"prediction {pred.shape} != target {target.shape}")
        _expect(weights.shape == (pred.shape[0],), f"weights {weights.shape} do not match h")
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)
            _expect(mask.shape == weights.shape, f"mask {mask.shape} does not match h")
            weights = weights * mask
        diff = np.where(weights[:, None] > 0, pred.data - target, 0.0)
        result = Tensor(np.sum(weights * np.sum(diff * diff, axis=1)))

        def vjp(grads):
            return [grads[0] * 2.0 * weights[:, None] * diff]

        self._record((result,), (pred,), vjp)
        return result


def horizon_weights(h):
    """Penalty weights w_k = exp(-k^(1/4)) for k = 1 .. h."""
    k = np.arange(1, h + 1, dtype=np.float64)
    return np.exp(-k ** 0.25)


def backward(tape, loss):
    """
    Accumulates d loss / d tensor into the grad of every leaf tensor on the tape that
    requires a gradient.

    Raises:
        NotScalarLoss: If loss is not a 0-d tensor.
    """
    if loss.data.ndim != 0:
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(out) for outputs, _, _ in tape.entries for out in outputs}
    # cotangents of intermediate values; leaves accumulate into .grad
    cotangents = {id(loss): np.ones(())}
    for outputs, inputs, vjp in reversed(tape.entries):
        grads = [cotangents.pop(id(out), None) for out in outputs]
        if all(g is None for g in grads):
            continue
        grads = [np.zeros_like(out.data) if g is None else g for out, g in zip(outputs, grads)]
        for inp, g in zip(inputs, vjp(grads)):
            if inp is None or g is None:
                continue
            key = id(inp)
            if key in produced:
                cotangents[key] = cotangents[key] + g if key in cotangents else g
            elif inp.requires_grad:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g


class ParamSet:
    """Named learnable tensors with matching gradients and momentum buffers."""

    def __init__(self):
        self.tensors = {}
        self.velocity = {}

    def add(self, name, data):
        assert name not in self.tensors, f"Duplicate parameter {name}"
        tensor = Tensor(data, name=name)
        self.tensors[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self):
        return list(self.tensors)

    def num_parameters(self):
        return sum(t.data.size for t in self)

    def zero_grad(self):
        for tensor in self:
            tensor.grad = None

    def copy(self):
        other = ParamSet()
        for name, tensor in self.tensors.items():
            other.add(name, tensor.data.copy())
        return other

    def load_state(self, other):
        """Copies values from another ParamSet with identical names and shapes."""
        if set(other.names()) != set(self.names()):
            missing = sorted(set(self.names()) ^ set(other.names()))
            raise ShapeMismatch(f"Parameter names differ: {missing}")
        for name, tensor in self.tensors.items():
            source = other[name]
            if source.shape != tensor.shape:
                raise ShapeMismatch(f"Parameter {name}: {source.shape} != {tensor.shape}")
            tensor.data = source.data.copy()
        self.velocity = {}

    def to_bytes(self, descriptor=None):
        """
        Encodes the parameters as BLNN1: magic, u32 length and canonical JSON
        descriptor, u32 entry count, then per entry the u32-prefixed name, u32 ndim,
        u32 dims and little-endian f64 data.
        """
        header = canonical_json(descriptor or {})
        parts = [C.CHECKPOINT_MAGIC, struct.pack('<I', len(header)), header,
                 struct.pack('<I', len(self.tensors))]
        for name, tensor in self.tensors.items():
            encoded = name.encode('utf-8')
            parts.append(struct.pack('<I', len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack(f'<I{tensor.data.ndim}I', tensor.data.ndim, *tensor.shape))
            parts.append(np.ascontiguousarray(tensor.data, dtype='<f8').tobytes())
        return b''.join(parts)

    @staticmethod
    def from_bytes(data):
        """Decodes BLNN1 bytes into (ParamSet, descriptor dict)."""
        magic_size = len(C.CHECKPOINT_MAGIC)
        if data[:magic_size] != C.CHECKPOINT_MAGIC:
            raise ValueError(f"Not a BLNN1 checkpoint: {data[:magic_size]!r}")
        offset = magic_size
        (length,) = struct.unpack_from('<I', data, offset)
        offset += 4
        descriptor = load_json(data[offset:offset + length])
        offset += length
        (count,) = struct.unpack_from('<I', data, offset)
        offset += 4

        params = ParamSet()
        for _ in range(count):
            (name_length,) = struct.unpack_from('<I', data, offset)
            offset += 4
            name = data[offset:offset + name_length].decode('utf-8')
            offset += name_length
            (ndim,) = struct.unpack_from('<I', data, offset)
            offset += 4
            shape = struct.unpack_from(f'<{ndim}I', data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            values = np.frombuffer(data, dtype='<f8', count=size, offset=offset).reshape(shape)
            offset += 8 * size
            params.add(name, values.astype(np.float64))
        return params, descriptor

    def save(self, path, descriptor=None):
        Path(path).write_bytes(self.to_bytes(descriptor))

    @staticmethod
    def load(path):
        return ParamSet.from_bytes(Path(path).read_bytes())


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_conv(params, name, in_channels, out_channels, kernel, rng):
    fan_in = in_channels * kernel * kernel
    fan_out = out_channels * kernel * kernel
    params.add(f'{name}.W', glorot_uniform(rng, (out_channels, in_channels, kernel, kernel),
                                           fan_in, fan_out))
    params.add(f'{name}.b', np.zeros(out_channels))


def init_linear(params, name, n_in, n_out, rng):
    params.add(f'{name}.W', glorot_uniform(rng, (n_out, n_in), n_in, n_out))
    params.add(f'{name}.b', np.zeros(n_out))


def init_lstm(params, name, n_in, hidden, rng):
    params.add(f'{name}.W', glorot_uniform(rng, (4 * hidden, n_in + hidden),
                                           n_in + hidden, 4 * hidden))
    bias = np.zeros(4 * hidden)
    # forget gate
    bias[hidden:2 * hidden] = 1.0
    params.add(f'{name}.b', bias)


def sgd_step(params, lr, momentum):
    """
    Classical momentum update v <- momentum * v - lr * g, p <- p + v; zeroes gradients.
    """
    for name, tensor in params.tensors.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        velocity = momentum * _velocity_of(params, name, tensor) - lr * grad
        params.velocity[name] = velocity
        tensor.data = tensor.data + velocity
        tensor.grad = None
    return params


def _velocity_of(params, name, tensor):
    velocity = params.velocity.get(name)
    return np.zeros_like(tensor.data) if velocity is None else velocity


def gradient_check(fn, tensors, eps=1e-4, max_coords=None, rng=None):
    """
    Compares reverse-mode gradients against central finite differences.

    Coordinates where the eps and eps/2 estimates disagree straddle a kink (relu) and
    are skipped.

    Args:
        fn (callable): Builds a fresh graph and returns (tape, scalar loss).
        tensors (list): Tensors to differentiate with respect to.
        eps (float): Finite-difference step.
        max_coords (int, optional): Number of random coordinates checked per tensor.
        rng (numpy.random.Generator, optional): Chooses the coordinates.

    Returns:
        float: The maximum relative error over the checked coordinates.
    """
    for tensor in tensors:
        tensor.grad = None
    tape, loss = fn()
    backward(tape, loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def evaluate():
        return fn()[1].item()

    def central(tensor, index, step):
        original = tensor.data[index]
        tensor.data[index] = original + step
        plus = evaluate()
        tensor.data[index] = original - step
        minus = evaluate()
        tensor.data[index] = original
        return (plus - minus) / (2.0 * step)

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        tensor.data = np.array(tensor.data, dtype=np.float64)
        indices = list(np.ndindex(tensor.shape))
        if max_coords is not None and len(indices) > max_coords:
            chosen = rng.choice(len(indices), size=max_coords, replace=False)
            indices = [indices[i] for i in sorted(chosen)]
        for index in indices:
            numeric = central(tensor, index, eps)
            half = central(tensor, index, eps / 2.0)
            if abs(numeric - half) > 1e-6 + 1e-3 * abs(numeric):
                continue
            a = grad[index]
            error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-2)
            worst = max(worst, error)
        tensor.grad = None
    return worst

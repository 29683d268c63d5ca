"""Dense-tensor reverse-mode autodiff, sized for desk-scale training.

Tensors wrap numpy arrays (float32 storage by default; float64 everywhere
when the inputs are float64, which the gradient-check tests use). Reductions
accumulate in float64 before casting back. Each op records a closure
producing exact analytic gradients; ``Tensor.backward`` walks the graph in
reverse topological order. Graphs are confined to a single thread; any
parallelism lives inside numpy's dense kernels.
"""

import io
import json
import zipfile

import numpy as np
from scipy.special import erf

from vamae.errors import CheckpointError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference/eval paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate d(self)/d(leaf) into `.grad` of every reachable tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor detached from all parameters")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is None:
                continue
            for parent, g in zip(node._parents, node._backward_fn(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.data.dtype)
                parent.grad = g if parent.grad is None else parent.grad + g


class Parameter(Tensor):
    """Trainable tensor with a unique name used by checkpoints."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data**2), b.data.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _result(data, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def pow_const(a, exponent: float):
    a = as_tensor(a)
    data = a.data**exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(data, (a,), backward)


def square(a):
    return pow_const(a, 2.0)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _result(data, (a,), lambda g: (g / (2.0 * data),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _result(data, (a, b), backward)


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _result(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),)
    )


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tensors, backward)


def take_rows(a, indices):
    """Select rows along axis 0; gradient scatter-adds back."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range for shape {a.data.shape}")
    data = a.data[idx]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(data, (a,), backward)


def scatter_rows(src, indices, n_rows: int):
    """Place rows of `src` at `indices` in a zero (n_rows, ...) tensor."""
    src = as_tensor(src)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape[0] != src.data.shape[0]:
        raise ValueError(
            f"{src.data.shape[0]} rows cannot scatter to {idx.shape[0]} positions"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"scatter index out of range [0, {n_rows})")
    data = np.zeros((n_rows,) + src.data.shape[1:], dtype=src.data.dtype)
    data[idx] = src.data
    return _result(data, (src,), lambda g: (g[idx],))


def repeat_rows(a, count: int):
    """Broadcast a (1, ...) tensor to (count, ...); gradient sums rows."""
    a = as_tensor(a)
    if a.data.shape[0] != 1:
        raise ValueError(f"repeat_rows expects a leading axis of 1, got {a.data.shape}")
    data = np.repeat(a.data, count, axis=0)

    def backward(g):
        return (g.sum(axis=0, keepdims=True, dtype=np.float64).astype(a.data.dtype),)

    return _result(data, (a,), backward)


def tensor_sum(a, axis=None):
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        if axis is None:
            return (np.full(a.data.shape, g, dtype=a.data.dtype),)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.data.shape).astype(a.data.dtype),)

    return _result(data, (a,), backward)


def mean(a, axis=None):
    a = as_tensor(a)
    data = np.mean(a.data, axis=axis, dtype=np.float64).astype(a.data.dtype)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(a.data.shape, g / count, dtype=a.data.dtype),)
        g_exp = np.expand_dims(g / count, axis)
        return (np.broadcast_to(g_exp, a.data.shape).astype(a.data.dtype),)

    return _result(data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    data = np.maximum(a.data, 0)
    return _result(data, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a):
    a = as_tensor(a)
    data = _stable_sigmoid(a.data)
    return _result(data, (a,), lambda g: (g * data * (1.0 - data),))


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    """log(1 + exp(x)), computed stably; gradient is sigmoid(x)."""
    a = as_tensor(a)
    data = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))
    return _result(data, (a,), lambda g: (g * _stable_sigmoid(a.data),))


def gelu(a):
    """Exact Gaussian-error-function GELU."""
    a = as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = (x * phi).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.astype(np.float64) ** 2)
        return ((g * (phi + x * pdf)).astype(x.dtype),)

    return _result(data, (a,), backward)


def softmax(a):
    """Softmax over the last axis; rows sum to 1."""
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    data = y.astype(a.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        dot = (g64 * y).sum(axis=-1, keepdims=True)
        return ((y * (g64 - dot)).astype(a.data.dtype),)

    return _result(data, (a,), backward)


def layer_norm(a, gamma, beta, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    data = (xhat * gamma.data + beta.data).astype(a.data.dtype)
    d = a.data.shape[-1]

    def backward(g):
        g64 = g.astype(np.float64)
        ggam = g64 * gamma.data.astype(np.float64)
        ga = None
        if a.requires_grad:
            mean_g = ggam.mean(axis=-1, keepdims=True)
            mean_gx = (ggam * xhat).mean(axis=-1, keepdims=True)
            ga = (inv_std * (ggam - mean_g - xhat * mean_gx)).astype(a.data.dtype)
        ggamma = None
        if gamma.requires_grad:
            red = tuple(range(g64.ndim - 1))
            ggamma = (g64 * xhat).sum(axis=red).astype(gamma.data.dtype)
        gbeta = None
        if beta.requires_grad:
            red = tuple(range(g64.ndim - 1))
            gbeta = g64.sum(axis=red).astype(beta.data.dtype)
        return ga, ggamma, gbeta

    return _result(data, (a, gamma, beta), backward)


def im2col3x3(a):
    """3x3 sliding windows of a (C, H, W) tensor with zero padding 1.

    Returns (H*W, C*9) columns laid out so that `cols @ w` with
    w of shape (C*9, O) is a same-size 3x3 convolution.
    """
    a = as_tensor(a)
    c, h, w = a.data.shape
    padded = np.pad(a.data, ((0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    data = np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(h * w, c * 9)

    def backward(g):
        g6 = g.reshape(h, w, c, 3, 3)
        dpad = np.zeros((c, h + 2, w + 2), dtype=a.data.dtype)
        for ki in range(3):
            for kj in range(3):
                dpad[:, ki : ki + h, kj : kj + w] += g6[:, :, :, ki, kj].transpose(2, 0, 1)
        return (dpad[:, 1:-1, 1:-1],)

    return _result(data, (a,), backward)


def mse(pred, target):
    """Mean squared error over all elements."""
    diff = sub(pred, target)
    return mean(square(diff))


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy from logits; targets in [0, 1].

    Uses BCE(z, t) = t*softplus(-z) + (1-t)*softplus(z), stable for large |z|.
    """
    logits, targets = as_tensor(logits), as_tensor(targets)
    pos = mul(targets, softplus(neg(logits)))
    neg_term = mul(sub(1.0, targets), softplus(logits))
    return mean(add(pos, neg_term))


# checkpoint archive: manifest.json + one raw little-endian float32 blob per
# parameter, with frozen zip metadata so identical states give identical bytes

CHECKPOINT_FORMAT = "vamae-checkpoint-v1"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, params: dict, manifest: dict | None = None) -> None:
    """Write named arrays plus a JSON manifest to a deterministic archive."""
    arrays = {
        name: (p.data if isinstance(p, Tensor) else np.asarray(p))
        for name, p in params.items()
    }
    meta = {
        "format": CHECKPOINT_FORMAT,
        "params": {name: list(arr.shape) for name, arr in sorted(arrays.items())},
    }
    if manifest:
        meta.update(manifest)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name, arr in sorted(arrays.items()):
            blob = arr.astype("<f4").tobytes(order="C")
            info = zipfile.ZipInfo(f"params/{name}.bin", date_time=_ZIP_EPOCH)
            zf.writestr(info, blob)


def load_checkpoint(path):
    """Read a checkpoint archive; returns (params dict, manifest dict)."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("manifest.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"unrecognized checkpoint format in {path}")
            params = {}
            for name, shape in meta["params"].items():
                blob = zf.read(f"params/{name}.bin")
                arr = np.frombuffer(blob, dtype="<f4").reshape(shape)
                params[name] = arr.astype(np.float32)
    except (KeyError, zipfile.BadZipFile, json.JSONDecodeError) as err:
        raise CheckpointError(f"malformed checkpoint {path}: {err}") from err
    return params, meta

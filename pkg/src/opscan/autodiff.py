"""Reverse-mode automatic differentiation over numpy arrays.

Tensors record the op graph as they are built (parents plus a backward
closure); backward() walks it once in reverse topological order and
accumulates gradients additively, so fan-out just works. Gradients live in
the same dtype as the data: float64 for checking, float32 for training.

The LSTM sequence op is not here; it is a fused kernel (see kernels.py)
that model.py wraps into a graph node with a custom backward closure.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class GradError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "_backward", "_parents", "_backward_done")

    def __init__(self, data, parents: tuple = ()):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[], None] | None = None
        self._parents = parents
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named leaf tensor. layer_group indexes discriminative-lr groups."""

    __slots__ = ("name", "layer_group", "frozen")

    def __init__(self, data, name: str, layer_group: int = 0):
        super().__init__(data)
        self.name = name
        self.layer_group = layer_group
        self.frozen = False

    def __repr__(self):
        state = " frozen" if self.frozen else ""
        return f"Parameter({self.name}, shape={self.data.shape}{state})"


def backward(loss: Tensor) -> None:
    """Populate .grad on everything reachable from loss.

    loss must be scalar. A second call on the same node without re-running
    the forward pass is an error: the graph has already been consumed.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar, got shape {loss.data.shape}")
    if loss._backward_done:
        raise GradError("backward already ran on this graph; re-run the forward pass")
    loss._backward_done = True

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data @ b.data, (a, b))

    def bw():
        g = out.grad
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    out._backward = bw
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))

    def bw():
        a.accumulate(_unbroadcast(out.grad, a.data.shape))
        b.accumulate(_unbroadcast(out.grad, b.data.shape))

    out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))

    def bw():
        a.accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        b.accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    out._backward = bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s, (x,))

    def bw():
        x.accumulate(out.grad * s * (1.0 - s))

    out._backward = bw
    return out


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y, (x,))

    def bw():
        x.accumulate(out.grad * (1.0 - y * y))

    out._backward = bw
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0), (x,))

    def bw():
        x.accumulate(out.grad * (x.data > 0))

    out._backward = bw
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - logsum
    out = Tensor(y, (x,))

    def bw():
        g = out.grad
        x.accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    out._backward = bw
    return out


def embedding_lookup(matrix: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = matrix[ids[...]]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= matrix.data.shape[0]):
        raise GradError("embedding id out of range")
    out = Tensor(matrix.data[ids], (matrix,))

    def bw():
        g = np.zeros_like(matrix.data)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, matrix.data.shape[1]))
        matrix.accumulate(g)

    out._backward = bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def bw():
        offset = 0
        for t, size in zip(tensors, sizes):
            index = [slice(None)] * out.grad.ndim
            index[axis] = slice(offset, offset + size)
            t.accumulate(out.grad[tuple(index)])
            offset += size

    out._backward = bw
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), (x,))

    def bw():
        x.accumulate(out.grad.reshape(x.data.shape))

    out._backward = bw
    return out


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.T, (x,))

    def bw():
        x.accumulate(out.grad.T)

    out._backward = bw
    return out


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum()), (x,))

    def bw():
        x.accumulate(np.broadcast_to(out.grad, x.data.shape))

    out._backward = bw
    return out


def apply_mask(x: Tensor, mask: np.ndarray, scale: float = 1.0) -> Tensor:
    """Elementwise x * mask * scale with a constant 0/1 mask.

    This is the single dropout mechanism: inverted scaling happens via
    scale = 1 / (1 - p). mask must broadcast to x without enlarging it.
    """
    x = _as_tensor(x)
    factor = np.asarray(mask, dtype=x.data.dtype) * x.data.dtype.type(scale)
    data = x.data * factor
    if data.shape != x.data.shape:
        raise GradError("mask must not enlarge the input")
    out = Tensor(data, (x,))

    def bw():
        x.accumulate(out.grad * factor)

    out._backward = bw
    return out


def masked_mean_over_time(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of x (T, B, H) over valid timesteps per mask (T, B)."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=x.data.dtype)
    counts = mask.sum(axis=0)  # (B,)
    if np.any(counts == 0):
        raise GradError("a sequence has no valid timesteps")
    m3 = mask[:, :, None]
    out = Tensor((x.data * m3).sum(axis=0) / counts[:, None], (x,))

    def bw():
        x.accumulate(out.grad[None, :, :] * m3 / counts[None, :, None])

    out._backward = bw
    return out


def masked_max_over_time(x: Tensor, mask: np.ndarray) -> Tensor:
    """Max of x (T, B, H) over valid timesteps; ties route to the earliest."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if np.any(mask.sum(axis=0) == 0):
        raise GradError("a sequence has no valid timesteps")
    neg = np.where(mask[:, :, None], x.data, -np.inf)
    idx = neg.argmax(axis=0)  # (B, H)
    b_ix, h_ix = np.indices(idx.shape)
    out = Tensor(x.data[idx, b_ix, h_ix], (x,))

    def bw():
        g = np.zeros_like(x.data)
        np.add.at(g, (idx, b_ix, h_ix), out.grad)
        x.accumulate(g)

    out._backward = bw
    return out


def last_over_time(x: Tensor, lengths: np.ndarray) -> Tensor:
    """out[b] = x[lengths[b] - 1, b] for x of shape (T, B, H)."""
    x = _as_tensor(x)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.min() < 1 or lengths.max() > x.data.shape[0]:
        raise GradError("length out of range")
    b_ix = np.arange(x.data.shape[1])
    out = Tensor(x.data[lengths - 1, b_ix], (x,))

    def bw():
        g = np.zeros_like(x.data)
        g[lengths - 1, b_ix] += out.grad
        x.accumulate(g)

    out._backward = bw
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ignore_id.

    logits (N, K), targets (N,) integer class ids.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.data.shape
    if targets.shape != (n,):
        raise GradError(f"targets shape {targets.shape} does not match logits rows {n}")
    keep = np.ones(n, dtype=bool) if ignore_id is None else targets != ignore_id
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise GradError("every target is ignored")
    if targets[keep].min() < 0 or targets[keep].max() >= k:
        raise GradError("target class out of range")

    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsum
    picked = log_probs[np.arange(n), targets.clip(0, k - 1)]
    loss_val = -(picked * keep).sum() / n_keep
    out = Tensor(np.asarray(loss_val, dtype=logits.data.dtype), (logits,))

    def bw():
        g = np.exp(log_probs)
        g[np.arange(n), targets.clip(0, k - 1)] -= 1.0
        g *= keep[:, None]
        logits.accumulate(g * (out.grad / n_keep))

    out._backward = bw
    return out


# ---------------------------------------------------------------- grad check


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    max_coords: int = 10,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between autodiff and central finite differences.

    loss_fn must rebuild the graph deterministically on every call (fix any
    dropout masks). Large parameters are probed at max_coords sampled
    coordinates. Relative error: |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-12).
    """
    rng = rng or np.random.default_rng(0)
    zero_grads(params)
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise GradError("non-finite loss")
    backward(loss)
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        coords = range(n) if n <= max_coords else sorted(rng.choice(n, max_coords, replace=False))
        g_flat = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            f_minus = float(loss_fn().data)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(g_flat[i] - g_fd) / max(abs(g_flat[i]), abs(g_fd), 1e-12)
            worst = max(worst, err)
    return worst

"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model computation runs through these primitives. The recorded graph
is a Wengert list in disguise: each op links its output to its inputs with
a local adjoint closure, and backward() replays the records in reverse
topological order. One module-level RNG drives initialization and dropout
so a seed fixes the whole run bit-for-bit.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

_rng = np.random.default_rng(0)
_grad_enabled = True


def seed_rng(seed: int) -> None:
    global _rng
    _rng = np.random.default_rng(seed)


def get_rng() -> np.random.Generator:
    return _rng


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # reduce a broadcast gradient back to the operand's shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into .grad of every requires_grad tensor."""
    if output.data.shape != ():
        raise ValueError("backward() needs a scalar output")
    if not output.requires_grad:
        return
    # iterative topological order over the recorded graph
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    output.accumulate_grad(np.ones_like(output.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * c

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _make(data, (a,), bwd)


def add_const(a: Tensor, c) -> Tensor:
    """Add a plain array or scalar (attention masks, position encodings)."""
    data = a.data + c

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))

    return _make(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    # 2-d, or stacked 3-d with equal leading dims; d(ab) = g b^T, a^T g
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, (a, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return _make(data, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))

    return _make(data, (a,), bwd)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        offsets = np.cumsum([0] + sizes)
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(s, e)
                p.accumulate_grad(g[tuple(idx)])

    return _make(data, tuple(parts), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    data = a.data[start:stop].copy()

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a.accumulate_grad(full)

    return _make(data, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            # ds = (g - sum(g*s)) * s along the softmax axis
            dot = (g * data).sum(axis=-1, keepdims=True)
            a.accumulate_grad((g - dot) * data)

    return _make(data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * data * (1.0 - data))

    return _make(data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    return _make(data, (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad(_unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            beta.accumulate_grad(_unbroadcast(g, beta.data.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (dxhat - m1 - xhat * m2))

    return _make(data, (x, gamma, beta), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    data = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table.accumulate_grad(full)

    return _make(data, (table,), bwd)


def dropout(a: Tensor, p: float, train: bool) -> Tensor:
    """Bernoulli dropout; survivors scaled by 1/(1-p). Identity in eval mode."""
    if p < 0.0 or p >= 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not train or p == 0.0:
        return a
    keep = (_rng.random(a.data.shape) >= p) / (1.0 - p)
    data = a.data * keep

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * keep)

    return _make(data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def cross_entropy_label_smoothed(
    logits: Tensor, targets, smoothing: float, pad_id: int = 0
) -> Tensor:
    """Mean label-smoothed cross entropy over non-pad target positions.

    The smoothed target distribution puts 1 - smoothing on the gold token
    and spreads smoothing uniformly over the non-pad vocabulary.
    """
    t = np.asarray(targets, dtype=np.int64)
    if t.size == 0:
        raise ValueError("empty target sequence")
    n, vocab = logits.data.shape
    if t.shape != (n,):
        raise ValueError("targets must align with logit rows")
    keep = t != pad_id
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ValueError("all target positions are padding")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse

    # q: smoothed target distribution, zero mass on pad
    q = np.full((n, vocab), smoothing / (vocab - 1), dtype=np.float64)
    q[:, pad_id] = 0.0
    q[np.arange(n), t] += 1.0 - smoothing
    q[~keep] = 0.0

    loss = -(q * logp).sum() / n_kept
    data = np.asarray(loss)

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(logp)
            grad = (p * q.sum(axis=-1, keepdims=True) - q) * (float(g) / n_kept)
            grad[~keep] = 0.0
            logits.accumulate_grad(grad)

    return _make(data, (logits,), bwd)


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_check(fn, tensors: list[Tensor], epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    `fn` must rebuild the forward pass from scratch on every call and be
    deterministic (dropout disabled); determinism is probed by evaluating
    twice before differencing.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be > 0")
    with no_grad():
        v1 = fn().item()
        v2 = fn().item()
    if v1 != v2:
        raise ValueError("function under check is not deterministic")

    zero_grads(tensors)
    out = fn()
    backward(out)
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    max_rel = 0.0
    with no_grad():
        for t, g_ad in zip(tensors, grads):
            flat = t.data.reshape(-1)
            g_flat = g_ad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = fn().item()
                flat[i] = orig - epsilon
                f_minus = fn().item()
                flat[i] = orig
                g_fd = (f_plus - f_minus) / (2.0 * epsilon)
                denom = max(1e-8, abs(g_flat[i]) + abs(g_fd))
                max_rel = max(max_rel, abs(g_flat[i] - g_fd) / denom)
    return max_rel


# ---------------------------------------------------------------------------
# named-tensor serialization (checkpoints): name, shape, little-endian f64


def write_named_tensors(f, tensors: dict[str, Tensor]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", t.data.ndim))
        for dim in t.data.shape:
            f.write(struct.pack("<Q", dim))
        payload = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)


def read_named_tensors(f) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", f.read(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", f.read(4))
        name = f.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
        (blen,) = struct.unpack("<Q", f.read(8))
        arr = np.frombuffer(f.read(blen), dtype="<f8").reshape(shape).copy()
        out[name] = arr
    return out

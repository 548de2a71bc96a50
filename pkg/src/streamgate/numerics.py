"""Dense float64 tensors with tape-based reverse-mode gradients.

Every op records its parents and a closure that pushes the output gradient
back to them. ``Tensor.backward`` walks the tape in reverse topological
order. Inside ``no_grad()`` nothing is recorded, which is what the streaming
inference path uses.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class DimensionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    return _node(out, (x,), lambda g: (g * _sigmoid(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z * z * z)
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z * z)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner),)

    return _node(out, (x,), back)


# reductions / shape ---------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _node(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _node(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _node(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, x.shape),))


def take(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate on the way back."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    basic = isinstance(idx, (int, np.integer, slice)) or (
        isinstance(idx, tuple) and all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
                                       for i in idx))

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(np.asarray(x.data[idx]), (x,), back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _node(np.stack([t.data for t in xs], axis=axis), xs, back)


# linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T (+ bias) over the last axis; weight is stored (out, in).

    Leading axes are flattened so forward and backward are single GEMMs.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    w = weight.data
    out = (x2 @ w.T).reshape(lead + (w.shape[0],))
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w).reshape(x.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back)


# normalisation / probabilities ---------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _node(out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def back(g):
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    del n
    return _node(out, (x, gamma, beta), back)


def softmax_cross_entropy(logits: Tensor, target_index: int, class_weights=None) -> Tensor:
    """w[target] * -log softmax(logits)[target] for a rank-1 logit vector."""
    if logits.ndim != 1:
        raise DimensionError(f"softmax_cross_entropy expects rank-1 logits, got shape {logits.shape}")
    n = logits.shape[0]
    if not 0 <= target_index < n:
        raise IndexError(f"target index {target_index} out of range for {n} classes")
    w = 1.0
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=DTYPE)
        if cw.shape != (n,) or np.any(cw <= 0):
            raise ValueError("class weights must be positive, one per class")
        w = float(cw[target_index])
    lp = log_softmax(logits)
    return mul(take(lp, target_index), -w)


def cross_entropy(logits: Tensor, targets, class_weights=None) -> Tensor:
    """Mean over rows of w[y] * -log softmax(logits)[y]; logits shaped (N, C).

    The mean divides by N, not by the summed weights, so equal weights give a
    constant multiple of the unweighted loss.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if np.any(targets < 0) or np.any(targets >= c):
        raise IndexError("target index out of range")
    lp = log_softmax(logits, axis=-1)
    picked = take(lp, (np.arange(n), targets))
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=DTYPE)
        if np.any(cw <= 0):
            raise ValueError("class weights must be positive")
        picked = mul(picked, cw[targets])
    return mul(tsum(picked), -1.0 / n)


# parameters -----------------------------------------------------------------

@dataclass
class Parameter:
    name: str
    value: Tensor


def param(array) -> Tensor:
    return Tensor(np.array(array, dtype=DTYPE), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, size=shape))


def as_parameters(named: dict[str, Tensor]) -> list[Parameter]:
    return [Parameter(k, v) for k, v in named.items()]


def checksum(named: dict[str, Tensor] | Iterable[Parameter]) -> str:
    if isinstance(named, dict):
        items = sorted(named.items())
    else:
        items = sorted((p.name, p.value) for p in named)
    h = hashlib.sha256()
    for name, t in items:
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.value.grad = None


def sgd_step(params: Sequence[Parameter], learning_rate: float):
    for p in params:
        if p.value.grad is None:
            raise TrainingError(f"parameter {p.name!r} has no gradient")
    for p in params:
        p.value.data -= learning_rate * p.value.grad
        p.value.grad = None


class Adam:
    """Adam with bias correction; missing grads are treated as zero."""

    def __init__(self, params: Sequence[Parameter], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value.data) for p in self.params}

    def step(self, learning_rate: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.value.grad
            if g is None:
                continue
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value.data -= learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value.grad = None


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.value.grad ** 2).sum()) for p in params if p.value.grad is not None))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params:
            if p.value.grad is not None:
                p.value.grad *= scale
    return total


def cosine_lr(base_lr: float, step: int, total_steps: int, min_lr: float = 0.0) -> float:
    if total_steps <= 1:
        return base_lr
    frac = min(step, total_steps - 1) / (total_steps - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


# finite differences ---------------------------------------------------------

def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (mutated in place, restored)."""
    if not x.flags.c_contiguous:
        raise ValueError("numeric_grad needs a C-contiguous array to perturb in place")
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5,
               floor: float = 1e-6, samples: int | None = None, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    With ``samples`` set, only that many randomly chosen entries per tensor
    are perturbed, which keeps checks on whole models affordable.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(tensors, analytic):
            if samples is None or t.data.size <= samples:
                num = numeric_grad(lambda: loss_fn().item(), t.data, step)
                worst = max(worst, max_rel_error(a, num, floor))
                continue
            flat = t.data.reshape(-1)
            idx = rng.choice(flat.size, size=samples, replace=False)
            num = np.empty(samples)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = loss_fn().item()
                flat[i] = orig - step
                fm = loss_fn().item()
                flat[i] = orig
                num[j] = (fp - fm) / (2 * step)
            worst = max(worst, max_rel_error(a.reshape(-1)[idx], num, floor))
    return worst


# checkpoint file ------------------------------------------------------------

CKPT_MAGIC = b"SGT1"


def save_checkpoint(path: str | Path, named: dict[str, Tensor]):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        for name, t in named.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"bad magic at byte 0 in {path}")
    out: dict[str, np.ndarray] = {}
    pos = 4

    def need(n):
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated checkpoint at byte {pos}")

    while pos < len(buf):
        need(4)
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(nlen)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        need(4)
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(8 * rank)
        shape = struct.unpack_from(f"<{rank}q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        need(8 * count)
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(DTYPE).reshape(shape)
        pos += 8 * count
        if name in out:
            raise CheckpointFormatError(f"duplicate parameter {name!r} ending at byte {pos}")
        out[name] = arr
    return out


def assign(named: dict[str, Tensor], arrays: dict[str, np.ndarray], prefix: str = ""):
    """Copy loaded arrays into existing tensors, matching by (prefixed) name."""
    for name, t in named.items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointFormatError(f"checkpoint is missing parameter {key!r}")
        if arrays[key].shape != t.data.shape:
            raise DimensionError(f"parameter {key!r}: checkpoint shape {arrays[key].shape} != model {t.data.shape}")
        t.data = arrays[key].copy()

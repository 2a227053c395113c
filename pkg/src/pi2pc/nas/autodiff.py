"""Minimal reverse-mode autodiff over numpy float64 arrays.

Nodes record their parents and a backward closure; `backward()` walks the
graph in reverse topological order.  Just enough ops for convolutional
classifiers and softmax-gated operator mixtures: add/mul/matmul, conv2d,
pooling, relu, softmax, cross-entropy, reductions and reshapes.

NaN propagation is flagged eagerly (raise on first NaN output) so diverging
searches abort with a usable stack instead of optimizing garbage.
"""

from __future__ import annotations

import numpy as np

_nan_checks = True


def set_nan_checks(enabled: bool) -> None:
    global _nan_checks
    _nan_checks = enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        if _nan_checks and np.isnan(self.data).any():
            raise FloatingPointError(f"NaN produced by op {op!r}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op})"

    # -- graph walk ----------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                if _nan_checks and np.isnan(node.grad).any():
                    raise FloatingPointError(f"NaN gradient at op {node.op!r}")
                node._backward(node.grad)

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(
            self.data + other.data,
            parents=(self, other),
            op="add",
            backward=lambda g: (
                self._accum(_unbroadcast(g, self.data.shape)),
                other._accum(_unbroadcast(g, other.data.shape)),
            ),
        )
        return out

    __radd__ = __add__

    def __neg__(self):
        return Tensor(
            -self.data,
            parents=(self,),
            op="neg",
            backward=lambda g: self._accum(-g),
        )

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(
            self.data * other.data,
            parents=(self, other),
            op="mul",
            backward=lambda g: (
                self._accum(_unbroadcast(g * other.data, self.data.shape)),
                other._accum(_unbroadcast(g * self.data, other.data.shape)),
            ),
        )
        return out

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division not supported; multiply by reciprocal")
        return self * (1.0 / float(scalar))

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(
            self.data @ other.data,
            parents=(self, other),
            op="matmul",
            backward=lambda g: (
                self._accum(g @ other.data.T),
                other._accum(self.data.T @ g),
            ),
        )
        return out

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor(
            self.data.reshape(shape),
            parents=(self,),
            op="reshape",
            backward=lambda g: self._accum(g.reshape(old)),
        )

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accum(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor(out_data, parents=(self,), op="sum", backward=bwd)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- nonlinearities --------------------------------------------------------

    def relu(self):
        mask = self.data >= 0
        return Tensor(
            np.where(mask, self.data, 0.0),
            parents=(self,),
            op="relu",
            backward=lambda g: self._accum(g * mask),
        )

    def square(self):
        return Tensor(
            self.data * self.data,
            parents=(self,),
            op="square",
            backward=lambda g: self._accum(2.0 * g * self.data),
        )


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64).copy(), requires_grad=True)


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        t._accum(y * (g - dot))

    return Tensor(y, parents=(t,), op="softmax", backward=bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; labels are integer class ids (N,)."""
    labels = np.asarray(labels)
    n = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accum(g * p / n)

    return Tensor(loss, parents=(logits,), op="cross_entropy", backward=bwd)


def _cols_batch(x: np.ndarray, kernel, stride, padding) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph : ph + h, pw : pw + w] = x
    else:
        xp = x
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols, oh, ow


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """x: (N, C, H, W); w: (OC, C, kh, kw); b: (OC,) or None."""
    n, c, h, wid = x.data.shape
    oc, c2, kh, kw = w.data.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {c2}")
    cols, oh, ow = _cols_batch(x.data, (kh, kw), stride, padding)
    cols2 = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(oc, c * kh * kw).T
    out = (cols2 @ wmat).reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, oc, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gt = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
        if w.requires_grad:
            dw = (cols2.T @ gt).T.reshape(oc, c, kh, kw)
            w._accum(dw)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gt @ wmat.T).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            ph, pw = padding
            sh, sw = stride
            dxp = np.zeros((n, c, h + 2 * ph, wid + 2 * pw))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dcols[:, :, i, j]
            x._accum(dxp[:, :, ph : ph + h, pw : pw + wid] if (ph or pw) else dxp)

    return Tensor(out, parents=parents, op="conv2d", backward=bwd)


def max_pool2d(x: Tensor, kernel=(2, 2), stride=None) -> Tensor:
    kh, kw = kernel
    sh, sw = stride or kernel
    n, c, h, w = x.data.shape
    cols, oh, ow = _cols_batch(x.data, (kh, kw), (sh, sw), (0, 0))
    win = cols.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, oh, ow, kh * kw)
    amax = win.argmax(axis=-1)
    out = np.take_along_axis(win, amax[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        ni, ci, ohi, owi = np.indices((n, c, oh, ow))
        hi = ohi * sh + amax // kw
        wi = owi * sw + amax % kw
        np.add.at(dx, (ni, ci, hi, wi), g)
        x._accum(dx)

    return Tensor(out, parents=(x,), op="max_pool2d", backward=bwd)


def avg_pool2d(x: Tensor, kernel=(2, 2), stride=None) -> Tensor:
    kh, kw = kernel
    sh, sw = stride or kernel
    n, c, h, w = x.data.shape
    cols, oh, ow = _cols_batch(x.data, (kh, kw), (sh, sw), (0, 0))
    win = cols.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, oh, ow, kh * kw)
    out = win.mean(axis=-1)

    def bwd(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        gg = g / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += gg
        x._accum(dx)

    return Tensor(out, parents=(x,), op="avg_pool2d", backward=bwd)


def stack_weighted(parts: list[Tensor], weights: Tensor) -> Tensor:
    """sum_k weights[k] * parts[k]; the gated-operator mixture."""
    if len(parts) != weights.data.size:
        raise ValueError("weights length != number of candidates")
    data = sum(weights.data[k] * parts[k].data for k in range(len(parts)))

    def bwd(g):
        for k, p in enumerate(parts):
            if p.requires_grad:
                p._accum(weights.data[k] * g)
        if weights.requires_grad:
            wg = np.array([(g * p.data).sum() for p in parts])
            weights._accum(wg.reshape(weights.data.shape))

    return Tensor(data, parents=(*parts, weights), op="gated_mix", backward=bwd)

"""Dense float tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array (float32 by default; float64 is
supported for numerical checks). Differentiable operations are
implemented as :class:`Function` subclasses that record their inputs on
the output tensor; calling :meth:`Tensor.backward` on a scalar walks the
recorded graph once, in reverse topological order, accumulating
gradients into every tensor created with ``requires_grad=True``.

Only the operations needed by the two models live here; convolution,
recurrence and normalization are in :mod:`eegspell.ops`.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (used for eval passes)."""
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
    """A value node: numpy storage plus an optional backward record."""

    __slots__ = ("data", "grad", "requires_grad", "ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.ctx: Function | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autodiff -------------------------------------------------------
    def backward(self):
        """Backpropagate from this scalar through the recorded graph.

        Each recorded node is visited exactly once, in reverse
        topological order; intermediate records are released as soon as
        they have been consumed so large saved buffers (im2col blocks,
        gate caches) do not outlive the sweep.
        """
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar root")
        if self.ctx is None:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.ctx.parents:
                if parent.ctx is not None and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            grads = node.ctx.backward(node.grad)
            for parent, g in zip(node.ctx.parents, grads):
                if g is None:
                    continue
                if parent.requires_grad or parent.ctx is not None:
                    parent.grad = g if parent.grad is None else parent.grad + g
            node.ctx = None
            if not node.requires_grad:
                node.grad = None

    # -- operators ------------------------------------------------------
    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other):
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._wrap(other))

    def __rsub__(self, other):
        return Sub.apply(self._wrap(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other):
        return Mul.apply(self._wrap(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, self._wrap(other))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes)

    @property
    def T(self) -> "Tensor":
        return self.transpose(tuple(range(self.ndim))[::-1])

    def sum(self, axis=None) -> "Tensor":
        return Sum.apply(self, axis=axis)

    def mean(self, axis=None) -> "Tensor":
        return Mean.apply(self, axis=axis)


class Function:
    """One executed differentiable operation.

    Subclasses implement ``forward(*arrays, **kw) -> array`` and
    ``backward(grad) -> tuple`` aligned with the tensor inputs (None for
    inputs that need no gradient). Instances hold whatever the backward
    pass needs; they are dropped as soon as backward has run.
    """

    parents: tuple[Tensor, ...]

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        ctx = cls()
        ctx.parents = inputs
        out_data = ctx.forward(*[t.data for t in inputs], **kwargs)
        needs = _grad_enabled and any(t.requires_grad or t.ctx is not None for t in inputs)
        out = Tensor(out_data)
        if needs:
            out.requires_grad = True
            out.ctx = ctx
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.shapes
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        sa, sb = self.shapes
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Reshape(Function):
    def forward(self, a, shape):
        self.orig = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.orig),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.ascontiguousarray(a.transpose(axes))

    def backward(self, grad):
        inv = np.argsort(self.axes)
        return (np.ascontiguousarray(grad.transpose(inv)),)


class Sum(Function):
    def forward(self, a, axis):
        self.shape, self.axis = a.shape, axis
        return np.asarray(a.sum(axis=axis, dtype=a.dtype))

    def backward(self, grad):
        if self.axis is None:
            return (np.broadcast_to(grad, self.shape).astype(grad.dtype),)
        g = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(g, self.shape).astype(grad.dtype),)


class Mean(Function):
    def forward(self, a, axis):
        self.shape, self.axis = a.shape, axis
        self.count = a.size if axis is None else a.shape[axis]
        return np.asarray(a.mean(axis=axis, dtype=a.dtype))

    def backward(self, grad):
        g = grad / self.count
        if self.axis is None:
            return (np.broadcast_to(g, self.shape).astype(grad.dtype),)
        g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).astype(grad.dtype),)


class Softmax(Function):
    """Row-wise softmax over the last axis; shift-invariant by construction."""

    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        inner = (grad * s).sum(axis=-1, keepdims=True)
        return (s * (grad - inner),)


def softmax(logits: Tensor) -> Tensor:
    """Probability rows from logits; rows sum to 1 over the last axis."""
    return Softmax.apply(logits)


PROB_FLOOR = 1e-12


def _target_indices(target, n_classes: int) -> np.ndarray:
    """Accept class indices [B] or one-hot rows [B, K]; validate K."""
    t = np.asarray(target)
    if t.ndim == 2:
        if t.shape[1] != n_classes:
            raise ShapeError(
                f"one-hot targets have {t.shape[1]} classes, predictions have {n_classes}"
            )
        return t.argmax(axis=1)
    t = t.astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise ShapeError(f"target index out of range for {n_classes} classes")
    return t


class CrossEntropy(Function):
    """Mean over the batch of -log p(correct class).

    Operates on probability rows (already softmaxed); probabilities are
    clamped at 1e-12 before the log. The reduction runs in float64.
    """

    def forward(self, pred, target):
        if pred.ndim != 2:
            raise ShapeError(f"expected [batch, classes] probabilities, got {pred.shape}")
        idx = _target_indices(target, pred.shape[1])
        if idx.shape[0] != pred.shape[0]:
            raise ShapeError("batch size mismatch between predictions and targets")
        self.pred, self.idx = pred, idx
        picked = pred[np.arange(pred.shape[0]), idx]
        self.clamped = np.maximum(picked, PROB_FLOOR)
        loss = -np.log(self.clamped.astype(np.float64)).mean()
        return np.asarray(loss, dtype=pred.dtype)

    def backward(self, grad):
        b = self.pred.shape[0]
        dpred = np.zeros_like(self.pred)
        picked = self.pred[np.arange(b), self.idx]
        live = picked >= PROB_FLOOR
        dpred[np.arange(b), self.idx] = np.where(live, -1.0 / (self.clamped * b), 0.0)
        return grad * dpred, None


def cross_entropy(pred: Tensor, target) -> Tensor:
    return CrossEntropy.apply(pred, _as_target_tensor(target))


class HingeLoss(Function):
    """Multi-class margin loss: sum over wrong classes of
    max(0, 1 + s_wrong - s_target), averaged over the batch.
    Operates on raw scores, not probabilities."""

    def forward(self, scores, target):
        if scores.ndim != 2:
            raise ShapeError(f"expected [batch, classes] scores, got {scores.shape}")
        idx = _target_indices(target, scores.shape[1])
        if idx.shape[0] != scores.shape[0]:
            raise ShapeError("batch size mismatch between scores and targets")
        b = scores.shape[0]
        rows = np.arange(b)
        margins = 1.0 + scores - scores[rows, idx][:, None]
        margins[rows, idx] = 0.0
        self.active = margins > 0
        self.idx, self.batch = idx, b
        loss = np.maximum(margins, 0.0).sum(dtype=np.float64) / b
        return np.asarray(loss, dtype=scores.dtype)

    def backward(self, grad):
        b = self.batch
        rows = np.arange(b)
        ds = self.active.astype(grad.dtype) / b
        ds[rows, self.idx] -= self.active.sum(axis=1) / b
        return grad * ds, None


def hinge_loss(scores: Tensor, target) -> Tensor:
    return HingeLoss.apply(scores, _as_target_tensor(target))


def _as_target_tensor(target) -> Tensor:
    if isinstance(target, Tensor):
        return target
    return Tensor(np.asarray(target, dtype=np.float32))

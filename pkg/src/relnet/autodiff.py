"""Dense-array reverse-mode differentiation on an explicit tape.

Every value is a numpy array wrapped in :class:`Tensor`.  Operations are
applied through :meth:`Tape.apply` (or the thin named wrappers on the tape),
which records the primitive, its inputs and whatever intermediates the
backward rule needs.  :meth:`Tape.backward` walks the records in reverse and
returns gradients for the trainable leaves.

Only the primitives the memory network needs are provided.  Elementwise
primitives follow numpy broadcasting; backward rules sum gradients back down
to the input shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when input shapes do not conform for a primitive."""


class UnknownPrimitive(KeyError):
    pass


class Tensor:
    """A dense array that may participate in a tape."""

    __slots__ = ("value", "trainable", "name", "requires_grad", "__weakref__")

    def __init__(self, value, trainable: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value)
        if self.value.dtype.kind not in "fc":
            self.value = self.value.astype(np.float64)
        self.trainable = trainable
        self.requires_grad = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, trainable={self.trainable})"


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: shapes {list(shapes)} do not broadcast") from None


@dataclass
class Primitive:
    name: str
    forward: Callable[..., Any]
    backward: Callable[..., Sequence[Optional[np.ndarray]]]


PRIMITIVES: Dict[str, Primitive] = {}


def primitive(name: str):
    def register(cls):
        PRIMITIVES[name] = Primitive(name, cls.forward, cls.backward)
        return cls
    return register


# forward(*values, **attrs) -> (out, saved)
# backward(grad, values, out, saved, **attrs) -> tuple of input grads


@primitive("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _broadcast_shape("add", a.shape, b.shape)
        return a + b, None

    @staticmethod
    def backward(g, vals, out, saved):
        a, b = vals
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@primitive("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        _broadcast_shape("sub", a.shape, b.shape)
        return a - b, None

    @staticmethod
    def backward(g, vals, out, saved):
        a, b = vals
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@primitive("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        _broadcast_shape("mul", a.shape, b.shape)
        return a * b, None

    @staticmethod
    def backward(g, vals, out, saved):
        a, b = vals
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@primitive("matvec")
class _MatVec:
    """``W @ x`` applied to the last axis of ``x``: (m, n), (..., n) -> (..., m)."""

    @staticmethod
    def forward(w, x):
        if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[1]:
            raise ShapeError(f"matvec: matrix {w.shape} incompatible with {x.shape}")
        return x @ w.T, None

    @staticmethod
    def backward(g, vals, out, saved):
        w, x = vals
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.reshape(-1, w.shape[1])
        return g2.T @ x2, g @ w


@primitive("inner")
class _Inner:
    """Inner product over the last axis, broadcasting the leading axes."""

    @staticmethod
    def forward(a, b):
        if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-1]:
            raise ShapeError(f"inner: last axes differ for {a.shape} and {b.shape}")
        _broadcast_shape("inner", a.shape, b.shape)
        return (a * b).sum(axis=-1), None

    @staticmethod
    def backward(g, vals, out, saved):
        a, b = vals
        ge = g[..., None]
        return _unbroadcast(ge * b, a.shape), _unbroadcast(ge * a, b.shape)


@primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(x):
        # tanh form is overflow-free and gives exactly 0.5 at 0
        return 0.5 * (1.0 + np.tanh(0.5 * x)), None

    @staticmethod
    def backward(g, vals, out, saved):
        return (g * out * (1.0 - out),)


@primitive("prelu")
class _PReLU:
    """Rectifier with a learned negative-side slope (a one-element tensor)."""

    @staticmethod
    def forward(x, slope):
        if slope.size != 1:
            raise ShapeError(f"prelu: slope must hold one value, got shape {slope.shape}")
        pos = x > 0
        a = slope.reshape(())
        return np.where(pos, x, a * x), pos

    @staticmethod
    def backward(g, vals, out, saved):
        x, slope = vals
        pos = saved
        a = slope.reshape(())
        gx = np.where(pos, g, a * g)
        gs = np.where(pos, 0.0, g * x).sum()
        return gx, np.asarray(gs, dtype=slope.dtype).reshape(slope.shape)


@primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(x):
        if x.ndim < 1 or x.shape[-1] == 0:
            raise ShapeError(f"softmax: needs a non-empty last axis, got {x.shape}")
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True), None

    @staticmethod
    def backward(g, vals, out, saved):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


@primitive("l2_normalize")
class _L2Normalize:
    """Scale the last axis to unit length; lengths below ``eps`` divide by ``eps``."""

    @staticmethod
    def forward(x, eps=1e-8):
        if x.ndim < 1:
            raise ShapeError("l2_normalize: needs at least one axis")
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        denom = np.maximum(norm, eps)
        return x / denom, (norm, denom)

    @staticmethod
    def backward(g, vals, out, saved, eps=1e-8):
        norm, denom = saved
        live = norm > eps
        proj = np.where(live, (g * out).sum(axis=-1, keepdims=True), 0.0)
        return ((g - out * proj) / denom,)


@primitive("concat")
class _Concat:
    @staticmethod
    def forward(*xs, axis=-1):
        if not xs:
            raise ShapeError("concat: no inputs")
        ref = list(xs[0].shape)
        ax = axis % len(ref)
        for x in xs[1:]:
            s = list(x.shape)
            if len(s) != len(ref) or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
                raise ShapeError(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}")
        return np.concatenate(xs, axis=axis), None

    @staticmethod
    def backward(g, vals, out, saved, axis=-1):
        cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return tuple(np.split(g, cuts, axis=axis))


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(x, axis=None, keepdims=False):
        return x.sum(axis=axis, keepdims=keepdims), None

    @staticmethod
    def backward(g, vals, out, saved, axis=None, keepdims=False):
        (x,) = vals
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            g = np.expand_dims(g, tuple(a % x.ndim for a in axes))
        return (np.broadcast_to(g, x.shape).copy(),)


@primitive("gather")
class _Gather:
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""

    @staticmethod
    def forward(table, ids=None):
        ids = np.asarray(ids)
        if table.ndim != 2:
            raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
        if ids.dtype.kind not in "iu":
            raise ShapeError(f"gather: ids must be integers, got {ids.dtype}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(f"gather: id {int(ids.max())} out of range for table {table.shape}")
        return table[ids], None

    @staticmethod
    def backward(g, vals, out, saved, ids=None):
        (table,) = vals
        grad = np.zeros_like(table)
        np.add.at(grad, np.asarray(ids).reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)


@primitive("scale")
class _Scale:
    @staticmethod
    def forward(x, c=1.0):
        return x * c, None

    @staticmethod
    def backward(g, vals, out, saved, c=1.0):
        return (g * c,)


@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(x, shape=None):
        try:
            return x.reshape(shape), None
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    @staticmethod
    def backward(g, vals, out, saved, shape=None):
        return (g.reshape(vals[0].shape),)


@primitive("broadcast_to")
class _BroadcastTo:
    @staticmethod
    def forward(x, shape=None):
        try:
            return np.broadcast_to(x, shape), None
        except ValueError:
            raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}") from None

    @staticmethod
    def backward(g, vals, out, saved, shape=None):
        return (_unbroadcast(g, vals[0].shape),)


@primitive("cross_entropy")
class _CrossEntropy:
    """Per-row ``-log softmax(logits)[label]``."""

    @staticmethod
    def forward(logits, labels=None):
        labels = np.asarray(labels)
        if logits.ndim < 1 or labels.shape != logits.shape[:-1]:
            raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
            raise ShapeError("cross_entropy: label out of range")
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - logz
        picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
        return -picked, logp

    @staticmethod
    def backward(g, vals, out, saved, labels=None):
        labels = np.asarray(labels)
        grad = np.exp(saved)
        np.put_along_axis(
            grad, labels[..., None],
            np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * g[..., None],)


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    attrs: dict = field(default_factory=dict)
    saved: Any = None


class Tape:
    """Ordered log of primitive applications.

    A tape belongs to one worker.  Parameters wrapped as trainable leaves may
    be shared read-only between tapes.  ``record=False`` evaluates without
    keeping anything, for inference.
    """

    def __init__(self, record: bool = True):
        self.records: List[Record] = []
        self.record = record

    def __len__(self):
        return len(self.records)

    def apply(self, op: str, *inputs: Tensor, **attrs) -> Tensor:
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise UnknownPrimitive(f"unknown primitive {op!r}")
        for x in inputs:
            if not isinstance(x, Tensor):
                raise TypeError(f"{op}: inputs must be Tensors, got {type(x).__name__}")
        out_value, saved = prim.forward(*(x.value for x in inputs), **attrs)
        out = Tensor(out_value)
        out.requires_grad = any(x.requires_grad for x in inputs)
        if not self.record:
            return out
        if out.requires_grad:
            self.records.append(Record(op, inputs, out, attrs, saved))
        else:
            # constant subgraph: keep it for replay but never differentiate
            self.records.append(Record(op, inputs, out, attrs, None))
        return out

    # named wrappers, so model code reads like math
    def add(self, a, b): return self.apply("add", a, b)
    def sub(self, a, b): return self.apply("sub", a, b)
    def mul(self, a, b): return self.apply("mul", a, b)
    def matvec(self, w, x): return self.apply("matvec", w, x)
    def inner(self, a, b): return self.apply("inner", a, b)
    def sigmoid(self, x): return self.apply("sigmoid", x)
    def prelu(self, x, slope): return self.apply("prelu", x, slope)
    def softmax(self, x): return self.apply("softmax", x)
    def l2_normalize(self, x, eps=1e-8): return self.apply("l2_normalize", x, eps=eps)
    def concat(self, xs, axis=-1): return self.apply("concat", *xs, axis=axis)
    def sum(self, x, axis=None, keepdims=False): return self.apply("sum", x, axis=axis, keepdims=keepdims)
    def gather(self, table, ids): return self.apply("gather", table, ids=np.asarray(ids))
    def scale(self, x, c): return self.apply("scale", x, c=c)
    def reshape(self, x, shape): return self.apply("reshape", x, shape=tuple(shape))
    def broadcast_to(self, x, shape): return self.apply("broadcast_to", x, shape=tuple(shape))
    def cross_entropy(self, logits, labels): return self.apply("cross_entropy", logits, labels=np.asarray(labels))

    def backward(self, loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` for each trainable leaf.

        Leaves that ``loss`` does not depend on get zero gradients.  When
        ``leaves`` is omitted, every trainable leaf seen on the tape is
        returned.
        """
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if leaves is None:
            seen = {}
            for rec in self.records:
                for x in rec.inputs:
                    if x.trainable:
                        seen[id(x)] = x
            leaves = list(seen.values())
        else:
            leaves = list(leaves)

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None or not rec.output.requires_grad:
                continue
            vals = tuple(x.value for x in rec.inputs)
            in_grads = PRIMITIVES[rec.op].backward(g, vals, rec.output.value, rec.saved, **rec.attrs)
            for x, gx in zip(rec.inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
        return {leaf: grads.get(id(leaf), np.zeros_like(leaf.value)) for leaf in leaves}

    def replay(self) -> List[np.ndarray]:
        """Recompute every record from the current input values, in tape order."""
        fresh: Dict[int, np.ndarray] = {}
        outs = []
        for rec in self.records:
            vals = tuple(fresh.get(id(x), x.value) for x in rec.inputs)
            out, _ = PRIMITIVES[rec.op].forward(*vals, **rec.attrs)
            fresh[id(rec.output)] = out
            outs.append(out)
        return outs

    def replay_matches(self) -> bool:
        return all(np.array_equal(new, rec.output.value)
                   for new, rec in zip(self.replay(), self.records))


class NonFiniteValue(FloatingPointError):
    pass


def grad_check(f: Callable[[Tape, Dict[str, Tensor]], Tensor],
               params: Dict[str, np.ndarray],
               h: float = 1e-5,
               samples: int = 50,
               names: Optional[Sequence[str]] = None,
               seed: int = 0,
               by_group: bool = False):
    """Compare tape gradients against central finite differences.

    ``f(tape, leaves)`` builds a scalar loss from trainable leaves named as in
    ``params``.  Up to ``samples`` entries of each selected array are probed;
    the error for one entry is
    ``|analytic - numeric| / max(1, |analytic|)``.  Returns the worst error,
    or a ``{name: worst error}`` dict when ``by_group`` is set.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    names = list(base) if names is None else list(names)

    def evaluate(arrays, with_grad=False):
        tape = Tape()
        leaves = {k: Tensor(v, trainable=True, name=k) for k, v in arrays.items()}
        out = f(tape, leaves)
        value = float(np.asarray(out.value).reshape(-1)[0])
        if out.value.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got {out.shape}")
        if not np.isfinite(value):
            raise NonFiniteValue(f"grad_check: f returned {value}")
        if not with_grad:
            return value
        g = tape.backward(out, leaves.values())
        return value, {k: g[leaves[k]] for k in leaves}

    _, analytic = evaluate(base, with_grad=True)
    rng = np.random.default_rng(seed)
    errors = {}
    for name in names:
        arr = base[name]
        flat = arr.reshape(-1)
        count = min(samples, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        worst = 0.0
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            up = evaluate(base)
            flat[idx] = orig - h
            down = evaluate(base)
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            a = float(analytic[name].reshape(-1)[idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        errors[name] = worst
    if by_group:
        return errors
    return max(errors.values(), default=0.0)

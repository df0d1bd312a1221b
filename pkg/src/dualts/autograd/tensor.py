"""Dense tensors and a define-by-run gradient tape.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. With no active tape nothing is recorded,
which is how evaluation-mode passes avoid holding activations.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from ..errors import NonScalarLoss, ShapeMismatch, StaleTape

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float64
_tape_stack: list["Tape"] = []
_tape_ids = itertools.count()


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    """Set the floating dtype for new tensors. Accepts ``"f32"``/``"f64"`` or a numpy dtype."""
    global _default_dtype
    _default_dtype = _resolve_dtype(dtype)


def _resolve_dtype(dtype):
    if isinstance(dtype, str):
        try:
            return _PRECISIONS[dtype]
        except KeyError:
            raise ValueError(f"unknown precision {dtype!r}; expected one of {sorted(_PRECISIONS)}") from None
    return np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    global _default_dtype
    saved = _default_dtype
    _default_dtype = _resolve_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = saved


def active_tape():
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """An n-dimensional real array, optionally tracked for gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.tape_id = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating):
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of operations for one forward/backward step.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded. A tape supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[_Node] = []
        self._consumed = False
        self._cleared = False

    def __enter__(self):
        if self._consumed or self._cleared:
            raise StaleTape("cannot record on a consumed or cleared tape")
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, out, inputs, backward):
        out.requires_grad = True
        out.tape_id = (self.id, len(self.nodes))
        self.nodes.append(_Node(op, out, inputs, backward))

    def _is_leaf(self, t):
        return t.tape_id is None or t.tape_id[0] != self.id

    def clear(self):
        """Drop every node and its saved activations."""
        self.nodes = []
        self._cleared = True

    def backward(self, loss, inputs=None):
        """Propagate d(loss) back through every recorded node.

        Leaf tensors (``requires_grad`` and not produced on this tape) get
        their ``.grad`` accumulated. Returns a mapping tensor -> gradient for
        ``inputs`` if given, otherwise for every leaf reached.
        """
        if self._cleared:
            raise StaleTape("tape was cleared")
        if self._consumed:
            raise StaleTape("backward already ran on this tape")
        if loss.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        if loss.tape_id is None or loss.tape_id[0] != self.id:
            raise StaleTape("loss was not recorded on this tape")
        self._consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        seen = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            seen[id(node.out)] = (node.out, g)
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if self._is_leaf(inp):
                    seen[key] = (inp, None)

        leaves = {}
        for key, (tensor, g) in seen.items():
            if self._is_leaf(tensor):
                g = grads[key]
                tensor.grad = g if tensor.grad is None else tensor.grad + g
                leaves[tensor] = g
        if inputs is None:
            result = leaves
        else:
            result = {}
            for t in inputs:
                if t in leaves:
                    result[t] = leaves[t]
                elif id(t) in seen and seen[id(t)][1] is not None:
                    result[t] = seen[id(t)][1]
                else:
                    result[t] = np.zeros_like(t.data)
        self.nodes = []
        return result


def backward(loss, tape=None, inputs=None):
    """Run reverse-mode differentiation of ``loss`` on ``tape``.

    ``tape`` defaults to the tape that recorded ``loss``'s producing op if it
    is still active.
    """
    if tape is None:
        tape = active_tape()
        if tape is None:
            raise StaleTape("no tape given and none active")
    return tape.backward(loss, inputs)


def record(op, data, inputs, backward_fn):
    """Wrap ``data`` in a Tensor, registering a tape node when gradients are needed."""
    out = Tensor(np.asarray(data))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward_fn)
    return out


def check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: shapes {a.shape} and {b.shape} differ")

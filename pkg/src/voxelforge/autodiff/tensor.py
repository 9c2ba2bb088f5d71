"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array plus an optional gradient slot. Operations
(see :mod:`voxelforge.autodiff.ops`) build a tape of parent links and
vector-Jacobian closures; ``Tensor.backward`` replays the tape in reverse
topological order. Gradients accumulate only into nodes that require them,
so a frozen sub-network contributes to the forward value while its own
parameters receive no gradient.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import ShapeMismatch

_MAGIC = b"VFTN"


class Tensor:
    """Numpy-backed tensor participating in the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, rg={self.requires_grad}{tag})"

    # Arithmetic is intentionally minimal: enough to combine scalar losses.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.scale(self, other)

    __rmul__ = __mul__

    def backward(self, grad=None):
        """Run reverse-mode accumulation from this node.

        ``grad`` defaults to ones, which is only meaningful for scalar
        outputs (losses).
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen and (p._vjp is not None or p.requires_grad):
                    stack.append((p, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                if parent.requires_grad or parent._vjp is not None:
                    parent.grad = g if parent.grad is None else parent.grad + g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def make_node(data, parents, vjp):
    """Create an output tensor, attaching the tape edge only when needed."""
    needs = any(p.requires_grad or p._vjp is not None for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def check_finite(t: Tensor, where=""):
    """NaN/Inf anywhere is a contract violation; raise eagerly."""
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in tensor {where or t.name or ''}")
    return t


def dump_tensor(t: Tensor, path):
    """Write the debugging dump format: magic, u8 rank, u32 dims, f64 data."""
    arr = np.ascontiguousarray(t.data, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ShapeMismatch(f"bad tensor dump magic {magic!r}")
        (rank,) = struct.unpack("<B", fh.read(1))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
    return Tensor(data.copy())

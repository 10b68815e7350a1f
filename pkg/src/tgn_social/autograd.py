"""Dense rank-1/2 tensors with a reverse-mode tape.

Everything is float64 and at most two-dimensional; batching is done with
explicit loops and row-stacking in the callers. Operations are recorded on
a :class:`Trace` and differentiated by a single reverse sweep; gradients
accumulate (+=) into leaf tensors marked ``requires_grad``, so running
backward twice without zeroing doubles them exactly.

Numpy supplies the array storage and BLAS kernels; all forward/backward
rules live here.
"""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Trace",
    "ParamSet",
    "ShapeError",
    "TraceError",
    "grad_check",
]


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class TraceError(RuntimeError):
    """Trace misuse: foreign tensors, non-scalar loss, empty inputs."""


class Tensor:
    """A float64 matrix with an optional accumulated gradient.

    Scalars are stored as 1x1, vectors as 1xn rows. Leaf tensors are built
    directly (parameters with ``requires_grad=True``, constants without);
    non-leaf tensors come out of :class:`Trace` ops and carry a reference
    to the trace node that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "trace", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"rank-{arr.ndim} tensors unsupported (max 2), got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.trace: Trace | None = None
        self.node: int = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray, trace: "Trace", node: int) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.trace = trace
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def detached(self) -> "Tensor":
        """A leaf constant holding this tensor's current value."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "parents", "value", "payload", "needs_grad", "source")

    def __init__(self, op, parents, value, payload=None, needs_grad=False, source=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.payload = payload
        self.needs_grad = needs_grad
        self.source = source


class Trace:
    """Append-only tape of one forward computation.

    Parents always precede children, so the reverse node order is a valid
    topological order for backpropagation. A trace is single-threaded and
    never shared; tensors from another trace are rejected.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_index: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    # -- node plumbing ----------------------------------------------------

    def _lift(self, t: Tensor) -> int:
        """Node index for `t`, adding a leaf node on first use."""
        if t.trace is not None:
            if t.trace is not self:
                raise TraceError("tensor belongs to a different trace")
            return t.node
        idx = self._leaf_index.get(id(t))
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(
                _Node("leaf", (), t.data, needs_grad=t.requires_grad, source=t)
            )
            self._leaf_index[id(t)] = idx
        return idx

    def _emit(self, op, parent_ids, value, payload=None) -> Tensor:
        needs = any(self.nodes[p].needs_grad for p in parent_ids)
        idx = len(self.nodes)
        self.nodes.append(_Node(op, tuple(parent_ids), value, payload, needs))
        return Tensor._wrap(value, self, idx)

    def constant(self, data) -> Tensor:
        """A leaf constant bound to this trace."""
        t = data if isinstance(t := Tensor(data), Tensor) else t  # normalize shape
        self._lift(t)
        t.trace = self
        t.node = self._leaf_index[id(t)]
        return t

    # -- operations --------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
        ia, ib = self._lift(a), self._lift(b)
        return self._emit("matmul", (ia, ib), a.data @ b.data)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape and not _bias_broadcast(a.shape, b.shape):
            raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
        ia, ib = self._lift(a), self._lift(b)
        return self._emit("add", (ia, ib), a.data + b.data)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
        ia, ib = self._lift(a), self._lift(b)
        return self._emit("sub", (ia, ib), a.data - b.data)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
        ia, ib = self._lift(a), self._lift(b)
        return self._emit("mul", (ia, ib), a.data * b.data)

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._emit("scale", (self._lift(a),), a.data * c, payload=float(c))

    def sigmoid(self, a: Tensor) -> Tensor:
        x = a.data
        # stable in both tails
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return self._emit("sigmoid", (self._lift(a),), out)

    def tanh(self, a: Tensor) -> Tensor:
        return self._emit("tanh", (self._lift(a),), np.tanh(a.data))

    def cos(self, a: Tensor) -> Tensor:
        return self._emit("cos", (self._lift(a),), np.cos(a.data))

    def relu(self, a: Tensor) -> Tensor:
        return self._emit("relu", (self._lift(a),), np.maximum(a.data, 0.0))

    def transpose(self, a: Tensor) -> Tensor:
        return self._emit("transpose", (self._lift(a),), a.data.T.copy())

    def concat_rows(self, parts: Sequence[Tensor]) -> Tensor:
        if not parts:
            raise TraceError("concat_rows of an empty list")
        for p in parts:
            if p.shape[0] != 1:
                raise ShapeError(f"concat_rows needs single rows, got {p.shape}")
        ids = [self._lift(p) for p in parts]
        widths = [p.shape[1] for p in parts]
        value = np.concatenate([p.data for p in parts], axis=1)
        return self._emit("concat_rows", tuple(ids), value, payload=widths)

    def stack_rows(self, parts: Sequence[Tensor]) -> Tensor:
        if not parts:
            raise TraceError("stack_rows of an empty list")
        n = parts[0].shape[1]
        for p in parts:
            if p.shape != (1, n):
                raise ShapeError(f"stack_rows needs uniform 1x{n} rows, got {p.shape}")
        ids = [self._lift(p) for p in parts]
        value = np.concatenate([p.data for p in parts], axis=0)
        return self._emit("stack_rows", tuple(ids), value)

    def sum_rows(self, a: Tensor) -> Tensor:
        """Column sums: (m, n) -> (1, n)."""
        return self._emit("sum_rows", (self._lift(a),), a.data.sum(axis=0, keepdims=True))

    def sum_all(self, a: Tensor) -> Tensor:
        return self._emit("sum_all", (self._lift(a),), a.data.sum().reshape(1, 1))

    def softmax_rows(self, a: Tensor) -> Tensor:
        x = a.data
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=1, keepdims=True)
        return self._emit("softmax_rows", (self._lift(a),), out)

    def bce_with_logits(self, logits: Tensor, labels) -> Tensor:
        """Per-element binary cross entropy from logits, log-sum-exp stable.

        `labels` is a scalar or sequence of 0/1 values matching the logits
        column; output has the logits' shape.
        """
        if logits.shape[1] != 1:
            raise ShapeError(f"bce_with_logits expects an m x 1 column, got {logits.shape}")
        y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
        if y.shape[0] == 1 and logits.shape[0] > 1:
            y = np.repeat(y, logits.shape[0], axis=0)
        if y.shape != logits.shape:
            raise ShapeError(f"labels shape {y.shape} does not match logits {logits.shape}")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError("bce_with_logits labels must be 0 or 1")
        x = logits.data
        value = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
        return self._emit("bce", (self._lift(logits),), value, payload=y)

    # -- backward ----------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from `loss`, accumulating into reachable leaves."""
        if loss.trace is not self:
            raise TraceError("loss tensor does not belong to this trace")
        if loss.shape != (1, 1):
            raise TraceError(f"loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node] = np.ones((1, 1))
        for idx in range(loss.node, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or not node.needs_grad:
                continue
            if node.op == "leaf":
                src = node.source
                if src.grad is None:
                    src.grad = np.zeros_like(src.data)
                src.grad += g
                continue
            _BACKWARD[node.op](self.nodes, node, g, grads)

    def grads_into(self, grads, idx, value) -> None:  # pragma: no cover - helper hook
        raise NotImplementedError


def _bias_broadcast(sa, sb) -> bool:
    """Allow (m, n) + (1, n) in either order; no other broadcasting."""
    return (sa[1] == sb[1]) and (sa[0] == 1 or sb[0] == 1)


def _acc(nodes, grads, idx, g) -> None:
    if not nodes[idx].needs_grad:
        return
    buf = grads[idx]
    if buf is None:
        buf = np.zeros_like(nodes[idx].value)
        grads[idx] = buf
    if g.shape == buf.shape:
        buf += g
    else:
        # bias-row case: reduce over the broadcast rows
        buf += g.sum(axis=0, keepdims=True)


def _bw_matmul(nodes, node, g, grads):
    ia, ib = node.parents
    _acc(nodes, grads, ia, g @ nodes[ib].value.T)
    _acc(nodes, grads, ib, nodes[ia].value.T @ g)


def _bw_add(nodes, node, g, grads):
    ia, ib = node.parents
    _acc(nodes, grads, ia, g)
    _acc(nodes, grads, ib, g)


def _bw_sub(nodes, node, g, grads):
    ia, ib = node.parents
    _acc(nodes, grads, ia, g)
    _acc(nodes, grads, ib, -g)


def _bw_mul(nodes, node, g, grads):
    ia, ib = node.parents
    _acc(nodes, grads, ia, g * nodes[ib].value)
    _acc(nodes, grads, ib, g * nodes[ia].value)


def _bw_scale(nodes, node, g, grads):
    _acc(nodes, grads, node.parents[0], g * node.payload)


def _bw_sigmoid(nodes, node, g, grads):
    y = node.value
    _acc(nodes, grads, node.parents[0], g * y * (1.0 - y))


def _bw_tanh(nodes, node, g, grads):
    y = node.value
    _acc(nodes, grads, node.parents[0], g * (1.0 - y * y))


def _bw_cos(nodes, node, g, grads):
    x = nodes[node.parents[0]].value
    _acc(nodes, grads, node.parents[0], -np.sin(x) * g)


def _bw_relu(nodes, node, g, grads):
    x = nodes[node.parents[0]].value
    _acc(nodes, grads, node.parents[0], g * (x > 0.0))


def _bw_transpose(nodes, node, g, grads):
    _acc(nodes, grads, node.parents[0], g.T)


def _bw_concat_rows(nodes, node, g, grads):
    off = 0
    for pid, w in zip(node.parents, node.payload):
        _acc(nodes, grads, pid, g[:, off : off + w])
        off += w


def _bw_stack_rows(nodes, node, g, grads):
    for i, pid in enumerate(node.parents):
        _acc(nodes, grads, pid, g[i : i + 1, :])


def _bw_sum_rows(nodes, node, g, grads):
    parent = node.parents[0]
    _acc(nodes, grads, parent, np.broadcast_to(g, nodes[parent].value.shape))


def _bw_sum_all(nodes, node, g, grads):
    parent = node.parents[0]
    _acc(nodes, grads, parent, np.broadcast_to(g, nodes[parent].value.shape))


def _bw_softmax_rows(nodes, node, g, grads):
    y = node.value
    dot = (g * y).sum(axis=1, keepdims=True)
    _acc(nodes, grads, node.parents[0], (g - dot) * y)


def _bw_bce(nodes, node, g, grads):
    x = nodes[node.parents[0]].value
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    _acc(nodes, grads, node.parents[0], g * (sig - node.payload))


_BACKWARD: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "cos": _bw_cos,
    "relu": _bw_relu,
    "transpose": _bw_transpose,
    "concat_rows": _bw_concat_rows,
    "stack_rows": _bw_stack_rows,
    "sum_rows": _bw_sum_rows,
    "sum_all": _bw_sum_all,
    "softmax_rows": _bw_softmax_rows,
    "bce": _bw_bce,
}


class ParamSet:
    """Ordered map from dotted parameter names to leaf tensors.

    Iteration follows insertion order, which fixes the optimizer update
    order and the serialization layout.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._params.items():
            out.add(name, t.data)
        return out

    def num_entries(self) -> int:
        return sum(t.data.size for t in self._params.values())

    # JSON layout: {name: {"shape": [m, n], "data": [flat floats]}} in
    # insertion order. Python's repr-based float serialization is shortest
    # round-trip, so load(save(p)) is bit-exact for finite doubles.
    def to_json_dict(self) -> dict:
        return {
            name: {"shape": list(t.shape), "data": [float(v) for v in t.data.reshape(-1)]}
            for name, t in self._params.items()
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ParamSet":
        out = cls()
        for name, entry in doc.items():
            shape = tuple(entry["shape"])
            arr = np.array(entry["data"], dtype=np.float64).reshape(shape)
            out.add(name, arr)
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "ParamSet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def grad_check(loss_fn: Callable[[], Tensor], params: ParamSet, epsilon: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `loss_fn` must rebuild its trace on every call and be deterministic.
    Relative error per entry is |a - n| / max(1e-8, |a| + |n|).
    """
    if not (1e-6 <= epsilon <= 1e-4):
        raise ValueError(f"epsilon {epsilon} outside [1e-6, 1e-4]")
    params.zero_grad()
    loss = loss_fn()
    loss.trace.backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn().item()
            flat[i] = orig - epsilon
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(a_flat[i] - numeric) / max(1e-8, abs(a_flat[i]) + abs(numeric))
            if err > worst:
                worst = err
    return worst

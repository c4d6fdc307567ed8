"""Rank-4 tensors with reverse-mode automatic differentiation.

Every runtime value in this package is a dense ``(n, c, h, w)`` float64
array wrapped in a :class:`Tensor`.  The primitives in
:mod:`pmaa.functional` record one graph node per executed op; calling
:func:`backward` on a scalar output replays the recorded nodes in exact
reverse execution order and accumulates ``d loss / d leaf`` into each leaf
tensor's ``grad`` buffer.
"""

import itertools

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "finite_diff_check",
]

_seq_counter = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense rank-4 float64 array, optionally carrying a gradient buffer.

    Tensors are immutable once produced by a primitive; ``grad`` is written
    only by :func:`backward` and cleared by :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"tensors are rank-4 (n, c, h, w); got rank {arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: "Node | None" = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float64))

    @classmethod
    def full(cls, shape, value: float) -> "Tensor":
        return cls(np.full(shape, value, dtype=np.float64))

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


class Node:
    """One executed primitive: inputs, output, and its backward closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "seq")

    def __init__(self, op, inputs, output, backward_fn, seq):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.seq = seq


def record(op: str, inputs: tuple, output: Tensor, backward_fn) -> Tensor:
    """Attach a graph node to ``output`` if grad tracking is active.

    ``backward_fn`` maps the output gradient array to a tuple of input
    gradient arrays aligned with ``inputs`` (``None`` for skipped inputs).
    """
    if _grad_enabled and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        output.node = Node(op, inputs, output, backward_fn, next(_seq_counter))
    return output


class Graph:
    """The executed primitives reachable from one output, in execution order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, t: Tensor) -> "Graph":
        nodes = []
        seen = set()
        stack = [t.node] if t.node is not None else []
        while stack:
            nd = stack.pop()
            if id(nd) in seen:
                continue
            seen.add(id(nd))
            nodes.append(nd)
            for inp in nd.inputs:
                if inp.node is not None:
                    stack.append(inp.node)
        # Sequence numbers are assigned at execution time, so sorting restores
        # the exact order in which the reachable primitives ran.
        nodes.sort(key=lambda nd: nd.seq)
        return cls(nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate ``d loss / d leaf`` into every reachable leaf's ``grad``.

    ``loss`` must have shape ``(1, 1, 1, 1)``.  Calling twice without zeroing
    the grads sums the two gradients.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ValueError(f"backward expects a scalar (1,1,1,1) tensor, got shape {loss.shape}")

    def accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g

    if loss.node is None:
        if loss.requires_grad:
            accumulate_leaf(loss, np.ones((1, 1, 1, 1)))
        return

    if graph is None:
        graph = Graph.from_output(loss)

    grads: dict[Tensor, np.ndarray] = {loss: np.ones((1, 1, 1, 1))}
    for node in reversed(graph.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            # Output never contributed to the loss: zero gradient, skip.
            continue
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                accumulate_leaf(t, gi)
            elif t in grads:
                grads[t] = grads[t] + gi
            else:
                grads[t] = gi


def finite_diff_check(f, x: Tensor, eps: float = 1e-5, max_coords: int = 64, seed: int = 0) -> float:
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.  For
    tensors larger than ``max_coords`` a seeded random subset of coordinates
    is probed (at least 32).  Returns the maximum relative error
    ``|a - n| / max(|a|, |n|, 1e-8)`` over the probed coordinates.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    n = x.data.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        rng = np.random.default_rng(seed)
        coords = rng.choice(n, size=max(32, min(max_coords, n)), replace=False)

    max_rel = 0.0
    flat = x.data.reshape(-1)
    with no_grad():
        for idx in coords:
            bumped = flat.copy()
            bumped[idx] += eps
            f_plus = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[idx] -= 2.0 * eps
            f_minus = f(Tensor(bumped.reshape(x.shape))).item()
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic.reshape(-1)[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel

"""
Reverse-mode differentiation over the tensor kernels.

A `NodeGraph` is a tape: every op appends a `Node` holding its value and
whatever the backward pass needs. `backward` walks the tape once in reverse
and sums the contributions each node receives from its consumers.

    g = NodeGraph()
    x = g.leaf(batch)
    loss = g.softmax_cross_entropy(model(g, x), labels)
    grads = backward(g, loss)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from t3d import kernels as K
from t3d.common import ContractError, DimensionError

if TYPE_CHECKING:
    from t3d.models.layers import Parameter

SCALAR_SHAPE = (1, 1, 1, 1, 1)

VJP = Callable[["NodeGraph", "Node", np.ndarray], Sequence[Optional[np.ndarray]]]
_VJPS: Dict[str, VJP] = {}


def defvjp(op: str) -> Callable[[VJP], VJP]:
    def deco(fn: VJP) -> VJP:
        _VJPS[op] = fn
        return fn

    return deco


@dataclass(eq=False)
class Node:
    index: int
    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    ctx: Dict[str, Any] = field(default_factory=dict)
    name: str = ""

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


class NodeGraph:
    """Single-threaded tape; build, call `backward` once, read grads."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.grads: Dict[int, np.ndarray] = {}
        self._params: Dict[int, Node] = {}
        self._backward_done = False

    # -------------------------------------------------------------------
    # recording
    # -------------------------------------------------------------------
    def _record(self, op: str, inputs: Sequence[Node], value: np.ndarray, **ctx: Any) -> Node:
        for inp in inputs:
            if inp.index >= len(self.nodes) or self.nodes[inp.index] is not inp:
                raise ContractError(f"{op}: input node belongs to another graph", {"op": op})
        node = Node(
            index=len(self.nodes),
            op=op,
            inputs=tuple(i.index for i in inputs),
            value=value,
            requires_grad=any(i.requires_grad for i in inputs),
            ctx=ctx,
        )
        self.nodes.append(node)
        return node

    def leaf(self, value: np.ndarray, requires_grad: bool = False, name: str = "") -> Node:
        node = Node(index=len(self.nodes), op="leaf", inputs=(), value=value, requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        return node

    def param(self, p: "Parameter") -> Node:
        """One leaf per parameter per graph, so reuse accumulates into one gradient."""
        node = self._params.get(id(p))
        if node is None:
            node = self.leaf(p.data, requires_grad=p.requires_grad, name=p.name)
            self._params[id(p)] = node
        return node

    def grad(self, node: Node) -> np.ndarray:
        g = self.grads.get(node.index)
        return g if g is not None else np.zeros_like(node.value)

    def grad_of(self, p: "Parameter") -> np.ndarray:
        node = self._params.get(id(p))
        if node is None:
            return np.zeros_like(p.data)
        return self.grad(node)

    def activation_pattern(self) -> bytes:
        """ReLU sign masks and max-pool winners; changes when an evaluation crosses a kink."""
        parts: List[bytes] = []
        for node in self.nodes:
            if node.op == "relu":
                parts.append(np.packbits(self.nodes[node.inputs[0]].value > 0).tobytes())
            elif node.op == "pool3d" and node.ctx["argmax"] is not None:
                parts.append(node.ctx["argmax"].astype(np.int64).tobytes())
        return b"".join(parts)

    # -------------------------------------------------------------------
    # ops
    # -------------------------------------------------------------------
    def conv3d(self, x: Node, w: Node, b: Optional[Node] = None, stride: Any = 1, padding: Any = 0) -> Node:
        y, cols = K.conv3d_forward(x.value, w.value, None if b is None else b.value, stride, padding)
        inputs = [x, w] if b is None else [x, w, b]
        return self._record("conv3d", inputs, y, cols=cols, stride=stride, padding=padding)

    def pool3d(self, x: Node, mode: str, kernel: Any, stride: Any, padding: Any = 0) -> Node:
        y, arg = K.pool3d_forward(x.value, mode, kernel, stride, padding)
        return self._record("pool3d", [x], y, mode=mode, kernel=kernel, stride=stride, padding=padding, argmax=arg)

    def batchnorm3d(
        self,
        x: Node,
        gamma: Node,
        beta: Node,
        stats: Optional[K.RunningStats],
        training: bool,
        momentum: float = K.BN_MOMENTUM,
        eps: float = K.BN_EPS,
    ) -> Node:
        y, cache = K.batchnorm3d_forward(x.value, gamma.value, beta.value, stats, training, momentum, eps)
        return self._record("batchnorm3d", [x, gamma, beta], y, cache=cache)

    def relu(self, x: Node) -> Node:
        return self._record("relu", [x], K.relu(x.value))

    def concat(self, xs: Sequence[Node]) -> Node:
        y = K.concat_channels([x.value for x in xs])
        return self._record("concat", list(xs), y, sizes=[x.value.shape[1] for x in xs])

    def concat_features(self, xs: Sequence[Node]) -> Node:
        """Concatenate (n, d_i) feature rows; shares the channel-concat backward."""
        rows = {x.shape[0] for x in xs}
        if any(x.value.ndim != 2 for x in xs) or len(rows) != 1:
            raise DimensionError(f"feature concat needs (n, d) inputs, got {[x.shape for x in xs]}", axis="batch")
        y = np.concatenate([x.value for x in xs], axis=1)
        return self._record("concat", list(xs), y, sizes=[x.shape[1] for x in xs])

    def global_avg_pool(self, x: Node) -> Node:
        return self._record("global_avg_pool", [x], K.global_avg_pool(x.value))

    def flatten(self, x: Node) -> Node:
        return self._record("flatten", [x], x.value.reshape(x.value.shape[0], -1))

    def linear(self, x: Node, w: Node, b: Optional[Node] = None) -> Node:
        y = K.linear(x.value, w.value, None if b is None else b.value)
        return self._record("linear", [x, w] if b is None else [x, w, b], y)

    def group_mean(self, x: Node, group: int) -> Node:
        """(n * group, d) -> (n, d): mean over consecutive rows."""
        n = x.value.shape[0]
        if n % group:
            raise ContractError(f"{n} rows do not split into groups of {group}")
        y = x.value.reshape(n // group, group, -1).mean(axis=1)
        return self._record("group_mean", [x], y, group=group)

    def add(self, a: Node, b: Node) -> Node:
        return self._record("add", [a, b], a.value + b.value)

    def sum(self, x: Node) -> Node:
        return self._record("sum", [x], np.full(SCALAR_SHAPE, x.value.sum(), dtype=x.value.dtype))

    def weighted_sum(self, x: Node, weights: np.ndarray) -> Node:
        """Scalar sum(x * weights) with fixed weights."""
        v = np.full(SCALAR_SHAPE, (x.value * weights).sum(), dtype=x.value.dtype)
        return self._record("weighted_sum", [x], v, weights=weights)

    def softmax_cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        labels = np.asarray(labels, dtype=np.int64)
        loss, probs = K.softmax_cross_entropy(logits.value, labels)
        v = np.full(SCALAR_SHAPE, loss, dtype=logits.value.dtype)
        return self._record("softmax_cross_entropy", [logits], v, probs=probs, labels=labels)


# -----------------------------------------------------------------------------
# vector-Jacobian products
# -----------------------------------------------------------------------------
@defvjp("conv3d")
def _conv3d_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    x = graph.nodes[node.inputs[0]]
    w = graph.nodes[node.inputs[1]]
    with_bias = len(node.inputs) == 3
    dx, dw, db = K.conv3d_backward(
        g, x.value.shape, w.value, node.ctx["cols"], node.ctx["stride"], node.ctx["padding"], with_bias
    )
    return (dx, dw, db) if with_bias else (dx, dw)


@defvjp("pool3d")
def _pool3d_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    c = node.ctx
    x = graph.nodes[node.inputs[0]]
    return (K.pool3d_backward(g, x.value.shape, c["mode"], c["kernel"], c["stride"], c["padding"], c["argmax"]),)


@defvjp("batchnorm3d")
def _bn_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    return K.batchnorm3d_backward(g, node.ctx["cache"])


@defvjp("relu")
def _relu_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    return (K.relu_backward(g, graph.nodes[node.inputs[0]].value),)


@defvjp("concat")
def _concat_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    return K.split_channels(g, node.ctx["sizes"])


@defvjp("global_avg_pool")
def _gap_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    shape = graph.nodes[node.inputs[0]].value.shape
    return (np.broadcast_to(g / float(shape[2] * shape[3] * shape[4]), shape).copy(),)


@defvjp("flatten")
def _flatten_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    return (g.reshape(graph.nodes[node.inputs[0]].value.shape),)


@defvjp("linear")
def _linear_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    x = graph.nodes[node.inputs[0]].value
    w = graph.nodes[node.inputs[1]].value
    grads: List[Optional[np.ndarray]] = [g @ w, g.T @ x]
    if len(node.inputs) == 3:
        grads.append(g.sum(axis=0))
    return grads


@defvjp("group_mean")
def _group_mean_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    group = node.ctx["group"]
    return (np.repeat(g / float(group), group, axis=0),)


@defvjp("add")
def _add_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    return (g, g)


@defvjp("sum")
def _sum_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    x = graph.nodes[node.inputs[0]].value
    return (np.full(x.shape, g.reshape(-1)[0], dtype=x.dtype),)


@defvjp("weighted_sum")
def _weighted_sum_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    return (node.ctx["weights"] * g.reshape(-1)[0],)


@defvjp("softmax_cross_entropy")
def _sce_vjp(graph: NodeGraph, node: Node, g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
    d = K.softmax_cross_entropy_backward(node.ctx["probs"], node.ctx["labels"])
    return (d * g.reshape(-1)[0],)


def backward(graph: NodeGraph, root: Node) -> Dict[int, np.ndarray]:
    """Exact reverse-mode gradients of a scalar root, keyed by node index."""
    if root.value.shape != SCALAR_SHAPE:
        raise ContractError(
            f"backward needs a scalar (1, 1, 1, 1, 1) root, got {root.value.shape}",
            {"shape": list(root.value.shape)},
        )
    if graph._backward_done:
        raise ContractError("a graph supports a single backward pass")

    grads: Dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
    for node in reversed(graph.nodes[: root.index + 1]):
        g = grads.get(node.index)
        if g is None or not node.requires_grad or not node.inputs:
            continue
        for idx, ig in zip(node.inputs, _VJPS[node.op](graph, node, g)):
            if ig is None or not graph.nodes[idx].requires_grad:
                continue
            prev = grads.get(idx)
            grads[idx] = ig if prev is None else prev + ig

    graph.grads = grads
    graph._backward_done = True
    return grads


# -----------------------------------------------------------------------------
# finite-difference oracle
# -----------------------------------------------------------------------------
@dataclass
class Evaluation:
    loss: float
    grad: np.ndarray
    pattern: Optional[bytes] = None


@dataclass
class GradCheckResult:
    max_error: float
    checked: int
    skipped: int


def finite_diff_report(
    f: Callable[[np.ndarray], Evaluation],
    p: np.ndarray,
    step: float = 1e-4,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    extrapolate: bool = False,
) -> GradCheckResult:
    """
    Compare the analytic gradient `f(p).grad` with central differences.

    Elements whose perturbed evaluations change the activation pattern
    (a ReLU sign or a max-pool winner) are skipped; the function is not
    differentiable across them.

    With `extrapolate`, the estimate is (4 D(step/2) - D(step)) / 3, which
    cancels the step**2 truncation term of the central difference.
    """
    base = f(p)
    size = p.size
    if max_elements is not None and max_elements < size:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(size, size=max_elements, replace=False))
    else:
        idx = np.arange(size)

    def central(pos: Tuple[int, ...], h: float) -> Tuple[float, bool]:
        orig = p[pos]
        p[pos] = orig + h
        plus = f(p)
        p[pos] = orig - h
        minus = f(p)
        p[pos] = orig
        moved = base.pattern is not None and (plus.pattern != base.pattern or minus.pattern != base.pattern)
        return (plus.loss - minus.loss) / (2.0 * h), moved

    worst = 0.0
    checked = skipped = 0
    base_grad = np.asarray(base.grad)
    for i in idx:
        # in place, also for non-contiguous p
        pos = np.unravel_index(int(i), p.shape)
        numeric, moved = central(pos, step)
        if extrapolate and not moved:
            half, moved = central(pos, step / 2.0)
            numeric = (4.0 * half - numeric) / 3.0
        if moved:
            skipped += 1
            continue
        analytic = float(base_grad[pos])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        if math.isnan(err):
            return GradCheckResult(max_error=float("nan"), checked=checked + 1, skipped=skipped)
        worst = max(worst, err)
        checked += 1
    return GradCheckResult(max_error=worst, checked=checked, skipped=skipped)


def finite_diff_check(
    f: Callable[[np.ndarray], Evaluation],
    p: np.ndarray,
    step: float = 1e-4,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return finite_diff_report(f, p, step, max_elements, rng).max_error

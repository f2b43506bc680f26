"""Static differentiable computation graphs over float64 numpy arrays.

A :class:`Graph` is built once (shapes fixed at construction), then
evaluated any number of times with fresh leaf bindings. Forward values are
cached in a per-call :class:`Evaluation`, which keeps graphs freely
shareable across threads/processes; reverse-mode gradients and
forward-mode directional derivatives both consume that cache.

All reductions use numpy's fixed summation order, so identical graphs and
bindings produce bit-identical outputs and gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ROW_NORM_EPS = 1e-12   # ||v|| = sqrt(sum v^2 + eps^2): differentiable at v = 0
LAYER_NORM_EPS = 1e-6


class GraphError(ValueError):
    """Shape mismatch or mis-use detected while building or running a graph."""


class NonFiniteError(FloatingPointError):
    """A leaf binding or graph output contained NaN/Inf."""


@dataclass(frozen=True)
class Node:
    """Handle to one graph operation; immutable once created."""
    graph: "Graph" = field(repr=False)
    nid: int
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict, repr=False)
    needs_grad: bool = False

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return subtract(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return multiply(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __hash__(self):
        return hash((id(self.graph), self.nid))


class Graph:
    """Append-only DAG; nodes are stored in topological (creation) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self.output: Node | None = None

    def _append(self, kind: str, inputs: tuple[Node, ...], shape: tuple[int, ...],
                attrs: dict | None = None, needs_grad: bool | None = None) -> Node:
        for x in inputs:
            if x.graph is not self:
                raise GraphError(f"{kind}: input node belongs to a different graph")
        if needs_grad is None:
            needs_grad = any(x.needs_grad for x in inputs)
        node = Node(self, len(self.nodes), kind, tuple(x.nid for x in inputs),
                    tuple(int(s) for s in shape), attrs or {}, needs_grad)
        self.nodes.append(node)
        return node

    def leaf(self, name: str, shape: tuple[int, ...], grad: bool = False) -> Node:
        if name in self.leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        node = self._append("leaf", (), shape, {"name": name}, needs_grad=grad)
        self.leaves[name] = node
        return node

    def constant(self, value) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        return self._append("const", (), arr.shape, {"value": arr}, needs_grad=False)

    def set_output(self, node: Node) -> Node:
        if node.graph is not self:
            raise GraphError("output node belongs to a different graph")
        self.output = node
        return node


# ---------------------------------------------------------------------------
# primitive constructors (shape checking happens here, at build time)

def matmul(a: Node, b: Node) -> Node:
    if len(a.shape) < 2 or len(b.shape) < 2:
        raise GraphError(f"matmul: operands must be >=2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise GraphError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if len(b.shape) > 2 and a.shape[:-2] != b.shape[:-2]:
        raise GraphError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    shape = a.shape[:-1] + (b.shape[-1],)
    return a.graph._append("matmul", (a, b), shape)


def _same_shape(kind: str, a: Node, b: Node) -> tuple[int, ...]:
    if a.shape != b.shape:
        raise GraphError(f"{kind}: shapes differ, {a.shape} vs {b.shape}")
    return a.shape


def add(a: Node, b: Node) -> Node:
    return a.graph._append("add", (a, b), _same_shape("add", a, b))


def subtract(a: Node, b: Node) -> Node:
    return a.graph._append("sub", (a, b), _same_shape("sub", a, b))


def multiply(a: Node, b: Node) -> Node:
    return a.graph._append("mul", (a, b), _same_shape("mul", a, b))


def scale(a: Node, c: float) -> Node:
    return a.graph._append("scale", (a,), a.shape, {"c": float(c)})


def silu(a: Node) -> Node:
    return a.graph._append("silu", (a,), a.shape)


def layer_norm(a: Node, eps: float = LAYER_NORM_EPS) -> Node:
    if not a.shape:
        raise GraphError("layer_norm: needs at least one axis")
    return a.graph._append("layer_norm", (a,), a.shape, {"eps": float(eps)})


def softmax(a: Node) -> Node:
    if not a.shape:
        raise GraphError("softmax: needs at least one axis")
    return a.graph._append("softmax", (a,), a.shape)


def mean(a: Node) -> Node:
    return a.graph._append("mean", (a,), ())


def total(a: Node) -> Node:
    return a.graph._append("sum", (a,), ())


def sum_sq(a: Node) -> Node:
    return a.graph._append("sum_sq", (a,), ())


def row_norm(a: Node, eps: float = ROW_NORM_EPS) -> Node:
    if not a.shape:
        raise GraphError("row_norm: needs at least one axis")
    return a.graph._append("row_norm", (a,), a.shape[:-1], {"eps": float(eps)})


def concat(nodes: list[Node], axis: int) -> Node:
    if not nodes:
        raise GraphError("concat: empty input list")
    g = nodes[0].graph
    ndim = len(nodes[0].shape)
    axis = axis % ndim
    base = nodes[0].shape
    for x in nodes[1:]:
        if len(x.shape) != ndim or any(
                s != t for i, (s, t) in enumerate(zip(x.shape, base)) if i != axis):
            raise GraphError(f"concat: incompatible shapes {[n.shape for n in nodes]}")
    shape = list(base)
    shape[axis] = sum(x.shape[axis] for x in nodes)
    return g._append("concat", tuple(nodes), tuple(shape), {"axis": axis})


def narrow(a: Node, axis: int, start: int, length: int) -> Node:
    axis = axis % len(a.shape)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise GraphError(f"narrow: [{start}:{start + length}] out of range on {a.shape}")
    shape = list(a.shape)
    shape[axis] = length
    return a.graph._append("narrow", (a,), tuple(shape),
                           {"axis": axis, "start": start, "length": length})


def broadcast_to(a: Node, shape: tuple[int, ...]) -> Node:
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError as exc:
        raise GraphError(f"broadcast: {a.shape} -> {shape}: {exc}") from None
    if tuple(np.broadcast_shapes(a.shape, shape)) != tuple(shape):
        raise GraphError(f"broadcast: {a.shape} does not expand to {shape}")
    return a.graph._append("broadcast", (a,), tuple(shape), {"shape": tuple(shape)})


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    if int(np.prod(shape, dtype=np.int64)) != int(np.prod(a.shape, dtype=np.int64)):
        raise GraphError(f"reshape: size mismatch {a.shape} -> {shape}")
    return a.graph._append("reshape", (a,), tuple(shape), {"shape": tuple(shape)})


def transpose(a: Node, axes: tuple[int, ...]) -> Node:
    if sorted(axes) != list(range(len(a.shape))):
        raise GraphError(f"transpose: bad axes {axes} for shape {a.shape}")
    shape = tuple(a.shape[i] for i in axes)
    return a.graph._append("transpose", (a,), shape, {"axes": tuple(axes)})


def stop_gradient(a: Node) -> Node:
    return a.graph._append("stop_gradient", (a,), a.shape, needs_grad=False)


# ---------------------------------------------------------------------------
# kernels

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-free identity sigma(x) = (1 + tanh(x/2)) / 2
    return 0.5 * np.tanh(0.5 * x) + 0.5


def _ln_stats(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc, inv


def _forward(kind: str, vals: list[np.ndarray], attrs: dict, aux: dict) -> np.ndarray:
    if kind == "matmul":
        return vals[0] @ vals[1]
    if kind == "add":
        return vals[0] + vals[1]
    if kind == "sub":
        return vals[0] - vals[1]
    if kind == "mul":
        return vals[0] * vals[1]
    if kind == "scale":
        return vals[0] * attrs["c"]
    if kind == "silu":
        s = _sigmoid(vals[0])
        aux["sig"] = s
        return vals[0] * s
    if kind == "layer_norm":
        xc, inv = _ln_stats(vals[0], attrs["eps"])
        aux["xc"], aux["inv"] = xc, inv
        return xc * inv
    if kind == "softmax":
        z = vals[0] - vals[0].max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    if kind == "mean":
        return np.asarray(vals[0].mean())
    if kind == "sum":
        return np.asarray(vals[0].sum())
    if kind == "sum_sq":
        return np.asarray((vals[0] * vals[0]).sum())
    if kind == "row_norm":
        eps = attrs["eps"]
        return np.sqrt((vals[0] * vals[0]).sum(axis=-1) + eps * eps)
    if kind == "concat":
        return np.concatenate(vals, axis=attrs["axis"])
    if kind == "narrow":
        sl = [slice(None)] * vals[0].ndim
        sl[attrs["axis"]] = slice(attrs["start"], attrs["start"] + attrs["length"])
        return vals[0][tuple(sl)]
    if kind == "broadcast":
        return np.broadcast_to(vals[0], attrs["shape"])
    if kind == "reshape":
        return vals[0].reshape(attrs["shape"])
    if kind == "transpose":
        return np.transpose(vals[0], attrs["axes"])
    if kind == "stop_gradient":
        return vals[0]
    raise GraphError(f"unknown node kind {kind!r}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _backward(kind: str, g: np.ndarray, vals: list[np.ndarray],
              out: np.ndarray, attrs: dict, aux: dict) -> list[np.ndarray | None]:
    if kind == "matmul":
        a, b = vals
        ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
        return [ga, gb]
    if kind == "add":
        return [g, g]
    if kind == "sub":
        return [g, -g]
    if kind == "mul":
        return [g * vals[1], g * vals[0]]
    if kind == "scale":
        return [g * attrs["c"]]
    if kind == "silu":
        s = aux["sig"]
        return [g * (s + vals[0] * s * (1.0 - s))]
    if kind == "layer_norm":
        xhat = aux["xc"] * aux["inv"]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return [(g - gm - xhat * gx) * aux["inv"]]
    if kind == "softmax":
        dot = (g * out).sum(axis=-1, keepdims=True)
        return [out * (g - dot)]
    if kind == "mean":
        return [np.full(vals[0].shape, float(g) / vals[0].size)]
    if kind == "sum":
        return [np.full(vals[0].shape, float(g))]
    if kind == "sum_sq":
        return [2.0 * float(g) * vals[0]]
    if kind == "row_norm":
        return [(g / out)[..., None] * vals[0]]
    if kind == "concat":
        axis = attrs["axis"]
        grads, start = [], 0
        for v in vals:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + v.shape[axis])
            grads.append(g[tuple(sl)])
            start += v.shape[axis]
        return grads
    if kind == "narrow":
        gin = np.zeros_like(vals[0])
        sl = [slice(None)] * gin.ndim
        sl[attrs["axis"]] = slice(attrs["start"], attrs["start"] + attrs["length"])
        gin[tuple(sl)] = g
        return [gin]
    if kind == "broadcast":
        return [_unbroadcast(g, vals[0].shape)]
    if kind == "reshape":
        return [g.reshape(vals[0].shape)]
    if kind == "transpose":
        inv = np.argsort(attrs["axes"])
        return [np.transpose(g, inv)]
    if kind == "stop_gradient":
        return [None]
    raise GraphError(f"unknown node kind {kind!r}")


def _jvp_rule(kind: str, dv: list[np.ndarray], vals: list[np.ndarray],
              out: np.ndarray, attrs: dict, aux: dict) -> np.ndarray:
    if kind == "matmul":
        return dv[0] @ vals[1] + vals[0] @ dv[1]
    if kind == "add":
        return dv[0] + dv[1]
    if kind == "sub":
        return dv[0] - dv[1]
    if kind == "mul":
        return dv[0] * vals[1] + vals[0] * dv[1]
    if kind == "scale":
        return dv[0] * attrs["c"]
    if kind == "silu":
        s = aux["sig"]
        return dv[0] * (s + vals[0] * s * (1.0 - s))
    if kind == "layer_norm":
        xhat = aux["xc"] * aux["inv"]
        dm = dv[0].mean(axis=-1, keepdims=True)
        dx = (dv[0] * xhat).mean(axis=-1, keepdims=True)
        return (dv[0] - dm - xhat * dx) * aux["inv"]
    if kind == "softmax":
        dot = (dv[0] * out).sum(axis=-1, keepdims=True)
        return out * (dv[0] - dot)
    if kind == "mean":
        return np.asarray(dv[0].mean())
    if kind == "sum":
        return np.asarray(dv[0].sum())
    if kind == "sum_sq":
        return np.asarray(2.0 * (vals[0] * dv[0]).sum())
    if kind == "row_norm":
        return (vals[0] * dv[0]).sum(axis=-1) / out
    if kind == "concat":
        return np.concatenate(dv, axis=attrs["axis"])
    if kind == "narrow":
        sl = [slice(None)] * dv[0].ndim
        sl[attrs["axis"]] = slice(attrs["start"], attrs["start"] + attrs["length"])
        return dv[0][tuple(sl)].copy()
    if kind == "broadcast":
        return np.broadcast_to(dv[0], attrs["shape"]).copy()
    if kind == "reshape":
        return dv[0].reshape(attrs["shape"])
    if kind == "transpose":
        return np.transpose(dv[0], attrs["axes"]).copy()
    if kind == "stop_gradient":
        return np.zeros_like(out)
    raise GraphError(f"unknown node kind {kind!r}")


# ---------------------------------------------------------------------------
# execution

class Evaluation:
    """Cached forward pass of one graph on one set of bindings."""

    __slots__ = ("graph", "values", "aux", "output_node")

    def __init__(self, graph: Graph, values: list[np.ndarray],
                 aux: list[dict], output_node: Node):
        self.graph = graph
        self.values = values
        self.aux = aux
        self.output_node = output_node

    @property
    def output(self) -> np.ndarray:
        return self.values[self.output_node.nid]

    def value(self, node: Node) -> np.ndarray:
        return self.values[node.nid]


def _check_binding(name: str, arr, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != shape:
        raise GraphError(f"leaf {name!r}: bound shape {arr.shape}, declared {shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"leaf {name!r}: non-finite binding")
    return arr


def evaluate(graph: Graph, bindings: dict[str, np.ndarray],
             output: Node | None = None) -> Evaluation:
    """Forward pass; returns the per-call cache needed by :func:`backward`."""
    out_node = output or graph.output
    if out_node is None:
        raise GraphError("graph has no output node set")
    missing = set(graph.leaves) - set(bindings)
    if missing:
        raise GraphError(f"missing bindings for leaves: {sorted(missing)}")
    values: list[np.ndarray] = [None] * len(graph.nodes)  # type: ignore[list-item]
    aux: list[dict] = [None] * len(graph.nodes)  # type: ignore[list-item]
    for node in graph.nodes[: out_node.nid + 1]:
        if node.kind == "leaf":
            values[node.nid] = _check_binding(node.attrs["name"],
                                              bindings[node.attrs["name"]], node.shape)
        elif node.kind == "const":
            values[node.nid] = node.attrs["value"]
        else:
            a: dict = {}
            values[node.nid] = _forward(node.kind, [values[i] for i in node.inputs],
                                        node.attrs, a)
            aux[node.nid] = a
    if not np.all(np.isfinite(values[out_node.nid])):
        raise NonFiniteError(f"output of node #{out_node.nid} ({out_node.kind}) is non-finite")
    return Evaluation(graph, values, aux, out_node)


def backward(run: Evaluation) -> dict[str, np.ndarray]:
    """Reverse pass over a cached forward; gradients for every grad leaf."""
    graph, out = run.graph, run.output_node
    if int(np.prod(out.shape, dtype=np.int64)) != 1:
        raise GraphError(f"backward needs a scalar output, got shape {out.shape}")
    adj: list[np.ndarray | None] = [None] * len(graph.nodes)
    adj[out.nid] = np.ones(out.shape)
    for node in reversed(graph.nodes[: out.nid + 1]):
        g = adj[node.nid]
        if g is None or not node.inputs:
            continue
        vals = [run.values[i] for i in node.inputs]
        grads = _backward(node.kind, g, vals, run.values[node.nid], node.attrs,
                          run.aux[node.nid])
        for nid, gin in zip(node.inputs, grads):
            if gin is None or not graph.nodes[nid].needs_grad:
                continue
            adj[nid] = gin if adj[nid] is None else adj[nid] + gin
    out_grads = {}
    for name, leaf in graph.leaves.items():
        if leaf.needs_grad:
            g = adj[leaf.nid]
            out_grads[name] = np.zeros(leaf.shape) if g is None else g
    return out_grads


def jvp(graph: Graph, bindings: dict[str, np.ndarray],
        tangents: dict[str, np.ndarray], output: Node | None = None,
        run: Evaluation | None = None) -> np.ndarray:
    """Directional derivative of the output along per-leaf tangents."""
    out_node = output or graph.output
    if out_node is None:
        raise GraphError("graph has no output node set")
    if run is None:
        run = evaluate(graph, bindings, out_node)
    influencing = _ancestor_leaves(graph, out_node)
    missing = influencing - set(tangents)
    if missing:
        raise GraphError(f"missing tangents for influencing leaves: {sorted(missing)}")
    tans: list[np.ndarray] = [None] * len(graph.nodes)  # type: ignore[list-item]
    for node in graph.nodes[: out_node.nid + 1]:
        if node.kind == "leaf":
            name = node.attrs["name"]
            if name in tangents:
                tans[node.nid] = _check_binding(name, tangents[name], node.shape)
            else:
                tans[node.nid] = np.zeros(node.shape)
        elif node.kind == "const":
            tans[node.nid] = np.zeros(node.shape)
        else:
            tans[node.nid] = _jvp_rule(node.kind, [tans[i] for i in node.inputs],
                                       [run.values[i] for i in node.inputs],
                                       run.values[node.nid], node.attrs,
                                       run.aux[node.nid])
    return tans[out_node.nid]


def _ancestor_leaves(graph: Graph, node: Node) -> set[str]:
    reach = np.zeros(len(graph.nodes), dtype=bool)
    reach[node.nid] = True
    names: set[str] = set()
    for n in reversed(graph.nodes[: node.nid + 1]):
        if not reach[n.nid]:
            continue
        if n.kind == "leaf":
            names.add(n.attrs["name"])
        for i in n.inputs:
            reach[i] = True
    return names


def grad_check(graph: Graph, point: dict[str, np.ndarray], step: float = 1e-6,
               output: Node | None = None) -> float:
    """Max relative error of reverse-mode grads vs central finite differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8),
    checked component-wise over every grad-enabled leaf.
    """
    if step <= 0:
        raise GraphError("grad_check: step must be positive")
    out_node = output or graph.output
    run = evaluate(graph, point, out_node)
    analytic = backward(run)
    worst = 0.0
    base = {k: np.asarray(v, dtype=np.float64).copy() for k, v in point.items()}
    for name, grad in analytic.items():
        arr = base[name]
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = float(evaluate(graph, base, out_node).output)
            flat[i] = keep - step
            dn = float(evaluate(graph, base, out_node).output)
            flat[i] = keep
            numeric = (up - dn) / (2.0 * step)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst

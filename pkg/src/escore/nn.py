"""Neural building blocks on top of the graph engine.

Parameters live in a :class:`ParameterSet` (values + Adam moments) and are
bound into graphs as named grad-enabled leaves, so one set of weights can
drive any number of differently-shaped graphs. Initialization is a pure
function of (seed, parameter name).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from .rng import Stream

CHECKPOINT_FORMAT = "escore-ckpt-v1"


class NonFiniteGradientError(FloatingPointError):
    """Adam received a NaN/Inf gradient; carries the parameter name."""


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    m: np.ndarray = field(default=None)  # type: ignore[assignment]
    v: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParameterSet:
    """Ordered name -> Parameter map shared by graphs and the optimizer."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def bindings(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self._params.items()}

    def declare_leaves(self, g: G.Graph, trainable: bool = True) -> dict[str, G.Node]:
        return {name: g.leaf(name, p.value.shape, grad=trainable)
                for name, p in self._params.items()}

    def copy_values_from(self, other: "ParameterSet") -> None:
        for name, p in self._params.items():
            src = other[name]
            if src.value.shape != p.value.shape:
                raise ValueError(f"shape mismatch copying {name!r}")
            p.value = src.value.copy()

    def subset(self, keep) -> "ParameterSet":
        """View over selected parameters (shared Parameter objects)."""
        sub = ParameterSet()
        for name, p in self._params.items():
            if keep(name):
                sub._params[name] = p
        return sub


def kaiming_uniform(seed: int, name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    u = Stream.from_seed(seed, "init/" + name).uniform(shape)
    return (2.0 * u - 1.0) * bound


def add_linear(params: ParameterSet, seed: int, name: str, fan_in: int, fan_out: int,
               zero: bool = False) -> None:
    """Registers weight (fan_in x fan_out) and bias; zero-init on request."""
    if zero:
        params.add(name + ".w", np.zeros((fan_in, fan_out)))
    else:
        params.add(name + ".w", kaiming_uniform(seed, name + ".w", (fan_in, fan_out), fan_in))
    params.add(name + ".b", np.zeros(fan_out))


def linear(x: G.Node, w: G.Node, b: G.Node | None = None) -> G.Node:
    """x @ w + b with the bias broadcast over leading axes."""
    out = G.matmul(x, w)
    if b is not None:
        out = out + G.broadcast_to(b, out.shape)
    return out


def build_linear(leaves: dict[str, G.Node], name: str, x: G.Node) -> G.Node:
    return linear(x, leaves[name + ".w"], leaves[name + ".b"])


@dataclass(frozen=True)
class AdaLnResBlock:
    """Residual MLP block modulated by a condition vector.

    out = x + W2 @ silu(W1 @ (LN(x) * (1 + gamma(cond)) + beta(cond))),
    where (gamma, beta) is a linear projection of cond into 2*width values.
    W2 and the condition projection start at zero, so a fresh block is an
    exact identity map.
    """
    name: str
    width: int
    cond_dim: int

    def register(self, params: ParameterSet, seed: int) -> None:
        add_linear(params, seed, f"{self.name}.fc1", self.width, self.width)
        add_linear(params, seed, f"{self.name}.fc2", self.width, self.width, zero=True)
        add_linear(params, seed, f"{self.name}.cond", self.cond_dim, 2 * self.width, zero=True)

    def build(self, leaves: dict[str, G.Node], x: G.Node, cond: G.Node) -> G.Node:
        if x.shape[-1] != self.width or cond.shape[-1] != self.cond_dim:
            raise G.GraphError(f"{self.name}: got x {x.shape}, cond {cond.shape}")
        gb = build_linear(leaves, f"{self.name}.cond", cond)
        gamma = G.narrow(gb, -1, 0, self.width)
        beta = G.narrow(gb, -1, self.width, self.width)
        ln = G.layer_norm(x)
        mod = ln + ln * gamma + beta
        hidden = G.silu(build_linear(leaves, f"{self.name}.fc1", mod))
        return x + build_linear(leaves, f"{self.name}.fc2", hidden)


@dataclass(frozen=True)
class TransformerBlock:
    """Pre-norm bidirectional attention + MLP residual block."""
    name: str
    dim: int
    n_heads: int
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError(f"{self.name}: dim {self.dim} not divisible by "
                             f"{self.n_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    def register(self, params: ParameterSet, seed: int) -> None:
        for proj in ("wq", "wv", "wo"):
            add_linear(params, seed, f"{self.name}.{proj}", self.dim, self.dim)
        # no key bias: a constant shift of every key cancels inside softmax
        params.add(f"{self.name}.wk.w",
                   kaiming_uniform(seed, f"{self.name}.wk.w", (self.dim, self.dim), self.dim))
        hidden = self.mlp_ratio * self.dim
        add_linear(params, seed, f"{self.name}.mlp1", self.dim, hidden)
        add_linear(params, seed, f"{self.name}.mlp2", hidden, self.dim)
        for ln in ("ln1", "ln2"):
            params.add(f"{self.name}.{ln}.g", np.ones(self.dim))
            params.add(f"{self.name}.{ln}.b", np.zeros(self.dim))

    def _affine_ln(self, leaves, tag: str, x: G.Node) -> G.Node:
        ln = G.layer_norm(x)
        g = G.broadcast_to(leaves[f"{self.name}.{tag}.g"], ln.shape)
        b = G.broadcast_to(leaves[f"{self.name}.{tag}.b"], ln.shape)
        return ln * g + b

    def build(self, leaves: dict[str, G.Node], x: G.Node,
              taps: dict[str, G.Node] | None = None) -> G.Node:
        if len(x.shape) != 3 or x.shape[-1] != self.dim:
            raise G.GraphError(f"{self.name}: expected (batch, seq, {self.dim}), "
                               f"got {x.shape}")
        bsz, seq, _ = x.shape
        h, dh = self.n_heads, self.head_dim

        def split_heads(n: G.Node) -> G.Node:
            return G.transpose(G.reshape(n, (bsz, seq, h, dh)), (0, 2, 1, 3))

        a = self._affine_ln(leaves, "ln1", x)
        q = split_heads(build_linear(leaves, f"{self.name}.wq", a))
        k = split_heads(G.matmul(a, leaves[f"{self.name}.wk.w"]))
        v = split_heads(build_linear(leaves, f"{self.name}.wv", a))
        scores = G.scale(G.matmul(q, G.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = G.softmax(scores)
        if taps is not None:
            taps[f"{self.name}.attn"] = attn
        mixed = G.reshape(G.transpose(G.matmul(attn, v), (0, 2, 1, 3)), (bsz, seq, self.dim))
        x = x + build_linear(leaves, f"{self.name}.wo", mixed)
        m = self._affine_ln(leaves, "ln2", x)
        mlp = build_linear(leaves, f"{self.name}.mlp2",
                           G.silu(build_linear(leaves, f"{self.name}.mlp1", m)))
        return x + mlp


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8,
              weight_decay: float = 0.01, t: int = 1) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place.

    Aborts (leaving parameters untouched) if any gradient is non-finite.
    """
    if t < 1:
        raise ValueError("step index t must be >= 1")
    for name in params.names():
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        # in-place moment updates; this is the training hot loop
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(p.v / c2)
        denom += eps
        if weight_decay:
            p.value *= 1.0 - lr * weight_decay
        p.value -= (lr / c1) * (p.m / denom)


def save_checkpoint(path, params: ParameterSet, *, config_digest: str = "",
                    seed: int = 0, step: int = 0, extra: dict | None = None) -> None:
    """JSON manifest line + little-endian float64 payload in manifest order."""
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config_digest": config_digest,
        "seed": int(seed),
        "step": int(step),
        "params": [{"name": n, "shape": list(p.value.shape)} for n, p in params.items()],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, p in params.items():
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = fh.readline()
        manifest = json.loads(header.decode("utf-8"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not an escore checkpoint: {path}")
        values = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"truncated payload for {entry['name']!r}")
            values[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return manifest, values

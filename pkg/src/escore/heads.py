"""The five interchangeable continuous sampling heads.

Each head is a stack of AdaLN residual blocks mapping an input vector to a
latent, conditioned on a context row. The energy-scoring head draws the
latent in one forward pass; diffusion, flow-matching, shortcut, and
mean-flow are the multi/few-step baselines, with their losses and samplers
fixed here.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import graph as G
from . import nn
from .rng import Stream

HEAD_KINDS = ("energy", "diffusion", "flow", "shortcut", "meanflow")
WIRING_NOISE_AS_INPUT = "noise_as_input"
WIRING_NOISE_AS_CONDITION = "noise_as_condition"


@dataclass(frozen=True)
class HeadConfig:
    kind: str
    latent_dim: int = 2
    noise_dim: int = 2           # defaults to the latent dim's one-to-one mapping
    width: int = 256
    depth: int = 3
    context_dim: int = 16
    wiring: str = WIRING_NOISE_AS_INPUT   # energy only; Figure-style (a)/(b) choice
    m_samples: int = 2           # model samples per target in the energy loss
    t_diff: int = 100            # diffusion chain length
    beta_max: float = 0.999
    x0_clip: float = 4.0         # denoised-estimate clamp during sampling
    shortcut_levels: int = 7     # dyadic step grid {1, 1/2, ..., 1/2^(levels-1)}
    consistency_frac: float = 0.25
    r_eq_t_prob: float = 0.75
    time_feat_dim: int = 16

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.wiring not in (WIRING_NOISE_AS_INPUT, WIRING_NOISE_AS_CONDITION):
            raise ValueError(f"unknown wiring {self.wiring!r}")
        if self.m_samples < 2:
            raise ValueError("m_samples must be >= 2")
        if self.time_feat_dim % 2:
            raise ValueError("time_feat_dim must be even")

    @property
    def n_time_inputs(self) -> int:
        return {"energy": 0, "diffusion": 1, "flow": 1,
                "shortcut": 2, "meanflow": 2}[self.kind]

    @property
    def input_dim(self) -> int:
        if self.kind == "energy":
            return self.noise_dim if self.wiring == WIRING_NOISE_AS_INPUT \
                else self.context_dim
        return self.latent_dim

    @property
    def cond_dim(self) -> int:
        if self.kind == "energy":
            return self.context_dim if self.wiring == WIRING_NOISE_AS_INPUT \
                else self.noise_dim
        return self.context_dim + self.n_time_inputs * self.time_feat_dim


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of scalars in [0, 1] at octave-spaced frequencies."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    omega = 2.0 * np.pi * (2.0 ** np.arange(dim // 2))
    return np.concatenate([np.sin(t * omega), np.cos(t * omega)], axis=1)


def time_features_dt(t: np.ndarray, dim: int) -> np.ndarray:
    """d/dt of :func:`time_features` (needed for mean-flow's total derivative)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    omega = 2.0 * np.pi * (2.0 ** np.arange(dim // 2))
    return np.concatenate([omega * np.cos(t * omega), -omega * np.sin(t * omega)], axis=1)


# ---------------------------------------------------------------------------
# energy-distance losses (numpy scalar forms, plus graph builders)

def _smooth_norm(v: np.ndarray) -> np.ndarray:
    eps = G.ROW_NORM_EPS
    return np.sqrt(np.sum(v * v, axis=-1) + eps * eps)


def energy_loss_pair(x1, x2, y) -> float:
    """||x1 - y|| + ||x2 - y|| - ||x1 - x2|| with smoothed norms."""
    x1, x2, y = (np.asarray(a, dtype=np.float64) for a in (x1, x2, y))
    if not x1.shape == x2.shape == y.shape:
        raise ValueError("energy_loss_pair: shapes must match")
    return float(np.sum(_smooth_norm(x1 - y) + _smooth_norm(x2 - y)
                        - _smooth_norm(x1 - x2)))


def energy_loss_m(samples, y) -> float:
    """(2/m) sum_i ||x_i - y|| - (1/(m(m-1))) sum_{i != j} ||x_i - x_j||."""
    xs = [np.asarray(a, dtype=np.float64) for a in samples]
    y = np.asarray(y, dtype=np.float64)
    m = len(xs)
    if m < 2:
        raise ValueError("energy_loss_m needs at least 2 samples")
    attract = sum(float(np.sum(_smooth_norm(x - y))) for x in xs)
    repel = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            repel += float(np.sum(_smooth_norm(xs[i] - xs[j])))
    return (2.0 / m) * attract - (2.0 / (m * (m - 1))) * repel


def build_energy_rows_pair(x1: G.Node, x2: G.Node, y: G.Node) -> G.Node:
    """Per-row pair loss node: shape (rows,)."""
    return G.row_norm(x1 - y) + G.row_norm(x2 - y) - G.scale(G.row_norm(x1 - x2), 1.0)


def build_energy_rows_m(samples: list[G.Node], y: G.Node) -> G.Node:
    m = len(samples)
    if m < 2:
        raise G.GraphError("energy loss needs at least 2 samples")
    rows = None
    for x in samples:
        term = G.row_norm(x - y)
        rows = term if rows is None else rows + term
    rows = G.scale(rows, 2.0 / m)
    repel = None
    for i in range(m):
        for j in range(i + 1, m):
            term = G.row_norm(samples[i] - samples[j])
            repel = term if repel is None else repel + term
    return rows - G.scale(repel, 2.0 / (m * (m - 1)))


# ---------------------------------------------------------------------------
# diffusion schedule

class DiffusionSchedule:
    """Cosine alpha-bar schedule with clipped per-step betas."""

    def __init__(self, t_diff: int = 100, beta_max: float = 0.999, shift: float = 0.008):
        t = np.arange(t_diff + 1, dtype=np.float64)
        f = np.cos(((t / t_diff + shift) / (1.0 + shift)) * np.pi / 2.0) ** 2
        raw = f / f[0]
        betas = np.clip(1.0 - raw[1:] / raw[:-1], 1e-8, beta_max)
        self.t_diff = t_diff
        self.betas = betas
        self.alphabar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    def respaced(self, steps: int) -> np.ndarray:
        """Descending sub-chain of `steps` timesteps ending near t=1."""
        if not 1 <= steps <= self.t_diff:
            raise ValueError(f"steps must be in [1, {self.t_diff}], got {steps}")
        return np.round(np.linspace(self.t_diff, 1, steps)).astype(int)

    def noisy_sample(self, y: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
        ab = self.alphabar[t][:, None]
        return np.sqrt(ab) * y + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# head network

def register_head(params: nn.ParameterSet, cfg: HeadConfig, seed: int,
                  prefix: str = "head") -> None:
    nn.add_linear(params, seed, f"{prefix}.inp", cfg.input_dim, cfg.width)
    for k in range(cfg.depth):
        nn.AdaLnResBlock(f"{prefix}.block{k}", cfg.width, cfg.cond_dim).register(params, seed)
    nn.add_linear(params, seed, f"{prefix}.out", cfg.width, cfg.latent_dim, zero=True)


def build_head(cfg: HeadConfig, leaves: dict[str, G.Node], prefix: str,
               inp: G.Node, cond: G.Node) -> G.Node:
    """Input projection -> depth AdaLN blocks -> output projection."""
    x = nn.build_linear(leaves, f"{prefix}.inp", inp)
    for k in range(cfg.depth):
        block = nn.AdaLnResBlock(f"{prefix}.block{k}", cfg.width, cfg.cond_dim)
        x = block.build(leaves, x, cond)
    return nn.build_linear(leaves, f"{prefix}.out", x)


def build_energy_head(cfg: HeadConfig, leaves: dict[str, G.Node], prefix: str,
                      context: G.Node, noise: G.Node) -> G.Node:
    """Wiring-aware energy head: which of (noise, context) is block input."""
    if cfg.wiring == WIRING_NOISE_AS_INPUT:
        return build_head(cfg, leaves, prefix, noise, context)
    return build_head(cfg, leaves, prefix, context, noise)


# ---------------------------------------------------------------------------
# per-kind loss graphs

LOSS_AUX = {
    "energy": (),                     # noise leaves are added per sample index
    "diffusion": ("zt", "eps", "t0"),
    "flow": ("zt", "vel", "t0"),
    "shortcut": ("zt", "target", "t0", "t1"),
    "meanflow": ("zt", "target", "t0", "t1", "roww"),
}

MEANFLOW_WEIGHT_P = 0.5      # adaptive row weight (msq + c)^-p, stop-gradient
MEANFLOW_WEIGHT_C = 1e-3


def declare_loss_leaves(g: G.Graph, cfg: HeadConfig, rows: int,
                        ns: str = "") -> dict[str, G.Node]:
    """Data leaves (everything except parameters and context) for one kind."""
    d, f = cfg.latent_dim, cfg.time_feat_dim
    out = {"y": g.leaf(ns + "y", (rows, d))}
    if cfg.kind == "energy":
        for i in range(cfg.m_samples):
            out[f"n{i}"] = g.leaf(f"{ns}n{i}", (rows, cfg.noise_dim))
        return out
    for name in LOSS_AUX[cfg.kind]:
        if name == "roww":
            shape = (rows,)
        elif name in ("t0", "t1"):
            shape = (rows, f)
        else:
            shape = (rows, d)
        out[name] = g.leaf(ns + name, shape)
    return out


def build_loss_rows(cfg: HeadConfig, leaves: dict[str, G.Node], prefix: str,
                    context: G.Node, aux: dict[str, G.Node]) -> tuple[G.Node, dict[str, G.Node]]:
    """Per-row loss node (rows,) plus named intermediates (head samples)."""
    taps: dict[str, G.Node] = {}
    if cfg.kind == "energy":
        # one stacked forward for all m samples (rows repeat per noise draw)
        m = cfg.m_samples
        n_rows = aux["y"].shape[0]
        stacked = build_energy_head(
            cfg, leaves, prefix,
            G.concat([context] * m, axis=0),
            G.concat([aux[f"n{i}"] for i in range(m)], axis=0))
        samples = [G.narrow(stacked, 0, i * n_rows, n_rows) for i in range(m)]
        for i, x in enumerate(samples):
            taps[f"x{i}"] = x
        rows = build_energy_rows_m(samples, aux["y"]) if m > 2 \
            else build_energy_rows_pair(samples[0], samples[1], aux["y"])
        return rows, taps

    feats = [aux[n] for n in ("t0", "t1") if n in aux]
    cond = G.concat([context] + feats, axis=1)
    pred = build_head(cfg, leaves, prefix, aux["zt"], cond)
    taps["pred"] = pred
    target = {"diffusion": "eps", "flow": "vel",
              "shortcut": "target", "meanflow": "target"}[cfg.kind]
    diff = pred - aux[target]
    # mean squared error per row: (1/d) sum_d (pred - target)^2
    ones = context.graph.constant(np.ones((cfg.latent_dim, 1)))
    sq_rows = G.reshape(G.matmul(diff * diff, ones), (diff.shape[0],))
    rows = G.scale(sq_rows, 1.0 / cfg.latent_dim)
    if "roww" in aux:
        rows = rows * aux["roww"]   # adaptive weights, constant to the gradient
    return rows, taps


class Head:
    """Owns one head's parameters plus cached evaluation graphs."""

    def __init__(self, cfg: HeadConfig, seed: int, prefix: str = "head",
                 params: nn.ParameterSet | None = None):
        self.cfg = cfg
        self.prefix = prefix
        self.seed = seed
        if params is None:
            params = nn.ParameterSet()
        if f"{prefix}.out.w" not in params:
            register_head(params, cfg, seed, prefix)
        self.params = params
        self.schedule = DiffusionSchedule(cfg.t_diff, cfg.beta_max) \
            if cfg.kind in ("diffusion",) else None
        self._eval_graphs: dict[int, G.Graph] = {}
        self.forward_rows = 0   # instrumented row count through the head

    # -- plain (no-grad) forward -------------------------------------------
    def _eval_graph(self, rows: int) -> G.Graph:
        g = self._eval_graphs.get(rows)
        if g is None:
            g = G.Graph()
            leaves = self.params.declare_leaves(g, trainable=False)
            inp = g.leaf("inp", (rows, self.cfg.input_dim))
            cond = g.leaf("cond", (rows, self.cfg.cond_dim))
            g.set_output(build_head(self.cfg, leaves, self.prefix, inp, cond))
            self._eval_graphs[rows] = g
        return g

    def forward_values(self, inp: np.ndarray, cond: np.ndarray) -> np.ndarray:
        g = self._eval_graph(len(inp))
        self.forward_rows += len(inp)
        return G.evaluate(g, {"inp": inp, "cond": cond, **self.params.bindings()}).output

    def forward_jvp(self, inp, cond, d_inp, d_cond) -> np.ndarray:
        return self.forward_with_jvp(inp, cond, d_inp, d_cond)[1]

    def forward_with_jvp(self, inp, cond, d_inp, d_cond) -> tuple[np.ndarray, np.ndarray]:
        """(output, directional derivative) sharing one forward pass."""
        g = self._eval_graph(len(inp))
        bindings = {"inp": inp, "cond": cond, **self.params.bindings()}
        tangents = {name: np.zeros_like(p.value) for name, p in self.params.items()}
        tangents["inp"] = d_inp
        tangents["cond"] = d_cond
        run = G.evaluate(g, bindings)
        return run.output, G.jvp(g, bindings, tangents, run=run)

    # -- energy-head one-step latent (the spec'd single-sample entry point) --
    def energy_sample(self, context: np.ndarray, noise: np.ndarray) -> np.ndarray:
        if self.cfg.kind != "energy":
            raise ValueError("energy_sample requires an energy head")
        if self.cfg.wiring == WIRING_NOISE_AS_INPUT:
            return self.forward_values(noise, context)
        return self.forward_values(context, noise)

    # -- loss bindings (numpy side of the training step) ---------------------
    def loss_bindings(self, y: np.ndarray, rng: Stream,
                      context: np.ndarray | None = None,
                      ns: str = "") -> dict[str, np.ndarray]:
        """Per-step leaf values for this kind's loss graph.

        `context` is required for shortcut/mean-flow targets (the head is
        re-evaluated under stop-gradient to build them).
        """
        cfg = self.cfg
        rows, d = y.shape
        f = cfg.time_feat_dim
        out: dict[str, np.ndarray] = {ns + "y": y}
        if cfg.kind == "energy":
            for i in range(cfg.m_samples):
                out[f"{ns}n{i}"] = rng.child(f"noise{i}").normal((rows, cfg.noise_dim))
            return out
        if cfg.kind == "diffusion":
            t = 1 + rng.child("t").integers(cfg.t_diff, (rows,))
            eps = rng.child("eps").normal((rows, d))
            out[ns + "zt"] = self.schedule.noisy_sample(y, t, eps)
            out[ns + "eps"] = eps
            out[ns + "t0"] = time_features(t / cfg.t_diff, f)
            return out
        if cfg.kind == "flow":
            t = rng.child("t").uniform((rows,))
            x0 = rng.child("x0").normal((rows, d))
            out[ns + "zt"] = (1.0 - t[:, None]) * x0 + t[:, None] * y
            out[ns + "vel"] = y - x0
            out[ns + "t0"] = time_features(t, f)
            return out
        if context is None:
            raise ValueError(f"{cfg.kind} loss bindings need the context rows")
        if cfg.kind == "shortcut":
            return self._shortcut_bindings(y, rng, context, ns)
        return self._meanflow_bindings(y, rng, context, ns)

    def _shortcut_bindings(self, y, rng, context, ns):
        """First n_cons rows train self-consistency at token 2d; the rest
        train the flow-matching term at the d=0 token."""
        cfg = self.cfg
        rows, d = y.shape
        f = cfg.time_feat_dim
        n_cons = int(round(rows * cfg.consistency_frac))
        x0 = rng.child("x0").normal((rows, d))
        u = rng.child("t").uniform((rows,))
        t = u.copy()
        dtok = np.zeros(rows)
        if n_cons:
            # half-step d from the dyadic grid; t on the 2d-aligned slots
            lv = 1 + rng.child("lvl").integers(cfg.shortcut_levels - 1, (n_cons,))
            dc = 0.5 ** lv
            slots = np.round(1.0 / (2.0 * dc)).astype(int)
            t[:n_cons] = np.minimum(2.0 * dc * np.floor(u[:n_cons] * slots), 1.0 - 2.0 * dc)
            dtok[:n_cons] = 2.0 * dc
        zt = (1.0 - t[:, None]) * x0 + t[:, None] * y
        target = y - x0
        if n_cons:
            zc, tc, dc = zt[:n_cons], t[:n_cons], 0.5 * dtok[:n_cons]
            hc = context[:n_cons]
            s1 = self.forward_values(zc, np.concatenate(
                [hc, time_features(tc, f), time_features(dc, f)], axis=1))
            zmid = zc + dc[:, None] * s1
            s2 = self.forward_values(zmid, np.concatenate(
                [hc, time_features(tc + dc, f), time_features(dc, f)], axis=1))
            target = target.copy()
            target[:n_cons] = 0.5 * (s1 + s2)
        return {ns + "y": y, ns + "zt": zt, ns + "target": target,
                ns + "t0": time_features(t, f), ns + "t1": time_features(dtok, f)}

    def _meanflow_bindings(self, y, rng, context, ns):
        cfg = self.cfg
        rows, d = y.shape
        f = cfg.time_feat_dim
        t = rng.child("t").uniform((rows,))
        r = np.where(rng.child("coin").uniform((rows,)) < cfg.r_eq_t_prob,
                     t, t * rng.child("r").uniform((rows,)))
        eps = rng.child("eps").normal((rows, d))
        # data at time 0, noise at time 1
        zt = (1.0 - t[:, None]) * y + t[:, None] * eps
        vel = eps - y
        cond = np.concatenate([context, time_features(r, f), time_features(t, f)], axis=1)
        d_cond = np.concatenate([np.zeros_like(context),
                                 np.zeros((rows, f)), time_features_dt(t, f)], axis=1)
        u_pred, du_dt = self.forward_with_jvp(zt, cond, vel, d_cond)
        target = vel - (t - r)[:, None] * du_dt
        # bootstrapped targets explode under plain MSE; damp rows adaptively
        msq = ((u_pred - target) ** 2).mean(axis=1)
        roww = (msq + MEANFLOW_WEIGHT_C) ** -MEANFLOW_WEIGHT_P
        return {ns + "y": y, ns + "zt": zt, ns + "target": target,
                ns + "t0": time_features(r, f), ns + "t1": time_features(t, f),
                ns + "roww": roww}

    # -- sampling -------------------------------------------------------------
    def sample(self, context: np.ndarray, steps: int, rng: Stream) -> np.ndarray:
        """Draw len(context) latents with the kind's sampling procedure."""
        cfg = self.cfg
        rows = len(context)
        d, f = cfg.latent_dim, cfg.time_feat_dim
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if cfg.kind == "energy":
            if steps != 1:
                raise ValueError("energy heads sample in exactly one step")
            return self.energy_sample(context, rng.child("noise").normal((rows, cfg.noise_dim)))
        if cfg.kind == "diffusion":
            return self._sample_diffusion(context, steps, rng)
        if cfg.kind == "flow":
            z = rng.child("z0").normal((rows, d))
            dt = 1.0 / steps
            for k in range(steps):
                feats = time_features(np.full(rows, k * dt), f)
                z = z + dt * self.forward_values(z, np.concatenate([context, feats], axis=1))
            return z
        if cfg.kind == "shortcut":
            z = rng.child("z0").normal((rows, d))
            dt = 1.0 / steps
            dfeat = time_features(np.full(rows, dt), f)
            for k in range(steps):
                tfeat = time_features(np.full(rows, k * dt), f)
                z = z + dt * self.forward_values(
                    z, np.concatenate([context, tfeat, dfeat], axis=1))
            return z
        # mean-flow: average-velocity jumps from t=1 (noise) down to t=0 (data)
        z = rng.child("z0").normal((rows, d))
        grid = np.linspace(1.0, 0.0, steps + 1)
        for hi, lo in zip(grid[:-1], grid[1:]):
            cond = np.concatenate([context, time_features(np.full(rows, lo), f),
                                   time_features(np.full(rows, hi), f)], axis=1)
            z = z - (hi - lo) * self.forward_values(z, cond)
        return z

    def _sample_diffusion(self, context, steps, rng):
        cfg = self.cfg
        sched = self.schedule
        rows, d, f = len(context), cfg.latent_dim, cfg.time_feat_dim
        taus = sched.respaced(steps)
        z = rng.child("z0").normal((rows, d))
        for k, tau in enumerate(taus):
            lo = taus[k + 1] if k + 1 < len(taus) else 0
            ab_hi = sched.alphabar[tau]
            ab_lo = sched.alphabar[lo]
            feats = time_features(np.full(rows, tau / cfg.t_diff), f)
            eps_hat = self.forward_values(z, np.concatenate([context, feats], axis=1))
            x0 = (z - np.sqrt(1.0 - ab_hi) * eps_hat) / np.sqrt(ab_hi)
            x0 = np.clip(x0, -cfg.x0_clip, cfg.x0_clip)
            alpha_eff = ab_hi / ab_lo
            beta_eff = 1.0 - alpha_eff
            mean = (np.sqrt(ab_lo) * beta_eff / (1.0 - ab_hi)) * x0 \
                + (np.sqrt(alpha_eff) * (1.0 - ab_lo) / (1.0 - ab_hi)) * z
            var = (1.0 - ab_lo) / (1.0 - ab_hi) * beta_eff
            z = mean
            if lo > 0 and var > 0:
                z = z + np.sqrt(var) * rng.child(f"step{k}").normal((rows, d))
        return z

    # -- checkpoint -----------------------------------------------------------
    def save(self, path, *, config_digest: str = "", seed: int | None = None,
             step: int = 0, extra: dict | None = None) -> None:
        info = {"kind": self.cfg.kind, "head_config": asdict(self.cfg),
                "prefix": self.prefix}
        info.update(extra or {})
        nn.save_checkpoint(path, self.params, config_digest=config_digest,
                           seed=self.seed if seed is None else seed,
                           step=step, extra=info)

    @classmethod
    def load(cls, path) -> "Head":
        manifest, values = nn.load_checkpoint(path)
        info = manifest["extra"]
        cfg = HeadConfig(**info["head_config"])
        head = cls(cfg, seed=manifest["seed"], prefix=info.get("prefix", "head"))
        for name, arr in values.items():
            if name in head.params:
                head.params[name].value = arr
        return head

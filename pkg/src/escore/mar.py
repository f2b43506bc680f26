"""Masked autoregressive continuous sampling on toy latent sequences.

Training masks a random subset of positions and scores the head's samples
at exactly those positions; decoding fills a fully-masked sequence over
several parallel iterations. Classifier-free guidance happens at the
representation level: conditional and null backbone outputs are combined
linearly before the head ever runs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graph as G
from . import nn
from .data import N_CLASSES, conditional_sequences, stack_sequences
from .heads import Head, HeadConfig, build_loss_rows, declare_loss_leaves
from .rng import Stream

NULL_CLASS = -1          # sentinel for the CFG unconditional pass
PREFIX_TOKENS = 2        # conditioning rows prepended to the latent tokens


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MarConfig:
    seq_len: int = 16
    latent_dim: int = 2
    hidden_dim: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    head_kind: str = "energy"
    head_width: int = 128
    head_depth: int = 3
    m_samples: int = 2
    wiring: str = "noise_as_input"
    mask_lo: float = 0.70
    mask_hi: float = 1.00
    p_drop: float = 0.10
    n_classes: int = N_CLASSES

    def head_config(self) -> HeadConfig:
        return HeadConfig(kind=self.head_kind, latent_dim=self.latent_dim,
                          noise_dim=self.latent_dim, width=self.head_width,
                          depth=self.head_depth, context_dim=self.hidden_dim,
                          wiring=self.wiring, m_samples=self.m_samples)


@dataclass
class MaskPattern:
    masked: np.ndarray        # bool per position, True = masked
    rate: float               # realized masking rate

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=bool)
        if not self.masked.any():
            raise ValueError("mask pattern must cover at least one position")


@dataclass
class ContextualRepresentation:
    h: np.ndarray             # (L, D) or (B, L, D)
    origin: str               # teacher | student
    conditioning: int | None  # class id or None for the null pass


@dataclass
class LossBreakdown:
    energy: float
    distill: float
    lam: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.energy + self.lam * self.distill


@dataclass(frozen=True)
class DecodeConfig:
    iterations: int = 8
    cfg_scale: float = 1.0
    schedule: str = "cosine"   # cosine | uniform
    seed: int = 0
    guided: bool = True
    head_steps: int = 1        # per-position sampling steps (non-energy heads)

    def __post_init__(self):
        if self.schedule not in ("cosine", "uniform"):
            raise ValueError(f"unknown unmask schedule {self.schedule!r}")
        if self.head_steps < 1:
            raise ValueError("head_steps must be >= 1")


def apply_mask(latents: np.ndarray, rate_range: tuple[float, float],
               rng: Stream) -> tuple[np.ndarray, MaskPattern]:
    """Pick ceil(rate * L) positions to mask, rate ~ U[lo, hi).

    Returns the latents with masked rows zeroed (the learned mask token is
    substituted inside the backbone) plus the pattern itself.
    """
    lo, hi = rate_range
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError(f"bad masking rate range [{lo}, {hi})")
    length = len(latents)
    rate = lo if hi == lo else lo + (hi - lo) * rng.child("rate").uniform()
    count = min(length, math.ceil(rate * length))
    idx = rng.child("positions").sample_without_replacement(length, count)
    masked = np.zeros(length, dtype=bool)
    masked[idx] = True
    visible = latents * (~masked)[:, None]
    return visible, MaskPattern(masked, rate)


def cfg_combine(cond: ContextualRepresentation, uncond: ContextualRepresentation,
                scale: float) -> ContextualRepresentation:
    """scale * h_cond + (1 - scale) * h_uncond; exact passthrough at 0 and 1."""
    if cond.h.shape != uncond.h.shape:
        raise ValueError(f"shape mismatch: {cond.h.shape} vs {uncond.h.shape}")
    if cond.origin != uncond.origin:
        raise ValueError(f"origin mismatch: {cond.origin} vs {uncond.origin}")
    if scale == 1.0:
        h = cond.h.copy()
    elif scale == 0.0:
        h = uncond.h.copy()
    else:
        h = scale * cond.h + (1.0 - scale) * uncond.h
    return ContextualRepresentation(h, cond.origin, cond.conditioning)


def distillation_loss(h_student: np.ndarray, h_teacher: np.ndarray) -> float:
    """Mean over positions of the squared Euclidean row distance."""
    h_student = np.asarray(h_student, dtype=np.float64)
    h_teacher = np.asarray(h_teacher, dtype=np.float64)
    if h_student.shape != h_teacher.shape:
        raise ValueError(f"shape mismatch: {h_student.shape} vs {h_teacher.shape}")
    diff = h_student - h_teacher
    sq = (diff * diff).sum(axis=-1)
    return float(sq.mean())


class Backbone:
    """Bidirectional transformer over [class tokens | latent tokens]."""

    def __init__(self, cfg: MarConfig, seed: int, prefix: str = "backbone"):
        self.cfg = cfg
        self.prefix = prefix
        self.blocks = [nn.TransformerBlock(f"{prefix}.block{k}", cfg.hidden_dim,
                                           cfg.n_heads) for k in range(cfg.n_blocks)]

    def register(self, params: nn.ParameterSet, seed: int) -> None:
        cfg, pre = self.cfg, self.prefix
        nn.add_linear(params, seed, f"{pre}.latent_in", cfg.latent_dim, cfg.hidden_dim)
        params.add(f"{pre}.mask_token",
                   nn.kaiming_uniform(seed, f"{pre}.mask_token", (cfg.hidden_dim,),
                                      cfg.hidden_dim))
        # one embedding row per class plus the trailing null row
        params.add(f"{pre}.class_embed",
                   nn.kaiming_uniform(seed, f"{pre}.class_embed",
                                      (cfg.n_classes + 1, cfg.hidden_dim),
                                      cfg.hidden_dim))
        params.add(f"{pre}.pos_embed",
                   0.02 * Stream.from_seed(seed, f"init/{pre}.pos_embed").normal(
                       (cfg.seq_len + PREFIX_TOKENS, cfg.hidden_dim)))
        for block in self.blocks:
            block.register(params, seed)

    def build(self, leaves: dict[str, G.Node], latents: G.Node, mask: G.Node,
              onehot: G.Node) -> G.Node:
        """(B, L, d) latents + (B, L, 1) mask + (B, C+1) one-hot -> (B, L, D)."""
        cfg, pre = self.cfg, self.prefix
        bsz, seq_len, _ = latents.shape
        dim = cfg.hidden_dim
        tok = nn.build_linear(leaves, f"{pre}.latent_in", latents)
        mask_b = G.broadcast_to(mask, (bsz, seq_len, dim))
        keep = tok - tok * mask_b
        placed = G.broadcast_to(leaves[f"{pre}.mask_token"], (bsz, seq_len, dim)) * mask_b
        tok = keep + placed
        cls = G.matmul(onehot, leaves[f"{pre}.class_embed"])          # (B, D)
        prefix = G.broadcast_to(G.reshape(cls, (bsz, 1, dim)),
                                (bsz, PREFIX_TOKENS, dim))
        x = G.concat([prefix, tok], axis=1)
        x = x + G.broadcast_to(leaves[f"{pre}.pos_embed"],
                               (bsz, seq_len + PREFIX_TOKENS, dim))
        for block in self.blocks:
            x = block.build(leaves, x)
        return G.narrow(x, 1, PREFIX_TOKENS, seq_len)


def one_hot_classes(ids: np.ndarray, n_classes: int) -> np.ndarray:
    """Class ids (with NULL_CLASS mapped to the extra row) -> one-hot rows."""
    ids = np.asarray(ids)
    if np.any((ids < NULL_CLASS) | (ids >= n_classes)):
        raise ValueError(f"class ids out of range: {ids}")
    out = np.zeros((len(ids), n_classes + 1))
    out[np.arange(len(ids)), np.where(ids == NULL_CLASS, n_classes, ids)] = 1.0
    return out


class MarModel:
    """Backbone + sampling head with masked training and parallel decoding."""

    def __init__(self, cfg: MarConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.params = nn.ParameterSet()
        self.backbone = Backbone(cfg, seed)
        self.backbone.register(self.params, seed)
        self.head = Head(cfg.head_config(), seed, prefix="head", params=self.params)
        self._repr_graphs: dict[int, G.Graph] = {}
        self._train_graphs: dict = {}
        self.backbone_forwards = 0

    # -- backbone evaluation (no grad) ---------------------------------------
    def _repr_graph(self, bsz: int) -> G.Graph:
        g = self._repr_graphs.get(bsz)
        if g is None:
            cfg = self.cfg
            g = G.Graph()
            leaves = self.params.declare_leaves(g, trainable=False)
            latents = g.leaf("latents", (bsz, cfg.seq_len, cfg.latent_dim))
            mask = g.leaf("mask", (bsz, cfg.seq_len, 1))
            onehot = g.leaf("onehot", (bsz, cfg.n_classes + 1))
            g.set_output(self.backbone.build(leaves, latents, mask, onehot))
            self._repr_graphs[bsz] = g
        return g

    def represent(self, latents: np.ndarray, masked: np.ndarray,
                  class_ids: np.ndarray, origin: str = "student") -> ContextualRepresentation:
        """Run the backbone; latents at masked positions are ignored."""
        bsz = len(latents)
        g = self._repr_graph(bsz)
        mask = masked.astype(np.float64)[..., None]
        bindings = {"latents": latents * (1.0 - mask), "mask": mask,
                    "onehot": one_hot_classes(class_ids, self.cfg.n_classes),
                    **self.params.bindings()}
        self.backbone_forwards += 1
        label = None if len(set(class_ids.tolist())) != 1 else int(class_ids[0])
        h = G.evaluate(g, bindings).output
        return ContextualRepresentation(h, origin, label)

    # -- masked training ------------------------------------------------------
    def _train_graph(self, bsz: int, with_teacher: bool, lam: float,
                     frozen_backbone: bool) -> tuple[G.Graph, dict]:
        key = (bsz, with_teacher, lam, frozen_backbone)
        cached = self._train_graphs.get(key)
        if cached is not None:
            return cached
        cfg = self.cfg
        rows = bsz * cfg.seq_len
        g = G.Graph()

        def trainable(name: str) -> bool:
            if frozen_backbone and name.startswith("backbone."):
                return False
            return True

        leaves = {name: g.leaf(name, p.value.shape, grad=trainable(name))
                  for name, p in self.params.items()}
        latents = g.leaf("latents", (bsz, cfg.seq_len, cfg.latent_dim))
        mask = g.leaf("mask", (bsz, cfg.seq_len, 1))
        onehot = g.leaf("onehot", (bsz, cfg.n_classes + 1))
        weight = g.leaf("weight", (rows,))
        winv = g.leaf("weight_inv", ())
        aux = declare_loss_leaves(g, self.head.cfg, rows)

        h = self.backbone.build(leaves, latents, mask, onehot)
        h_rows = G.reshape(h, (rows, cfg.hidden_dim))
        loss_rows, _ = build_loss_rows(self.head.cfg, leaves, "head", h_rows, aux)
        energy_term = G.total(loss_rows * weight) * winv
        nodes = {"energy": energy_term, "h": h}
        if with_teacher:
            h_teacher = g.leaf("h_teacher", (bsz, cfg.seq_len, cfg.hidden_dim))
            diff = h - h_teacher
            ones = g.constant(np.ones((cfg.hidden_dim, 1)))
            sq = G.matmul(G.reshape(diff * diff, (rows, cfg.hidden_dim)), ones)
            distill = G.scale(G.total(sq), 1.0 / rows)
            nodes["distill"] = distill
            total = energy_term + G.scale(distill, lam)
        else:
            total = energy_term
        g.set_output(total)
        nodes["total"] = total
        self._train_graphs[key] = (g, nodes)
        return g, nodes

    def mask_batch(self, latents: np.ndarray, rng: Stream) -> np.ndarray:
        """Independent mask pattern per sequence; returns (B, L) bools."""
        out = np.zeros(latents.shape[:2], dtype=bool)
        for j in range(len(latents)):
            _, pattern = apply_mask(latents[j], (self.cfg.mask_lo, self.cfg.mask_hi),
                                    rng.child(f"seq/{j}"))
            out[j] = pattern.masked
        return out

    def masked_training_step(self, latents: np.ndarray, class_ids: np.ndarray,
                             rng: Stream, *, lam: float = 0.0,
                             teacher: "MarModel | None" = None,
                             lr: float = 1e-3, step_index: int = 1,
                             weight_decay: float = 0.0,
                             frozen_backbone: bool = False,
                             update: bool = True,
                             bindings_hook=None) -> LossBreakdown:
        """One optimization step over a batch of conditional sequences."""
        cfg = self.cfg
        if teacher is None and lam != 0.0:
            raise ValueError("distillation weight requires a teacher")
        bsz = len(latents)
        rows = bsz * cfg.seq_len
        masked = self.mask_batch(latents, rng.child("mask"))
        drop = rng.child("drop").uniform((bsz,)) < cfg.p_drop
        ids = np.where(drop, NULL_CLASS, class_ids)

        mask_f = masked.astype(np.float64)
        weight = mask_f.reshape(rows)
        bindings = {
            "latents": latents * (1.0 - mask_f[..., None]),
            "mask": mask_f[..., None],
            "onehot": one_hot_classes(ids, cfg.n_classes),
            "weight": weight,
            "weight_inv": np.asarray(1.0 / weight.sum()),
            **self.params.bindings(),
        }
        y_rows = latents.reshape(rows, cfg.latent_dim)
        bindings.update(self.head.loss_bindings(y_rows, rng.child("head")))
        if teacher is not None:
            rep = teacher.represent(latents, masked, ids, origin="teacher")
            bindings["h_teacher"] = rep.h
        if bindings_hook is not None:
            bindings = bindings_hook(bindings)
        g, nodes = self._train_graph(bsz, teacher is not None, lam, frozen_backbone)
        try:
            run = G.evaluate(g, bindings)
            energy = float(run.value(nodes["energy"]))
            distill = float(run.value(nodes["distill"])) if teacher is not None else 0.0
            if update:
                grads = G.backward(run)
                opt = self.params.subset(
                    lambda n: not (frozen_backbone and n.startswith("backbone.")))
                nn.adam_step(opt, grads, lr=lr, weight_decay=weight_decay, t=step_index)
        except (G.NonFiniteError, nn.NonFiniteGradientError) as exc:
            raise TrainingError(f"{cfg.head_kind}: non-finite loss at step "
                                f"{step_index}: {exc}") from exc
        return LossBreakdown(energy, distill, lam)

    # -- iterative parallel decoding -------------------------------------------
    def _unmask_counts(self, dcfg: DecodeConfig) -> list[int]:
        """Positions generated per iteration; covers all L exactly once."""
        length, iters = self.cfg.seq_len, dcfg.iterations
        if not 1 <= iters <= length:
            raise ValueError(f"iterations must be in [1, {length}], got {iters}")
        remaining = [length]
        for k in range(1, iters + 1):
            if dcfg.schedule == "cosine":
                target = math.floor(length * math.cos(math.pi / 2 * k / iters))
            else:
                target = length - round(length * k / iters)
            target = min(target, remaining[-1] - 1)
            remaining.append(max(target, iters - k))
        remaining[-1] = 0
        return [remaining[k] - remaining[k + 1] for k in range(iters)]

    def decode(self, class_id: int | None, n_seq: int,
               dcfg: DecodeConfig) -> tuple[np.ndarray, dict]:
        """Generate sequences by iterative parallel decoding with CFG."""
        cfg = self.cfg
        counts = self._unmask_counts(dcfg)
        root = Stream.from_seed(dcfg.seed, "decode")
        latents = np.zeros((n_seq, cfg.seq_len, cfg.latent_dim))
        generated = np.zeros((n_seq, cfg.seq_len), dtype=bool)
        ids = np.full(n_seq, NULL_CLASS if class_id is None else class_id)
        backbone_before = self.backbone_forwards
        head_rows = 0
        times_generated = np.zeros((n_seq, cfg.seq_len), dtype=int)

        for k, n_k in enumerate(counts):
            h_cond = self.represent(latents, ~generated, ids)
            if dcfg.guided:
                h_null = self.represent(latents, ~generated,
                                        np.full(n_seq, NULL_CLASS))
                h = cfg_combine(h_cond, h_null, dcfg.cfg_scale).h
            else:
                h = h_cond.h
            chosen: list[tuple[int, int]] = []
            for j in range(n_seq):
                open_pos = np.flatnonzero(~generated[j])
                pick = root.child(f"seq/{j}").child(f"iter/{k}/select") \
                    .sample_without_replacement(len(open_pos), n_k)
                chosen.extend((j, int(open_pos[p])) for p in pick)
            ctx = np.stack([h[j, i] for j, i in chosen])
            if cfg.head_kind == "energy":
                if dcfg.head_steps != 1:
                    raise ValueError("energy heads sample in exactly one step")
                noise = np.stack([
                    root.child(f"seq/{j}").child(f"pos/{i}/noise")
                    .normal((cfg.latent_dim,)) for j, i in chosen])
                out = self.head.energy_sample(ctx, noise)
            else:
                out = self.head.sample(ctx, dcfg.head_steps,
                                       root.child(f"iter/{k}/head"))
            head_rows += len(out)
            for row, (j, i) in enumerate(chosen):
                latents[j, i] = out[row]
                generated[j, i] = True
                times_generated[j, i] += 1

        if not generated.all() or not np.all(times_generated == 1):
            raise RuntimeError("decode failed to cover every position exactly once")
        stats = {
            "backbone_forwards": self.backbone_forwards - backbone_before,
            "head_rows": head_rows,
            "per_iteration": counts,
        }
        return latents, stats

    # -- checkpointing ----------------------------------------------------------
    def save(self, path, *, config_digest: str = "", step: int = 0,
             extra: dict | None = None) -> None:
        info = {"model": "mar", "mar_config": asdict(self.cfg)}
        info.update(extra or {})
        nn.save_checkpoint(path, self.params, config_digest=config_digest,
                           seed=self.seed, step=step, extra=info)

    @classmethod
    def load(cls, path) -> "MarModel":
        manifest, values = nn.load_checkpoint(path)
        cfg = MarConfig(**manifest["extra"]["mar_config"])
        model = cls(cfg, seed=manifest["seed"])
        for name, arr in values.items():
            model.params[name].value = arr
        return model


def class_pools(cfg: MarConfig, seed: int, per_class: int,
                jitter: float = 0.02, tag: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Stacked dataset of all classes: (n, L, d) latents + class ids."""
    samples = []
    for c in range(cfg.n_classes):
        sub_seed = int(Stream.from_seed(seed, f"pool/{tag}/class{c}").key % (1 << 62))
        samples.extend(conditional_sequences(c, per_class, cfg.seq_len,
                                             seed=sub_seed, jitter=jitter))
    return stack_sequences(samples)


def train_mar(model: MarModel, *, steps: int, batch: int, lr: float = 1e-3,
              warmup: int = 100, lam: float = 0.0,
              teacher: MarModel | None = None, per_class: int = 512,
              weight_decay: float = 0.0, frozen_backbone: bool = False,
              jitter: float = 0.02) -> list[dict]:
    """Training driver; returns one log record per step."""
    latents, ids = class_pools(model.cfg, model.seed, per_class, jitter)
    root = Stream.from_seed(model.seed, f"train_mar/{model.cfg.head_kind}")
    log = []
    for t in range(1, steps + 1):
        step_rng = root.child(f"step/{t}")
        idx = step_rng.child("batch").integers(len(latents), (batch,))
        cur_lr = lr * min(1.0, t / max(warmup, 1))
        breakdown = model.masked_training_step(
            latents[idx], ids[idx], step_rng, lam=lam, teacher=teacher,
            lr=cur_lr, step_index=t, weight_decay=weight_decay,
            frozen_backbone=frozen_backbone)
        log.append({"step": t, "energy": breakdown.energy,
                    "distill": breakdown.distill, "total": breakdown.total,
                    "lambda": lam, "lr": cur_lr, "seed": model.seed})
    return log

"""Experiment runners behind the CLI verbs: training runs, the five-way
Swiss-roll comparison, MAR training/decoding, and hyperparameter sweeps.

Sweep cells are pure functions of (config, seed), so results are identical
whether they run serially or on the ESCORE_THREADS worker pool.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data, mar, metrics, svg
from .config import ConfigError, config_digest, write_run_config
from .heads import HEAD_KINDS, HeadConfig
from .mar import DecodeConfig, MarConfig, MarModel, train_mar
from .metrics import EnergyEstimatorConfig, MetricsReport, energy_statistic
from .rng import Stream
from .swiss import ToyHeadModel, ToyTrainConfig

PLOT_REFERENCE_SEED = 7777
LOSS_HEADER = ["step", "energy", "distill", "total", "lambda", "lr", "seed"]
SWEEP_PARAMS = ("lambda", "cfg", "m", "wiring")


def worker_count() -> int:
    raw = os.environ.get("ESCORE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_jobs(fn, arg_tuples: list[tuple]):
    """Run jobs serially or on a process pool; results in submission order."""
    workers = min(worker_count(), len(arg_tuples))
    if workers <= 1:
        return [fn(*args) for args in arg_tuples]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for args in arg_tuples]
        return [f.result() for f in futures]


def fresh_dir(out_dir) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"output directory {out} is not empty; completed runs "
                          "are immutable")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_loss_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_HEADER)
        for row in rows:
            writer.writerow([row["step"], repr(row["energy"]), repr(row["distill"]),
                             repr(row["total"]), repr(row["lambda"]),
                             repr(row["lr"]), row["seed"]])


def append_metrics_row(path, report: MetricsReport) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        if new:
            fh.write(MetricsReport.CSV_HEADER + "\n")
        fh.write(report.csv_row() + "\n")


# ---------------------------------------------------------------------------
# toy heads

def head_config_from(cfg: dict, method: str) -> HeadConfig:
    h = cfg["head"]
    return HeadConfig(kind=method, latent_dim=2, noise_dim=h["noise_dim"],
                      width=h["width"], depth=h["depth"],
                      context_dim=h["context_dim"], wiring=h["wiring"],
                      m_samples=h["m"], t_diff=h["t_diff"])


def toy_train_config_from(cfg: dict, steps: int | None = None) -> ToyTrainConfig:
    t = cfg["train"]
    return ToyTrainConfig(steps=steps or t["steps"], batch=t["batch"], lr=t["lr"],
                          warmup=t["warmup"], weight_decay=t["weight_decay"],
                          pool=cfg["data"]["pool"],
                          noise_sigma=cfg["data"]["noise_sigma"])


def run_train_head(cfg: dict, out_dir) -> Path:
    method = cfg["head"]["method"]
    if method not in HEAD_KINDS:
        raise ConfigError(f"head.method must be one of {HEAD_KINDS}, got {method!r}")
    out = fresh_dir(out_dir)
    digest = write_run_config(out, cfg)
    seed = cfg["seed"]
    model = ToyHeadModel(head_config_from(cfg, method), seed)
    history = model.train(toy_train_config_from(cfg))
    write_loss_csv(out / "loss.csv", [
        {"step": s, "energy": v, "distill": 0.0, "total": v, "lambda": 0.0,
         "lr": cfg["train"]["lr"], "seed": seed} for s, v in history])
    ckpt = out / "head.ckpt"
    model.save(ckpt, config_digest=digest, step=len(history))
    return ckpt


def run_sample(ckpt_path, steps: int, n: int, seed: int, out_csv,
               svg_path=None, noise_sigma: float = 0.03) -> np.ndarray:
    model = ToyHeadModel.load(ckpt_path)
    if model.cfg.kind == "energy" and steps != 1:
        raise ConfigError("energy heads sample in exactly one step; use --steps 1")
    samples = model.sample(n, steps, seed)
    data.write_points_csv(out_csv, samples)
    if svg_path:
        ref = data.swiss_roll(n, noise_sigma, seed=PLOT_REFERENCE_SEED).points
        svg.scatter_svg(svg_path, ref, samples,
                        title=f"{model.cfg.kind} ({steps} step{'s' if steps > 1 else ''})")
    return samples


def run_eval(generated_csv, reference_csv, out_csv, method: str, steps: int,
             seed: int, bandwidth="median",
             metric_names: tuple[str, ...] = ("mmd", "wsd", "energy")) -> MetricsReport:
    known = {"mmd", "wsd", "energy"}
    bad = set(metric_names) - known
    if bad:
        raise ConfigError(f"unknown metric name(s): {sorted(bad)}; known: {sorted(known)}")
    gen, _ = data.read_points_csv(generated_csv)
    ref, _ = data.read_points_csv(reference_csv)
    if gen.shape[1] != ref.shape[1]:
        raise ConfigError(f"dimension mismatch: generated has {gen.shape[1]} "
                          f"columns, reference has {ref.shape[1]}")
    report = metrics.evaluate_samples(gen, ref, method, steps, seed, bandwidth)
    append_metrics_row(out_csv, report)
    return report


# ---------------------------------------------------------------------------
# compare-swissroll (the five-way one-step comparison)

def _compare_cell(cfg: dict, method: str, seed: int, cell_dir: str) -> list[dict]:
    """Train one head on one seed; sample and score it. Returns metric rows."""
    out = Path(cell_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps_budget = cfg["compare"]["steps_by_method"][method]
    model = ToyHeadModel(head_config_from(cfg, method), seed)
    history = model.train(toy_train_config_from(cfg, steps=steps_budget))
    write_loss_csv(out / "loss.csv", [
        {"step": s, "energy": v, "distill": 0.0, "total": v, "lambda": 0.0,
         "lr": cfg["train"]["lr"], "seed": seed} for s, v in history])
    model.save(out / "head.ckpt", config_digest=config_digest(cfg), step=len(history))

    n = cfg["compare"]["sample_n"]
    reference = data.swiss_roll(n, cfg["data"]["noise_sigma"], seed=10_000 + seed).points
    step_grid = [1]
    if method in ("diffusion", "flow"):
        step_grid += list(cfg["compare"]["multi_steps"])
    rows = []
    for steps in step_grid:
        samples = model.sample(n, steps, seed=20_000 + seed)
        data.write_points_csv(out / f"samples_step{steps}.csv", samples)
        rep = metrics.evaluate_samples(samples, reference, method, steps, seed,
                                       cfg["metrics"]["bandwidth"])
        rows.append(rep.__dict__.copy())
    return rows


def run_compare(cfg: dict, out_dir) -> Path:
    out = fresh_dir(out_dir)
    write_run_config(out, cfg)
    seeds = cfg["compare"]["seeds"]
    jobs = [(cfg, method, seed, str(out / "cells" / f"{method}_seed{seed}"))
            for seed in seeds for method in HEAD_KINDS]
    results = run_jobs(_compare_cell, jobs)

    all_rows = [row for rows in results for row in rows]
    all_rows.sort(key=lambda r: (r["seed"], r["method"], r["steps"]))
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        fh.write(MetricsReport.CSV_HEADER + "\n")
        for row in all_rows:
            fh.write(MetricsReport(**row).csv_row() + "\n")

    n = cfg["compare"]["sample_n"]
    for seed in seeds:
        reference = data.swiss_roll(n, cfg["data"]["noise_sigma"], seed=10_000 + seed).points
        panels = []
        for method in HEAD_KINDS:
            pts, _ = data.read_points_csv(out / "cells" / f"{method}_seed{seed}"
                                          / "samples_step1.csv")
            panels.append((f"{method} (1 step)", reference, pts))
        svg.panel_grid_svg(out / f"swissroll_seed{seed}.svg", panels)
    return metrics_path


# ---------------------------------------------------------------------------
# MAR training / decoding

def mar_config_from(cfg: dict, head_kind: str | None = None,
                    m: int | None = None, wiring: str | None = None) -> MarConfig:
    m_ = cfg["mar"]
    return MarConfig(seq_len=m_["seq_len"], latent_dim=2, hidden_dim=m_["hidden_dim"],
                     n_blocks=m_["n_blocks"], n_heads=m_["n_heads"],
                     head_kind=head_kind or m_["head_kind"],
                     head_width=m_["head_width"], head_depth=m_["head_depth"],
                     m_samples=m or m_["m"], wiring=wiring or m_["wiring"],
                     mask_lo=m_["mask_lo"], mask_hi=m_["mask_hi"],
                     p_drop=m_["p_drop"])


def train_mar_model(cfg: dict, *, role: str, seed: int,
                    teacher: MarModel | None = None,
                    m: int | None = None, wiring: str | None = None
                    ) -> tuple[MarModel, list[dict]]:
    t = cfg["mar_train"]
    lam = t["lambda"] if role == "student" else 0.0
    if lam > 0 and teacher is None:
        raise ConfigError("mar_train.lambda > 0 requires --teacher")
    kind = "diffusion" if role == "teacher" else None
    model = MarModel(mar_config_from(cfg, head_kind=kind, m=m, wiring=wiring), seed)
    if role == "student" and teacher is not None and t["init_from_teacher"]:
        for name, p in model.params.items():
            if name.startswith("backbone.") and name in teacher.params:
                p.value = teacher.params[name].value.copy()
    log = train_mar(model, steps=t["steps"], batch=t["batch"], lr=t["lr"],
                    warmup=t["warmup"], lam=lam, teacher=teacher,
                    per_class=cfg["data"]["per_class"],
                    weight_decay=t["weight_decay"],
                    frozen_backbone=t["frozen_backbone"],
                    jitter=cfg["data"]["jitter"])
    return model, log


def run_train_mar(cfg: dict, out_dir, role: str, teacher_ckpt=None) -> Path:
    if role not in ("teacher", "student"):
        raise ConfigError(f"--role must be teacher or student, got {role!r}")
    out = fresh_dir(out_dir)
    digest = write_run_config(out, cfg)
    teacher = MarModel.load(teacher_ckpt) if teacher_ckpt else None
    model, log = train_mar_model(cfg, role=role, seed=cfg["seed"], teacher=teacher)
    write_loss_csv(out / "loss.csv", log)
    ckpt = out / "mar.ckpt"
    model.save(ckpt, config_digest=digest, step=len(log),
               extra={"role": role, "lambda": cfg["mar_train"]["lambda"],
                      "m": model.cfg.m_samples, "wiring": model.cfg.wiring})
    return ckpt


def run_decode(ckpt_path, class_id: int | None, *, iterations: int,
               cfg_scale: float, schedule: str, seed: int, guided: bool,
               n_seq: int, out_dir, head_steps: int | None = None) -> Path:
    out = fresh_dir(out_dir)
    model = MarModel.load(ckpt_path)
    if head_steps is None:
        head_steps = 1 if model.cfg.head_kind == "energy" \
            else model.head.cfg.t_diff
    dcfg = DecodeConfig(iterations=iterations, cfg_scale=cfg_scale,
                        schedule=schedule, seed=seed, guided=guided,
                        head_steps=head_steps)
    latents, stats = model.decode(class_id, n_seq, dcfg)
    seq_csv = out / "sequences.csv"
    length = model.cfg.seq_len
    flat = latents.reshape(n_seq * length, model.cfg.latent_dim)
    positions = np.tile(np.arange(length), n_seq)
    data.write_points_csv(seq_csv, flat, extra={"position": positions})
    stats_out = {"class_id": class_id, "n_seq": n_seq, "iterations": dcfg.iterations,
                 "cfg_scale": dcfg.cfg_scale, "guided": dcfg.guided,
                 "schedule": dcfg.schedule, "seed": dcfg.seed,
                 "head_steps": dcfg.head_steps, **stats}
    (out / "decode_stats.json").write_text(json.dumps(stats_out, sort_keys=True,
                                                      indent=2) + "\n")
    return seq_csv


# ---------------------------------------------------------------------------
# sweeps

def heldout_pools(mcfg: MarConfig, eval_per_class: int, jitter: float) -> dict[int, np.ndarray]:
    """Per-class held-out point clouds, independent of any training seed."""
    latents, _ = mar.class_pools(mcfg, seed=531, per_class=eval_per_class,
                                 jitter=jitter, tag="heldout")
    return {c: latents[c * eval_per_class:(c + 1) * eval_per_class]
            .reshape(-1, mcfg.latent_dim) for c in range(mcfg.n_classes)}


def decode_and_score(model: MarModel, cfg: dict, cfg_scale: float, seed: int,
                     eval_per_class: int) -> dict[str, float]:
    """Decode every class and score pooled points against held-out pools."""
    d = cfg["decode"]
    pools = heldout_pools(model.cfg, eval_per_class, cfg["data"]["jitter"])
    agg = {"mmd": 0.0, "wsd": 0.0, "energy_u": 0.0, "energy_v": 0.0}
    n_total = 0
    for c in range(model.cfg.n_classes):
        dcfg = DecodeConfig(iterations=d["iterations"], cfg_scale=cfg_scale,
                            schedule=d["schedule"], seed=40_000 + 97 * seed + c,
                            guided=d["guided"])
        latents, _ = model.decode(c, eval_per_class, dcfg)
        gen = latents.reshape(-1, model.cfg.latent_dim)
        ref = pools[c]
        mmd2, _ = metrics.mmd_gaussian(gen, ref, cfg["metrics"]["bandwidth"])
        agg["mmd"] += mmd2
        agg["wsd"] += metrics.wasserstein_assignment(gen, ref)
        agg["energy_u"] += energy_statistic(gen, ref, EnergyEstimatorConfig(mode="u"))
        agg["energy_v"] += energy_statistic(gen, ref, EnergyEstimatorConfig(mode="v"))
        n_total += len(gen)
    out = {k: v / model.cfg.n_classes for k, v in agg.items()}
    out["n"] = n_total
    return out


def _sweep_cell_lambda(cfg: dict, seed: int, values: list[float],
                       cell_dir: str) -> list[dict]:
    out = Path(cell_dir)
    out.mkdir(parents=True, exist_ok=True)
    teacher, tlog = train_mar_model(cfg, role="teacher", seed=seed)
    teacher.save(out / "teacher.ckpt", config_digest=config_digest(cfg),
                 step=len(tlog), extra={"role": "teacher"})
    eval_n = cfg["sweep"]["eval_per_class"]
    rows = []
    for lam in values:
        sub = json.loads(json.dumps(cfg))
        sub["mar_train"]["lambda"] = lam
        student, slog = train_mar_model(sub, role="student", seed=seed,
                                        teacher=teacher if lam > 0 else None)
        tag = f"student_lambda{lam:g}"
        write_loss_csv(out / f"{tag}.loss.csv", slog)
        student.save(out / f"{tag}.ckpt", config_digest=config_digest(sub),
                     step=len(slog), extra={"role": "student", "lambda": lam,
                                            "m": student.cfg.m_samples})
        scores = decode_and_score(student, cfg, cfg["decode"]["cfg_scale"],
                                  seed, eval_n)
        rows.append({"param": "lambda", "value": lam, "seed": seed, **scores})
    return rows


def _sweep_cell_cfg(cfg: dict, seed: int, values: list[float],
                    cell_dir: str) -> list[dict]:
    out = Path(cell_dir)
    out.mkdir(parents=True, exist_ok=True)
    lam = cfg["mar_train"]["lambda"]
    teacher = None
    if lam > 0:
        teacher, _ = train_mar_model(cfg, role="teacher", seed=seed)
    student, slog = train_mar_model(cfg, role="student", seed=seed, teacher=teacher)
    student.save(out / "student.ckpt", config_digest=config_digest(cfg),
                 step=len(slog), extra={"role": "student", "lambda": lam})
    eval_n = cfg["sweep"]["eval_per_class"]
    rows = []
    for scale in values:
        scores = decode_and_score(student, cfg, scale, seed, eval_n)
        rows.append({"param": "cfg", "value": scale, "seed": seed, **scores})
    return rows


def _sweep_cell_m(cfg: dict, seed: int, values: list[int], cell_dir: str) -> list[dict]:
    out = Path(cell_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_n = cfg["sweep"]["eval_per_class"]
    rows = []
    for m in values:
        sub = json.loads(json.dumps(cfg))
        sub["mar"]["m"] = int(m)
        student, slog = train_mar_model(sub, role="student", seed=seed, m=int(m))
        student.save(out / f"student_m{m}.ckpt", config_digest=config_digest(sub),
                     step=len(slog), extra={"role": "student", "m": int(m),
                                            "lambda": 0.0})
        scores = decode_and_score(student, sub, sub["decode"]["cfg_scale"],
                                  seed, eval_n)
        rows.append({"param": "m", "value": int(m), "seed": seed, **scores})
    return rows


def _sweep_cell_wiring(cfg: dict, seed: int, values: list[str],
                       cell_dir: str) -> list[dict]:
    out = Path(cell_dir)
    out.mkdir(parents=True, exist_ok=True)
    eval_n = cfg["sweep"]["eval_per_class"]
    rows = []
    for wiring in values:
        sub = json.loads(json.dumps(cfg))
        sub["mar"]["wiring"] = wiring
        student, slog = train_mar_model(sub, role="student", seed=seed, wiring=wiring)
        student.save(out / f"student_{wiring}.ckpt", config_digest=config_digest(sub),
                     step=len(slog), extra={"role": "student", "wiring": wiring})
        scores = decode_and_score(student, sub, sub["decode"]["cfg_scale"],
                                  seed, eval_n)
        rows.append({"param": "wiring", "value": wiring, "seed": seed, **scores})
    return rows


SWEEP_CELLS = {"lambda": _sweep_cell_lambda, "cfg": _sweep_cell_cfg,
               "m": _sweep_cell_m, "wiring": _sweep_cell_wiring}


def run_sweep(cfg: dict, out_dir, param: str, values: list) -> Path:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"--param must be one of {SWEEP_PARAMS}, got {param!r}")
    if not values:
        raise ConfigError("--values must list at least one grid point")
    out = fresh_dir(out_dir)
    write_run_config(out, cfg)
    seeds = cfg["sweep"]["seeds"]
    fn = SWEEP_CELLS[param]
    jobs = [(cfg, seed, values, str(out / "cells" / f"seed{seed}")) for seed in seeds]
    per_seed = run_jobs(fn, jobs)

    cell_rows = [row for rows in per_seed for row in rows]
    cell_rows.sort(key=lambda r: (str(r["value"]), r["seed"]))
    with open(out / "sweep_cells.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "seed", "n", "mmd", "wsd",
                         "energy_u", "energy_v"])
        for r in cell_rows:
            writer.writerow([r["param"], r["value"], r["seed"], r["n"],
                             repr(r["mmd"]), repr(r["wsd"]),
                             repr(r["energy_u"]), repr(r["energy_v"])])

    seed_tag = "|".join(str(s) for s in seeds)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "seeds", "n", "mmd", "wsd",
                         "energy_u", "energy_v"])
        for value in values:
            rows = [r for r in cell_rows if r["value"] == value]
            writer.writerow([param, value, seed_tag, rows[0]["n"]] + [
                repr(float(np.mean([r[k] for r in rows])))
                for k in ("mmd", "wsd", "energy_u", "energy_v")])
    return out / "sweep.csv"

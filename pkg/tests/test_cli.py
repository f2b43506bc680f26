import json
from pathlib import Path

import numpy as np
import pytest

from escore import data
from escore.cli import main

TINY_HEAD = ["--set", "train.steps=8", "--set", "train.batch=16",
             "--set", "head.width=16", "--set", "head.depth=1",
             "--set", "data.pool=256"]

TINY_MAR = ["--set", "mar.hidden_dim=16", "--set", "mar.n_blocks=2",
            "--set", "mar.n_heads=2", "--set", "mar.head_width=16",
            "--set", "mar.head_depth=1", "--set", "mar_train.steps=5",
            "--set", "mar_train.batch=4", "--set", "data.per_class=8",
            "--set", "decode.iterations=4", "--set", "decode.n_seq=3"]


def test_train_head_run_dir(tmp_path):
    out = tmp_path / "run"
    rc = main(["train-head", "--method", "energy", "--dataset", "swissroll",
               "--seed", "7", "--out", str(out)] + TINY_HEAD)
    assert rc == 0
    assert (out / "head.ckpt").exists()
    assert (out / "config.json").exists()
    assert (out / "config.digest").exists()
    loss = (out / "loss.csv").read_text().splitlines()
    assert loss[0] == "step,energy,distill,total,lambda,lr,seed"
    assert len(loss) == 9   # header + 8 steps


def test_train_head_reruns_are_byte_identical(tmp_path):
    args = ["train-head", "--method", "flow", "--seed", "3"] + TINY_HEAD
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert (a / "head.ckpt").read_bytes() == (b / "head.ckpt").read_bytes()
    assert (a / "loss.csv").read_text() == (b / "loss.csv").read_text()
    assert (a / "config.digest").read_text() == (b / "config.digest").read_text()


def test_train_head_refuses_nonempty_out(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    rc = main(["train-head", "--method", "energy", "--out", str(out)] + TINY_HEAD)
    assert rc == 1


def test_unknown_method_is_usage_error(tmp_path, capsys):
    rc = main(["train-head", "--method", "sorcery", "--out", str(tmp_path / "r")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "--method" in err or "method" in err


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    rc = main(["train-head", "--method", "energy", "--out", str(tmp_path / "r"),
               "--set", "train.nope=3"])
    assert rc == 1
    assert "train.nope" in capsys.readouterr().err


def test_sample_counts_determinism_and_energy_steps_guard(tmp_path):
    out = tmp_path / "run"
    main(["train-head", "--method", "energy", "--seed", "1",
          "--out", str(out)] + TINY_HEAD)
    s1, s2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
    rc = main(["sample", "--run", str(out), "--steps", "1", "--n", "100",
               "--seed", "5", "--out", str(s1), "--svg", str(tmp_path / "p.svg")])
    assert rc == 0
    pts, _ = data.read_points_csv(s1)
    assert pts.shape == (100, 2)
    assert main(["sample", "--run", str(out), "--steps", "1", "--n", "100",
                 "--seed", "5", "--out", str(s2)]) == 0
    assert s1.read_bytes() == s2.read_bytes()
    assert (tmp_path / "p.svg").read_text().startswith("<svg")

    rc = main(["sample", "--run", str(out), "--steps", "4", "--n", "10",
               "--seed", "1", "--out", str(tmp_path / "s3.csv")])
    assert rc == 1


def test_eval_identity_and_schema(tmp_path):
    pts = data.gaussian_source(64, 2, seed=3).points
    gen = tmp_path / "gen.csv"
    data.write_points_csv(gen, pts)
    metrics_csv = tmp_path / "metrics.csv"
    rc = main(["eval", "--generated", str(gen), "--reference", str(gen),
               "--out", str(metrics_csv), "--method", "identity", "--steps", "1",
               "--seed", "3"])
    assert rc == 0
    lines = metrics_csv.read_text().splitlines()
    assert lines[0] == "method,steps,seed,n,mmd,wsd,energy_u,energy_v,bandwidth"
    fields = lines[1].split(",")
    assert fields[0] == "identity"
    assert abs(float(fields[4])) <= 1e-12   # mmd
    assert abs(float(fields[5])) <= 1e-12   # wsd
    # appending a second row must preserve the first
    rc = main(["eval", "--generated", str(gen), "--reference", str(gen),
               "--out", str(metrics_csv), "--method", "again", "--steps", "1",
               "--seed", "4"])
    assert rc == 0
    assert len(metrics_csv.read_text().splitlines()) == 3


def test_eval_malformed_csv_names_problem(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    good = tmp_path / "good.csv"
    data.write_points_csv(good, np.zeros((4, 2)))
    rc = main(["eval", "--generated", str(bad), "--reference", str(good),
               "--out", str(tmp_path / "m.csv")])
    assert rc == 1
    assert "x0" in capsys.readouterr().err


def test_eval_unknown_metric_name(tmp_path, capsys):
    good = tmp_path / "g.csv"
    data.write_points_csv(good, np.zeros((4, 2)))
    rc = main(["eval", "--generated", str(good), "--reference", str(good),
               "--out", str(tmp_path / "m.csv"), "--metrics", "mmd,frechet"])
    assert rc == 1
    assert "frechet" in capsys.readouterr().err


def test_train_mar_and_decode_roundtrip(tmp_path):
    run = tmp_path / "teacher"
    rc = main(["train-mar", "--role", "teacher", "--seed", "2",
               "--out", str(run)] + TINY_MAR)
    assert rc == 0
    ckpt = run / "mar.ckpt"
    assert ckpt.exists()

    dec = tmp_path / "dec"
    rc = main(["decode", "--ckpt", str(ckpt), "--class", "1", "--iterations", "4",
               "--cfg", "2.0", "--n", "3", "--seed", "9", "--out", str(dec)]
              + TINY_MAR)
    assert rc == 0
    seq, header = data.read_points_csv(dec / "sequences.csv")
    assert header == ["x0", "x1", "position"]
    assert seq.shape == (3 * 16, 2)
    stats = json.loads((dec / "decode_stats.json").read_text())
    assert stats["backbone_forwards"] == 8
    assert stats["head_rows"] == 3 * 16


def test_decode_scale_one_matches_no_guidance(tmp_path):
    run = tmp_path / "student"
    main(["train-mar", "--role", "student", "--seed", "4",
          "--out", str(run)] + TINY_MAR)
    ckpt = run / "mar.ckpt"
    a, b = tmp_path / "a", tmp_path / "b"
    main(["decode", "--ckpt", str(ckpt), "--class", "0", "--cfg", "1.0",
          "--n", "2", "--seed", "3", "--out", str(a)] + TINY_MAR)
    main(["decode", "--ckpt", str(ckpt), "--class", "0", "--cfg", "1.0",
          "--no-guidance", "--n", "2", "--seed", "3", "--out", str(b)] + TINY_MAR)
    assert (a / "sequences.csv").read_bytes() == (b / "sequences.csv").read_bytes()
    stats_a = json.loads((a / "decode_stats.json").read_text())
    stats_b = json.loads((b / "decode_stats.json").read_text())
    assert stats_a["backbone_forwards"] == 2 * stats_b["backbone_forwards"]


def test_student_lambda_requires_teacher(tmp_path, capsys):
    rc = main(["train-mar", "--role", "student", "--out", str(tmp_path / "s"),
               "--set", "mar_train.lambda=0.5"] + TINY_MAR)
    assert rc == 1
    assert "teacher" in capsys.readouterr().err


def test_sweep_m_grid_contract(tmp_path):
    out = tmp_path / "sweep"
    rc = main(["sweep", "--param", "m", "--values", "2,3", "--out", str(out),
               "--set", "sweep.seeds=[1]", "--set", "sweep.eval_per_class=4"]
              + TINY_MAR)
    assert rc == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0] == "param,value,seeds,n,mmd,wsd,energy_u,energy_v"
    assert len(rows) == 3
    assert all(row.split(",")[2] == "1" for row in rows[1:])
    from escore.nn import load_checkpoint
    man2, _ = load_checkpoint(out / "cells" / "seed1" / "student_m2.ckpt")
    man3, _ = load_checkpoint(out / "cells" / "seed1" / "student_m3.ckpt")
    assert man2["extra"]["mar_config"]["m_samples"] == 2
    assert man3["extra"]["mar_config"]["m_samples"] == 3


def test_sweep_unknown_param(tmp_path, capsys):
    rc = main(["sweep", "--param", "dropout", "--values", "1", "--out",
               str(tmp_path / "x")])
    assert rc == 1


def test_gradcheck_smoke(capsys):
    rc = main(["gradcheck", "--points", "2"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "all checks passed" in out
    assert "matmul" in out and "transformer-block" in out


def test_compare_swissroll_tiny(tmp_path):
    out = tmp_path / "cmp"
    rc = main(["compare-swissroll", "--out", str(out),
               "--set", "compare.seeds=[1]",
               "--set", 'compare.steps_by_method={"energy":6,"diffusion":6,'
                        '"flow":6,"shortcut":6,"meanflow":6}',
               "--set", "compare.sample_n=64",
               "--set", "compare.multi_steps=[4,100]",
               "--set", "head.width=16", "--set", "head.depth=1",
               "--set", "train.batch=16", "--set", "data.pool=256"])
    assert rc == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) - 1 == 9   # 5 one-step + diffusion/flow at 4 and 100 steps
    assert (out / "swissroll_seed1.svg").exists()
    methods = {line.split(",")[0] for line in lines[1:]}
    assert methods == {"energy", "diffusion", "flow", "shortcut", "meanflow"}

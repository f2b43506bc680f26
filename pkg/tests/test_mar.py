import numpy as np
import pytest

from escore import mar
from escore.mar import (ContextualRepresentation, DecodeConfig, MarConfig, MarModel,
                        apply_mask, cfg_combine, distillation_loss, one_hot_classes)
from escore.rng import Stream

TINY = MarConfig(seq_len=8, hidden_dim=16, n_blocks=2, n_heads=2,
                 head_width=16, head_depth=1)


def test_apply_mask_counts():
    latents = np.zeros((16, 2))
    _, pattern = apply_mask(latents, (0.75, 0.75), Stream.from_seed(0, "m"))
    assert pattern.masked.sum() == 12
    _, pattern = apply_mask(latents, (0.999, 1.0), Stream.from_seed(1, "m"))
    assert pattern.masked.sum() == 16


def test_apply_mask_deterministic_and_zeroes_masked():
    latents = Stream.from_seed(2, "x").normal((16, 2))
    v1, p1 = apply_mask(latents, (0.7, 1.0), Stream.from_seed(3, "m"))
    v2, p2 = apply_mask(latents, (0.7, 1.0), Stream.from_seed(3, "m"))
    assert np.array_equal(p1.masked, p2.masked)
    assert np.array_equal(v1, v2)
    assert np.all(v1[p1.masked] == 0.0)
    assert np.array_equal(v1[~p1.masked], latents[~p1.masked])


def test_apply_mask_bad_range():
    with pytest.raises(ValueError):
        apply_mask(np.zeros((4, 2)), (0.0, 0.5), Stream.from_seed(0, "m"))


def test_cfg_combine_identities_and_arithmetic():
    a = ContextualRepresentation(Stream.from_seed(0, "a").normal((4, 3)), "student", 1)
    b = ContextualRepresentation(Stream.from_seed(0, "b").normal((4, 3)), "student", None)
    assert np.array_equal(cfg_combine(a, b, 1.0).h, a.h)
    assert np.array_equal(cfg_combine(a, b, 0.0).h, b.h)
    c = cfg_combine(ContextualRepresentation(np.array([[1.0, 0.0]]), "student", 0),
                    ContextualRepresentation(np.array([[0.0, 1.0]]), "student", None),
                    4.0)
    assert np.allclose(c.h, [[4.0, -3.0]], atol=1e-15)


def test_cfg_combine_mismatch_errors():
    a = ContextualRepresentation(np.zeros((2, 3)), "student", 0)
    b = ContextualRepresentation(np.zeros((3, 3)), "student", None)
    with pytest.raises(ValueError):
        cfg_combine(a, b, 2.0)
    c = ContextualRepresentation(np.zeros((2, 3)), "teacher", None)
    with pytest.raises(ValueError):
        cfg_combine(a, c, 2.0)


def test_distillation_loss_values():
    h = Stream.from_seed(1, "h").normal((5, 4))
    assert distillation_loss(h, h.copy()) == 0.0
    assert distillation_loss(np.array([[3.0]]), np.array([[1.0]])) == 4.0
    hs = np.array([[1.0, 0.0], [0.0, 0.0]])
    ht = np.array([[0.0, 0.0], [0.0, 2.0]])
    assert distillation_loss(hs, ht) == pytest.approx(2.5, abs=1e-15)
    with pytest.raises(ValueError):
        distillation_loss(np.zeros((2, 2)), np.zeros((3, 2)))


def test_one_hot_classes_with_null():
    oh = one_hot_classes(np.array([0, 2, mar.NULL_CLASS]), 3)
    assert oh.shape == (3, 4)
    assert oh[0].tolist() == [1, 0, 0, 0]
    assert oh[1].tolist() == [0, 0, 1, 0]
    assert oh[2].tolist() == [0, 0, 0, 1]
    with pytest.raises(ValueError):
        one_hot_classes(np.array([3]), 3)


def _batch(model, n, seed=0):
    latents, ids = mar.class_pools(model.cfg, seed, per_class=max(2, n))
    return latents[:n], ids[:n]


def test_backbone_representation_contract():
    model = MarModel(TINY, seed=1)
    latents, _ = _batch(model, 3)
    masked = np.zeros((3, TINY.seq_len), dtype=bool)
    masked[:, :4] = True
    null_ids = np.full(3, mar.NULL_CLASS)
    rep1 = model.represent(latents, masked, null_ids)
    rep2 = model.represent(latents, masked, null_ids)
    assert rep1.h.shape == (3, TINY.seq_len, TINY.hidden_dim)
    assert np.array_equal(rep1.h, rep2.h)
    rep_cls = model.represent(latents, masked, np.full(3, 1))
    assert not np.allclose(rep1.h, rep_cls.h)


def test_masked_latents_do_not_leak_into_representation():
    model = MarModel(TINY, seed=2)
    latents, ids = _batch(model, 2)
    masked = np.zeros((2, TINY.seq_len), dtype=bool)
    masked[:, 1::2] = True
    rep_a = model.represent(latents, masked, ids)
    corrupted = latents.copy()
    corrupted[:, 1::2] = 123.0
    rep_b = model.represent(corrupted, masked, ids)
    assert np.array_equal(rep_a.h, rep_b.h)


def test_training_step_breakdown_identities():
    student = MarModel(TINY, seed=3)
    teacher = MarModel(MarConfig(**{**TINY.__dict__, "head_kind": "diffusion"}), seed=4)
    latents, ids = _batch(student, 4)
    rng = Stream.from_seed(5, "step")
    out = student.masked_training_step(latents, ids, rng, update=False)
    assert out.distill == 0.0 and out.total == out.energy

    out2 = student.masked_training_step(latents, ids, rng, lam=0.5,
                                        teacher=teacher, update=False)
    assert out2.total == pytest.approx(out2.energy + 0.5 * out2.distill, abs=1e-12)
    assert out2.distill > 0.0

    # self-distillation: teacher sharing the student's backbone weights
    twin = MarModel(TINY, seed=3)
    out3 = student.masked_training_step(latents, ids, rng, lam=1.0,
                                        teacher=twin, update=False)
    assert out3.distill == pytest.approx(0.0, abs=1e-20)


def test_lambda_without_teacher_rejected():
    model = MarModel(TINY, seed=0)
    latents, ids = _batch(model, 2)
    with pytest.raises(ValueError):
        model.masked_training_step(latents, ids, Stream.from_seed(0, "s"), lam=1.0)


def test_energy_term_ignores_head_outputs_at_unmasked_positions():
    model = MarModel(TINY, seed=6)
    latents, ids = _batch(model, 3)
    rng = Stream.from_seed(7, "step")
    seen = {}

    def capture(bindings):
        seen.update(bindings)
        return bindings

    base = model.masked_training_step(latents, ids, rng, update=False,
                                      bindings_hook=capture)

    def perturb(bindings):
        weight = seen["weight"]
        for key in ("n0", "n1"):
            noise = seen[key].copy()
            noise[weight == 0.0] += 7.5   # changes head output only there
            bindings[key] = noise
        bindings["mask"] = seen["mask"]
        bindings["latents"] = seen["latents"]
        bindings["onehot"] = seen["onehot"]
        bindings["weight"] = seen["weight"]
        bindings["weight_inv"] = seen["weight_inv"]
        return bindings

    rng2 = Stream.from_seed(7, "step")
    perturbed = model.masked_training_step(latents, ids, rng2, update=False,
                                           bindings_hook=perturb)
    assert perturbed.energy == base.energy


def test_teacher_parameters_frozen_during_student_training():
    student = MarModel(TINY, seed=8)
    teacher = MarModel(MarConfig(**{**TINY.__dict__, "head_kind": "diffusion"}), seed=9)
    before = {k: p.value.copy() for k, p in teacher.params.items()}
    latents, ids = _batch(student, 4)
    for t in range(1, 4):
        student.masked_training_step(latents, ids, Stream.from_seed(t, "s"),
                                     lam=0.3, teacher=teacher, lr=1e-3, step_index=t)
    for k, p in teacher.params.items():
        assert np.array_equal(before[k], p.value)


def test_frozen_backbone_only_updates_head():
    model = MarModel(TINY, seed=10)
    latents, ids = _batch(model, 4)
    before = {k: p.value.copy() for k, p in model.params.items()}
    model.masked_training_step(latents, ids, Stream.from_seed(0, "s"),
                               lr=1e-2, frozen_backbone=True)
    for k, p in model.params.items():
        if k.startswith("backbone."):
            assert np.array_equal(before[k], p.value), k
    assert any(not np.array_equal(before[k], p.value)
               for k, p in model.params.items() if k.startswith("head."))


def test_decode_contracts():
    model = MarModel(TINY, seed=11)
    for iters, schedule in [(1, "cosine"), (4, "cosine"), (8, "uniform")]:
        dcfg = DecodeConfig(iterations=iters, cfg_scale=2.0, schedule=schedule, seed=3)
        out, stats = model.decode(1, 3, dcfg)
        assert out.shape == (3, TINY.seq_len, 2)
        assert sum(stats["per_iteration"]) == TINY.seq_len
        assert all(c >= 1 for c in stats["per_iteration"])
        assert stats["backbone_forwards"] == 2 * iters
        assert stats["head_rows"] == 3 * TINY.seq_len
    with pytest.raises(ValueError):
        model.decode(0, 1, DecodeConfig(iterations=TINY.seq_len + 1))


def test_decode_unguided_counts_single_backbone_pass():
    model = MarModel(TINY, seed=11)
    dcfg = DecodeConfig(iterations=4, guided=False, seed=5)
    _, stats = model.decode(2, 2, dcfg)
    assert stats["backbone_forwards"] == 4


def test_decode_deterministic():
    model = MarModel(TINY, seed=12)
    dcfg = DecodeConfig(iterations=4, cfg_scale=3.0, seed=9)
    a, _ = model.decode(2, 4, dcfg)
    b, _ = model.decode(2, 4, dcfg)
    assert np.array_equal(a, b)


def test_decode_scale_one_equals_unguided_bitwise():
    model = MarModel(TINY, seed=13)
    guided, _ = model.decode(1, 3, DecodeConfig(iterations=4, cfg_scale=1.0, seed=2))
    plain, _ = model.decode(1, 3, DecodeConfig(iterations=4, cfg_scale=1.0, seed=2,
                                               guided=False))
    assert np.array_equal(guided, plain)


def test_train_mar_smoke_and_log_schema():
    model = MarModel(TINY, seed=14)
    log = mar.train_mar(model, steps=5, batch=4, per_class=8)
    assert len(log) == 5
    assert list(log[0]) == ["step", "energy", "distill", "total", "lambda", "lr", "seed"]
    assert all(np.isfinite(row["total"]) for row in log)
    assert log[0]["step"] == 1 and log[-1]["step"] == 5


def test_mar_checkpoint_roundtrip(tmp_path):
    model = MarModel(TINY, seed=15)
    latents, ids = _batch(model, 4)
    model.masked_training_step(latents, ids, Stream.from_seed(0, "s"), lr=1e-3)
    path = tmp_path / "mar.ckpt"
    model.save(path, config_digest="d1", step=1, extra={"lambda": 2.0})
    back = MarModel.load(path)
    assert back.cfg == model.cfg
    for name, p in model.params.items():
        assert np.array_equal(back.params[name].value, p.value)
    manifest, _ = __import__("escore.nn", fromlist=["nn"]).load_checkpoint(path)
    assert manifest["extra"]["lambda"] == 2.0

import numpy as np
import pytest

from escore import data


def test_swiss_roll_clean_points_lie_on_curve():
    batch = data.swiss_roll(500, noise_sigma=0.0, seed=3)
    pts = batch.points
    radius = np.linalg.norm(pts, axis=1)
    t = radius * data.SWISS_ROLL_SCALE
    assert np.all(t >= data.SWISS_ROLL_T_MIN - 1e-9)
    assert np.all(t <= data.SWISS_ROLL_T_MAX + 1e-9)
    curve = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / data.SWISS_ROLL_SCALE
    assert np.max(np.abs(curve - pts)) <= 1e-12


def test_swiss_roll_deterministic():
    a = data.swiss_roll(64, 0.03, seed=9)
    b = data.swiss_roll(64, 0.03, seed=9)
    assert np.array_equal(a.points, b.points)


def test_swiss_roll_mean_matches_quadrature_oracle():
    # E[point] over t ~ U[t0, t1] of (t cos t, t sin t)/s via dense trapezoid rule
    t = np.linspace(data.SWISS_ROLL_T_MIN, data.SWISS_ROLL_T_MAX, 200_001)
    fx = t * np.cos(t) / data.SWISS_ROLL_SCALE
    fy = t * np.sin(t) / data.SWISS_ROLL_SCALE
    width = data.SWISS_ROLL_T_MAX - data.SWISS_ROLL_T_MIN
    oracle = np.array([np.trapezoid(fx, t), np.trapezoid(fy, t)]) / width
    batch = data.swiss_roll(5000, noise_sigma=0.01, seed=1)
    assert np.all(np.abs(batch.points.mean(axis=0) - oracle) < 0.05)


def test_swiss_roll_fits_unit_square():
    pts = data.swiss_roll(2000, noise_sigma=0.0, seed=2).points
    assert np.all(np.abs(pts) <= 1.0 + 1e-12)


def test_gaussian_source_reproducible_and_separated():
    a = data.gaussian_source(10, 2, seed=5, label="noise1")
    b = data.gaussian_source(10, 2, seed=5, label="noise1")
    c = data.gaussian_source(10, 2, seed=5, label="noise2")
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)


def test_gaussian_source_moments():
    pts = data.gaussian_source(100_000, 2, seed=11).points
    assert np.all(np.abs(pts.mean(axis=0)) < 0.02)
    assert np.all(np.abs(pts.var(axis=0) - 1.0) < 0.03)


def test_conditional_sequences_circle_radius():
    samples = data.conditional_sequences(1, count=8, length=16, seed=4, jitter=0.0)
    for s in samples:
        assert np.max(np.abs(np.linalg.norm(s.latents, axis=1) - data.CIRCLE_RADIUS)) <= 1e-12


def test_conditional_sequences_shape_and_determinism():
    a = data.conditional_sequences(0, count=3, length=16, seed=7)
    b = data.conditional_sequences(0, count=3, length=16, seed=7)
    assert all(s.latents.shape == (16, 2) for s in a)
    for x, y in zip(a, b):
        assert np.array_equal(x.latents, y.latents)
        assert x.class_id == 0


def test_conditional_sequences_unknown_class():
    with pytest.raises(ValueError):
        data.conditional_sequences(data.N_CLASSES, count=1, length=8, seed=0)


def test_stack_sequences_null_sentinel():
    samples = data.conditional_sequences(2, count=2, length=8, seed=0)
    samples.append(data.ConditionalSequenceSample(np.zeros((8, 2)), None))
    latents, ids = data.stack_sequences(samples)
    assert latents.shape == (3, 8, 2)
    assert ids.tolist() == [2, 2, -1]


def test_csv_roundtrip_17_digits(tmp_path):
    pts = data.gaussian_source(50, 3, seed=1).points
    path = tmp_path / "pts.csv"
    data.write_points_csv(path, pts)
    text = path.read_text().splitlines()
    assert text[0] == "x0,x1,x2"
    back, header = data.read_points_csv(path)
    assert header == ["x0", "x1", "x2"]
    assert np.array_equal(back, pts)   # 17 significant digits round-trip exactly


def test_csv_extra_columns(tmp_path):
    pts = np.zeros((4, 2))
    path = tmp_path / "seq.csv"
    data.write_points_csv(path, pts, extra={"position": np.arange(4)})
    back, header = data.read_points_csv(path)
    assert header == ["x0", "x1", "position"]
    assert back.shape == (4, 2)


def test_csv_malformed_reports(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x0,x1\n1.0,2.0\n3.0,oops\n")
    with pytest.raises(ValueError):
        data.read_points_csv(path)

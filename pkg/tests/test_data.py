import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spfm.data import (
    GeneratorParams,
    corrupt_labels,
    gen_spiral,
    gen_two_circles,
    generate,
    generator_draws,
    import_csv,
    load_dataset,
    polar_to_euclidean,
    save_dataset,
)
from spfm.errors import InputError

SIGMA = GeneratorParams().jitter


@pytest.mark.parametrize("cond,expected", [
    ((0.0, 1.0), (1.0, 0.0)),
    ((math.pi / 2, 2.0), (0.0, 2.0)),
    ((math.pi, 1.0), (-1.0, 0.0)),
    ((1.3, 0.0), (0.0, 0.0)),
])
def test_polar_examples(cond, expected):
    np.testing.assert_allclose(polar_to_euclidean(cond), expected, atol=1e-15)


def test_polar_errors():
    with pytest.raises(InputError):
        polar_to_euclidean((0.0, -1.0))
    with pytest.raises(InputError):
        polar_to_euclidean([1.0, 2.0, 3.0])


@given(st.floats(0, 2 * math.pi), st.floats(0, 10))
def test_polar_norm_is_radius(theta, r):
    assert np.linalg.norm(polar_to_euclidean((theta, r))) == pytest.approx(r, rel=1e-12, abs=1e-12)


def test_two_circles_ring_bound():
    ds = gen_two_circles(1000, 1)
    norm = np.linalg.norm(ds.x1, axis=1)
    dist = np.minimum(abs(norm - 1.0), abs(norm - 2.0))
    assert np.mean(dist <= 4 * SIGMA) >= 0.99
    err = np.linalg.norm(ds.x1 - polar_to_euclidean(ds.conditions), axis=1)
    assert np.mean(err <= 4 * SIGMA) >= 0.99
    assert set(np.unique(ds.radius)) == {1.0, 2.0}
    assert np.all((ds.angle >= 0) & (ds.angle < 2 * math.pi))
    assert ds.n_corrupted == 0


def test_two_circles_jitter_is_exact():
    ds = gen_two_circles(50, 4)
    _, z = generator_draws("two_circles", 50, 4)
    np.testing.assert_allclose(ds.x1 - polar_to_euclidean(ds.conditions), SIGMA * z, atol=1e-12)


def test_spiral_linear_radius():
    ds = gen_spiral(1000, 2)
    u, _ = generator_draws("spiral", 1000, 2)
    assert np.corrcoef(u[:, 0], ds.radius)[0, 1] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(ds.radius, 0.5 + 2.0 * u[:, 0], rtol=1e-15)
    np.testing.assert_allclose(ds.angle, np.mod(4 * math.pi * u[:, 0], 2 * math.pi), atol=1e-12)
    err = np.linalg.norm(ds.x1 - polar_to_euclidean(ds.conditions), axis=1)
    assert np.mean(err <= 4 * SIGMA) >= 0.99


@pytest.mark.parametrize("name", ["two_circles", "spiral"])
def test_generators_deterministic(name):
    assert generate(name, 300, 9).equals(generate(name, 300, 9))
    assert not generate(name, 300, 9).equals(generate(name, 300, 10))


def test_generator_errors():
    with pytest.raises(InputError):
        gen_two_circles(0, 1)
    with pytest.raises(InputError):
        gen_spiral(0, 1)
    with pytest.raises(InputError):
        generate("moons", 10, 1)


def test_generator_prefix_stable():
    # per-sample draws are keyed by index, so a larger n extends a smaller one
    a, b = gen_spiral(100, 5), gen_spiral(300, 5)
    assert np.array_equal(a.x1, b.x1[:100])


# -- corruption ---------------------------------------------------------------

def test_corrupt_rate_zero():
    ds = gen_two_circles(200, 1)
    out = corrupt_labels(ds, 0.0, 3)
    assert out.n_corrupted == 0
    assert np.array_equal(out.conditions, ds.conditions)


def test_corrupt_forty_percent():
    ds = corrupt_labels(gen_two_circles(10_000, 1), 0.4, 7)
    assert ds.n_corrupted == 4000
    assert ds.corruption_rate == 0.4


def test_corrupt_rate_one_pair():
    ds = gen_spiral(2, 1)
    out = corrupt_labels(ds, 1.0, 1)
    assert out.corrupted.all()
    np.testing.assert_array_equal(out.conditions, ds.conditions[::-1])


def test_corrupt_uniform_mode():
    ds = gen_two_circles(500, 1)
    out = corrupt_labels(ds, 0.5, 2, mode="uniform")
    assert out.n_corrupted == 250
    assert out.radius.min() >= 1.0 and out.radius.max() <= 2.0
    assert out.corruption_mode == "uniform"


def test_corrupt_errors():
    ds = gen_two_circles(10, 1)
    for rate in (-0.1, 1.1):
        with pytest.raises(InputError):
            corrupt_labels(ds, rate, 0)
    with pytest.raises(InputError):
        corrupt_labels(ds, 0.5, 0, mode="shuffle")
    with pytest.raises(InputError):
        corrupt_labels(gen_two_circles(1, 1), 1.0, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 400), st.floats(0, 1), st.integers(0, 2**31), st.sampled_from(["swap", "uniform"]))
def test_corruption_invariants(n, rate, seed, mode):
    ds = gen_two_circles(n, 3)
    out = corrupt_labels(ds, rate, seed, mode)
    assert out.n_corrupted == math.floor(rate * n + 0.5)
    assert out.corruption_rate == out.n_corrupted / n
    assert out.x1.tobytes() == ds.x1.tobytes()
    clean = ~out.corrupted
    assert np.array_equal(out.angle[clean], out.orig_angle[clean])
    assert np.array_equal(out.radius[clean], out.orig_radius[clean])
    assert np.array_equal(out.orig_angle, ds.angle)


def test_swap_never_picks_self():
    ds = gen_spiral(50, 1)
    out = corrupt_labels(ds, 1.0, 11)
    # spiral conditions are distinct per sample, so a self-swap would leave a row unchanged
    assert not np.any(np.all(out.conditions == ds.conditions, axis=1))


# -- serialisation ------------------------------------------------------------

@pytest.mark.parametrize("suffix", [".txt", ".bin"])
def test_round_trip(tmp_path, suffix):
    ds = corrupt_labels(gen_spiral(257, 8, GeneratorParams(turns=3.0, jitter=0.05)), 0.3, 4)
    path = tmp_path / f"d{suffix}"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.equals(ds)
    assert back.params == ds.params


def test_text_header(tmp_path):
    save_dataset(tmp_path / "d.txt", gen_two_circles(3, 1))
    lines = (tmp_path / "d.txt").read_text().splitlines()
    assert lines[0].startswith("# spfm-dataset v1 name=two_circles n=3 seed=1")
    assert len(lines) == 4 and all(len(l.split(",")) == 7 for l in lines[1:])


def test_load_errors(tmp_path):
    (tmp_path / "bad.txt").write_text("x,y\n1,2\n")
    with pytest.raises(InputError):
        load_dataset(tmp_path / "bad.txt")
    ds = gen_two_circles(10, 1)
    save_dataset(tmp_path / "d.bin", ds)
    raw = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-3])
    with pytest.raises(InputError, match="truncated"):
        load_dataset(tmp_path / "t.bin")
    (tmp_path / "v.bin").write_bytes(raw[:8] + b"\x09" + raw[9:])
    with pytest.raises(InputError, match="version"):
        load_dataset(tmp_path / "v.bin")


def test_import_csv(tmp_path):
    p = tmp_path / "ext.csv"
    p.write_text("x1_x,x1_y,angle,radius\n1.0,0.0,0.0,1.0\n0.0,2.0,7.0,2.0\n")
    ds = import_csv(p, name="ext")
    assert len(ds) == 2 and ds.n_corrupted == 0
    assert ds.angle[1] == pytest.approx(7.0 - 2 * math.pi)
    assert np.array_equal(ds.orig_radius, ds.radius)
    (tmp_path / "m.csv").write_text("x1_x,angle,radius\n1,0,1\n")
    with pytest.raises(InputError, match="missing"):
        import_csv(tmp_path / "m.csv")
    (tmp_path / "n.csv").write_text("x1_x,x1_y,angle,radius\n1,0,0,-1\n")
    with pytest.raises(InputError):
        import_csv(tmp_path / "n.csv")


def test_sample_view():
    ds = corrupt_labels(gen_two_circles(20, 1), 0.5, 1)
    i = int(np.flatnonzero(ds.corrupted)[0])
    s = ds[i]
    assert s.corrupted and s.original_condition == (ds.orig_angle[i], ds.orig_radius[i])

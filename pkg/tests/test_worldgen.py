import numpy as np
import pytest

from lace.errors import CapabilityError, DataError
from lace.worldgen import (
    AttributeSpec,
    Continuous,
    Dataset,
    Discrete,
    Generator,
    benchmark_spec,
    benchmark_truth,
    benchmark_world,
    export_dataset_csv,
    filter_holdout,
    generator_apply,
    generator_vjp,
    make_generator,
    space_apply,
    space_dim,
    space_vjp,
    synthesize_pairs,
    validate_code,
)


# ==== attribute spec / codes ====


def test_spec_rejects_duplicates_and_small_cardinality():
    with pytest.raises(ValueError):
        AttributeSpec((Discrete("a", 2), Discrete("a", 3)))
    with pytest.raises(ValueError):
        AttributeSpec((Discrete("a", 1),))
    with pytest.raises(ValueError):
        AttributeSpec(())


def test_validate_code_domains():
    spec = benchmark_spec()
    validate_code(spec, {"attr0": 1, "attr1": 3, "attr2": 0.25})
    validate_code(spec, {})  # fully unconditioned is fine
    with pytest.raises(DataError):
        validate_code(spec, {"attr0": 2})
    with pytest.raises(DataError):
        validate_code(spec, {"attr1": -1})
    with pytest.raises(DataError):
        validate_code(spec, {"attr2": 1.5})
    with pytest.raises(ValueError):
        validate_code(spec, {"nope": 0})


# ==== generators ====


def test_identity_generator():
    g = make_generator("identity", 2)
    z = np.array([[1.0, -1.0], [0.5, 2.0]])
    np.testing.assert_array_equal(generator_apply(g, z), z)
    cot = np.array([[3.0, 4.0], [1.0, 0.0]])
    np.testing.assert_array_equal(generator_vjp(g, z, cot), cot)


def test_linear_scaling_case():
    g = Generator("linear", 2, 2, A=2.0 * np.eye(2), b=np.zeros(2))
    out = generator_apply(g, np.array([[1.0, -1.0]]))
    np.testing.assert_allclose(out, [[2.0, -2.0]], atol=0)


def test_linear_vjp_is_A_transpose():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 2))
    g = Generator("linear", 2, 3, A=A, b=rng.normal(size=3))
    z = rng.normal(size=(5, 2))
    cot = rng.normal(size=(5, 3))
    np.testing.assert_allclose(generator_vjp(g, z, cot), cot @ A, atol=1e-12)


def test_linear_seed11_well_conditioned():
    g = make_generator("linear", (2, 2), seed=11)
    assert np.linalg.cond(g.A) < 10.0


def test_linear_construction_always_well_conditioned():
    for seed in range(20):
        for dims in [(2, 2), (8, 8)]:
            g = make_generator("linear", dims, seed)
            assert np.linalg.cond(g.A) < 10.0


def test_small_mlp_vjp_matches_finite_differences():
    g = make_generator("small_mlp", (2, 2), seed=5)
    rng = np.random.default_rng(1)
    z = rng.normal(size=(4, 2))
    cot = rng.normal(size=(4, 2))
    gz = generator_vjp(g, z, cot)
    h = 1e-5
    for i in range(4):
        for k in range(2):
            zp, zm = z.copy(), z.copy()
            zp[i, k] += h
            zm[i, k] -= h
            fd = (
                np.sum(cot * generator_apply(g, zp)) - np.sum(cot * generator_apply(g, zm))
            ) / (2 * h)
            assert gz[i, k] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_make_generator_rejects_bad_args():
    with pytest.raises(ValueError):
        make_generator("conv", 2)
    with pytest.raises(ValueError):
        make_generator("identity", (2, 3))
    with pytest.raises(ValueError):
        make_generator("linear", (0, 2))
    with pytest.raises(ValueError):
        generator_apply(make_generator("identity", 2), np.zeros((3, 5)))


# ==== input spaces ====


def test_space_dims():
    gi = make_generator("identity", 2)
    gm = make_generator("small_mlp", (2, 2), seed=3)
    assert space_dim(gi, "latent") == 2
    assert space_dim(gi, "data") == 2
    assert space_dim(gm, "intermediate") == 16
    with pytest.raises(CapabilityError):
        space_dim(gi, "intermediate")
    with pytest.raises(ValueError):
        space_dim(gi, "pixel")


def test_space_apply_latent_and_data():
    g = make_generator("linear", (2, 2), seed=1)
    z = np.random.default_rng(2).normal(size=(6, 2))
    np.testing.assert_array_equal(space_apply(g, z, "latent"), z)
    np.testing.assert_array_equal(space_apply(g, z, "data"), generator_apply(g, z))


def test_space_vjp_intermediate_matches_fd():
    g = make_generator("small_mlp", (2, 2), seed=9)
    rng = np.random.default_rng(3)
    z = rng.normal(size=(3, 2))
    cot = rng.normal(size=(3, 16))
    gz = space_vjp(g, z, cot, "intermediate")
    h = 1e-5
    for i in range(3):
        for k in range(2):
            zp, zm = z.copy(), z.copy()
            zp[i, k] += h
            zm[i, k] -= h
            fd = (
                np.sum(cot * space_apply(g, zp, "intermediate"))
                - np.sum(cot * space_apply(g, zm, "intermediate"))
            ) / (2 * h)
            assert gz[i, k] == pytest.approx(fd, rel=1e-5, abs=1e-8)


# ==== synthesis ====


def test_synthesize_rejects_nonpositive_count():
    g, spec, truth = benchmark_world()
    with pytest.raises(ValueError):
        synthesize_pairs(g, truth, 0, seed=0)


def test_synthesize_deterministic():
    g, spec, truth = benchmark_world()
    a = synthesize_pairs(g, truth, 5000, seed=4)
    b = synthesize_pairs(g, truth, 5000, seed=4)
    assert np.array_equal(a.z, b.z)
    assert np.array_equal(a.x, b.x)
    for k in a.labels:
        assert np.array_equal(a.labels[k], b.labels[k])
    c = synthesize_pairs(g, truth, 5000, seed=5)
    assert not np.array_equal(a.z, c.z)


def test_synthesized_prior_moments():
    g, _, truth = benchmark_world()
    ds = synthesize_pairs(g, truth, 100_000, seed=0)
    mean = ds.z.mean(axis=0)
    cov = np.cov(ds.z.T)
    assert np.max(np.abs(mean)) < 0.02
    assert np.max(np.abs(cov - np.eye(2))) < 0.03


def test_half_space_category_fraction():
    g, _, truth = benchmark_world()
    ds = synthesize_pairs(g, truth, 100_000, seed=1)
    frac = float(np.mean(ds.labels["attr0"] == 1))
    assert abs(frac - 0.5) < 0.01


def test_quadrant_categories_balanced():
    g, _, truth = benchmark_world()
    ds = synthesize_pairs(g, truth, 100_000, seed=2)
    for cat in range(4):
        frac = float(np.mean(ds.labels["attr1"] == cat))
        assert abs(frac - 0.25) < 0.01


def test_labels_batch_order_independent():
    g, _, truth = benchmark_world()
    ds = synthesize_pairs(g, truth, 1000, seed=3)
    perm = np.random.default_rng(0).permutation(1000)
    again = truth.labels(ds.x[perm])
    for name in ds.labels:
        assert np.array_equal(again[name], ds.labels[name][perm])


def test_continuous_labels_in_unit_interval():
    g, _, truth = benchmark_world()
    ds = synthesize_pairs(g, truth, 10_000, seed=6)
    a2 = ds.labels["attr2"]
    assert np.all((a2 > 0.0) & (a2 < 1.0))


def test_label_noise_flips_some_discrete_labels():
    g, spec, truth = benchmark_world()
    clean = synthesize_pairs(g, truth, 20_000, seed=7)
    noisy = synthesize_pairs(g, truth, 20_000, seed=7, spec=spec, label_noise=0.05)
    flip_rate = float(np.mean(clean.labels["attr0"] != noisy.labels["attr0"]))
    assert 0.03 < flip_rate < 0.07
    assert np.all((noisy.labels["attr2"] >= 0.0) & (noisy.labels["attr2"] <= 1.0))


def test_filter_holdout_removes_only_full_combination():
    g, _, truth = benchmark_world()
    ds = synthesize_pairs(g, truth, 50_000, seed=8)
    held = filter_holdout(ds, {"attr0": 1, "attr1": 3})
    both = (held.labels["attr0"] == 1) & (held.labels["attr1"] == 3)
    assert not np.any(both)
    # rows matching only one half of the combination survive
    assert np.any(held.labels["attr0"] == 1)
    assert np.any(held.labels["attr1"] == 3)
    # the held-out cell has positive mass in the raw draw (about 1/8)
    raw = (ds.labels["attr0"] == 1) & (ds.labels["attr1"] == 3)
    assert abs(float(np.mean(raw)) - 0.125) < 0.01


def test_csv_export_deterministic(tmp_path):
    g, _, truth = benchmark_world()
    ds = synthesize_pairs(g, truth, 100, seed=9)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    export_dataset_csv(ds, str(p1))
    export_dataset_csv(ds, str(p2))
    b1, b2 = p1.read_bytes(), p2.read_bytes()
    assert b1 == b2
    header = b1.decode().splitlines()[0]
    assert header == "z_0,z_1,x_0,x_1,attr0,attr1,attr2"


def test_benchmark_rule_geometry():
    # attr1 quadrants sit diagonal to attr0's boundary: the cell
    # (attr0=1, attr1=q) is non-empty for every q
    truth = benchmark_truth(2)
    x = np.array(
        [
            [1.0, 0.2],  # right, near +x axis
            [1.0, -0.2],
            [0.3, 1.0],  # upper wedge
            [0.3, -1.0],
        ]
    )
    labs = truth.labels(x)
    assert np.all(labs["attr0"] == 1)
    assert len(set(labs["attr1"].tolist())) >= 3


def test_dataset_len():
    ds = Dataset(np.zeros((7, 2)), np.zeros((7, 2)), {"a": np.zeros(7)})
    assert len(ds) == 7

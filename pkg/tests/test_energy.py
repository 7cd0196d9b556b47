import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lace.classifier import build_model
from lace.energy import (
    BETA_DEFAULT,
    And,
    EditState,
    Leaf,
    Not,
    Or,
    and_of_code,
    cond_energy_continuous,
    cond_energy_discrete,
    energy_grad_z,
    eval_expr,
    expr_energy_fn,
    format_expr,
    joint_energy,
    parse_expr,
    seq_edit_energy,
    seq_edit_grad_z,
    validate_expr,
)
from lace.errors import ConfigError, DataError
from lace.worldgen import (
    AttributeSpec,
    Continuous,
    Discrete,
    benchmark_spec,
    make_generator,
)


# ==== conditional energies (frozen scalar oracles) ====


def test_cond_discrete_uniform_logits():
    assert cond_energy_discrete(np.array([0.0, 0.0]), 0) == pytest.approx(np.log(2), abs=1e-15)


def test_cond_discrete_frozen_t1():
    # -1 + log(e + 1), evaluated independently in extended precision
    assert cond_energy_discrete(np.array([1.0, 0.0]), 0, 1.0) == pytest.approx(
        0.3132616875182228, abs=1e-13
    )


def test_cond_discrete_frozen_t2():
    # -0.5 + log(e^0.5 + 1)
    assert cond_energy_discrete(np.array([1.0, 0.0]), 0, 2.0) == pytest.approx(
        0.4740769841801067, abs=1e-13
    )


def test_cond_discrete_rejects_bad_args():
    with pytest.raises(ValueError):
        cond_energy_discrete(np.array([0.0, 0.0]), 2)
    with pytest.raises(ValueError):
        cond_energy_discrete(np.array([0.0, 0.0]), -1)
    with pytest.raises(ValueError):
        cond_energy_discrete(np.array([0.0, 0.0]), 0, temperature=0.0)


@settings(max_examples=200)
@given(
    st.lists(st.floats(-30, 30), min_size=2, max_size=6),
    st.floats(0.1, 10.0),
)
def test_cond_discrete_normalization(logits, T):
    # sum_c exp(-E(c)) = 1: the conditional is exactly normalized
    f = np.array(logits)
    total = sum(np.exp(-cond_energy_discrete(f, c, T)) for c in range(len(f)))
    assert total == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100)
@given(
    st.lists(st.floats(-30, 30), min_size=2, max_size=6),
    st.floats(-40, 40),
    st.floats(0.1, 10.0),
)
def test_cond_discrete_logit_shift_invariance(logits, shift, T):
    f = np.array(logits)
    c = len(logits) - 1
    a = cond_energy_discrete(f, c, T)
    b = cond_energy_discrete(f + shift, c, T)
    assert b == pytest.approx(a, abs=1e-9)


def test_cond_continuous_values():
    assert cond_energy_continuous(0.7, 0.7) == 0.0
    # |c - f| = sigma -> 1/2
    assert cond_energy_continuous(0.5, 0.6, 0.01) == pytest.approx(0.5, abs=1e-15)
    assert cond_energy_continuous(0.3, 0.8, 0.01) == pytest.approx(12.5, abs=1e-12)
    with pytest.raises(ValueError):
        cond_energy_continuous(0.3, 0.8, 0.0)


# ==== joint energy ====


def test_joint_energy_empty_code(model, benchmark):
    g, _, _ = benchmark
    assert joint_energy(np.zeros(2), {}, model, g) == 0.0
    assert joint_energy(np.array([3.0, 4.0]), {}, model, g) == pytest.approx(12.5, abs=1e-12)


def test_joint_energy_uniform_binary_leaf(benchmark):
    # zero-weight heads give uniform logits: energy = ln 2 + prior
    g, spec, _ = benchmark
    from lace.classifier import ClassifierModel
    from lace.ndmath import MlpParams

    m = build_model(spec, 2, seed=0)
    zero_nets = {
        k: MlpParams(
            p.layer_dims,
            tuple(np.zeros_like(w) for w in p.weights),
            tuple(np.zeros_like(b) for b in p.biases),
        )
        for k, p in m.nets.items()
    }
    zm = ClassifierModel(spec, m.mode, m.input_space, m.input_dim, nets=zero_nets)
    e = joint_energy(np.zeros(2), {"attr0": 1}, zm, g)
    assert e == pytest.approx(np.log(2), abs=1e-12)


def test_joint_energy_batch_shape(model, benchmark):
    g, _, _ = benchmark
    z = np.random.default_rng(0).normal(size=(7, 2))
    e = joint_energy(z, {"attr0": 1, "attr2": 0.5}, model, g)
    assert e.shape == (7,)
    # additivity: And over code equals the joint on the same code
    expr = and_of_code({"attr0": 1, "attr2": 0.5}, model.spec)
    np.testing.assert_allclose(e, eval_expr(z, expr, model, g), atol=1e-12)


def test_joint_energy_rejects_nonfinite(model, benchmark):
    g, _, _ = benchmark
    with pytest.raises(ValueError):
        joint_energy(np.array([np.nan, 0.0]), {}, model, g)


# ==== compositions ====


def test_or_symmetric_beta_zero(model, benchmark):
    """OR of two energies known to be equal gives -ln 2 - (-E) symmetry."""
    g, _, _ = benchmark
    z = np.zeros((1, 2))
    leaf = Leaf("attr0", 1)
    e_leaf = eval_expr(z, leaf, model, g, include_prior=False)[0]
    e_or = eval_expr(z, Or((leaf, leaf), beta=0.0), model, g, include_prior=False)[0]
    assert e_or == pytest.approx(-np.log(2) + e_leaf, abs=1e-12)


def test_or_dominance_frozen():
    # -log(e^{beta - 0} + e^{-50}) with beta = ln 20: dominant-term value
    e1, e2, beta = 0.0, 50.0, float(np.log(20.0))
    val = -np.logaddexp(beta - e1, -e2)
    assert val == pytest.approx(-2.995732273553991, abs=1e-12)


def test_or_dominance_limit_beta_50(model, benchmark):
    # for large beta, E_OR -> E_1 - beta when E_2 is much larger
    g, _, _ = benchmark
    z = np.array([[1.5, 0.5]])
    a = Leaf("attr0", 1)
    b = Leaf("attr2", 0.0)  # far target -> large energy
    ea = eval_expr(z, a, model, g, include_prior=False)[0]
    eb = eval_expr(z, b, model, g, include_prior=False)[0]
    assert eb - ea > 20  # sanity: dominance premise
    e_or = eval_expr(z, Or((a, b), beta=50.0), model, g, include_prior=False)[0]
    assert e_or == pytest.approx(ea - 50.0, abs=1e-6)


def test_not_adaptive_alpha_clamp(model, benchmark):
    # |E_neg| < 0.1 -> alpha = 1 via min(0.1/|E|, 1)... exercised through a
    # continuous leaf whose prediction nearly matches the target
    g, _, _ = benchmark
    z = np.zeros((1, 2))
    from lace.classifier import predict_heads

    pred = float(predict_heads(model, z)["attr2"][0])
    near = Leaf("attr2", float(np.clip(pred + 0.02, 0, 1)))  # E ~ 0.02^2/0.02 = 0.02
    e_neg = eval_expr(z, near, model, g, include_prior=False)[0]
    assert abs(e_neg) < 0.1
    pos = Leaf("attr0", 1)
    e_pos = eval_expr(z, pos, model, g, include_prior=False)[0]
    e_not = eval_expr(z, Not(pos, near, alpha="adaptive"), model, g, include_prior=False)[0]
    assert e_not == pytest.approx(e_pos - 1.0 * e_neg, abs=1e-12)


def test_not_adaptive_alpha_large_energy(model, benchmark):
    g, _, _ = benchmark
    z = np.array([[2.0, -2.0]])
    pos = Leaf("attr0", 1)
    neg = Leaf("attr2", 1.0)
    e_pos = eval_expr(z, pos, model, g, include_prior=False)[0]
    e_neg = eval_expr(z, neg, model, g, include_prior=False)[0]
    assert abs(e_neg) > 0.1
    expect = e_pos - (0.1 / abs(e_neg)) * e_neg
    got = eval_expr(z, Not(pos, neg), model, g, include_prior=False)[0]
    assert got == pytest.approx(expect, abs=1e-12)


def test_prior_added_once_at_root(model, benchmark):
    g, _, _ = benchmark
    z = np.array([[1.0, 2.0]])
    expr = And((Leaf("attr0", 1), Or((Leaf("attr1", 2), Leaf("attr1", 3)))))
    with_prior = eval_expr(z, expr, model, g)[0]
    without = eval_expr(z, expr, model, g, include_prior=False)[0]
    assert with_prior - without == pytest.approx(2.5, abs=1e-12)


def test_leaf_weight_scales_energy(model, benchmark):
    g, _, _ = benchmark
    z = np.array([[0.5, -1.0]])
    e1 = eval_expr(z, Leaf("attr0", 1), model, g, include_prior=False)[0]
    e3 = eval_expr(z, Leaf("attr0", 1, weight=3.0), model, g, include_prior=False)[0]
    assert e3 == pytest.approx(3.0 * e1, abs=1e-12)


def test_validate_expr_rejects_bad_targets(model):
    with pytest.raises(DataError):
        validate_expr(Leaf("attr0", 2), model.spec)
    with pytest.raises(DataError):
        validate_expr(Leaf("attr2", 1.5), model.spec)
    with pytest.raises(ValueError):
        validate_expr(Leaf("missing", 0), model.spec)
    with pytest.raises(ValueError):
        validate_expr(Leaf("attr0", 1, temperature=-1.0), model.spec)
    with pytest.raises(ValueError):
        Or((Leaf("attr0", 1),))
    with pytest.raises(ValueError):
        Not(Leaf("attr0", 1), Leaf("attr0", 0), alpha=-0.5)


def test_per_row_targets(model, benchmark):
    g, _, _ = benchmark
    z = np.random.default_rng(1).normal(size=(4, 2))
    targets = np.array([0, 1, 0, 1])
    e = eval_expr(z, Leaf("attr0", targets), model, g, include_prior=False)
    for i in range(4):
        ei = eval_expr(z[i : i + 1], Leaf("attr0", int(targets[i])), model, g, include_prior=False)
        assert e[i] == pytest.approx(ei[0], abs=1e-12)


# ==== gradients ====


def _fd_grad(fn, z, h=1e-5):
    g = np.zeros_like(z)
    for i in range(z.shape[0]):
        for k in range(z.shape[1]):
            zp, zm = z.copy(), z.copy()
            zp[i, k] += h
            zm[i, k] -= h
            g[i, k] = (np.sum(fn(zp)) - np.sum(fn(zm))) / (2 * h)
    return g


def test_grad_empty_code_is_z(model, benchmark):
    g, _, _ = benchmark
    z = np.array([[1.0, -2.0], [0.0, 3.0]])
    np.testing.assert_allclose(energy_grad_z(z, None, model, g), z, atol=0)


def test_grad_linear_head_analytic():
    # identity generator + linear continuous head: grad = z + (f - c)/s2 * w
    spec = AttributeSpec((Continuous("c"),))
    g = make_generator("identity", 2)
    from lace.classifier import ClassifierModel
    from lace.ndmath import MlpParams

    w = np.array([[0.7], [-0.3]])
    head = MlpParams((2, 1), (w,), (np.zeros(1),))
    m = ClassifierModel(spec, "separate", "latent", 2, nets={"c": head})
    z = np.array([[0.4, -0.9]])
    f = float((z @ w)[0, 0])
    target = 0.8
    expect = z + (f - target) / 0.01 * w[:, 0]
    got = energy_grad_z(z, Leaf("c", target), m, g)
    np.testing.assert_allclose(got, expect, atol=1e-12)


@pytest.mark.parametrize(
    "expr_builder",
    [
        lambda: Leaf("attr0", 1),
        lambda: Leaf("attr2", 0.8),
        lambda: And((Leaf("attr0", 1), Leaf("attr1", 2), Leaf("attr2", 0.3))),
        lambda: Or((Leaf("attr0", 1), Leaf("attr1", 2))),
        lambda: Or((Leaf("attr0", 0), Leaf("attr1", 1), Leaf("attr2", 0.6)), beta=1.0),
        lambda: Not(Leaf("attr0", 1), Leaf("attr1", 0), alpha=0.5),
        lambda: And((Or((Leaf("attr0", 1), Leaf("attr2", 0.2))), Leaf("attr1", 3))),
    ],
)
def test_grad_matches_fd_per_expression_kind(model, benchmark, expr_builder):
    g, _, _ = benchmark
    expr = expr_builder()
    rng = np.random.default_rng(42)
    z = rng.normal(size=(5, 2))
    analytic = energy_grad_z(z, expr, model, g)
    fd = _fd_grad(lambda zz: eval_expr(zz, expr, model, g), z)
    np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-7)


def test_grad_matches_fd_mlp_world():
    g = make_generator("small_mlp", (2, 2), seed=5)
    spec = benchmark_spec()
    m = build_model(spec, 2, seed=3)  # untrained random heads are fine here
    expr = And((Leaf("attr0", 1), Leaf("attr2", 0.7)))
    rng = np.random.default_rng(7)
    z = rng.normal(size=(4, 2))
    analytic = energy_grad_z(z, expr, m, g)
    fd = _fd_grad(lambda zz: eval_expr(zz, expr, m, g), z)
    np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-7)


def test_grad_fd_many_random_cases(model, benchmark):
    # 100 random (z, expression-kind) cases across the four node kinds
    g, _, _ = benchmark
    rng = np.random.default_rng(11)
    kinds = [
        lambda: Leaf("attr1", int(rng.integers(4))),
        lambda: And((Leaf("attr0", int(rng.integers(2))), Leaf("attr2", float(rng.random())))),
        lambda: Or((Leaf("attr0", 1), Leaf("attr1", int(rng.integers(4)))), beta=float(rng.random() * 3)),
        lambda: Not(Leaf("attr0", 1), Leaf("attr1", 0), alpha=float(rng.random())),
    ]
    for case in range(100):
        expr = kinds[case % 4]()
        z = rng.normal(size=(1, 2)) * 1.5
        analytic = energy_grad_z(z, expr, model, g)
        fd = _fd_grad(lambda zz: eval_expr(zz, expr, model, g), z)
        err = np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-8)
        assert err < 1e-5, (case, expr)


def test_adaptive_not_drift_field(model, benchmark):
    # alpha is stop-gradient: drift = grad(E_pos) - alpha(z) grad(E_neg)
    g, _, _ = benchmark
    z = np.array([[1.2, -0.4]])
    pos, neg = Leaf("attr0", 1), Leaf("attr1", 0)
    e_neg = eval_expr(z, neg, model, g, include_prior=False)[0]
    alpha = min(0.1 / abs(e_neg), 1.0)
    gp = energy_grad_z(z, pos, model, g, include_prior=False)
    gn = energy_grad_z(z, neg, model, g, include_prior=False)
    got = energy_grad_z(z, Not(pos, neg), model, g, include_prior=False)
    np.testing.assert_allclose(got, gp - alpha * gn, atol=1e-12)


# ==== sequential editing ====


def test_seq_edit_zero_displacement(model, benchmark):
    g, _, _ = benchmark
    z = np.array([[0.7, -0.2]])
    state = EditState(z_prev=z[0])
    e = seq_edit_energy(z, state, [("attr0", 1)], model, g)
    # no proximity/drift contribution: equals weighted cond + prior
    base = eval_expr(z, Leaf("attr0", 1, weight=5.0), model, g)[0]
    untouched_pen = 0.0  # heads equal at z == z_prev
    assert e[0] == pytest.approx(base + untouched_pen, abs=1e-12)


def test_seq_edit_reduces_to_joint(model, benchmark):
    g, _, _ = benchmark
    z = np.random.default_rng(3).normal(size=(3, 2))
    state = EditState(z_prev=np.zeros(2), mu=0.0, gamma=0.0, alpha0=1.0, alpha1=1.0)
    e = seq_edit_energy(z, state, [("attr0", 1), ("attr2", 0.8)], model, g)
    je = joint_energy(z, {"attr0": 1, "attr2": 0.8}, model, g)
    np.testing.assert_allclose(e, je, atol=1e-12)


def test_seq_edit_proximity_arithmetic(model, benchmark):
    # identity generator doubles the proximity term: mu (1 + 1) = 0.08
    g, _, _ = benchmark
    z_prev = np.zeros(2)
    z = np.array([[1.0, 0.0]])
    with_prox = seq_edit_energy(z, EditState(z_prev=z_prev, gamma=0.0), [("attr0", 1)], model, g)
    without = seq_edit_energy(
        z, EditState(z_prev=z_prev, mu=0.0, gamma=0.0), [("attr0", 1)], model, g
    )
    assert with_prox[0] - without[0] == pytest.approx(0.08, abs=1e-12)


def test_seq_edit_default_alpha1_by_kind(model, benchmark):
    g, _, _ = benchmark
    z = np.array([[0.3, 0.9]])
    state = EditState(z_prev=np.zeros(2), mu=0.0, gamma=0.0)
    # continuous current attribute: alpha1 = 10
    e_cont = seq_edit_energy(z, state, [("attr2", 0.9)], model, g)[0]
    manual = eval_expr(z, Leaf("attr2", 0.9, weight=10.0), model, g)[0]
    assert e_cont == pytest.approx(manual, abs=1e-12)
    # discrete: alpha1 = 5
    e_disc = seq_edit_energy(z, state, [("attr1", 2)], model, g)[0]
    manual_d = eval_expr(z, Leaf("attr1", 2, weight=5.0), model, g)[0]
    assert e_disc == pytest.approx(manual_d, abs=1e-12)


def test_seq_edit_grad_matches_fd(model, benchmark):
    g, _, _ = benchmark
    rng = np.random.default_rng(9)
    z = rng.normal(size=(3, 2))
    state = EditState(z_prev=rng.normal(size=2))
    codes = [("attr0", 1), ("attr2", 0.6)]
    analytic = seq_edit_grad_z(z, state, codes, model, g)
    fd = _fd_grad(lambda zz: seq_edit_energy(zz, state, codes, model, g), z)
    np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-7)


def test_seq_edit_grad_matches_fd_mlp_generator(model):
    g = make_generator("small_mlp", (2, 2), seed=8)
    spec = benchmark_spec()
    m = build_model(spec, 2, seed=1)
    rng = np.random.default_rng(10)
    z = rng.normal(size=(2, 2))
    state = EditState(z_prev=rng.normal(size=2))
    codes = [("attr1", 3)]
    analytic = seq_edit_grad_z(z, state, codes, m, g)
    fd = _fd_grad(lambda zz: seq_edit_energy(zz, state, codes, m, g), z)
    np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-7)


def test_seq_edit_rejects_bad_sequences(model, benchmark):
    g, _, _ = benchmark
    z = np.zeros((1, 2))
    with pytest.raises(ValueError):
        seq_edit_energy(z, EditState(z_prev=np.zeros(2)), [], model, g)
    with pytest.raises(ValueError):
        seq_edit_energy(z, EditState(z_prev=np.zeros(2)), [("nope", 1)], model, g)
    with pytest.raises(ValueError):
        seq_edit_energy(
            z, EditState(z_prev=np.zeros(2)), [("attr0", 1), ("attr0", 0)], model, g
        )
    with pytest.raises(ValueError):
        EditState(z_prev=np.zeros(2), mu=-0.1)


# ==== energy fn bundle ====


def test_expr_energy_fn_bundle(model, benchmark):
    g, _, _ = benchmark
    fn = expr_energy_fn(Leaf("attr0", 1), model, g)
    z = np.random.default_rng(2).normal(size=(4, 2))
    np.testing.assert_allclose(fn.value(z), eval_expr(z, Leaf("attr0", 1), model, g), atol=0)
    np.testing.assert_allclose(fn.grad(z), energy_grad_z(z, Leaf("attr0", 1), model, g), atol=0)
    assert fn.d_z == 2


# ==== parser ====


def test_parse_single_leaf():
    e = parse_expr("attr0=1")
    assert e == Leaf("attr0", 1.0)


def test_parse_nested_expression():
    text = "AND(attr0=1, OR(attr1=2, attr2=0.7; beta=ln20), NOT(attr0=1, attr1=0; alpha=adaptive))"
    e = parse_expr(text)
    assert isinstance(e, And) and len(e.children) == 3
    assert e.children[0] == Leaf("attr0", 1.0)
    assert isinstance(e.children[1], Or)
    assert e.children[1].beta == pytest.approx(np.log(20.0))
    assert e.children[1].children[1] == Leaf("attr2", 0.7)
    assert isinstance(e.children[2], Not)
    assert e.children[2].alpha == "adaptive"


def test_parse_fixed_alpha_and_plain_beta():
    e = parse_expr("NOT(attr0=1, attr1=0; alpha=0.25)")
    assert e.alpha == 0.25
    o = parse_expr("OR(attr0=1, attr1=2; beta=2.5)")
    assert o.beta == 2.5


def test_parse_whitespace_tolerant():
    e = parse_expr("  AND( attr0 = 1 ,  attr2 = 0.5 )  ")
    assert isinstance(e, And)
    assert e.children[1] == Leaf("attr2", 0.5)


def test_parse_errors_carry_positions():
    with pytest.raises(ConfigError, match="column"):
        parse_expr("AND(attr0=1")
    with pytest.raises(ConfigError, match="column"):
        parse_expr("attr0=")
    with pytest.raises(ConfigError, match="column"):
        parse_expr("OR(attr0=1)")
    with pytest.raises(ConfigError, match="column"):
        parse_expr("NOT(attr0=1, attr1=0, attr2=1)")
    with pytest.raises(ConfigError, match="column"):
        parse_expr("AND(attr0=1) trailing")
    with pytest.raises(ConfigError, match="column"):
        parse_expr("OR(attr0=1, attr1=2; gamma=1)")


def test_format_parse_roundtrip():
    texts = [
        "attr0=1",
        "AND(attr0=1, attr2=0.7)",
        "OR(attr0=1, AND(attr1=2, attr2=0.3); beta=1.5)",
        "NOT(attr0=1, attr1=0; alpha=0.1)",
        "NOT(attr0=1, attr1=0; alpha=adaptive)",
    ]
    for t in texts:
        e = parse_expr(t)
        assert parse_expr(format_expr(e)) == e

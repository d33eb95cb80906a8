import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcote.numeric import check_gradients
from gcote.ote import (
    TAU_PATTERN,
    DegenerateMatrixError,
    InitializationError,
    ModelConfig,
    OTEModel,
    distance_backward,
    distance_forward,
    gram_schmidt,
    gram_schmidt_vjp,
    init_relation,
    project_backward,
    project_forward,
    rotation,
    verify_composition,
    verify_inverse,
    verify_symmetry,
)

from conftest import gs_oracle, toy_model


def _rel(M, s=None):
    M = np.asarray(M, dtype=np.float64)[None]
    rel = {"rel_mat": M}
    rel["rel_scale"] = np.zeros(M.shape[:-1]) if s is None else np.asarray(s, dtype=np.float64)[None]
    return rel


# ---------------------------------------------------------------------------
# Gram-Schmidt


def test_gram_schmidt_identity_fixed_point():
    assert np.array_equal(gram_schmidt(np.eye(4)), np.eye(4))


@given(st.floats(-np.pi, np.pi))
def test_gram_schmidt_rotation_fixed_point(theta):
    R = rotation(np.array(theta))
    assert np.max(np.abs(gram_schmidt(R) - R)) < 1e-12


def test_gram_schmidt_matches_recurrence_oracle_64(rng):
    M = rng.standard_normal((20, 20))
    Q = gram_schmidt(M)
    assert np.max(np.abs(Q - gs_oracle(M))) < 1e-8
    assert np.max(np.abs(Q @ Q.T - np.eye(20))) < 1e-10


def test_gram_schmidt_orthogonal_32(rng):
    M = rng.standard_normal((20, 20)).astype(np.float32)
    Q = gram_schmidt(M)
    assert Q.dtype == np.float32
    assert np.max(np.abs(Q @ Q.T - np.eye(20))) < 1e-5


def test_gram_schmidt_span_preservation(rng):
    M = rng.standard_normal((8, 8))
    Q = gram_schmidt(M)
    for k in range(1, 9):
        basis = Q[:, :k]
        resid = M[:, :k] - basis @ (basis.T @ M[:, :k])
        assert np.max(np.abs(resid)) < 1e-8


def test_gram_schmidt_batched_matches_single(rng):
    M = rng.standard_normal((3, 2, 5, 5))
    Q = gram_schmidt(M)
    assert np.allclose(Q[1, 0], gram_schmidt(M[1, 0]), atol=1e-14)


def test_gram_schmidt_degenerate_names_index():
    M = np.stack([np.eye(3), np.eye(3)])
    M[1, :, 2] = M[1, :, 0] + M[1, :, 1]
    with pytest.raises(DegenerateMatrixError) as err:
        gram_schmidt(M)
    assert err.value.index == (1,) and err.value.column == 2


def test_gram_schmidt_vjp_matches_finite_differences(rng):
    M = rng.standard_normal((4, 4))
    W = rng.standard_normal((4, 4))

    def fn(p):
        Q = gram_schmidt(p["M"])
        return float(np.sum(W * Q)), {"M": gram_schmidt_vjp(p["M"], Q, W)}

    report = check_gradients(fn, {"M": M})
    assert report.passed, str(report)


def test_gram_schmidt_vjp_last_column_exactly_zero(rng):
    M = rng.standard_normal((5, 5)).astype(np.float32)
    dM = gram_schmidt_vjp(M, gram_schmidt(M), rng.standard_normal((5, 5)).astype(np.float32))
    assert np.all(dM[:, -1] == 0)


# ---------------------------------------------------------------------------
# projections and distances


def test_identity_relation_projects_to_itself(rng):
    cfg = ModelConfig(1, 1, 8, 4)
    x = rng.standard_normal(8)
    rel = {"rel_mat": np.stack([np.eye(4)] * 2), "rel_scale": np.zeros((2, 4))}
    assert np.allclose(project_forward(x, rel, cfg), x)
    assert np.allclose(project_backward(x, rel, cfg), x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_zero_scale_preserves_group_norms(seed):
    gen = np.random.default_rng(seed)
    cfg = ModelConfig(1, 1, 12, 4)
    rel = {"rel_mat": gen.standard_normal((3, 4, 4)), "rel_scale": np.zeros((3, 4))}
    x = gen.standard_normal(12)
    y = project_forward(x, rel, cfg)
    assert np.allclose(np.linalg.norm(y.reshape(3, 4), axis=1), np.linalg.norm(x.reshape(3, 4), axis=1), atol=1e-12)


def test_projection_matches_oracle_composition(rng):
    cfg = ModelConfig(1, 1, 8, 4)
    M = rng.standard_normal((2, 4, 4))
    s = rng.normal(0, 0.5, (2, 4))
    x = rng.standard_normal(8)
    rel = {"rel_mat": M, "rel_scale": s}
    fwd = np.concatenate([np.diag(np.exp(s[i])) @ gs_oracle(M[i]) @ x[4 * i : 4 * i + 4] for i in range(2)])
    bwd = np.concatenate([np.diag(np.exp(-s[i])) @ gs_oracle(M[i]).T @ x[4 * i : 4 * i + 4] for i in range(2)])
    assert np.allclose(project_forward(x, rel, cfg), fwd, atol=1e-10)
    assert np.allclose(project_backward(x, rel, cfg), bwd, atol=1e-10)


@pytest.mark.parametrize("scale", ["zero", "uniform"])
def test_round_trip_with_group_uniform_scale(rng, scale):
    cfg = ModelConfig(1, 1, 8, 4)
    s = np.zeros((2, 4)) if scale == "zero" else np.repeat(rng.normal(0, 0.5, (2, 1)), 4, axis=1)
    rel = {"rel_mat": rng.standard_normal((2, 4, 4)).astype(np.float32), "rel_scale": s.astype(np.float32)}
    x = rng.standard_normal(8).astype(np.float32)
    assert np.max(np.abs(project_backward(project_forward(x, rel, cfg), rel, cfg) - x)) < 1e-4


def test_backward_is_not_inverse_for_nonuniform_scale(rng):
    # diag(exp(-s)) Q^T diag(exp(s)) Q is not I unless s is constant per group
    cfg = ModelConfig(1, 1, 4, 4)
    rel = {"rel_mat": rng.standard_normal((1, 4, 4)), "rel_scale": np.array([[0.5, -0.5, 0.2, 0.0]])}
    x = rng.standard_normal(4)
    assert np.max(np.abs(project_backward(project_forward(x, rel, cfg), rel, cfg) - x)) > 1e-3


def test_distance_pythagorean_case():
    cfg = ModelConfig(2, 1, 2, 2, "OTE")
    model = OTEModel(cfg, {"entity": np.array([[0.0, 0.0], [3.0, 4.0]]), "rel_mat": np.eye(2)[None, None], "rel_scale": np.zeros((1, 1, 2))})
    assert distance_forward(model, 0, 0, 1) == 5.0
    assert distance_backward(model, 0, 0, 1) == 5.0


def test_distance_zero_at_projection(rng):
    model = toy_model()
    h, r = 1, 2
    model.params["entity"][4] = project_forward(model.params["entity"][h], model.relation_params(r), model.cfg)
    assert distance_forward(model, h, r, 4) == pytest.approx(0.0, abs=1e-12)
    model.params["entity"][5] = project_backward(model.params["entity"][7], model.relation_params(r), model.cfg)
    assert distance_backward(model, 5, r, 7) == pytest.approx(0.0, abs=1e-12)


def test_distance_backward_mirrors_forward(rng):
    # exchanging h and t, Q and Q^T, s and -s turns one distance into the other
    model = toy_model()
    r = 1
    Q = gram_schmidt(model.params["rel_mat"][r])
    mirrored = model.copy()
    mirrored.params["rel_mat"][r] = np.swapaxes(Q, -1, -2)
    mirrored.params["rel_scale"][r] = -model.params["rel_scale"][r]
    assert distance_backward(model, 3, r, 6) == pytest.approx(distance_forward(mirrored, 6, r, 3), abs=1e-12)


def test_distance_hand_computed(rng):
    model = toy_model()
    e = model.params["entity"]
    M, s = model.params["rel_mat"][0], model.params["rel_scale"][0]
    expected = 0.0
    for i in range(2):
        proj = np.diag(np.exp(s[i])) @ gs_oracle(M[i]) @ e[2, 4 * i : 4 * i + 4]
        expected += np.sqrt(np.sum((proj - e[8, 4 * i : 4 * i + 4]) ** 2))
    assert distance_forward(model, 2, 0, 8) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("variant", ["OTE", "OTE-noscale", "LNE", "RotatE"])
def test_distance_forward_gradient(variant):
    model = toy_model(variant)
    cfg = model.cfg
    h, r, t = 2, 1, 5

    def fn(p):
        m = OTEModel(cfg, p)
        return distance_forward(m, h, r, t), _forward_only_grad(m, h, r, t)

    report = check_gradients(fn, model.params)
    assert report.passed, str(report)


@pytest.mark.parametrize("variant", ["OTE", "OTE-noscale", "LNE", "RotatE"])
def test_batched_terms_match_single_triple_distances(variant):
    from gcote.scoring import score_batch

    model = toy_model(variant)
    h, r, t = np.array([2, 0, 9]), np.array([1, 2, 0]), np.array([5, 5, 3])
    scored = score_batch(model, h, r, t)
    for j in range(3):
        assert scored.terms["forward"][j] == pytest.approx(distance_forward(model, h[j], r[j], t[j]), abs=1e-12)
        assert scored.terms["backward"][j] == pytest.approx(distance_backward(model, h[j], r[j], t[j]), abs=1e-12)


def _forward_only_grad(model, h, r, t):
    # hand-derived gradient of the forward distance alone
    from gcote.numeric import group_distance
    from gcote.ote import relation_operators, relation_operators_vjp

    E = model.entity_groups
    F, B, cache = relation_operators(model.cfg.variant, model.relation_params())
    diff = F[r] @ E[h][..., None]
    diff = diff[..., 0] - E[t]
    _, unit = group_distance(diff)
    dE = np.zeros_like(E)
    dE[h] += np.einsum("kij,ki->kj", F[r], unit)
    dE[t] -= unit
    dF = np.zeros_like(F)
    dF[r] = unit[..., :, None] * E[h][..., None, :]
    grads = {"entity": dE.reshape(model.params["entity"].shape)}
    grads.update(relation_operators_vjp(model.cfg.variant, model.relation_params(), cache, dF, np.zeros_like(B)))
    return grads


def test_rotate_matches_noscale_ote_at_ds2(rng):
    theta = rng.uniform(-np.pi, np.pi, (3, 4))
    cfg_r = ModelConfig(6, 3, 8, 2, "RotatE")
    cfg_o = ModelConfig(6, 3, 8, 2, "OTE-noscale")
    ent = rng.standard_normal((6, 8)).astype(np.float32)
    rot = OTEModel(cfg_r, {"entity": ent, "rel_phase": theta.astype(np.float32)})
    ote = OTEModel(cfg_o, {"entity": ent, "rel_mat": rotation(theta).astype(np.float32)})
    for h, r, t in [(0, 0, 1), (2, 1, 3), (5, 2, 4)]:
        assert abs(distance_forward(rot, h, r, t) - distance_forward(ote, h, r, t)) < 1e-5


# ---------------------------------------------------------------------------
# relation patterns


def _refl():
    return np.array([[1.0, 0.0], [0.0, -1.0]])


def _rot(deg):
    return rotation(np.array(np.deg2rad(deg)))


def test_verify_symmetry_examples():
    assert verify_symmetry(_rel(np.eye(2)))
    assert verify_symmetry(_rel(_refl()))
    assert not verify_symmetry(_rel(_rot(90)))
    # a nonzero scale breaks the involution
    assert not verify_symmetry(_rel(_refl(), [0.3, 0.3]))


def test_verify_inverse_examples(rng):
    Q1 = gram_schmidt(rng.standard_normal((3, 3)))
    assert verify_inverse(_rel(Q1), _rel(Q1.T))
    s = np.full(3, 0.4)
    assert verify_inverse(_rel(Q1, s), _rel(Q1.T, -s))
    assert verify_inverse(_rel(_refl()), _rel(_refl()))
    other = rng.standard_normal((3, 3))
    assert not verify_inverse(_rel(Q1), _rel(other))


def test_verify_composition_examples(rng):
    eye = _rel(np.eye(2))
    assert verify_composition(eye, eye, eye)
    assert verify_composition(_rel(_rot(30)), _rel(_rot(60)), _rel(_rot(90)))
    assert not verify_composition(_rel(_rot(30)), _rel(_rot(60)), _rel(_rot(80)))
    a, b, c = (_rel(rng.standard_normal((3, 3))) for _ in range(3))
    assert not verify_composition(a, b, c)


def test_pattern_threshold_value():
    assert TAU_PATTERN == 1e-4


# ---------------------------------------------------------------------------
# configuration and initialisation


@pytest.mark.parametrize(
    "args",
    [(10, 2, 9, 4, "OTE"), (10, 2, 8, 1, "OTE"), (10, 2, 8, 4, "RotatE"), (10, 2, 8, 4, "TransE")],
)
def test_model_config_rejects_bad_shapes(args):
    with pytest.raises(ValueError):
        ModelConfig(*args)


def test_init_relation_scales_zero_and_full_rank(rng):
    cfg = ModelConfig(5, 2, 40, 20)
    rel, _ = init_relation(cfg, rng)
    assert np.all(rel["rel_scale"] == 0)
    assert np.all(np.linalg.det(rel["rel_mat"]) > 1e-6)


def test_init_relation_no_resampling_over_1000_seeds():
    cfg = ModelConfig(1, 1, 20, 20)
    total = sum(init_relation(cfg, np.random.default_rng(seed))[1] for seed in range(1000))
    assert total == 0


def test_init_relation_budget_exhaustion(monkeypatch):
    import gcote.ote as ote

    monkeypatch.setattr(ote, "TAU_DET", 1e300)
    with pytest.raises(InitializationError):
        init_relation(ModelConfig(1, 1, 4, 4), np.random.default_rng(0), max_tries=3)


def test_init_without_positive_det_keeps_both_orientations():
    cfg = ModelConfig(1, 1, 400, 4)
    rel, _ = init_relation(cfg, np.random.default_rng(0), positive_det=False)
    signs = np.sign(np.linalg.det(rel["rel_mat"]))
    assert (signs > 0).any() and (signs < 0).any()


def test_entity_init_range():
    model = OTEModel.random(ModelConfig(50, 2, 40, 4), np.random.default_rng(0), gamma=9.0)
    assert np.max(np.abs(model.params["entity"])) <= 9.0 / 40


@pytest.mark.parametrize(
    "variant,sub_dim,expected,reported_millions",
    [
        ("OTE", 20, 7_807_200, 7.8),
        ("OTE", 2, 6_100_800, 6.1),
        ("OTE-noscale", 20, 7_712_400, 7.7),
        ("LNE", 20, 9_608_400, 9.6),
    ],
)
def test_parameter_counts_match_ablation_table(variant, sub_dim, expected, reported_millions):
    cfg = ModelConfig(14541, 237, 400, sub_dim, variant)
    assert cfg.parameter_count() == expected
    assert round(expected / 1e6, 1) == reported_millions


def test_repair_keeps_transform_and_restores_conditioning(rng):
    model = toy_model(dtype=np.float64)
    M = model.params["rel_mat"][1, 0]
    M[:, 3] = M[:, 0] + 1e-8 * rng.standard_normal(4)
    Q_before = gram_schmidt(M, tol=1e-12)
    repaired = model.repair_degenerate(rng)
    assert (1, 0) in repaired
    assert np.allclose(model.params["rel_mat"][1, 0], Q_before)
    assert abs(np.linalg.det(model.params["rel_mat"][1, 0])) == pytest.approx(1.0)


def test_model_rejects_wrong_blocks():
    cfg = ModelConfig(3, 1, 4, 2)
    with pytest.raises(ValueError):
        OTEModel(cfg, {"entity": np.zeros((3, 4))})

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftl.errors import DimensionError, DomainError, ParameterError
from ftl.tensor import Tensor
from ftl.transform import (AUDIT_THRESHOLDS, BlockTransform, DofSpec, TransformFamily, TransformParams,
                           angles_from_rotation_3d, apply, audit_homomorphism, build_batch_transform,
                           build_block_transform, compose, face_family, invariant_signature, invert,
                           map_interval_to_angle, mnist_family, planar_family, random_params,
                           rotation_2d, rotation_3d, rotation_family)

from oracles import block_diag, numeric_grad, rel_error, rot2

RNG = np.random.default_rng(7)
TWO_PI = 2 * math.pi


def dense_oracle(family, params):
    """Dense block-diagonal matrix assembled independently of the package."""
    blocks = []
    for dof in family.dofs:
        v = params[dof.name]
        if dof.kind == "circle":
            b = rot2(v)
        elif dof.kind == "interval":
            b = rot2((v - dof.lo) / (dof.hi - dof.lo) * math.pi - math.pi / 2)
        else:
            az, el = v[0], v[1]
            roll = v[2] if len(v) > 2 else 0.0
            ra = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
            re = np.array([[math.cos(el), 0, math.sin(el)], [0, 1, 0], [-math.sin(el), 0, math.cos(el)]])
            rr = np.array([[1, 0, 0], [0, math.cos(roll), -math.sin(roll)], [0, math.sin(roll), math.cos(roll)]])
            b = rr @ re @ ra
        blocks += [b] * dof.repetitions
    return block_diag(blocks)


def mixed_family():
    return TransformFamily((
        DofSpec("spin", "circle", 2, 3),
        DofSpec("zoom", "interval", 2, 2, 0.5, 2.0),
        DofSpec("pose", "sphere", 3, 2),
    ))


FAMILIES = {"planar": planar_family(4), "mixed": mixed_family(), "face": face_family()}


# -- primitives ------------------------------------------------------------------

def test_rotation_2d_examples():
    np.testing.assert_array_equal(rotation_2d(0.0), np.eye(2))
    np.testing.assert_allclose(rotation_2d(math.pi / 2), [[0, -1], [1, 0]], atol=1e-16)


def test_rotation_2d_product_is_angle_sum():
    for a, b in RNG.uniform(-10, 10, (100, 2)):
        assert np.abs(rotation_2d(a) @ rotation_2d(b) - rotation_2d(a + b)).max() <= 1e-12


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_rotation_rejects_non_finite(bad):
    with pytest.raises(ParameterError):
        rotation_2d(bad)
    with pytest.raises(ParameterError):
        rotation_3d(0.0, bad)


def test_rotation_3d_single_factors():
    np.testing.assert_array_equal(rotation_3d(0.0, 0.0), np.eye(3))
    psi, th = 0.7, -0.4
    az = rotation_3d(psi, 0.0)
    np.testing.assert_allclose(az[:2, :2], rot2(psi), atol=1e-15)
    np.testing.assert_allclose(az[2], [0, 0, 1], atol=1e-15)
    el = rotation_3d(0.0, th)
    np.testing.assert_allclose(el[[0, 2]][:, [0, 2]], rot2(-th), atol=1e-15)
    np.testing.assert_allclose(el[1], [0, 1, 0], atol=1e-15)


def test_rotation_3d_orthogonal():
    for az, el in RNG.uniform(-4, 4, (100, 2)):
        r = rotation_3d(az, el)
        assert np.abs(r.T @ r - np.eye(3)).max() <= 1e-12
        assert abs(np.linalg.det(r) - 1.0) <= 1e-12


def test_angles_round_trip():
    for az, el, roll in zip(RNG.uniform(-3, 3, 50), RNG.uniform(-1.5, 1.5, 50), RNG.uniform(-3, 3, 50)):
        r = rotation_3d(az, el, roll)
        assert np.abs(rotation_3d(*angles_from_rotation_3d(r)) - r).max() <= 1e-12


def test_interval_map_examples():
    assert map_interval_to_angle(2.0, 2.0, 6.0) == 0.0
    assert map_interval_to_angle(4.0, 2.0, 6.0) == math.pi / 2
    assert map_interval_to_angle(6.0, 2.0, 6.0) == math.pi


def test_interval_map_errors():
    with pytest.raises(DomainError):
        map_interval_to_angle(6.5, 2.0, 6.0)
    with pytest.raises(ParameterError):
        map_interval_to_angle(1.0, 1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100), st.floats(0.01, 50), st.floats(0, 1), st.floats(0, 1))
def test_interval_map_monotone(lo, width, s, t):
    hi = lo + width
    a, b = sorted((lo + s * width, lo + t * width))
    a, b = min(a, hi), min(b, hi)
    fa, fb = map_interval_to_angle(a, lo, hi), map_interval_to_angle(b, lo, hi)
    assert 0.0 <= fa <= fb <= math.pi + 1e-15
    if b > a:
        assert fb > fa


# -- types ---------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(name="a", kind="sphere", block_dim=2),
    dict(name="a", kind="circle", block_dim=3),
    dict(name="a", kind="interval", block_dim=2, lo=1.0, hi=1.0),
    dict(name="a", kind="interval", block_dim=2),
    dict(name="a", kind="circle", block_dim=2, repetitions=0),
    dict(name="a", kind="cube", block_dim=2),
])
def test_bad_dof_specs(kwargs):
    with pytest.raises(ParameterError):
        DofSpec(**kwargs)


def test_family_feature_dim_checked():
    with pytest.raises(ParameterError):
        TransformFamily((DofSpec("a", "circle", 2, 2),), feature_dim=5)
    with pytest.raises(ParameterError):
        TransformFamily((DofSpec("a", "circle", 2), DofSpec("a", "circle", 2)))


def test_family_layout_is_contiguous():
    fam = mixed_family()
    assert fam.feature_dim == 6 + 4 + 6
    assert fam.offsets == [0, 6, 10]
    assert fam.signature_dim == 6 + 3 + 3


@pytest.mark.parametrize("name", sorted(FAMILIES))
def test_family_json_round_trip(name):
    fam = FAMILIES[name]
    again = TransformFamily.loads(fam.dumps())
    assert again == fam
    assert json.loads(again.dumps()) == fam.to_json()


def test_family_json_schema_shape():
    doc = planar_family(2, (0.5, 1.5)).to_json()
    assert doc["feature_dim"] == 12
    assert doc["dofs"][1] == {"name": "scale_x", "domain": {"kind": "interval", "lo": 0.5, "hi": 1.5},
                              "block_dim": 2, "repetitions": 2}


def test_family_bad_json():
    with pytest.raises(ParameterError):
        TransformFamily.loads("{not json")
    with pytest.raises(ParameterError):
        TransformFamily.from_json({"dofs": [{"name": "a"}]})


# -- operator --------------------------------------------------------------------------

def test_identity_params_give_identity_operator():
    for fam in FAMILIES.values():
        np.testing.assert_array_equal(build_block_transform(fam, fam.identity_params()).dense(),
                                      np.eye(fam.feature_dim))


def test_interval_identity_is_midpoint():
    dof = DofSpec("zoom", "interval", 2, 1, 0.5, 2.0)
    assert dof.identity == 1.25


def test_mnist_operator_shape():
    fam = mnist_family()
    op = build_block_transform(fam, random_params(fam, RNG))
    assert fam.feature_dim == 510
    assert [b.shape for b in op.blocks] == [(2, 2)] * 3
    assert sum(d.repetitions for d in fam.dofs) == 255


def test_face_operator_is_block_pair():
    fam = face_family()
    p = TransformParams({"rotation": (0.3, -0.2), "light": (1.1, 0.4)})
    dense = build_block_transform(fam, p).dense()
    np.testing.assert_allclose(dense[:3, :3], rotation_3d(0.3, -0.2), atol=1e-15)
    np.testing.assert_allclose(dense[3:, 3:], rotation_3d(1.1, 0.4), atol=1e-15)
    assert not dense[:3, 3:].any() and not dense[3:, :3].any()


def test_missing_dof_value():
    with pytest.raises(ParameterError):
        build_block_transform(planar_family(1), TransformParams({"rotation": 0.0}))


def test_interval_value_out_of_range():
    with pytest.raises(DomainError):
        build_block_transform(planar_family(1), TransformParams({"rotation": 0.0, "scale_x": 3.0, "scale_y": 1.0}))


@pytest.mark.parametrize("name", sorted(FAMILIES))
def test_operator_matches_dense_oracle(name):
    fam = FAMILIES[name]
    for _ in range(20):
        p = random_params(fam, RNG)
        op = build_block_transform(fam, p)
        oracle = dense_oracle(fam, p.resolved(fam))
        assert np.abs(op.dense() - oracle).max() <= 1e-12
        e = RNG.uniform(-3, 3, (5, fam.feature_dim))
        assert np.abs(apply(op, e).data - e @ oracle.T).max() <= 1e-12


def test_apply_examples():
    fam = rotation_family(1)
    y = apply(build_block_transform(fam, TransformParams({"rotation": math.pi / 2})), [[1.0, 0.0]])
    np.testing.assert_allclose(y.data, [[0.0, 1.0]], atol=1e-16)
    e = RNG.normal(size=(3, 2))
    np.testing.assert_array_equal(apply(build_block_transform(fam, fam.identity_params()), e).data, e)


def test_apply_dimension_error():
    fam = planar_family(2)
    op = build_block_transform(fam, fam.identity_params())
    with pytest.raises(DimensionError):
        apply(op, np.zeros((2, 11)))
    with pytest.raises(DimensionError):
        apply(build_batch_transform(fam, [fam.identity_params()] * 3), np.zeros((2, 12)))


def test_batch_transform_rows_match_single():
    fam = mixed_family()
    ps = [random_params(fam, RNG) for _ in range(4)]
    e = RNG.normal(size=(4, fam.feature_dim))
    y = apply(build_batch_transform(fam, ps), e).data
    for i, p in enumerate(ps):
        np.testing.assert_allclose(y[i], apply(build_block_transform(fam, p), e[i : i + 1]).data[0], atol=1e-13)


def test_apply_gradient():
    fam = mixed_family()
    op = build_batch_transform(fam, [random_params(fam, RNG) for _ in range(3)])
    w = RNG.normal(size=(3, fam.feature_dim))
    e = RNG.normal(size=(3, fam.feature_dim))
    t = Tensor(e, requires_grad=True)
    (apply(op, t) * Tensor(w)).sum().backward()
    num = numeric_grad(lambda a: float((apply(op, a).data * w).sum()), [e.copy()])[0]
    assert rel_error(t.grad, num) <= 1e-5


def test_transpose_is_inverse():
    fam = mixed_family()
    p = random_params(fam, RNG)
    op = build_block_transform(fam, p)
    np.testing.assert_allclose(op.transpose().dense(), build_block_transform(fam, invert(fam, p)).dense(),
                               atol=1e-12)


# -- compose / invert -----------------------------------------------------------------------

def test_compose_examples():
    fam = rotation_family(1)
    p = TransformParams({"rotation": 1.1})
    assert compose(fam, fam.identity_params(), p)["rotation"] == 1.1
    assert abs(compose(fam, TransformParams({"rotation": 0.3}), TransformParams({"rotation": 0.5}))["rotation"] - 0.8) <= 1e-15


def test_compose_wraps_circle():
    fam = rotation_family(1)
    r = compose(fam, TransformParams({"rotation": 5.0}), TransformParams({"rotation": 4.0}))["rotation"]
    assert abs(r - (9.0 - TWO_PI)) <= 1e-12


def test_compose_sphere_matches_matrix_product():
    fam = face_family()
    for _ in range(50):
        p1, p2 = random_params(fam, RNG), random_params(fam, RNG)
        got = build_block_transform(fam, compose(fam, p2, p1)).dense()
        want = dense_oracle(fam, p2.resolved(fam)) @ dense_oracle(fam, p1.resolved(fam))
        assert np.abs(got - want).max() <= 1e-12


def test_compose_interval_leaving_range():
    fam = planar_family(1, (0.5, 1.5))
    p = TransformParams({"rotation": 0.0, "scale_x": 1.4, "scale_y": 1.0})
    with pytest.raises(DomainError):
        compose(fam, p, p)
    ok = compose(fam, p, TransformParams({"rotation": 0.0, "scale_x": 0.8, "scale_y": 1.0}))
    assert abs(ok["scale_x"] - 1.2) <= 1e-15


def test_invert_examples():
    fam = rotation_family(2)
    assert invert(fam, fam.identity_params())["rotation"] == 0.0
    assert abs(invert(fam, TransformParams({"rotation": 0.5}))["rotation"] - (TWO_PI - 0.5)) <= 1e-15


@pytest.mark.parametrize("name", sorted(FAMILIES))
def test_invert_round_trip(name):
    fam = FAMILIES[name]
    for _ in range(20):
        p = random_params(fam, RNG)
        e = RNG.normal(size=(4, fam.feature_dim))
        back = apply(build_block_transform(fam, invert(fam, p)), apply(build_block_transform(fam, p), e))
        assert np.abs(back.data - e).max() <= 1e-12
        np.testing.assert_allclose(build_block_transform(fam, invert(fam, p)).dense(),
                                   build_block_transform(fam, p).dense().T, atol=1e-12)


# -- signature -------------------------------------------------------------------------------

def test_signature_examples():
    fam = rotation_family(1)
    np.testing.assert_array_equal(invariant_signature(fam, [[3.0, 4.0]]).data, [[25.0]])
    two = rotation_family(2)
    np.testing.assert_array_equal(invariant_signature(two, [[1.0, 0.0, 0.0, 1.0]]).data, [[1.0, 0.0, 1.0]])


def test_signature_layout_and_length():
    fam = mixed_family()
    e = RNG.normal(size=(2, fam.feature_dim))
    sig = invariant_signature(fam, e).data
    assert sig.shape == (2, fam.signature_dim)
    # first dof: 3 subvectors of size 2, pairs (0,0) (0,1) (0,2) (1,1) (1,2) (2,2)
    s = e[0, :6].reshape(3, 2)
    want = [s[i] @ s[j] for i in range(3) for j in range(i, 3)]
    np.testing.assert_allclose(sig[0, :6], want, rtol=1e-14)
    p = e[0, 10:].reshape(2, 3)
    np.testing.assert_allclose(sig[0, 9:], [p[0] @ p[0], p[0] @ p[1], p[1] @ p[1]], rtol=1e-14)


def test_signature_dimension_error():
    with pytest.raises(DimensionError):
        invariant_signature(rotation_family(2), np.zeros((1, 3)))


@pytest.mark.parametrize("name", sorted(FAMILIES))
def test_signature_invariance_random(name):
    fam = FAMILIES[name]
    for _ in range(100):
        p = random_params(fam, RNG)
        e = RNG.uniform(-3, 3, (1, fam.feature_dim))
        y = apply(build_block_transform(fam, p), e)
        assert np.abs(invariant_signature(fam, y).data - invariant_signature(fam, e).data).max() <= 1e-9


def test_signature_gradient():
    fam = mixed_family()
    e = RNG.normal(size=(2, fam.feature_dim))
    w = RNG.normal(size=(2, fam.signature_dim))
    t = Tensor(e, requires_grad=True)
    (invariant_signature(fam, t) * Tensor(w)).sum().backward()
    num = numeric_grad(lambda a: float((invariant_signature(fam, a).data * w).sum()), [e.copy()])[0]
    assert rel_error(t.grad, num) <= 1e-5


# -- audit --------------------------------------------------------------------------------------

def test_audit_single_trial_identity_params():
    fam = mixed_family()
    rep = audit_homomorphism(fam, 1, sampler=lambda f, rng: (f.identity_params(), f.identity_params()))
    assert rep.passed
    assert all(v == 0.0 for v in rep.residuals.values())


@pytest.mark.parametrize("name", sorted(FAMILIES))
def test_audit_passes(name):
    rep = audit_homomorphism(FAMILIES[name], 50, seed=3)
    assert rep.passed, rep.residuals


def test_audit_is_deterministic():
    fam = mixed_family()
    assert audit_homomorphism(fam, 20, seed=5).to_json() == audit_homomorphism(fam, 20, seed=5).to_json()


def test_audit_rejects_zero_trials():
    with pytest.raises(ParameterError):
        audit_homomorphism(mixed_family(), 0)


def test_audit_negative_control_flags_corrupt_block():
    def corrupt(family, params):
        op = build_block_transform(family, params)
        blocks = list(op.blocks)
        blocks[0] = blocks[0] * 1.01
        return BlockTransform(family, tuple(blocks))

    rep = audit_homomorphism(planar_family(3), 10, builder=corrupt)
    assert rep.residuals["norm"] > 1e-6
    assert "norm" in rep.failures and not rep.passed


def test_audit_thresholds_reported():
    doc = audit_homomorphism(rotation_family(1), 2).to_json()
    assert doc["thresholds"] == AUDIT_THRESHOLDS
    assert set(doc["residuals"]) == set(AUDIT_THRESHOLDS)


# -- properties ------------------------------------------------------------------------------------

angles = st.floats(-20, 20, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(angles, angles, st.floats(0.5, 2.0), st.floats(0.5, 2.0))
def test_homomorphism_property(a, b, z1, z2):
    fam = TransformFamily((DofSpec("spin", "circle", 2, 2), DofSpec("zoom", "interval", 2, 1, 0.5, 2.0)))
    mid = 1.25
    # keep the interval composition in range
    z2 = min(max(z2, 0.5 + mid - z1), 2.0 + mid - z1)
    p1, p2 = TransformParams({"spin": a, "zoom": z1}), TransformParams({"spin": b, "zoom": z2})
    lhs = build_block_transform(fam, compose(fam, p2, p1)).dense()
    rhs = dense_oracle(fam, p2.resolved(fam)) @ dense_oracle(fam, p1.resolved(fam))
    assert np.abs(lhs - rhs).max() <= 1e-12


@settings(max_examples=40, deadline=None)
@given(angles, st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.lists(st.floats(-5, 5), min_size=6, max_size=6),
       st.floats(-3, 3), st.floats(-3, 3))
def test_apply_linear_and_norm_preserving(a, e1, e2, s, t):
    fam = rotation_family(3)
    op = build_block_transform(fam, TransformParams({"rotation": a}))
    e1, e2 = np.array([e1]), np.array([e2])
    lhs = apply(op, s * e1 + t * e2).data
    assert np.abs(lhs - (s * apply(op, e1).data + t * apply(op, e2).data)).max() <= 1e-12 * max(1.0, np.abs(lhs).max())
    n = np.linalg.norm(e1)
    if n > 1e-6:
        assert abs(np.linalg.norm(apply(op, e1).data) - n) / n <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-1.5, 1.5), st.floats(-math.pi, math.pi), st.floats(-1.5, 1.5))
def test_sphere_signature_invariance_property(az, el, az2, el2):
    fam = TransformFamily((DofSpec("pose", "sphere", 3, 3),))
    e = np.linspace(-1, 2, 9)[None]
    op = build_block_transform(fam, compose(fam, TransformParams({"pose": (az2, el2)}), TransformParams({"pose": (az, el)})))
    assert np.abs(invariant_signature(fam, apply(op, e)).data - invariant_signature(fam, e).data).max() <= 1e-9

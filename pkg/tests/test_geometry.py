import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lprnet.cloud import PointCloud
from lprnet.errors import DomainError, InvalidArgumentError, ParseError
from lprnet.geometry import (
    GENERATORS,
    RigidTransform,
    apply_transform,
    compose,
    hat,
    invert,
    rotation_about_axis,
    se3_exp,
    se3_log,
    vee,
)

from oracles import rodrigues

finite = st.floats(-10, 10, allow_nan=False)
omega = st.lists(st.floats(-1.7, 1.7, allow_nan=False), min_size=3, max_size=3)
twist = st.tuples(omega, st.lists(finite, min_size=3, max_size=3)).map(lambda t: np.array(t[0] + t[1]))


def test_zero_twist_is_identity():
    t = se3_exp(np.zeros(6))
    assert np.array_equal(t.matrix(), np.eye(4))


def test_pure_translation():
    t = se3_exp([0, 0, 0, 1, 0, 0])
    assert np.array_equal(t.rotation, np.eye(3))
    assert np.allclose(t.translation, [1, 0, 0], atol=0)


def test_quarter_turn_about_z():
    t = se3_exp([0, 0, math.pi / 2, 0, 0, 0])
    assert np.allclose(t.rotation @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    assert np.allclose(t.translation, 0, atol=0)


def test_exp_matches_rodrigues_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        axis = rng.standard_normal(3)
        angle = rng.uniform(0, 3)
        w = axis / np.linalg.norm(axis) * angle
        assert np.allclose(se3_exp(np.r_[w, 0, 0, 0]).rotation, rodrigues(axis, angle), atol=1e-14)


def test_exp_is_matrix_exponential_of_generators():
    from scipy.linalg import expm

    xi = np.array([0.3, -0.7, 1.1, 2.0, -1.0, 0.5])
    m = sum(x * g for x, g in zip(xi, GENERATORS))
    assert np.allclose(se3_exp(xi).matrix(), expm(m), atol=1e-12)


def test_small_angle_branch_is_continuous():
    v = np.array([1.0, 2.0, 3.0])
    for eps in (1e-7, 1e-8, 1e-9, 1e-12):
        xi = np.r_[eps, -eps, eps / 2, v]
        t = se3_exp(xi)
        assert np.allclose(t.translation, v + 0.5 * np.cross(xi[:3], v), atol=1e-12)
        assert np.abs(se3_log(t) - xi).max() <= 1e-12


def test_non_finite_twist_rejected():
    with pytest.raises(InvalidArgumentError):
        se3_exp([0, 0, np.nan, 0, 0, 0])
    with pytest.raises(InvalidArgumentError):
        se3_exp([1, 2, 3])


def test_log_roundtrip_example():
    xi = np.array([0.1, -0.2, 0.3, 0.5, 0.0, -1.0])
    assert np.abs(se3_log(se3_exp(xi)) - xi).max() <= 1e-9


def test_log_identity():
    assert np.array_equal(se3_log(RigidTransform.identity()), np.zeros(6))


def test_log_branch_cut():
    with pytest.raises(DomainError):
        se3_log(RigidTransform(rotation_about_axis([0, 0, 1], math.pi), np.zeros(3)))
    with pytest.raises(DomainError):
        se3_log(RigidTransform(rotation_about_axis([1, 1, 0], math.pi - 1e-7), np.zeros(3)))
    # just inside the cut still works
    se3_log(RigidTransform(rotation_about_axis([1, 1, 0], math.pi - 1e-3), np.zeros(3)))


def test_generator_order():
    # rotational generators first (x, y, z), then translations
    assert np.allclose(GENERATORS[2][:3, :3], hat([0, 0, 1]))
    assert np.allclose(GENERATORS[4][:3, 3], [0, 1, 0])
    assert not GENERATORS.flags.writeable


def test_hat_vee_inverse():
    w = np.array([0.4, -1.2, 2.5])
    assert np.array_equal(vee(hat(w)), w)
    assert np.allclose(hat(w) @ [1, 2, 3], np.cross(w, [1, 2, 3]))


def test_apply_identity_and_translation():
    pc = PointCloud(np.zeros((4, 3)), ground_flag=[True, False, True, False], source_label="lidar")
    assert np.array_equal(apply_transform(RigidTransform.identity(), pc).points, pc.points)
    moved = apply_transform(RigidTransform(np.eye(3), np.array([0.0, 0.0, 5.0])), pc)
    assert np.array_equal(moved.points[:, 2], np.full(4, 5.0))
    assert np.array_equal(moved.ground_flag, pc.ground_flag)
    assert moved.source_label == "lidar"


def test_compose_applies_right_operand_first():
    rng = np.random.default_rng(3)
    a, b = se3_exp(rng.standard_normal(6)), se3_exp(rng.standard_normal(6))
    p = rng.standard_normal((20, 3))
    assert np.allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12)


def test_compose_identity_and_invert_translation():
    t = se3_exp([0.2, 0.1, -0.3, 1, 2, 3])
    assert np.allclose(compose(RigidTransform.identity(), t).matrix(), t.matrix(), atol=0)
    inv = invert(RigidTransform(np.eye(3), np.array([1.0, -2.0, 3.0])))
    assert np.array_equal(inv.translation, [-1.0, 2.0, -3.0])


@given(twist)
def test_roundtrip_property(xi):
    assert np.abs(se3_log(se3_exp(xi)) - xi).max() <= 1e-9


@given(twist)
def test_group_inverse_property(xi):
    assert np.abs(compose(se3_exp(xi), se3_exp(-xi)).matrix() - np.eye(4)).max() <= 1e-9
    assert np.abs(invert(se3_exp(xi)).matrix() - se3_exp(-xi).matrix()).max() <= 1e-9


@given(twist, twist, twist)
def test_associativity(x, y, z):
    a, b, c = se3_exp(x), se3_exp(y), se3_exp(z)
    lhs = compose(compose(a, b), c).matrix()
    rhs = compose(a, compose(b, c)).matrix()
    assert np.abs(lhs - rhs).max() <= 1e-9


@given(twist, st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
def test_isometry(xi, p, q):
    t = se3_exp(xi)
    d0 = np.linalg.norm(np.subtract(p, q))
    d1 = np.linalg.norm(t.apply(np.array([p]))[0] - t.apply(np.array([q]))[0])
    assert abs(d0 - d1) <= 1e-9


def test_long_composition_chain_stays_orthonormal():
    rng = np.random.default_rng(5)
    t = RigidTransform.identity()
    for _ in range(10_000):
        t = compose(se3_exp(rng.standard_normal(6) * 0.5), t)
    assert t.orthonormality_error() <= 1e-9
    assert abs(np.linalg.det(t.rotation) - 1) <= 1e-9


def test_text_roundtrip_is_exact():
    t = se3_exp([0.3, 0.2, 0.1, 10.5, -3.25, 1e-3])
    text = t.to_text()
    assert len(text.split()) == 12
    back = RigidTransform.from_text(text)
    assert np.array_equal(back.matrix(), t.matrix())


def test_text_parse_error():
    with pytest.raises(ParseError):
        RigidTransform.from_text("1 0 0 0 0 1 0 0")
    with pytest.raises(ParseError):
        RigidTransform.from_text("1 0 0 0 0 1 0 0 0 0 x 0")


def test_from_matrix_rejects_non_rigid():
    with pytest.raises(InvalidArgumentError):
        RigidTransform.from_matrix(np.diag([2.0, 1.0, 1.0, 1.0]))

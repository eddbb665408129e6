import math
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lprnet import autodiff as ad
from lprnet.autodiff import AdamW, Tensor
from lprnet.errors import (
    IntegrityError,
    InvalidArgumentError,
    NumericalFault,
    ShapeError,
    UnsupportedVersionError,
)


def leaf(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


# ---------------------------------------------------------------- forward examples

def test_softmax_uniform():
    y = ad.softmax(Tensor(np.zeros(3))).data
    assert np.allclose(y, 1 / 3, atol=1e-7)


def test_max_pool_columns():
    x = Tensor(np.array([[1.0, 5.0], [3.0, 2.0]]))
    assert ad.max_pool(x, axis=0).data.tolist() == [3.0, 5.0]


def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((4, 3))
    assert np.array_equal(ad.matmul(Tensor(a), Tensor(np.eye(3))).data, a)


def test_layernorm_statistics():
    x = np.random.default_rng(1).standard_normal((5, 16)) * 7 + 3
    y = ad.layernorm(Tensor(x)).data
    assert np.allclose(y.mean(-1), 0, atol=1e-12)
    assert np.allclose(y.var(-1), 1, atol=1e-6)


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_numerical_fault_names_op():
    with pytest.raises(NumericalFault) as err, np.errstate(over="ignore"):
        ad.mul(Tensor(np.array([1e200])), Tensor(np.array([1e200])))
    assert err.value.op == "mul"


# ---------------------------------------------------------------- gradients

def test_square_derivative():
    x = leaf([3.0])
    ad.sum(ad.mul(x, x)).backward()
    assert x.grad.tolist() == [6.0]


def test_softmax_sum_has_zero_gradient():
    x = leaf(np.random.default_rng(2).standard_normal(6))
    ad.sum(ad.softmax(x)).backward()
    assert np.abs(x.grad).max() <= 1e-12


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(InvalidArgumentError):
        ad.mul(x, x).backward()


def test_shared_subexpression_accumulates():
    x = leaf([2.0])
    y = ad.mul(x, x)
    ad.sum(ad.add(y, y)).backward()
    assert x.grad.tolist() == [8.0]


def test_broadcast_gradient_sums_back():
    a = leaf(np.ones((4, 3)))
    b = leaf(np.ones(3))
    ad.sum(ad.add(a, b)).backward()
    assert b.grad.tolist() == [4.0, 4.0, 4.0]


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = ad.mul(x, x)
        assert not ad.grad_enabled()
    assert not y.requires_grad and ad.grad_enabled()


def test_no_grad_is_thread_local():
    seen = []
    with ad.no_grad():
        t = threading.Thread(target=lambda: seen.append(ad.grad_enabled()))
        t.start()
        t.join()
    assert seen == [True]


@pytest.mark.parametrize("op", ["relu", "gelu", "softmax", "layernorm", "max_pool", "mean_pool", "matmul"])
def test_ops_match_finite_differences(op):
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((3, 4))
    m = rng.standard_normal((4, 2))

    def forward(t):
        if op == "max_pool":
            return ad.max_pool(t, axis=0)
        if op == "mean_pool":
            return ad.mean_pool(t, axis=1)
        if op == "matmul":
            return ad.matmul(t, Tensor(m))
        return getattr(ad, op)(t)

    weight = rng.standard_normal(forward(Tensor(x0)).shape)
    x = leaf(x0)
    ad.sum(ad.mul(forward(x), Tensor(weight))).backward()
    expected = numeric_grad(lambda v: float((forward(Tensor(v)).data * weight).sum()), x0)
    assert np.allclose(x.grad, expected, atol=1e-6)


def test_gather_and_concat_gradients():
    x = leaf(np.arange(6.0).reshape(3, 2))
    y = ad.concat([ad.gather(x, [0, 0, 2], axis=0), x], axis=0)
    ad.sum(y).backward()
    assert x.grad.tolist() == [[3, 3], [1, 1], [2, 2]]


# ---------------------------------------------------------------- schedule and optimizer

def test_cosine_schedule_points():
    assert ad.cosine_lr(0, 100, 1e-3) == 1e-3
    assert math.isclose(ad.cosine_lr(50, 100, 1e-3), 5e-4, rel_tol=1e-12)
    assert ad.cosine_lr(100, 100, 1e-3) == 1e-6
    assert ad.cosine_lr(100, 100, 1e-3, floor=0.0) <= 1e-18


@given(st.integers(0, 1000), st.integers(1, 1000))
def test_cosine_schedule_bounded(step, total):
    lr = ad.cosine_lr(step, total, 1e-3)
    assert 1e-6 <= lr <= 1e-3


def test_adamw_zero_grad_without_decay_is_noop():
    p = leaf(np.array([1.0, -2.0]))
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    opt.step()
    assert p.data.tolist() == [1.0, -2.0]


def test_adamw_single_step_by_hand():
    p = leaf(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, 0.25])
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.05, eps=1e-8)
    opt.step()
    # first step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.05) - 0.1 * np.array([0.5, 0.25]) / (
        np.array([0.5, 0.25]) + 1e-8)
    assert np.allclose(p.data, expected, atol=1e-12)
    assert opt.step_count == 1


def test_adamw_rejects_mismatched_grad():
    p = leaf(np.zeros(3))
    p.grad = np.zeros(2)
    with pytest.raises(ShapeError):
        AdamW({"p": p}).step()


# ---------------------------------------------------------------- checkpoint format

RECORDS = {
    "w": np.arange(12, dtype=np.float32).reshape(3, 4),
    "b": np.array([1.5, -2.5]),
    "step": np.array([7], dtype=np.int64),
    "meta": ad.text_record({"a": 1, "b": [1, 2]}),
    "idx": np.array([[1, 2]], dtype=np.int32),
    "scalar": np.float64(3.0),
}


def test_checkpoint_roundtrip_is_byte_exact(tmp_path):
    path = tmp_path / "m.lprn"
    ad.write_checkpoint(path, RECORDS)
    back = ad.read_checkpoint(path)
    assert list(back) == list(RECORDS)
    for k, v in RECORDS.items():
        assert back[k].dtype == np.asarray(v).dtype and np.array_equal(back[k], v)
    assert ad.encode_records(back) == path.read_bytes()
    assert ad.read_text_record(back["meta"]) == {"a": 1, "b": [1, 2]}


@given(arrays(np.float64, st.tuples(st.integers(0, 5), st.integers(1, 4))))
def test_checkpoint_roundtrip_property(a):
    back = ad.decode_records(ad.encode_records({"a": a}))["a"]
    assert back.tobytes() == a.tobytes() and back.shape == a.shape


def test_checkpoint_header_layout():
    blob = ad.encode_records({"x": np.zeros(2, dtype=np.float32)})
    assert blob[:4] == b"LPRN"
    assert struct.unpack_from("<I", blob, 4) == (1,)
    assert struct.unpack_from("<I", blob, 8) == (1,)
    assert blob[12:13] == b"x" and blob[13] == 0


def test_checkpoint_bad_magic_and_version():
    blob = ad.encode_records(RECORDS)
    with pytest.raises(UnsupportedVersionError):
        ad.decode_records(b"XXXX" + blob[4:])
    with pytest.raises(UnsupportedVersionError):
        ad.decode_records(blob[:4] + struct.pack("<I", 2) + blob[8:])


def test_checkpoint_truncation_names_record():
    blob = ad.encode_records(RECORDS)
    with pytest.raises(IntegrityError) as err:
        ad.decode_records(blob[:-3])
    assert err.value.record == "scalar"
    with pytest.raises(IntegrityError) as err:
        ad.decode_records(blob[:20])
    assert err.value.record == "w"


def test_checkpoint_rejects_unsupported_dtype():
    with pytest.raises(InvalidArgumentError):
        ad.encode_records({"c": np.zeros(2, dtype=np.complex128)})

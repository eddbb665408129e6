import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lprnet import autodiff as ad
from lprnet.autodiff import Tensor
from lprnet.errors import ConfigError, InvalidArgumentError, ShapeError
from lprnet.geometry import se3_exp
from lprnet.network import MaskedAutoencoder, NetworkConfig, chamfer_l2
from lprnet.sampling import build_patches, generate_mask

from oracles import naive_chamfer

TINY = NetworkConfig.desk_scale(embed_dim=16, hidden_dim=12, heads=2, encoder_depth=2,
                                decoder_depth=1, patch_size=8, num_patches=16)


@pytest.fixture(scope="module")
def model():
    return MaskedAutoencoder(TINY, seed=0, dtype=np.float64)


def cloud(seed=0, n=512):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3))


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(hidden_dim=10, heads=3)
    with pytest.raises(ConfigError):
        NetworkConfig(mask_ratio=1.0)
    with pytest.raises(ConfigError):
        NetworkConfig(grouping="voxel")
    assert NetworkConfig(grouping="knn").level_fractions == (1.0,)
    cfg = NetworkConfig.desk_scale(embedding="pe")
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.variant_name == "msfps+pe+transformer"


# ---------------------------------------------------------------- embeddings

def test_feature_embed_permutation_invariant(model):
    pts = np.random.default_rng(1).standard_normal((8, 3))
    perm = np.random.default_rng(2).permutation(8)
    assert np.allclose(model.feature_embed(pts), model.feature_embed(pts[perm]), atol=1e-12)


def test_feature_embed_sees_rotation(model):
    pts = np.random.default_rng(3).standard_normal((8, 3))
    rotated = se3_exp([0.0, 0.0, 1.0, 0, 0, 0]).apply(pts)
    assert not np.allclose(model.feature_embed(pts), model.feature_embed(rotated), atol=1e-6)


def test_feature_embed_zero_patch_finite(model):
    out = model.feature_embed(np.zeros((8, 3)))
    assert out.shape == (16,) and np.isfinite(out).all()
    with pytest.raises(ShapeError):
        model.feature_embed(np.zeros((8, 2)))


def test_position_embed(model):
    a, b = model.position_embed([0.1, 0.2, 0.3]), model.position_embed([0.3, 0.2, 0.1])
    assert not np.allclose(a, b)
    assert np.array_equal(a, model.position_embed([0.1, 0.2, 0.3]))


def test_missing_branches_raise():
    pe_only = MaskedAutoencoder(NetworkConfig.desk_scale(embedding="pe", embed_dim=8, hidden_dim=6,
                                                         heads=2), seed=0)
    with pytest.raises(InvalidArgumentError):
        pe_only.feature_embed(np.zeros((4, 3)))
    fe_only = MaskedAutoencoder(NetworkConfig.desk_scale(embedding="fe", embed_dim=8, hidden_dim=6,
                                                         heads=2), seed=0)
    with pytest.raises(InvalidArgumentError):
        fe_only.position_embed([0, 0, 0])


# ---------------------------------------------------------------- encoder / decoder

def test_encoder_is_token_permutation_equivariant(model):
    tokens = np.random.default_rng(4).standard_normal((1, 10, 16))
    perm = np.random.default_rng(5).permutation(10)
    with ad.no_grad():
        a = model.encode(Tensor(tokens)).data
        b = model.encode(Tensor(tokens[:, perm])).data
    assert np.allclose(a[:, perm], b, atol=1e-10)


def test_encoder_rejects_zero_tokens(model):
    with pytest.raises(InvalidArgumentError):
        model.encode(Tensor(np.zeros((1, 0, 16))))


def test_decoder_shapes(model):
    enc = Tensor(np.random.default_rng(6).standard_normal((2, 5, 12)))
    vis_c = np.zeros((2, 5, 3))
    out = model.decode_and_predict(enc, vis_c, np.ones((2, 3, 3)))
    assert out.shape == (2, 3, 8, 3)
    assert model.decode_and_predict(enc, vis_c, np.ones((2, 0, 3))).shape == (2, 0, 8, 3)


def test_forward_masked_counts(model):
    ps = build_patches(cloud(), 16, 8, TINY.level_fractions, seed=0)
    ps = ps.with_mask(generate_mask(16, 0.6, "random", seed=1))
    pred, target = model.forward_masked([ps])
    assert pred.shape == target.shape == (1, 10, 8, 3)


# ---------------------------------------------------------------- chamfer

def test_chamfer_examples():
    a = np.array([[0.0, 0, 0]])
    assert chamfer_l2(a, a).item() == 0.0
    assert chamfer_l2(a, np.array([[1.0, 0, 0]])).item() == 2.0
    two = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    assert chamfer_l2(a, two).item() == 0.0 + (0.0 + 4.0) / 2
    with pytest.raises(InvalidArgumentError):
        chamfer_l2(np.zeros((0, 3)), a)


points = st.integers(1, 12).flatmap(
    lambda n: st.lists(st.tuples(*[st.floats(-5, 5, allow_nan=False)] * 3), min_size=n, max_size=n))


@given(points, points)
def test_chamfer_matches_oracle_and_is_symmetric(a, b):
    a, b = np.array(a), np.array(b)
    value = chamfer_l2(a, b).item()
    assert abs(value - naive_chamfer(a, b)) <= 1e-12 * max(1.0, value)
    assert abs(value - chamfer_l2(b, a).item()) <= 1e-12 * max(1.0, value)


def test_chamfer_batched_mean():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((3, 5, 3)), rng.standard_normal((3, 6, 3))
    expected = np.mean([naive_chamfer(x, y) for x, y in zip(a, b)])
    assert abs(chamfer_l2(a, b).item() - expected) <= 1e-12


def test_chamfer_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((7, 3)), rng.standard_normal((9, 3))
    t = Tensor(a, requires_grad=True)
    chamfer_l2(t, b).backward()
    h, num = 1e-7, np.zeros_like(a)
    for i in np.ndindex(a.shape):
        ap, am = a.copy(), a.copy()
        ap[i] += h
        am[i] -= h
        num[i] = (naive_chamfer(ap, b) - naive_chamfer(am, b)) / (2 * h)
    assert np.allclose(t.grad, num, atol=1e-5)


# ---------------------------------------------------------------- global feature

def test_global_feature_properties(model):
    pts = cloud(9)
    f = model.global_feature(pts)
    assert f.shape == (12,) and f.dtype == np.float64
    assert np.array_equal(f, model.global_feature(pts))
    rotated = se3_exp([0.0, 0.0, 0.8, 0, 0, 0]).apply(pts)
    assert not np.allclose(f, model.global_feature(rotated), atol=1e-6)


def test_global_feature_too_small(model):
    with pytest.raises(InvalidArgumentError):
        model.global_feature(cloud(n=10))


@settings(max_examples=5)
@given(st.integers(0, 2**16))
def test_masked_loss_gradient_float64(seed):
    cfg = NetworkConfig.desk_scale(embed_dim=8, hidden_dim=6, heads=2, encoder_depth=1,
                                   decoder_depth=1, patch_size=4, num_patches=6, level_fractions=(1.0,))
    net = MaskedAutoencoder(cfg, seed=seed % 7, dtype=np.float64)
    ps = build_patches(cloud(seed, 64), 6, 4, (1.0,), seed=seed)
    ps = ps.with_mask(generate_mask(6, 0.5, "random", seed=seed))
    name = "head.w"
    param = net.params[name]

    def loss_value():
        with ad.no_grad():
            pred, target = net.forward_masked([ps])
            return chamfer_l2(pred, target).item()

    for p in net.params.values():
        p.grad = None
    pred, target = net.forward_masked([ps])
    chamfer_l2(pred, target).backward()
    analytic = param.grad.copy()
    idx = (0, 0)
    orig = param.data[idx]
    h = 1e-6
    param.data[idx] = orig + h
    up = loss_value()
    param.data[idx] = orig - h
    down = loss_value()
    param.data[idx] = orig
    numeric = (up - down) / (2 * h)
    assert abs(analytic[idx] - numeric) <= 1e-5 * max(1.0, abs(numeric))


def test_float32_and_float64_models_agree(model):
    f32 = model.astype(np.float32)
    pts = cloud(12)
    assert np.allclose(f32.global_feature(pts), model.global_feature(pts), atol=1e-3)
    assert f32.num_parameters() == model.num_parameters()

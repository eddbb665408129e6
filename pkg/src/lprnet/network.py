"""Masked-autoencoder registration network built on :mod:`lprnet.autodiff`.

Tokens are ``proj(FE(patch) + PE(center))``; the encoder sees visible tokens
only, the decoder sees encoded tokens plus copies of one learned mask token,
and a linear head predicts the ``k`` center-relative points of each masked
patch.  ``global_feature`` max-pools encoder outputs over all patches.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import as_points
from .errors import ConfigError, InvalidArgumentError
from .sampling import DEFAULT_LEVELS, PatchSet, build_patches, mask_count

GROUPINGS = ("msfps", "knn")
EMBEDDINGS = ("re", "fe", "pe")
INTEGRATORS = ("transformer", "smlp")


@dataclass(frozen=True)
class NetworkConfig:
    embed_dim: int = 512
    encoder_depth: int = 8
    decoder_depth: int = 4
    hidden_dim: int = 384
    heads: int = 6
    mlp_ratio: int = 4
    patch_size: int = 32
    num_patches: int = 64
    mask_ratio: float = 0.6
    level_fractions: tuple = DEFAULT_LEVELS
    # ablation switches; the defaults are the full model
    grouping: str = "msfps"
    embedding: str = "re"
    integrator: str = "transformer"

    def __post_init__(self):
        object.__setattr__(self, "level_fractions", tuple(float(f) for f in self.level_fractions))
        if self.grouping == "knn":
            object.__setattr__(self, "level_fractions", (1.0,))
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        for name, allowed in (("grouping", GROUPINGS), ("embedding", EMBEDDINGS),
                              ("integrator", INTEGRATORS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("embed_dim", "encoder_depth", "hidden_dim", "heads", "mlp_ratio",
                     "patch_size", "num_patches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def desk_scale(cls, **overrides) -> "NetworkConfig":
        base = dict(embed_dim=64, hidden_dim=48, heads=6, encoder_depth=4, decoder_depth=2,
                    patch_size=32, num_patches=64)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["level_fractions"] = list(self.level_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    @property
    def variant_name(self) -> str:
        return f"{self.grouping}+{self.embedding}+{self.integrator}"


# ---------------------------------------------------------------- layers

class Params:
    """Named parameter registry with deterministic initialization."""

    def __init__(self, seed: int, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.tensors: dict[str, Tensor] = {}

    def new(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise InvalidArgumentError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self.tensors[name] = t
        return t

    def uniform(self, name: str, shape, bound: float) -> Tensor:
        return self.new(name, self.rng.uniform(-bound, bound, size=shape))


class Linear:
    def __init__(self, p: Params, name: str, n_in: int, n_out: int):
        bound = 1.0 / math.sqrt(n_in)
        self.w = p.uniform(f"{name}.w", (n_in, n_out), bound)
        self.b = p.uniform(f"{name}.b", (n_out,), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, p: Params, name: str, dim: int):
        self.gamma = p.new(f"{name}.gamma", np.ones(dim))
        self.beta = p.new(f"{name}.beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layernorm(x, axis=-1), self.gamma), self.beta)


class Mlp:
    def __init__(self, p: Params, name: str, dim: int, hidden: int):
        self.fc1 = Linear(p, f"{name}.fc1", dim, hidden)
        self.fc2 = Linear(p, f"{name}.fc2", hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Attention:
    def __init__(self, p: Params, name: str, dim: int, heads: int):
        self.heads = heads
        self.q = Linear(p, f"{name}.q", dim, dim)
        self.k = Linear(p, f"{name}.k", dim, dim)
        self.v = Linear(p, f"{name}.v", dim, dim)
        self.proj = Linear(p, f"{name}.proj", dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        *lead, t, d = x.shape
        x = ad.reshape(x, (*lead, t, self.heads, d // self.heads))
        return ad.swapaxes(x, -2, -3)  # (..., heads, tokens, head_dim)

    def __call__(self, x: Tensor) -> Tensor:
        *lead, t, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d // self.heads))
        out = ad.matmul(ad.softmax(scores, axis=-1), v)
        out = ad.reshape(ad.swapaxes(out, -2, -3), (*lead, t, d))
        return self.proj(out)


class Block:
    """Pre-norm transformer block; with ``attention=False`` it is a shared MLP block."""

    def __init__(self, p: Params, name: str, dim: int, heads: int, mlp_ratio: int,
                 attention: bool = True):
        self.attn = Attention(p, f"{name}.attn", dim, heads) if attention else None
        self.norm1 = LayerNorm(p, f"{name}.norm1", dim) if attention else None
        self.norm2 = LayerNorm(p, f"{name}.norm2", dim)
        self.mlp = Mlp(p, f"{name}.mlp", dim, dim * mlp_ratio)

    def __call__(self, x: Tensor) -> Tensor:
        if self.attn is not None:
            x = ad.add(x, self.attn(self.norm1(x)))
        return ad.add(x, self.mlp(self.norm2(x)))


class FeatureEmbed:
    """PointNet-like patch embedding without a T-net.

    Shared per-point layers, max-pooled; the pooled intermediate layer is
    concatenated (skip connection) with the pooled final layer before the
    output projection.
    """

    def __init__(self, p: Params, name: str, embed_dim: int):
        h1, h2 = max(embed_dim // 2, 8), embed_dim
        self.c1 = Linear(p, f"{name}.c1", 3, h1)
        self.c2 = Linear(p, f"{name}.c2", h1, h2)
        self.c3 = Linear(p, f"{name}.c3", h2, 2 * embed_dim)
        self.out = Linear(p, f"{name}.out", 2 * embed_dim + h2, embed_dim)

    def __call__(self, pts: Tensor) -> Tensor:
        # pts: (..., k, 3) -> (..., embed_dim)
        mid = ad.relu(self.c2(ad.relu(self.c1(pts))))
        deep = ad.relu(self.c3(mid))
        pooled = ad.concat([ad.max_pool(deep, axis=-2), ad.max_pool(mid, axis=-2)], axis=-1)
        return self.out(pooled)


class PositionEmbed:
    def __init__(self, p: Params, name: str, dim: int):
        self.fc1 = Linear(p, f"{name}.fc1", 3, dim)
        self.fc2 = Linear(p, f"{name}.fc2", dim, dim)

    def __call__(self, centers: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(centers)))


# ---------------------------------------------------------------- model

@dataclass
class TokenBatch:
    embeddings: Tensor      # (B, M, embed_dim) for every patch, visible and masked
    visible: np.ndarray     # (B, M) bool
    centers: np.ndarray     # (B, M, 3)


@dataclass
class MaskedAutoencoder:
    config: NetworkConfig
    seed: int = 0
    dtype: type = np.float32
    params: dict = field(init=False)

    def __post_init__(self):
        c = self.config
        p = Params(self.seed, self.dtype)
        if c.embedding in ("re", "fe"):
            self.fe = FeatureEmbed(p, "fe", c.embed_dim)
        if c.embedding in ("re", "pe"):
            self.pe = PositionEmbed(p, "pe", c.embed_dim)
        self.proj = Linear(p, "proj", c.embed_dim, c.hidden_dim)
        attn = c.integrator == "transformer"
        self.encoder = [Block(p, f"enc{i}", c.hidden_dim, c.heads, c.mlp_ratio, attention=attn)
                        for i in range(c.encoder_depth)]
        self.enc_norm = LayerNorm(p, "enc_norm", c.hidden_dim)
        self.mask_token = p.new("mask_token", np.zeros(c.hidden_dim))
        self.dec_pe = PositionEmbed(p, "dec_pe", c.hidden_dim)
        self.decoder = [Block(p, f"dec{i}", c.hidden_dim, c.heads, c.mlp_ratio)
                        for i in range(c.decoder_depth)]
        self.dec_norm = LayerNorm(p, "dec_norm", c.hidden_dim)
        self.head = Linear(p, "head", c.hidden_dim, 3 * c.patch_size)
        self.params = p.tensors

    # -- embedding

    def embed(self, neighborhoods: np.ndarray, centers: np.ndarray) -> Tensor:
        """Token embedding per patch; ``neighborhoods`` are center-relative."""
        kind = self.config.embedding
        nb = Tensor(neighborhoods, dtype=self.dtype)
        ct = Tensor(centers, dtype=self.dtype)
        if kind == "re":
            return ad.add(self.fe(nb), self.pe(ct))
        if kind == "fe":
            # no separate position branch: the patch is embedded in absolute coordinates
            absolute = Tensor(neighborhoods + centers[..., None, :], dtype=self.dtype)
            return self.fe(absolute)
        return self.pe(ct)

    def feature_embed(self, patch_local_points: np.ndarray) -> np.ndarray:
        if not hasattr(self, "fe"):
            raise InvalidArgumentError(f"embedding {self.config.embedding!r} has no FE branch")
        pts = np.asarray(patch_local_points)
        if pts.ndim < 2 or pts.shape[-1] != 3:
            raise ad.ShapeError(f"feature_embed expects (..., k, 3), got {pts.shape}")
        single = pts.ndim == 2
        with ad.no_grad():
            out = self.fe(Tensor(pts[None] if single else pts, dtype=self.dtype)).data
        return out[0] if single else out

    def position_embed(self, center) -> np.ndarray:
        if not hasattr(self, "pe"):
            raise InvalidArgumentError(f"embedding {self.config.embedding!r} has no PE branch")
        c = np.asarray(center)
        if c.shape[-1:] != (3,):
            raise ad.ShapeError(f"position_embed expects (..., 3), got {c.shape}")
        single = c.ndim == 1
        with ad.no_grad():
            out = self.pe(Tensor(c[None] if single else c, dtype=self.dtype)).data
        return out[0] if single else out

    # -- encoder / decoder

    def encode(self, tokens: Tensor) -> Tensor:
        """Encoder over the given (visible) tokens: (..., V, embed) -> (..., V, hidden)."""
        if tokens.shape[-2] == 0:
            raise InvalidArgumentError("encode needs at least one visible token")
        x = self.proj(tokens)
        for blk in self.encoder:
            x = blk(x)
        return self.enc_norm(x)

    def decode_and_predict(self, encoded: Tensor, vis_centers: np.ndarray,
                           masked_centers: np.ndarray) -> Tensor:
        """Predict (B, n_masked, k, 3) center-relative points for the masked slots."""
        b, n_mask = masked_centers.shape[0], masked_centers.shape[1]
        k = self.config.patch_size
        if n_mask == 0:
            return Tensor(np.zeros((b, 0, k, 3), dtype=self.dtype))
        ones = Tensor(np.ones((b, n_mask, 1), dtype=self.dtype))
        mask_tokens = ad.mul(ones, self.mask_token)
        x = ad.concat([encoded, mask_tokens], axis=-2)
        centers = np.concatenate([vis_centers, masked_centers], axis=-2)
        x = ad.add(x, self.dec_pe(Tensor(centers, dtype=self.dtype)))
        for blk in self.decoder:
            x = blk(x)
        x = self.dec_norm(x)
        n_vis = vis_centers.shape[-2]
        masked = ad.gather(x, np.arange(n_vis, n_vis + n_mask), axis=-2)
        return ad.reshape(self.head(masked), (b, n_mask, k, 3))

    def forward_masked(self, patch_sets: list[PatchSet]) -> tuple[Tensor, np.ndarray]:
        """Full MAE pass over a batch of patch sets sharing one visible count.

        Returns (predictions (B, n_mask, k, 3), targets (B, n_mask, k, 3)).
        """
        vis = np.stack([ps.visible for ps in patch_sets])
        counts = vis.sum(axis=1)
        if len(set(counts.tolist())) != 1:
            raise InvalidArgumentError("all patch sets in a batch need the same visible count")
        nb = np.stack([ps.neighborhoods for ps in patch_sets])
        ct = np.stack([ps.centers for ps in patch_sets])
        order = np.argsort(~vis, axis=1, kind="stable")  # visible first, then masked
        nv = int(counts[0])
        take = lambda a: np.take_along_axis(a, order.reshape(order.shape + (1,) * (a.ndim - 2)), axis=1)
        nb, ct = take(nb), take(ct)
        tokens = self.embed(nb[:, :nv], ct[:, :nv])
        encoded = self.encode(tokens)
        pred = self.decode_and_predict(encoded, ct[:, :nv], ct[:, nv:])
        return pred, nb[:, nv:]

    # -- inference

    def patches_for(self, points: np.ndarray, seed: int = 0) -> PatchSet:
        c = self.config
        return build_patches(points, c.num_patches, c.patch_size, c.level_fractions, seed=seed)

    def inference_patches(self, points: np.ndarray, seed: int = 0) -> PatchSet:
        """Every center at every level, so two clouds never disagree on level labels."""
        c = self.config
        return build_patches(points, c.num_patches, c.patch_size, c.level_fractions,
                             seed=seed, all_levels=True)

    def feature_from_patches(self, patches: PatchSet) -> np.ndarray:
        with ad.no_grad():
            tokens = self.embed(patches.neighborhoods[None], patches.centers[None])
            enc = self.encode(tokens)
            return ad.max_pool(enc, axis=-2).data[0].astype(np.float64)

    def global_feature(self, cloud, seed: int = 0) -> np.ndarray:
        pts = as_points(cloud)
        c = self.config
        need = max(c.num_patches, c.patch_size / min(c.level_fractions))
        if len(pts) < need:
            raise InvalidArgumentError(
                f"cloud of {len(pts)} points too small for {c.num_patches} patches of {c.patch_size}"
            )
        return self.feature_from_patches(self.inference_patches(pts, seed))

    # -- parameters

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise InvalidArgumentError(f"missing parameter {k}")
            if state[k].shape != v.shape:
                raise ad.ShapeError(f"parameter {k}: shape {state[k].shape} vs {v.shape}")
            v.data = state[k].astype(self.dtype).copy()

    def astype(self, dtype) -> "MaskedAutoencoder":
        other = MaskedAutoencoder(self.config, self.seed, dtype)
        other.load_state_dict(self.state_dict())
        return other

    def num_parameters(self) -> int:
        return int(np.sum([v.data.size for v in self.params.values()]))


def chamfer_l2(pred, target) -> Tensor:
    """Symmetric L2 chamfer distance; leading axes index independent set pairs.

    For sets ``A`` (pred) and ``B`` (target): mean over ``a`` of the squared
    distance to its nearest ``b`` plus mean over ``b`` of the squared distance
    to its nearest ``a``.  With leading axes the per-pair values are averaged.
    Nearest-neighbor assignments are constants of the backward pass.
    """
    pt = pred if isinstance(pred, Tensor) else Tensor(pred, dtype=np.float64)
    tg = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pt.dtype)
    p = pt.data
    if p.shape[-2] == 0 or tg.shape[-2] == 0:
        raise InvalidArgumentError("chamfer_l2 needs non-empty point sets")
    if p.shape[-1] != 3 or tg.shape[-1] != 3 or p.shape[:-2] != tg.shape[:-2]:
        raise ad.ShapeError(f"chamfer_l2: incompatible shapes {p.shape} and {tg.shape}")
    lead = p.shape[:-2]
    P = p.reshape(-1, p.shape[-2], 3)
    T = tg.reshape(-1, tg.shape[-2], 3)
    diff = P[:, :, None, :] - T[:, None, :, :]
    d = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    nn_p = d.argmin(axis=2)   # nearest target for each pred point
    nn_t = d.argmin(axis=1)   # nearest pred for each target point
    min_p = np.take_along_axis(d, nn_p[:, :, None], axis=2)[:, :, 0]
    min_t = np.take_along_axis(d, nn_t[:, None, :], axis=1)[:, 0, :]
    per_pair = [math.fsum(a.tolist()) / len(a) + math.fsum(b.tolist()) / len(b)
                for a, b in zip(min_p, min_t)]
    value = math.fsum(per_pair) / len(per_pair)
    n_pairs, n, m = P.shape[0], P.shape[1], T.shape[1]

    def back(g):
        g = float(np.asarray(g).reshape(-1)[0]) / n_pairs
        rows = np.arange(n_pairs)[:, None]
        grad = 2.0 * (P - T[rows, nn_p]) / n
        contrib = 2.0 * (P[rows, nn_t] - T) / m
        np.add.at(grad, (np.broadcast_to(rows, nn_t.shape), nn_t), contrib)
        return ((g * grad).reshape(lead + (n, 3)).astype(p.dtype),)

    return ad._make(np.asarray(value, dtype=p.dtype), (pt,), back, "chamfer_l2")

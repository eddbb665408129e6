"""Farthest point sampling, KNN grouping, multi-scale patches and masking."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import as_points
from .errors import InvalidArgumentError

DEFAULT_LEVELS = (1.0, 0.5, 0.25)
MASK_STRATEGIES = ("random", "block", "hybrid")


def sq_dist(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared distances; the one formula every neighbor search here uses."""
    d = points - query
    return (d * d).sum(axis=-1)


def fps(cloud, m: int, seed=0) -> np.ndarray:
    """Farthest point sampling; start index drawn from ``seed``, ties to lowest index."""
    pts = as_points(cloud)
    return _fps_order(pts, m, np.random.default_rng(seed))


def _fps_order(pts: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = len(pts)
    if not 1 <= m <= n:
        raise InvalidArgumentError(f"fps needs 1 <= m <= N, got m={m}, N={n}")
    out = np.empty(m, dtype=np.int64)
    out[0] = rng.integers(n)
    mind = sq_dist(pts, pts[out[0]])
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        out[i] = nxt
        np.minimum(mind, sq_dist(pts, pts[nxt]), out=mind)
    return out


def _select_k(d: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((idx, d))
    return idx[order[:k]]


def knn(cloud, query, k: int, tree: cKDTree | None = None) -> np.ndarray:
    """Indices of the ``k`` nearest points, ascending by distance then index.

    The tree only proposes candidates; the ranking uses :func:`sq_dist`, so the
    result is identical to a brute-force scan.
    """
    pts = as_points(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"knn needs 1 <= k <= N, got k={k}, N={n}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    if tree is None:
        tree = cKDTree(pts)
    dk, _ = tree.query(q, k=k)
    radius = float(np.atleast_1d(dk)[-1])
    cand = np.asarray(tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
    if len(cand) < k:
        cand = np.arange(n)
    return _select_k(sq_dist(pts[cand], q), cand, k)


def knn_brute(cloud, query, k: int) -> np.ndarray:
    pts = as_points(cloud)
    if not 1 <= k <= len(pts):
        raise InvalidArgumentError(f"knn needs 1 <= k <= N, got k={k}, N={len(pts)}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    return _select_k(sq_dist(pts, q), np.arange(len(pts)), k)


def knn_many(pts: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`knn_brute` for a small batch of queries."""
    d = sq_dist(pts[None, :, :], queries[:, None, :])
    idx = np.arange(len(pts))
    out = np.empty((len(queries), k), dtype=np.int64)
    for r in range(len(queries)):
        part = np.argpartition(d[r], k - 1)[:k] if k < len(pts) else idx
        kth = d[r, part].max()
        cand = np.nonzero(d[r] <= kth)[0]
        out[r] = _select_k(d[r, cand], cand, k)
    return out


def _level_sizes(n: int, fractions) -> list[int]:
    fractions = list(fractions)
    if not fractions:
        raise InvalidArgumentError("level_fractions must not be empty")
    if any(not 0 < f <= 1 for f in fractions):
        raise InvalidArgumentError(f"level fractions must lie in (0, 1], got {fractions}")
    if any(b > a for a, b in zip(fractions, fractions[1:])):
        raise InvalidArgumentError(f"level fractions must be descending, got {fractions}")
    sizes = []
    for f in fractions:
        s = int(np.floor(f * n + 0.5))
        if s < 1:
            warnings.warn(f"level fraction {f} yields no points for N={n}; clamped to 1", stacklevel=3)
            s = 1
        sizes.append(s)
    return sizes


def multi_scale_fps(cloud, level_fractions=DEFAULT_LEVELS, seed=0) -> list[np.ndarray]:
    """Nested FPS subsamples: every level is a prefix of one FPS ordering."""
    pts = as_points(cloud)
    sizes = _level_sizes(len(pts), level_fractions)
    order = _fps_order(pts, _order_length(len(pts), sizes), np.random.default_rng(seed))
    return _levels_from_order(len(pts), sizes, order)


def _order_length(n: int, sizes: list[int], at_least: int = 1) -> int:
    return max([at_least] + [s for s in sizes if s < n])


def _levels_from_order(n: int, sizes: list[int], order: np.ndarray) -> list[np.ndarray]:
    return [np.arange(n) if s == n else order[:s].copy() for s in sizes]


@dataclass
class PatchSet:
    centers: np.ndarray        # (M, 3)
    center_index: np.ndarray   # (M,) indices of centers in the parent cloud
    groups: np.ndarray         # (M, k) indices into the parent cloud
    neighborhoods: np.ndarray  # (M, k, 3) center-relative coordinates
    scale_label: np.ndarray    # (M,) level of each patch
    visible: np.ndarray        # (M,) False = masked

    @property
    def num_patches(self) -> int:
        return len(self.centers)

    @property
    def patch_size(self) -> int:
        return self.groups.shape[1]

    def with_mask(self, visible: np.ndarray) -> "PatchSet":
        return PatchSet(self.centers, self.center_index, self.groups,
                        self.neighborhoods, self.scale_label, np.asarray(visible, dtype=bool))

    def regather(self, points: np.ndarray) -> "PatchSet":
        """Same selections evaluated on moved points (rigid motion keeps them valid)."""
        centers = points[self.center_index]
        return PatchSet(centers, self.center_index, self.groups,
                        points[self.groups] - centers[:, None, :],
                        self.scale_label, self.visible)

    def to_text(self) -> str:
        lines = [f"# patches={self.num_patches} k={self.patch_size} masked={int((~self.visible).sum())}"]
        for i in range(self.num_patches):
            c = self.centers[i]
            lines.append(
                f"{i} level={int(self.scale_label[i])} visible={int(self.visible[i])} "
                f"center={c[0]:.6g},{c[1]:.6g},{c[2]:.6g} "
                f"idx={','.join(str(int(j)) for j in self.groups[i])}"
            )
        return "\n".join(lines) + "\n"


def build_patches(cloud, num_patches: int, patch_size: int,
                  level_fractions=DEFAULT_LEVELS, seed=0, all_levels: bool = False) -> PatchSet:
    """FPS centers on the full cloud, KNN groups within each patch's level subsample.

    Each center is assigned one level by a seeded balanced permutation.  With
    ``all_levels`` every center is grouped at every level instead, giving
    ``num_patches * len(levels)`` patches ordered level by level.
    """
    pts = as_points(cloud)
    n = len(pts)
    if not 1 <= num_patches <= n:
        raise InvalidArgumentError(f"need 1 <= num_patches <= N, got {num_patches} for N={n}")
    sizes = _level_sizes(n, level_fractions)
    if patch_size > sizes[-1]:
        raise InvalidArgumentError(
            f"patch_size {patch_size} exceeds coarsest level size {sizes[-1]}"
        )
    fps_rng, level_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    # one FPS ordering serves both the patch centers and the nested levels
    order = _fps_order(pts, _order_length(n, sizes, num_patches), fps_rng)
    levels = _levels_from_order(n, sizes, order)
    center_index = order[:num_patches].copy()
    centers = pts[center_index]
    if all_levels:
        labels = np.repeat(np.arange(len(levels)), num_patches)
        center_index = np.tile(center_index, len(levels))
        centers = pts[center_index]
    else:
        labels = level_rng.permutation(np.arange(num_patches) % len(levels))
    groups = np.empty((len(labels), patch_size), dtype=np.int64)
    for lv, sub in enumerate(levels):
        rows = np.nonzero(labels == lv)[0]
        if len(rows):
            groups[rows] = sub[knn_many(pts[sub], centers[rows], patch_size)]
    return PatchSet(
        centers=centers,
        center_index=center_index,
        groups=groups,
        neighborhoods=pts[groups] - centers[:, None, :],
        scale_label=labels,
        visible=np.ones(len(labels), dtype=bool),
    )


def mask_count(m: int, mask_ratio: float) -> int:
    return int(np.floor(mask_ratio * m + 0.5))


def generate_mask(m: int, mask_ratio: float, strategy: str = "hybrid", seed=0,
                  centers: np.ndarray | None = None) -> np.ndarray:
    """Visibility bits with exactly ``round(mask_ratio * m)`` patches masked.

    ``block`` grows a region from a random seed patch over the nearest patch
    centers; ``hybrid`` masks half the quota as a block and the rest at random.
    Block-based strategies need ``centers``.
    """
    if not 0 <= mask_ratio < 1:
        raise InvalidArgumentError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    if strategy not in MASK_STRATEGIES:
        raise InvalidArgumentError(f"unknown mask strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    quota = mask_count(m, mask_ratio)
    visible = np.ones(m, dtype=bool)
    if quota == 0:
        return visible
    n_block = {"random": 0, "block": quota, "hybrid": quota // 2}[strategy]
    if n_block:
        if centers is None or len(centers) != m:
            raise InvalidArgumentError(f"strategy {strategy!r} needs the {m} patch centers")
        start = rng.integers(m)
        order = np.lexsort((np.arange(m), sq_dist(np.asarray(centers), centers[start])))
        visible[order[:n_block]] = False
    rest = quota - n_block
    if rest:
        free = np.nonzero(visible)[0]
        visible[rng.choice(free, size=rest, replace=False)] = False
    return visible

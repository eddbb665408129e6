"""Feature-metric registration by inverse-compositional Lucas-Kanade over SE(3).

Conventions: the Jacobian column for twist coordinate ``i`` is the feature
change when the *target* is moved by ``exp(-t_i G_i)``.  With the residual
``r = F(S') - F(T)`` for the currently moved source ``S'``, the increment is
``xi = pinv(J) @ r`` and the estimate is updated by left composition,
``G <- exp(xi) * G`` (``compose(exp(xi), G)``), which moves ``S'`` towards
``T``.  All features are evaluated on clouds normalized with one record for
the pair, and the result is mapped back to world coordinates.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, as_points, normalize_pair
from .errors import FeatureFaultError, InvalidArgumentError
from .geometry import GENERATORS, RigidTransform, compose, se3_exp, se3_log

log = logging.getLogger(__name__)


class FeatureMap:
    """Deterministic map from an (N, 3) point array to a D-vector.

    ``bind(points)`` returns a function evaluating the feature on rigidly
    moved copies of ``points`` (same point order).  Maps whose internal
    structure depends only on pairwise distances (FPS/KNN selections) may
    compute that structure once in ``bind``.
    """

    dim: int = 0
    has_closed_form_jacobian: bool = False

    def __call__(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bind(self, points: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        return self

    def jacobian(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form Jacobian")


class CallableFeature(FeatureMap):
    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], dim: int):
        self.fn = fn
        self.dim = dim

    def __call__(self, points):
        return np.asarray(self.fn(np.asarray(points, dtype=np.float64)), dtype=np.float64)


# ---------------------------------------------------------------- moment features

_THIRD = [(0, 0, 0), (1, 1, 1), (2, 2, 2), (0, 0, 1), (0, 0, 2),
          (1, 1, 0), (1, 1, 2), (2, 2, 0), (2, 2, 1), (0, 1, 2)]
_SECOND = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]


class MomentFeature(FeatureMap):
    """Centroid, then central second moments, then central third moments."""

    has_closed_form_jacobian = True

    def __init__(self, order: int):
        if order not in (1, 2, 3):
            raise InvalidArgumentError(f"moment order must be 1, 2 or 3, got {order}")
        self.order = order
        self.dim = {1: 3, 2: 9, 3: 19}[order]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        p = as_points(points)
        c = p.mean(axis=0)
        out = [c]
        if self.order >= 2:
            q = p - c
            out.append(np.array([(q[:, i] * q[:, j]).mean() for i, j in _SECOND]))
        if self.order >= 3:
            out.append(np.array([(q[:, i] * q[:, j] * q[:, k]).mean() for i, j, k in _THIRD]))
        return np.concatenate(out)

    def jacobian(self, points: np.ndarray) -> np.ndarray:
        """d F(exp(-t G_i) P) / dt at t = 0, for orders 1 and 2."""
        if self.order > 2:
            raise NotImplementedError("closed form provided for orders 1 and 2")
        p = as_points(points)
        c = p.mean(axis=0)
        jac = np.zeros((self.dim, 6))
        for i in range(6):
            g = GENERATORS[i]
            # velocity of each point under exp(-t G_i): -(A p + b)
            a, b = -g[:3, :3], -g[:3, 3]
            jac[:3, i] = a @ c + b
            if self.order == 2:
                q = p - c
                m = q.T @ q / len(p)
                dm = a @ m + m @ a.T
                jac[3:, i] = [dm[r, s] for r, s in _SECOND]
        return jac


def analytic_moment_feature(order: int) -> MomentFeature:
    return MomentFeature(order)


# ---------------------------------------------------------------- learned features

class LearnedFeature(FeatureMap):
    """Global feature of a trained network; patch selections are fixed per bound cloud.

    FPS and KNN depend only on pairwise distances, so the selections made on
    a cloud stay valid for every rigid motion of that cloud and are computed
    once per ``bind``.
    """

    def __init__(self, model, seed: int = 0):
        self.model = model
        self.seed = seed
        self.dim = model.config.hidden_dim

    def __call__(self, points):
        return self.model.global_feature(points, seed=self.seed)

    def bind(self, points):
        patches = self.model.inference_patches(as_points(points), seed=self.seed)

        def bound(moved: np.ndarray) -> np.ndarray:
            return self.model.feature_from_patches(patches.regather(np.asarray(moved)))

        return bound


# ---------------------------------------------------------------- IC-LK

@dataclass(frozen=True)
class ICLKConfig:
    step: float | tuple = 1e-2
    max_iterations: int = 50
    tolerance: float = 1e-7
    pinv_cutoff: float = 1e-6
    central: bool = False   # forward differences; central differences on request
    # halvings tried when an increment would raise the feature residual; 0 = plain Gauss-Newton
    backtrack: int = 6

    def __post_init__(self):
        steps = np.broadcast_to(np.asarray(self.step, dtype=np.float64), (6,))
        if not (steps > 0).all():
            raise InvalidArgumentError("Jacobian steps must be positive")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise InvalidArgumentError("tolerance must be positive")

    @property
    def steps(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.step, dtype=np.float64), (6,)).copy()


@dataclass
class RegistrationResult:
    transform: RigidTransform
    iterations: int
    step_norms: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    converged: bool = False
    degenerate: bool = False
    method: str = "iclk"
    final_residual: float | None = None

    def diagnostics(self) -> dict:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "converged": self.converged,
            "degenerate": self.degenerate,
            "step_norms": [float(x) for x in self.step_norms],
            "residuals": [float(x) for x in self.residuals],
        }

    def diagnostics_json(self) -> str:
        return json.dumps(self.diagnostics(), sort_keys=True)


def _check_feature(v: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all():
        raise FeatureFaultError(f"non-finite feature values ({what})")
    return v


def feature_jacobian(feature, target, cfg: ICLKConfig = ICLKConfig(),
                     base_value: np.ndarray | None = None) -> np.ndarray:
    """D x 6 finite-difference Jacobian of ``feature`` under ``exp(-t_i G_i)`` on the target."""
    pts = as_points(target)
    f = feature.bind(pts) if isinstance(feature, FeatureMap) else feature
    f0 = _check_feature(f(pts) if base_value is None else base_value, "target")
    cols = []
    for i, t in enumerate(cfg.steps):
        xi = np.zeros(6)
        xi[i] = -t
        plus = _check_feature(f(se3_exp(xi).apply(pts)), f"perturbation {i}")
        if cfg.central:
            minus = _check_feature(f(se3_exp(-xi).apply(pts)), f"perturbation {i}")
            cols.append((plus - minus) / (2 * t))
        else:
            cols.append((plus - f0) / t)
    return np.stack(cols, axis=1)


def _pinv(jac: np.ndarray, cutoff: float) -> tuple[np.ndarray, int]:
    u, s, vt = np.linalg.svd(jac, full_matrices=False)
    keep = s > cutoff * (s[0] if len(s) and s[0] > 0 else 1.0)
    inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (vt.T * inv) @ u.T, int(keep.sum())


def iclk_register(source, target, feature: FeatureMap, cfg: ICLKConfig = ICLKConfig()
                  ) -> RegistrationResult:
    """Estimate the rigid transform mapping ``source`` onto ``target``."""
    src, tgt, rec = normalize_pair(source, target)
    s_pts, t_pts = src.points, tgt.points
    f_t = feature.bind(t_pts)
    f_s = feature.bind(s_pts)
    target_feat = _check_feature(f_t(t_pts), "target")
    jac = feature_jacobian(f_t, t_pts, cfg, base_value=target_feat)
    pinv, rank = _pinv(jac, cfg.pinv_cutoff)
    degenerate = rank < 6
    if degenerate:
        log.warning("feature Jacobian has rank %d < 6; continuing with the pseudo-inverse", rank)
    g = RigidTransform.identity()
    steps, residuals = [], []
    converged = False
    r = _check_feature(f_s(s_pts), "source") - target_feat
    for _ in range(cfg.max_iterations):
        xi = pinv @ r
        res = float(np.linalg.norm(r))
        residuals.append(res)
        steps.append(float(np.linalg.norm(xi)))
        if steps[-1] < cfg.tolerance:
            g = compose(se3_exp(xi), g)
            converged = True
            break
        for _ in range(cfg.backtrack + 1):
            cand = compose(se3_exp(xi), g)
            r_new = _check_feature(f_s(cand.apply(s_pts)), "source") - target_feat
            if cfg.backtrack == 0 or np.linalg.norm(r_new) < res:
                break
            xi = 0.5 * xi
        else:
            # no decrease along the Gauss-Newton direction: stop at the current estimate
            steps[-1] = 0.0
            break
        g, r = cand, r_new
    return RegistrationResult(rec.to_world(g), len(steps), steps, residuals, converged, degenerate)


# ---------------------------------------------------------------- ICP baseline

def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform taking ``src`` rows onto ``dst`` rows."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cd - r @ cs)


def icp_register(source, target, max_iterations: int = 50, tolerance: float = 1e-10,
                 residual_ok: float | None = None) -> RegistrationResult:
    """Point-to-point ICP from the identity.

    Converged means the mean-squared-error change fell below ``tolerance``
    (and, if ``residual_ok`` is given, the final RMS residual is below it).
    ``residuals`` holds the RMS nearest-neighbor distance per iteration.
    """
    s_pts, t_pts = as_points(source), as_points(target)
    if len(s_pts) == 0 or len(t_pts) == 0:
        raise InvalidArgumentError("icp_register needs non-empty clouds")
    tree = cKDTree(t_pts)
    g = RigidTransform.identity()
    prev_mse = None
    steps, residuals = [], []
    converged = False
    for _ in range(max_iterations):
        moved = g.apply(s_pts)
        dist, idx = tree.query(moved)
        mse = float(np.mean(dist * dist))
        residuals.append(float(np.sqrt(mse)))
        inc = kabsch(moved, t_pts[idx])
        steps.append(float(np.linalg.norm(se3_log(inc))) if _angle_ok(inc) else float("inf"))
        g = compose(inc, g)
        if prev_mse is not None and abs(prev_mse - mse) < tolerance:
            converged = True
            break
        prev_mse = mse
    final = float(np.sqrt(np.mean(tree.query(g.apply(s_pts))[0] ** 2)))
    if residual_ok is not None and final > residual_ok:
        converged = False
    return RegistrationResult(g, len(steps), steps, residuals, converged, False, "icp", final)


def _angle_ok(t: RigidTransform) -> bool:
    return 0.5 * (np.trace(t.rotation) - 1.0) > -1.0 + 1e-9

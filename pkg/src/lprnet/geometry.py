"""SE(3) / se(3) machinery.

Twists are 6-vectors ``(w1, w2, w3, v1, v2, v3)``: rotational part first
(radians), translational part second (meters).  ``GENERATORS[i]`` is the 4x4
se(3) basis matrix for coordinate ``i`` in that order, so that
``se3_exp(xi) == expm(sum(xi[i] * GENERATORS[i]))``.

``compose(a, b)`` means "apply ``b`` first, then ``a``", i.e. the matrix
product ``a @ b`` on homogeneous coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InvalidArgumentError, ParseError

SMALL_ANGLE = 1e-8
LOG_BRANCH_MARGIN = 1e-6


def _generators() -> np.ndarray:
    g = np.zeros((6, 4, 4))
    for i in range(3):
        g[i, :3, :3] = hat(np.eye(3)[i])
        g[3 + i, i, 3] = 1.0
    g.setflags(write=False)
    return g


def hat(w) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(w) @ p == cross(w, p)``."""
    w = np.asarray(w, dtype=np.float64)
    return np.array(
        [[0.0, -w[2], w[1]],
         [w[2], 0.0, -w[0]],
         [-w[1], w[0], 0.0]]
    )


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation plus translation; maps ``p`` to ``rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise InvalidArgumentError("transform entries must be finite")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m, tol: float = 1e-6) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape not in ((4, 4), (3, 4)):
            raise InvalidArgumentError(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        if m.shape == (4, 4) and not np.allclose(m[3], [0, 0, 0, 1], atol=tol):
            raise InvalidArgumentError("last row of a homogeneous transform must be 0 0 0 1")
        r = m[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > tol or np.linalg.det(r) < 0:
            raise InvalidArgumentError("rotation block is not a proper rotation")
        return cls(r, m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def orthonormality_error(self) -> float:
        return float(np.abs(self.rotation.T @ self.rotation - np.eye(3)).max())

    def to_text(self) -> str:
        """12 numbers: the 3x4 matrix ``[R | t]`` row-major, full precision."""
        m = self.matrix()[:3]
        return " ".join(repr(float(x)) for x in m.ravel())

    @classmethod
    def from_text(cls, text: str) -> "RigidTransform":
        fields = text.split()
        if len(fields) != 12:
            raise ParseError(f"expected 12 numbers, got {len(fields)}")
        try:
            values = np.array([float(f) for f in fields])
        except ValueError as exc:
            raise ParseError(str(exc)) from None
        return cls.from_matrix(values.reshape(3, 4))

    def __repr__(self) -> str:
        return f"RigidTransform({self.to_text()})"


GENERATORS = _generators()


def _check_twist(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (6,):
        raise InvalidArgumentError(f"twist must have shape (6,), got {xi.shape}")
    if not np.isfinite(xi).all():
        raise InvalidArgumentError("twist components must be finite")
    return xi


def _so3_coeffs(theta: float) -> tuple[float, float, float]:
    """Coefficients A, B, C of R = I + A W + B W^2 and V = I + B W + C W^2."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    t2 = theta * theta
    one_minus_cos = 2.0 * np.sin(0.5 * theta) ** 2
    return s / theta, one_minus_cos / t2, (theta - s) / (t2 * theta)


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    a, b, _ = _so3_coeffs(theta)
    W = hat(w)
    return np.eye(3) + a * W + b * (W @ W)


def left_jacobian(w) -> np.ndarray:
    """The V matrix mapping the translational twist part to the translation."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    _, b, c = _so3_coeffs(theta)
    W = hat(w)
    return np.eye(3) + b * W + c * (W @ W)


def se3_exp(xi) -> RigidTransform:
    xi = _check_twist(xi)
    w, v = xi[:3], xi[3:]
    return RigidTransform(so3_exp(w), left_jacobian(w) @ v)


def so3_log(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    cos_t = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    axis_sin = 0.5 * vee(r - r.T)
    sin_t = float(np.linalg.norm(axis_sin))
    theta = float(np.arctan2(sin_t, cos_t))
    if theta >= np.pi - LOG_BRANCH_MARGIN:
        raise DomainError(f"rotation angle {theta:.9g} is at the log branch cut (pi)")
    if theta < SMALL_ANGLE:
        return axis_sin * (1.0 + theta * theta / 6.0)
    return axis_sin * (theta / sin_t)


def se3_log(transform: RigidTransform) -> np.ndarray:
    w = so3_log(transform.rotation)
    v = np.linalg.solve(left_jacobian(w), transform.translation)
    return np.concatenate([w, v])


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    if np.abs(r.T @ r - np.eye(3)).max() <= 1e-12:
        return r
    u, _, vt = np.linalg.svd(r)
    q = u @ vt
    if np.linalg.det(q) < 0:
        u[:, -1] *= -1
        q = u @ vt
    return q


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Apply ``b`` first, then ``a``."""
    r = _reorthonormalize(a.rotation @ b.rotation)
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


def apply_transform(transform: RigidTransform, cloud):
    """Apply to a ``PointCloud`` (attributes kept) or a raw ``(N, 3)`` array."""
    if isinstance(cloud, np.ndarray):
        return transform.apply(cloud)
    return cloud.with_points(transform.apply(cloud.points))


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return so3_exp(axis * angle)

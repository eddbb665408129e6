"""Synthetic heterogeneous pairs: procedural scenes, noise, occlusion, rigid motion."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cloud import PointCloud, save_xyz
from .errors import InvalidArgumentError
from .geometry import RigidTransform, invert, rotation_about_axis
from .sampling import sq_dist

SCENES = ("plane+boxes", "ellipsoid", "ridge-terrain", "two-towers")

# declared extents (meters) of each procedural scene
ELLIPSOID_SEMI_AXES = (20.0, 12.0, 6.0)
PLANE_EXTENT = (40.0, 30.0)
RIDGE_EXTENT = (50.0, 36.0)
TOWERS_EXTENT = (40.0, 20.0)


@dataclass(frozen=True)
class SimPairSpec:
    noise_sigma: float = 0.1
    occlusion_rate: float = 0.2
    rot_max: float = 30.0      # degrees
    trans_max: float = 2.0     # meters
    seed: int = 0
    occlusion_mode: str = "region"   # or "uniform"
    axis_mode: str = "sphere"        # or "vertical"

    def __post_init__(self):
        if not self.noise_sigma >= 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")
        if not 0 <= self.occlusion_rate < 1:
            raise InvalidArgumentError("occlusion_rate must lie in [0, 1)")
        if not (self.rot_max >= 0 and self.trans_max >= 0):
            raise InvalidArgumentError("rot_max and trans_max must be >= 0")
        if self.occlusion_mode not in ("region", "uniform"):
            raise InvalidArgumentError(f"unknown occlusion_mode {self.occlusion_mode!r}")
        if self.axis_mode not in ("sphere", "vertical"):
            raise InvalidArgumentError(f"unknown axis_mode {self.axis_mode!r}")


# ---------------------------------------------------------------- scenes

def _sample_boxes(rng, n, boxes, include_bottom=False):
    """Sample n points uniformly by area over the visible faces of boxes.

    ``boxes`` rows are (cx, cy, sx, sy, height), sitting on z = 0.
    """
    faces = []
    for cx, cy, sx, sy, h in boxes:
        x0, y0 = cx - sx / 2, cy - sy / 2
        faces.append(("top", x0, y0, sx, sy, h))
        faces.append(("xwall", x0, y0, sx, 0.0, h))
        faces.append(("xwall", x0, y0 + sy, sx, 0.0, h))
        faces.append(("ywall", x0, y0, 0.0, sy, h))
        faces.append(("ywall", x0 + sx, y0, 0.0, sy, h))
    areas = np.array([f[3] * f[4] if f[0] == "top" else (f[3] + f[4]) * f[5] for f in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    out = []
    for (kind, x0, y0, sx, sy, h), c in zip(faces, counts):
        u, v = rng.random(c), rng.random(c)
        if kind == "top":
            out.append(np.column_stack([x0 + u * sx, y0 + v * sy, np.full(c, h)]))
        elif kind == "xwall":
            out.append(np.column_stack([x0 + u * sx, np.full(c, y0), v * h]))
        else:
            out.append(np.column_stack([np.full(c, x0), y0 + u * sy, v * h]))
    return np.concatenate(out) if out else np.zeros((0, 3))


def _ground(rng, n, extent, boxes=()):
    """Uniform ground points on a plane, rejecting box footprints."""
    ex, ey = extent
    pts = np.zeros((0, 3))
    while len(pts) < n:
        m = 2 * (n - len(pts)) + 16
        xy = (rng.random((m, 2)) - 0.5) * (ex, ey)
        keep = np.ones(m, dtype=bool)
        for cx, cy, sx, sy, _ in boxes:
            keep &= ~((np.abs(xy[:, 0] - cx) < sx / 2) & (np.abs(xy[:, 1] - cy) < sy / 2))
        xy = xy[keep]
        z = 0.05 * rng.standard_normal(len(xy))
        pts = np.concatenate([pts, np.column_stack([xy, z])])
    return pts[:n]


def _split(n, frac):
    a = int(round(n * frac))
    return a, n - a


def _plane_boxes(rng, n):
    # footprints stay within the 3 m window of the default ground filter
    boxes = [(-10.0, 5.0, 3.0, 3.0, 9.0), (8.0, -4.0, 3.0, 2.5, 6.0), (12.0, 9.0, 2.5, 2.5, 5.0)]
    n_ground, n_box = _split(n, 0.6)
    return np.concatenate([_ground(rng, n_ground, PLANE_EXTENT, boxes), _sample_boxes(rng, n_box, boxes)])


def _ellipsoid(rng, n):
    # uniform in the solid ellipsoid: second moments a^2/5, b^2/5, c^2/5
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.random(n) ** (1.0 / 3.0)
    return d * r[:, None] * np.array(ELLIPSOID_SEMI_AXES)


def _ridge_terrain(rng, n):
    ex, ey = RIDGE_EXTENT
    xy = (rng.random((n, 2)) - 0.5) * (ex, ey)
    x, y = xy[:, 0], xy[:, 1]
    z = (6.0 * np.exp(-((x - 0.35 * y - 6.0) ** 2) / 40.0)
         + 3.0 * np.exp(-((x + 14.0) ** 2 + (y - 8.0) ** 2) / 30.0)
         + 0.8 * np.sin(0.4 * x) * np.cos(0.25 * y)
         + 0.05 * y)
    return np.column_stack([x, y, z])


def _two_towers(rng, n):
    towers = [(-11.0, 3.0, 5.0, 5.0, 22.0), (9.0, -4.0, 6.0, 4.0, 14.0)]
    n_ground, n_tower = _split(n, 0.5)
    return np.concatenate([_ground(rng, n_ground, TOWERS_EXTENT, towers), _sample_boxes(rng, n_tower, towers)])


_BUILDERS = {
    "plane+boxes": _plane_boxes,
    "ellipsoid": _ellipsoid,
    "ridge-terrain": _ridge_terrain,
    "two-towers": _two_towers,
}


def base_cloud_library(name: str, n: int, seed=0) -> PointCloud:
    """Seeded procedural scene with ``n`` points, tens of meters across."""
    if name not in _BUILDERS:
        raise InvalidArgumentError(f"unknown scene {name!r}; choose from {', '.join(SCENES)}")
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    rng = np.random.default_rng([seed, SCENES.index(name)])
    pts = _BUILDERS[name](rng, n)
    # shuffle so point order carries no construction structure
    return PointCloud(pts[rng.permutation(n)], source_label=f"procedural:{name}")


# ---------------------------------------------------------------- pair generation

def random_rigid(rng: np.random.Generator, rot_max_deg: float, trans_max: float,
                 vertical: bool = False) -> RigidTransform:
    """Angle uniform in [0, rot_max] about a random axis; translation uniform in a ball."""
    if vertical:
        axis = np.array([0.0, 0.0, 1.0]) * (1 if rng.random() < 0.5 else -1)
    else:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rot_max_deg) * rng.random()
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    radius = trans_max * rng.random() ** (1.0 / 3.0)
    return RigidTransform(rotation_about_axis(axis, angle), direction * radius)


def occlude(points: np.ndarray, rate: float, rng: np.random.Generator,
            mode: str = "region") -> tuple[np.ndarray, np.ndarray]:
    """Remove ``round(rate * N)`` points; returns (kept_mask, removed_index).

    In ``region`` mode the removed points are the quota nearest to a uniformly
    chosen seed point (ties by index), i.e. a ball around it.
    """
    n = len(points)
    quota = int(np.floor(rate * n + 0.5))
    if quota >= n:
        raise InvalidArgumentError(f"occlusion would remove all {n} points")
    keep = np.ones(n, dtype=bool)
    if quota == 0:
        return keep, np.zeros(0, dtype=np.int64)
    if mode == "uniform":
        removed = rng.choice(n, size=quota, replace=False)
    else:
        seed_point = points[rng.integers(n)]
        order = np.lexsort((np.arange(n), sq_dist(points, seed_point)))
        removed = order[:quota]
    keep[removed] = False
    return keep, np.sort(removed)


def generate_pair(base, spec: SimPairSpec) -> tuple[PointCloud, PointCloud, RigidTransform]:
    """Return (source, target, gt) with ``gt`` mapping source onto target.

    The target is the base cloud.  The source is the base cloud with a
    contiguous occluded region removed, moved by ``inverse(gt)``, then
    perturbed by isotropic Gaussian noise.
    """
    base_pc = base if isinstance(base, PointCloud) else PointCloud(base)
    pts = base_pc.points
    if len(pts) == 0:
        raise InvalidArgumentError("base cloud is empty")
    occ_rng, tf_rng, noise_rng = (np.random.default_rng(s)
                                  for s in np.random.SeedSequence(spec.seed).spawn(3))
    keep, _ = occlude(pts, spec.occlusion_rate, occ_rng, spec.occlusion_mode)
    motion = random_rigid(tf_rng, spec.rot_max, spec.trans_max, spec.axis_mode == "vertical")
    src = motion.apply(pts[keep])
    if spec.noise_sigma > 0:
        src = src + spec.noise_sigma * noise_rng.standard_normal(src.shape)
    source = PointCloud(src, source_label="simulated-source")
    target = PointCloud(pts, source_label="simulated-target")
    return source, target, invert(motion)


# ---------------------------------------------------------------- manifests

def write_pair_set(out_dir, scenes, n: int, pairs: int, sigma: float,
                   occlusion: tuple[float, float], rot_max: float, trans_max: float,
                   seed: int = 0) -> dict:
    """Generate ``pairs`` pairs into ``out_dir`` and write ``manifest.json``.

    Scene and occlusion rate vary per pair (rate uniform in ``occlusion``);
    everything is derived from ``seed``.  ``scenes`` items are scene names or
    point clouds used as the base directly (``n`` is ignored for those).
    """
    if pairs < 1:
        raise InvalidArgumentError("pairs must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = [scenes] if isinstance(scenes, str) else list(scenes)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(pairs):
        scene = scenes[i % len(scenes)]
        pair_seed = int(rng.integers(2**31))
        rate = float(occlusion[0] + (occlusion[1] - occlusion[0]) * rng.random())
        if isinstance(scene, str):
            base = base_cloud_library(scene, n, seed=pair_seed)
        else:
            base = scene if isinstance(scene, PointCloud) else PointCloud(scene)
            scene = base.source_label or "file"
        spec = SimPairSpec(sigma, rate, rot_max, trans_max, seed=pair_seed)
        source, target, gt = generate_pair(base, spec)
        pid = f"pair_{i:03d}"
        save_xyz(source, out / f"{pid}_source.xyz")
        save_xyz(target, out / f"{pid}_target.xyz")
        entries.append({
            "id": pid,
            "scene": scene,
            "source": f"{pid}_source.xyz",
            "target": f"{pid}_target.xyz",
            "gt": gt.to_text(),
            "spec": asdict(spec),
        })
    manifest = {"seed": seed, "n": n, "pairs": entries}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    return manifest, path.parent


def manifest_pairs(path):
    """Yield (id, source, target, gt) for every pair in a manifest."""
    from .cloud import load_cloud

    manifest, root = load_manifest(path)
    for entry in manifest["pairs"]:
        yield (entry["id"],
               load_cloud(root / entry["source"]),
               load_cloud(root / entry["target"]),
               RigidTransform.from_text(entry["gt"]))

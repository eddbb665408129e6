"""Point clouds: container, XYZ/PLY I/O, normalization, ground filter, DSM."""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InvalidArgumentError,
    InvalidInputError,
    ParseError,
    TruncatedFileError,
    UnsupportedFormatError,
)
from .geometry import RigidTransform


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    ground_flag: np.ndarray | None = None
    source_label: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgumentError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise InvalidArgumentError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.ground_flag is not None:
            flag = np.array(self.ground_flag, dtype=bool).reshape(-1)
            if flag.shape[0] != pts.shape[0]:
                raise InvalidArgumentError("ground_flag length must match the point count")
            object.__setattr__(self, "ground_flag", _frozen(flag))

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.ground_flag, self.source_label)

    def select(self, mask_or_index) -> "PointCloud":
        flag = None if self.ground_flag is None else self.ground_flag[mask_or_index]
        return PointCloud(self.points[mask_or_index], flag, self.source_label)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)


def as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidArgumentError(f"points must have shape (N, 3), got {pts.shape}")
    return pts


# ---------------------------------------------------------------- XYZ text

def load_xyz(path, source_label: str = "") -> PointCloud:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 3:
                raise ParseError(f"expected at least 3 fields, got {len(fields)}", lineno)
            try:
                rows.append((float(fields[0]), float(fields[1]), float(fields[2])))
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {line.strip()!r}", lineno) from None
    if not rows:
        raise InvalidInputError(f"{path}: no points")
    return PointCloud(np.array(rows), source_label=source_label)


def save_xyz(cloud, path, with_flags: bool = False) -> None:
    """Write ``x y z`` lines; ``with_flags`` appends the ground flag as 0/1."""
    pts = as_points(cloud)
    flags = None
    if with_flags:
        flags = getattr(cloud, "ground_flag", None)
        if flags is None:
            raise InvalidArgumentError("cloud carries no ground flags")
    with open(path, "w", encoding="utf-8") as fh:
        if flags is None:
            for x, y, z in pts.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n")
        else:
            for (x, y, z), f in zip(pts.tolist(), flags.tolist()):
                fh.write(f"{x!r} {y!r} {z!r} {int(f)}\n")


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise UnsupportedFormatError("missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop_name, type or None for lists)])
    while True:
        raw = fh.readline()
        if not raw:
            raise TruncatedFileError("PLY header not terminated")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian") or parts[2] != "1.0":
                raise UnsupportedFormatError(f"unsupported PLY format {' '.join(parts[1:])}")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise UnsupportedFormatError("property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], None))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise UnsupportedFormatError(f"unknown PLY type {parts[1]}")
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt is None:
        raise UnsupportedFormatError("PLY header has no format line")
    return fmt, elements


def load_ply(path, source_label: str = "") -> PointCloud:
    with open(path, "rb") as fh:
        fmt, elements = _read_ply_header(fh)
        vertex_pos = next((i for i, e in enumerate(elements) if e[0] == "vertex"), None)
        if vertex_pos is None:
            raise UnsupportedFormatError("PLY has no vertex element")
        if vertex_pos != 0:
            raise UnsupportedFormatError("vertex element must come first")
        _, count, props = elements[0]
        names = [p[0] for p in props]
        for axis in "xyz":
            if axis not in names:
                raise UnsupportedFormatError(f"vertex element lacks property '{axis}'")
        if any(t is None for _, t in props):
            raise UnsupportedFormatError("list properties on vertices are not supported")
        cols = [names.index(a) for a in "xyz"]
        if fmt == "binary_little_endian":
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            payload = fh.read(count * dtype.itemsize)
            if len(payload) < count * dtype.itemsize:
                raise TruncatedFileError(
                    f"expected {count} vertices, file holds {len(payload) // dtype.itemsize}"
                )
            rec = np.frombuffer(payload, dtype=dtype, count=count)
            pts = np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1)
        else:
            rows = []
            for _ in range(count):
                line = fh.readline()
                while line and not line.strip():
                    line = fh.readline()
                if not line:
                    raise TruncatedFileError(f"expected {count} vertices, found {len(rows)}")
                fields = line.split()
                if len(fields) < len(props):
                    raise TruncatedFileError(f"short vertex line {len(rows) + 1}")
                rows.append([float(fields[c]) for c in cols])
            pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if count == 0:
        raise InvalidInputError(f"{path}: no points")
    return PointCloud(pts, source_label=source_label)


def save_ply(cloud, path, binary: bool = True) -> None:
    pts = as_points(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(pts, dtype="<f8").tobytes())
        else:
            for x, y, z in pts.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n".encode("ascii"))


def load_cloud(path, source_label: str = "") -> PointCloud:
    """Dispatch on file extension (``.ply`` or anything else as XYZ text)."""
    if os.fspath(path).lower().endswith(".ply"):
        return load_ply(path, source_label)
    return load_xyz(path, source_label)


def save_cloud(cloud, path) -> None:
    if os.fspath(path).lower().endswith(".ply"):
        save_ply(cloud, path)
    else:
        save_xyz(cloud, path)


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormalizationRecord:
    """``normalized = (world - centroid) * scale``."""

    centroid: np.ndarray
    scale: float
    degenerate: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.centroid) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.centroid

    def to_world(self, transform: RigidTransform) -> RigidTransform:
        """Map a transform estimated between normalized clouds back to world units."""
        r = transform.rotation
        t = self.centroid - r @ self.centroid + transform.translation / self.scale
        return RigidTransform(r, t)

    def to_normalized(self, transform: RigidTransform) -> RigidTransform:
        r = transform.rotation
        t = (transform.translation - self.centroid + r @ self.centroid) * self.scale
        return RigidTransform(r, t)


def _record_for(points: np.ndarray) -> NormalizationRecord:
    if len(points) == 0:
        raise InvalidArgumentError("cannot normalize an empty cloud")
    centroid = points.mean(axis=0)
    radius = float(np.sqrt(((points - centroid) ** 2).sum(axis=1).max()))
    if radius == 0.0 or not math.isfinite(1.0 / radius):
        warnings.warn("degenerate cloud: all points identical, scale fixed to 1", stacklevel=3)
        return NormalizationRecord(centroid, 1.0, degenerate=True)
    return NormalizationRecord(centroid, 1.0 / radius)


def normalize(cloud) -> tuple[PointCloud, NormalizationRecord]:
    """Center at the centroid and scale so the maximum radius is 1."""
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    rec = _record_for(pc.points)
    return pc.with_points(rec.apply(pc.points)), rec


def normalize_pair(source, target) -> tuple[PointCloud, PointCloud, NormalizationRecord]:
    """Normalize both clouds with one record computed from their union."""
    src = source if isinstance(source, PointCloud) else PointCloud(source)
    tgt = target if isinstance(target, PointCloud) else PointCloud(target)
    rec = _record_for(np.concatenate([src.points, tgt.points]))
    return src.with_points(rec.apply(src.points)), tgt.with_points(rec.apply(tgt.points)), rec


# ---------------------------------------------------------------- ground filter / DSM

def _cell_index(xy: np.ndarray, cell: float) -> np.ndarray:
    return np.floor(xy / cell).astype(np.int64)


def ground_filter(cloud, cell: float = 1.0, height_threshold: float = 0.3) -> PointCloud:
    """Flag ground points with a grid-minimum filter.

    A point is ground iff its height above the smallest cell minimum in its
    3x3 cell neighborhood is at most ``height_threshold``.  Nothing is removed.
    """
    if not cell > 0:
        raise InvalidArgumentError("cell must be positive")
    if not height_threshold >= 0:
        raise InvalidArgumentError("height_threshold must be non-negative")
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    pts = pc.points
    ij = _cell_index(pts[:, :2], cell)
    ij -= ij.min(axis=0)
    nx, ny = ij.max(axis=0) + 1
    cell_min = np.full((nx + 2, ny + 2), np.inf)
    np.minimum.at(cell_min, (ij[:, 0] + 1, ij[:, 1] + 1), pts[:, 2])
    smoothed = cell_min[1:-1, 1:-1].copy()
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            np.minimum(smoothed, cell_min[1 + dx:nx + 1 + dx, 1 + dy:ny + 1 + dy], out=smoothed)
    ref = smoothed[ij[:, 0], ij[:, 1]]
    flag = (pts[:, 2] - ref) <= height_threshold
    return PointCloud(pts, flag, pc.source_label)


@dataclass(frozen=True, eq=False)
class GridDSM:
    """Per-cell maximum elevation on a lattice anchored at multiples of ``cell_size``.

    ``cells[i, j]`` covers ``origin + (i, j) * cell_size``; unoccupied cells
    hold NaN and ``occupied`` is False there.
    """

    origin: np.ndarray
    cell_size: float
    cells: np.ndarray
    occupied: np.ndarray = field(repr=False)

    @property
    def index_offset(self) -> np.ndarray:
        return np.rint(self.origin / self.cell_size).astype(np.int64)

    def cell_centers(self) -> np.ndarray:
        i, j = np.nonzero(self.occupied)
        xy = self.origin + (np.stack([i, j], axis=1) + 0.5) * self.cell_size
        return np.column_stack([xy, self.cells[i, j]])

    def save_xyz(self, path) -> None:
        save_xyz(self.cell_centers(), path)


def build_dsm(cloud, cell: float = 1.0) -> GridDSM:
    if not cell > 0:
        raise InvalidArgumentError("cell must be positive")
    pts = as_points(cloud)
    ij = _cell_index(pts[:, :2], cell)
    lo = ij.min(axis=0)
    ij = ij - lo
    shape = tuple(ij.max(axis=0) + 1)
    cells = np.full(shape, -np.inf)
    np.maximum.at(cells, (ij[:, 0], ij[:, 1]), pts[:, 2])
    occupied = np.isfinite(cells)
    cells[~occupied] = np.nan
    return GridDSM(lo.astype(np.float64) * cell, float(cell), cells, occupied)

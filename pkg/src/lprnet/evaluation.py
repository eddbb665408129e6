"""Registration metrics, DSM elevation difference and the ablation harness."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cloud import as_points, build_dsm
from .errors import InvalidArgumentError, UndefinedMetricError
from .geometry import RigidTransform

log = logging.getLogger(__name__)


def rmse_nn(registered_source, target) -> float:
    """One-directional RMS distance from each registered-source point to its nearest target point."""
    src, tgt = as_points(registered_source), as_points(target)
    if len(src) == 0 or len(tgt) == 0:
        raise InvalidArgumentError("rmse_nn needs non-empty clouds")
    dist, _ = cKDTree(tgt).query(src)
    return float(np.sqrt(np.mean(dist * dist)))


def _matrix(t) -> np.ndarray:
    return t.matrix() if isinstance(t, RigidTransform) else np.asarray(t, dtype=np.float64)


def transform_error(estimated, ground_truth) -> float:
    """Frobenius norm of the 4x4 homogeneous difference."""
    return float(np.linalg.norm(_matrix(estimated) - _matrix(ground_truth)))


def rmse_t(estimated, ground_truth, squared: bool = False) -> float:
    """Transformation error over one pair or a sequence of pairs.

    The default is the literal form: sqrt of the mean of the unsquared
    Frobenius norms.  ``squared=True`` gives the conventional
    sqrt(mean(||dT||_F^2)).
    """
    single = isinstance(estimated, RigidTransform) or np.ndim(estimated) == 2
    est = [estimated] if single else list(estimated)
    gt = [ground_truth] if single else list(ground_truth)
    if len(est) != len(gt):
        raise InvalidArgumentError(f"{len(est)} estimates for {len(gt)} ground truths")
    if not est:
        raise InvalidArgumentError("rmse_t needs at least one pair")
    errs = np.array([transform_error(e, g) for e, g in zip(est, gt)])
    return float(np.sqrt(np.mean(errs * errs if squared else errs)))


def dsm_diff(a, b, cell: float = 1.0) -> float:
    """Mean absolute difference of per-cell max elevation over cells occupied in both clouds."""
    if not cell > 0:
        raise InvalidArgumentError("cell must be positive")
    da, db = build_dsm(a, cell), build_dsm(b, cell)
    # both lattices are anchored at integer multiples of the cell size
    oa, ob = da.index_offset, db.index_offset
    lo = np.maximum(oa, ob)
    hi = np.minimum(oa + da.cells.shape, ob + db.cells.shape)
    if (hi <= lo).any():
        raise UndefinedMetricError("the two DSMs share no occupied cell")
    sa = da.cells[lo[0] - oa[0]:hi[0] - oa[0], lo[1] - oa[1]:hi[1] - oa[1]]
    sb = db.cells[lo[0] - ob[0]:hi[0] - ob[0], lo[1] - ob[1]:hi[1] - ob[1]]
    both = np.isfinite(sa) & np.isfinite(sb)
    if not both.any():
        raise UndefinedMetricError("the two DSMs share no occupied cell")
    return float(np.mean(np.abs(sa[both] - sb[both])))


def config_hash(config: Mapping) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class EvalReport:
    pair_id: str
    method: str
    config_hash: str
    rmse_nn: float | None = None
    rmse_t: float | None = None
    dsm_mean_abs_diff: float | None = None

    def __post_init__(self):
        for name in ("rmse_nn", "rmse_t", "dsm_mean_abs_diff"):
            v = getattr(self, name)
            if v is not None and not (np.isfinite(v) and v >= 0):
                raise InvalidArgumentError(f"{name} must be finite and >= 0, got {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


METRICS = ("rmse_nn", "rmse_t", "dsm")


def evaluate_pair(pair_id: str, source, target, estimated: RigidTransform,
                  ground_truth: RigidTransform | None = None, metrics: Sequence[str] = METRICS,
                  method: str = "", config: Mapping | None = None, cell: float = 1.0) -> EvalReport:
    """Metrics for one registered pair.

    ``rmse_t`` is reported only when a ground truth is given.  An undefined
    DSM difference (no co-occupied cell) is logged and reported as missing.
    """
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise InvalidArgumentError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    moved = estimated.apply(as_points(source))
    values = {}
    if "rmse_nn" in metrics:
        values["rmse_nn"] = rmse_nn(moved, target)
    if "rmse_t" in metrics and ground_truth is not None:
        values["rmse_t"] = rmse_t(estimated, ground_truth)
    if "dsm" in metrics:
        try:
            values["dsm_mean_abs_diff"] = dsm_diff(moved, target, cell)
        except UndefinedMetricError as exc:
            log.warning("pair %s: %s", pair_id, exc)
    return EvalReport(pair_id, method, config_hash(dict(config or {})), **values)


def write_reports(reports: Iterable[EvalReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


# ---------------------------------------------------------------- ablation harness

@dataclass(frozen=True)
class AblationRow:
    variant: str
    mean_rmse_t: float | None     # None when the variant's checkpoint is absent
    n_pairs: int
    status: str = "ok"


@dataclass
class AblationTable:
    rows: list

    def row(self, variant: str) -> AblationRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "mean_rmse_t", "n_pairs"])
        for r in self.rows:
            w.writerow([r.variant, "absent" if r.mean_rmse_t is None else repr(r.mean_rmse_t), r.n_pairs])
        return buf.getvalue()

    def to_plot_text(self) -> str:
        """Two columns (variant, mean RMSE-T); absent variants are omitted."""
        lines = ["# variant mean_rmse_t"]
        lines += [f"{r.variant} {r.mean_rmse_t!r}" for r in self.rows if r.mean_rmse_t is not None]
        return "\n".join(lines) + "\n"

    def to_json_lines(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.rows)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(self.to_csv(), encoding="utf-8")
        (out / "ablation.txt").write_text(self.to_plot_text(), encoding="utf-8")
        (out / "ablation.jsonl").write_text(self.to_json_lines(), encoding="utf-8")


def worker_count() -> int:
    raw = os.environ.get("LPRNET_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise InvalidArgumentError(f"LPRNET_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise InvalidArgumentError("LPRNET_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _resolve_model(spec):
    from .training import load_checkpoint

    if spec is None:
        return None
    if isinstance(spec, (str, os.PathLike)):
        if not Path(spec).is_file():
            return None
        return load_checkpoint(spec, dtype=np.float64)
    return spec.astype(np.float64)


def run_ablation_suite(variants: Mapping, pairs, iclk_config=None, seed: int = 0,
                       workers: int | None = None) -> AblationTable:
    """Mean RMSE-T (literal form) per variant over a pair set.

    ``variants`` maps a variant name to a trained model or a checkpoint path;
    a missing checkpoint yields an ``absent`` row.  ``pairs`` is a manifest
    path or a sequence of (id, source, target, gt) tuples.
    """
    from .registration import ICLKConfig, LearnedFeature, iclk_register
    from .simdata import manifest_pairs

    pair_list = list(manifest_pairs(pairs)) if isinstance(pairs, (str, os.PathLike)) else list(pairs)
    cfg = iclk_config or ICLKConfig()
    rows = []
    for name, spec in variants.items():
        model = _resolve_model(spec)
        if model is None:
            log.warning("variant %s: checkpoint missing, listed as absent", name)
            rows.append(AblationRow(name, None, 0, "absent"))
            continue
        feature = LearnedFeature(model, seed=seed)

        def one(p):
            return iclk_register(p[1], p[2], feature, cfg).transform

        n_workers = min(workers or worker_count(), max(len(pair_list), 1))
        if n_workers > 1:
            with ThreadPoolExecutor(n_workers) as pool:
                estimates = list(pool.map(one, pair_list))
        else:
            estimates = [one(p) for p in pair_list]
        value = rmse_t(estimates, [p[3] for p in pair_list])
        rows.append(AblationRow(name, value, len(pair_list)))
    return AblationTable(rows)

"""Self-supervised training: augmentation, masking, chamfer reconstruction, AdamW."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .cloud import PointCloud, as_points, normalize
from .errors import ConfigError, DatasetError, InvalidArgumentError, NumericalFault
from .geometry import rotation_about_axis
from .network import MaskedAutoencoder, NetworkConfig, chamfer_l2
from .sampling import generate_mask

log = logging.getLogger(__name__)

_STREAMS = ("shuffle", "augment", "patch", "mask")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4
    base_lr: float = 1e-3
    seed: int = 0
    desk_scale: bool = False
    data: tuple = ()
    weight_decay: float = 0.05
    lr_floor: float = 1e-6
    mask_strategy: str = "hybrid"
    full_so3: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "data", tuple(self.data))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")


def augment_random_rotation(cloud, seed=0, full_so3: bool = False) -> PointCloud:
    """Random rotation about the vertical axis (or uniform over SO(3)) about the origin."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    if full_so3:
        # uniform rotation from a uniform unit quaternion
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        r = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
    else:
        angle = rng.uniform(0.0, 2 * np.pi)
        if angle == 0.0:
            return pc
        r = rotation_about_axis((0.0, 0.0, 1.0), angle)
    return pc.with_points(pc.points @ r.T)


def patchable(n_points: int, cfg: NetworkConfig) -> bool:
    coarsest = int(np.floor(min(cfg.level_fractions) * n_points + 0.5))
    return n_points >= cfg.num_patches and coarsest >= cfg.patch_size


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    loss_history: list = field(default_factory=list)
    rng_states: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    model: MaskedAutoencoder
    loss_history: list          # mean masked-patch chamfer per epoch
    step_losses: list
    optimizer: ad.AdamW
    state: TrainState


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}


def _prepare_sample(points: np.ndarray, model: MaskedAutoencoder, tcfg: TrainConfig,
                    rngs: dict[str, np.random.Generator]):
    cfg = model.config
    pc, _ = normalize(PointCloud(points))
    pc = augment_random_rotation(pc, rngs["augment"], tcfg.full_so3)
    patches = model.patches_for(pc.points, seed=int(rngs["patch"].integers(2**63)))
    visible = generate_mask(cfg.num_patches, cfg.mask_ratio, tcfg.mask_strategy,
                            seed=int(rngs["mask"].integers(2**63)), centers=patches.centers)
    return patches.with_mask(visible)


def train(tcfg: TrainConfig, ncfg: NetworkConfig, clouds: Sequence,
          model: MaskedAutoencoder | None = None,
          on_step: Callable[[dict], None] | None = None,
          checkpoint_path=None, resume: dict | None = None,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Train a masked autoencoder on single clouds (never on pairs or transforms).

    ``resume`` is the record dict of a training checkpoint; training continues
    from its epoch with its parameters, optimizer moments and RNG states.
    ``stop_after_epoch`` ends the run early (used to produce resumable
    checkpoints) without changing the schedule.
    """
    data = []
    for i, c in enumerate(clouds):
        pts = as_points(c)
        if patchable(len(pts), ncfg):
            data.append(pts)
        else:
            log.warning("skipping cloud %d: %d points too few for %d patches of %d",
                        i, len(pts), ncfg.num_patches, ncfg.patch_size)
    if not data:
        raise DatasetError("no cloud in the dataset is large enough for patching")
    if ncfg.mask_ratio > 0 and generate_mask(ncfg.num_patches, ncfg.mask_ratio, "random").all():
        raise ConfigError("mask_ratio masks no patch")

    model = model or MaskedAutoencoder(ncfg, seed=tcfg.seed)
    opt = ad.AdamW(model.params, lr=tcfg.base_lr, weight_decay=tcfg.weight_decay)
    rngs = _streams(tcfg.seed)
    state = TrainState()
    if resume is not None:
        model.load_state_dict({k[len("param/"):]: v for k, v in resume.items() if k.startswith("param/")})
        opt.load_state_records(resume)
        saved = ad.read_text_record(resume["__train__"])
        state = TrainState(saved["epoch"], saved["global_step"], saved["loss_history"], saved["rng_states"])
        for name, g in rngs.items():
            g.bit_generator.state = state.rng_states[name]

    steps_per_epoch = -(-len(data) // tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    step_losses: list = []
    last_epoch = tcfg.epochs if stop_after_epoch is None else min(tcfg.epochs, stop_after_epoch)
    for epoch in range(state.epoch, last_epoch):
        order = rngs["shuffle"].permutation(len(data))
        epoch_losses = []
        for b in range(steps_per_epoch):
            batch = [_prepare_sample(data[i], model, tcfg, rngs)
                     for i in order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]]
            lr = ad.cosine_lr(state.global_step, total_steps, tcfg.base_lr, tcfg.lr_floor)
            try:
                pred, target = model.forward_masked(batch)
                loss = chamfer_l2(pred, target)
                opt.zero_grad()
                loss.backward()
            except NumericalFault as exc:
                raise NumericalFault(exc.op, f"epoch {epoch} batch {b}: non-finite values "
                                             f"from op '{exc.op}'") from None
            opt.step(lr)
            value = loss.item()
            epoch_losses.append(value)
            step_losses.append(value)
            state.global_step += 1
            if on_step is not None:
                on_step({"epoch": epoch, "step": state.global_step, "loss": value, "lr": lr})
        state.loss_history.append(float(np.mean(epoch_losses)))
        state.epoch = epoch + 1
        state.rng_states = {name: g.bit_generator.state for name, g in rngs.items()}
        periodic = tcfg.checkpoint_every and state.epoch % tcfg.checkpoint_every == 0
        if checkpoint_path is not None and (periodic or state.epoch == last_epoch):
            save_checkpoint(model, checkpoint_path, optimizer=opt, state=state, train_config=tcfg)
    return TrainResult(model, state.loss_history, step_losses, opt, state)


# ---------------------------------------------------------------- checkpoints

def checkpoint_records(model: MaskedAutoencoder, optimizer: ad.AdamW | None = None,
                       state: TrainState | None = None,
                       train_config: TrainConfig | None = None) -> dict[str, np.ndarray]:
    rec = {"__config__": ad.text_record({"network": model.config.to_dict(), "seed": model.seed,
                                         "dtype": np.dtype(model.dtype).name})}
    for name, t in model.params.items():
        rec[f"param/{name}"] = t.data
    if optimizer is not None:
        rec.update(optimizer.state_records())
    if state is not None:
        rec["__train__"] = ad.text_record(dataclasses.asdict(state))
    if train_config is not None:
        rec["__train_config__"] = ad.text_record(dataclasses.asdict(train_config))
    return rec


def save_checkpoint(model: MaskedAutoencoder, path, optimizer=None, state=None,
                    train_config=None) -> None:
    ad.write_checkpoint(path, checkpoint_records(model, optimizer, state, train_config))


def model_from_records(rec: dict[str, np.ndarray], dtype=None) -> MaskedAutoencoder:
    if "__config__" not in rec:
        raise InvalidArgumentError("checkpoint lacks the __config__ record")
    meta = ad.read_text_record(rec["__config__"])
    cfg = NetworkConfig.from_dict(meta["network"])
    model = MaskedAutoencoder(cfg, seed=meta["seed"], dtype=np.dtype(meta["dtype"]).type)
    model.load_state_dict({k[len("param/"):]: v for k, v in rec.items() if k.startswith("param/")})
    return model if dtype is None else model.astype(dtype)


def load_checkpoint(path, dtype=None) -> MaskedAutoencoder:
    return model_from_records(ad.read_checkpoint(path), dtype)


def load_training_checkpoint(path) -> tuple[dict[str, np.ndarray], TrainConfig | None]:
    rec = ad.read_checkpoint(path)
    tc = rec.get("__train_config__")
    return rec, None if tc is None else TrainConfig(**ad.read_text_record(tc))


def procedural_dataset(count: int, n_points: int = 1024, seed: int = 0) -> list[PointCloud]:
    """Cycle through the procedural scenes with distinct seeds."""
    from .simdata import SCENES, base_cloud_library

    return [base_cloud_library(SCENES[i % len(SCENES)], n_points, seed=seed * 100003 + i)
            for i in range(count)]

"""Adversarial training loop, checkpoints and inference."""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .netgraph import (
    DiscriminatorConfig,
    GeneratorConfig,
    HourglassConfig,
    build_discriminator,
    build_generator,
    init_parameters,
)
from .objective import (
    ADV_MODES,
    LossLog,
    LossReport,
    combined_generator_objective,
    discriminator_loss,
)
from .skeleton import KinematicTree, as_pose, make_default_tree, rasterize_batch, rescale_pose
from .toydata import Sample, read_dataset, save_image

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.npz"
LOSS_LOG_NAME = "losses.csv"
FORMAT_VERSION = 1
# fixed zip member timestamp keeps checkpoint bytes reproducible
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot: Optional[Path] = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    # optimisation
    batch_size: int = 3
    lr: float = 0.0002
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 50
    iterations_per_epoch: int = 0     # 0: one full pass over the data
    lam: float = 100.0
    seed: int = 0
    adv_mode: str = "nonsaturating"
    d_steps: int = 1
    use_discriminator: bool = True
    # architecture
    n_stacks: int = 3
    resolution: int = 128
    depth: int = 5
    feat_channels: int = 128
    downsample_mode: str = "strided_conv"
    d_layers: int = 3
    d_base_channels: int = 64
    jmap_thickness: int = 3
    # bookkeeping
    sample_every: int = 500
    checkpoint_every: int = 0         # 0: end of every epoch only

    def validate(self):
        if self.batch_size < 1 or self.epochs < 0 or self.iterations_per_epoch < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr < 0 or self.lam < 0:
            raise ValueError("lr and lambda must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.adv_mode not in ADV_MODES:
            raise ValueError(f"adv_mode must be one of {ADV_MODES}")
        if self.d_steps < 1 or self.jmap_thickness < 1:
            raise ValueError("d_steps and jmap_thickness must be >= 1")
        self.generator_config().validate()
        self.discriminator_config().validate()

    def generator_config(self, n_joints: int = 16) -> GeneratorConfig:
        return GeneratorConfig(
            n_stacks=self.n_stacks, resolution=self.resolution, pose_channels=n_joints,
            hourglass=HourglassConfig(self.depth, self.feat_channels, self.feat_channels),
            downsample_mode=self.downsample_mode)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(self.d_layers, self.d_base_channels)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


class TrainState:
    def __init__(self, config: TrainConfig, tree: KinematicTree | None = None,
                 dtype=torch.float32):
        config.validate()
        self.config = config
        self.tree = tree or make_default_tree()
        self.dtype = dtype
        gcfg = config.generator_config(self.tree.n_joints)
        self.generator = init_parameters(build_generator(gcfg), config.seed).to(dtype)
        self.discriminator = init_parameters(
            build_discriminator(config.discriminator_config(), gcfg.in_channels),
            config.seed + 1).to(dtype)
        betas = (config.adam_beta1, config.adam_beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=config.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=config.lr, betas=betas)
        self.iteration = 0

    @property
    def D(self):
        return self.discriminator if self.config.use_discriminator else None


# -- batching ------------------------------------------------------------

def to_network(images) -> torch.Tensor:
    """(B, H, W, 3) in [0, 1] -> (B, 3, H, W) in [-1, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    return torch.from_numpy(arr * 2.0 - 1.0).permute(0, 3, 1, 2).contiguous()


def from_network(t: torch.Tensor) -> np.ndarray:
    """(B, 3, H, W) in [-1, 1] -> (B, H, W, 3) in [0, 1]."""
    return ((t.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float32) + 1.0) / 2.0).clip(0, 1)


def condition_tensor(images, poses, tree: KinematicTree, thickness: int) -> torch.Tensor:
    """Image (3 channels, [-1, 1]) concatenated with the target-pose joint map."""
    imgs = to_network(images)
    h, w = imgs.shape[-2:]
    jmaps = torch.from_numpy(rasterize_batch(poses, tree, h, w, thickness))
    return torch.cat([imgs, jmaps], dim=1)


def make_batch(samples: Sequence[Sample], tree: KinematicTree, thickness: int, dtype=torch.float32):
    u = condition_tensor([s.input_image for s in samples], [s.target_pose for s in samples],
                         tree, thickness)
    v = to_network([s.target_image for s in samples])
    return u.to(dtype), v.to(dtype)


# -- one step ------------------------------------------------------------

def train_step(state: TrainState, batch, snapshot_dir=None) -> LossReport:
    """One discriminator update (if enabled) then one generator update.

    ``batch`` is a list of Samples or a prepared ``(u, v)`` tensor pair.
    """
    cfg = state.config
    if isinstance(batch, tuple):
        u, v = batch
    else:
        u, v = make_batch(batch, state.tree, cfg.jmap_thickness, state.dtype)
    G, D = state.generator, state.D
    G.train()
    state.discriminator.train()

    outputs = G(u)
    d_val = None
    if D is not None:
        for _ in range(cfg.d_steps):
            d_loss = discriminator_loss(D, u, v, outputs)
            _check_finite(state, "d_loss", d_loss, snapshot_dir)
            state.opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            state.opt_d.step()
            d_val = d_loss.detach()

    total_g, report = combined_generator_objective(D, u, v, outputs, cfg.lam, cfg.adv_mode, d_val)
    _check_finite(state, "total_g", total_g, snapshot_dir)
    state.opt_g.zero_grad(set_to_none=True)
    total_g.backward()
    state.opt_g.step()
    if D is not None:
        # generator backward leaves gradients on D; clear them
        state.opt_d.zero_grad(set_to_none=True)
    state.iteration += 1
    return report


def _check_finite(state, name, value, snapshot_dir):
    if torch.isfinite(value).all():
        return
    snapshot = None
    if snapshot_dir is not None:
        snapshot = Path(snapshot_dir) / f"diverged_{state.iteration:07d}.npz"
        save_checkpoint(state, snapshot)
    raise TrainingDiverged(
        f"non-finite {name} ({float(value.detach())}) at iteration {state.iteration}"
        + (f"; snapshot written to {snapshot}" if snapshot else ""), snapshot)


# -- checkpoints ---------------------------------------------------------

def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _tensor_arrays(prefix: str, state_dict) -> dict:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in state_dict.items()}


def _optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> dict:
    out = {}
    for idx, st in sorted(opt.state_dict()["state"].items()):
        for key, val in sorted(st.items()):
            out[f"{prefix}/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return out


def checkpoint_arrays(state: TrainState) -> dict:
    arrays = {}
    arrays.update(_tensor_arrays("generator", state.generator.state_dict()))
    arrays.update(_tensor_arrays("discriminator", state.discriminator.state_dict()))
    arrays.update(_optimizer_arrays("opt_g", state.opt_g))
    arrays.update(_optimizer_arrays("opt_d", state.opt_d))
    return arrays


def save_checkpoint(state: TrainState, path) -> Path:
    """Write a zip of ``.npy`` members plus ``meta.json`` (config, tree, counters)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "iteration": state.iteration,
        "config": asdict(state.config),
        "tree": {"parent": list(state.tree.parent), "joint_names": list(state.tree.joint_names)},
        "dtype": str(state.dtype).replace("torch.", ""),
        # data order is drawn from default_rng([seed, epoch]); no other state
        "rng": {"scheme": "numpy.default_rng([seed, epoch]).permutation",
                "seed": state.config.seed},
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_EPOCH),
                    json.dumps(meta, sort_keys=True, indent=1))
        for name, arr in checkpoint_arrays(state).items():
            zf.writestr(zipfile.ZipInfo(name + ".npy", _ZIP_EPOCH), _npy_bytes(arr))
    tmp.replace(path)
    return path


def _read_checkpoint(path):
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {n[:-4]: np.lib.format.read_array(io.BytesIO(zf.read(n)))
                      for n in zf.namelist() if n.endswith(".npy")}
    except (OSError, KeyError, zipfile.BadZipFile, ValueError) as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return meta, arrays


def _load_module(module, prefix, arrays):
    sd = {k[len(prefix) + 1:]: torch.from_numpy(v.copy())
          for k, v in arrays.items() if k.startswith(prefix + "/")}
    module.load_state_dict(sd, strict=True)


def _load_optimizer(opt, prefix, arrays):
    sd = opt.state_dict()
    state = {}
    for name, val in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/")
        state.setdefault(int(idx), {})[key] = torch.from_numpy(val.copy())
    sd["state"] = state
    opt.load_state_dict(sd)


def load_checkpoint(path) -> TrainState:
    meta, arrays = _read_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    tree = KinematicTree(meta["tree"]["parent"], meta["tree"]["joint_names"])
    state = TrainState(config, tree, getattr(torch, meta.get("dtype", "float32")))
    _load_module(state.generator, "generator", arrays)
    _load_module(state.discriminator, "discriminator", arrays)
    _load_optimizer(state.opt_g, "opt_g", arrays)
    _load_optimizer(state.opt_d, "opt_d", arrays)
    state.iteration = int(meta["iteration"])
    return state


# -- full run ------------------------------------------------------------

def steps_per_epoch(n_samples: int, config: TrainConfig) -> int:
    full = math.ceil(n_samples / config.batch_size) if n_samples else 0
    if config.iterations_per_epoch:
        return min(full, config.iterations_per_epoch) if full else 0
    return full


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def write_sample_grid(path, samples: Sequence[Sample], outputs: Sequence[np.ndarray]) -> None:
    """Rows of ``input | target | stack 1 .. stack K`` for qualitative checks."""
    rows = []
    for k, s in enumerate(samples):
        row = [s.input_image, s.target_image] + [o[k] for o in outputs]
        rows.append(np.concatenate(row, axis=1))
    save_image(path, np.concatenate(rows, axis=0))


def predict_stacks(state: TrainState, u: torch.Tensor) -> list[np.ndarray]:
    """All stack outputs, in [0, 1], with batch-norm in inference mode."""
    G = state.generator
    was_training = G.training
    G.eval()
    with torch.no_grad():
        outs = [from_network(o) for o in G(u.to(state.dtype))]
    G.train(was_training)
    return outs


def train_on_samples(state: TrainState, samples: Sequence[Sample], out_dir=None,
                     progress=None) -> TrainState:
    """Train ``state`` in place up to ``config.epochs``; resumes at ``state.iteration``."""
    cfg = state.config
    n = len(samples)
    spe = steps_per_epoch(n, cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    log = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log = LossLog(out_dir / LOSS_LOG_NAME)
        log.truncate(state.iteration)
    if spe == 0:
        if out_dir is not None:
            save_checkpoint(state, out_dir / CHECKPOINT_NAME)
        return state
    start_epoch, offset = divmod(state.iteration, spe)
    for epoch in range(start_epoch, cfg.epochs):
        order = epoch_order(cfg.seed, epoch, n)
        for step in range(offset, spe):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            batch = [samples[i] for i in idx]
            u, v = make_batch(batch, state.tree, cfg.jmap_thickness, state.dtype)
            report = train_step(state, (u, v), snapshot_dir=out_dir)
            if log is not None:
                log.append(state.iteration, report)
            if progress is not None:
                progress(state, report)
            if out_dir is not None:
                if cfg.sample_every and state.iteration % cfg.sample_every == 0:
                    grid_dir = out_dir / "samples"
                    grid_dir.mkdir(exist_ok=True)
                    write_sample_grid(grid_dir / f"iter_{state.iteration:07d}.png",
                                      batch, predict_stacks(state, u))
                if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                    save_checkpoint(state, out_dir / CHECKPOINT_NAME)
        offset = 0
        logger.info("epoch %d done at iteration %d", epoch + 1, state.iteration)
        if out_dir is not None:
            save_checkpoint(state, out_dir / CHECKPOINT_NAME)
    if out_dir is not None and not (out_dir / CHECKPOINT_NAME).exists():
        # nothing to train (epochs = 0): still leave a loadable initial state
        save_checkpoint(state, out_dir / CHECKPOINT_NAME)
    return state


def train(config: TrainConfig, dataset_dir, out_dir, resume: bool = False,
          progress=None) -> TrainState:
    """Train on the dataset in ``dataset_dir``; checkpoints and logs go to ``out_dir``.

    With ``resume=True`` an existing ``out_dir/checkpoint.npz`` is continued;
    its stored config is kept except for ``epochs``.
    """
    samples = read_dataset(dataset_dir)
    out_dir = Path(out_dir)
    ckpt = out_dir / CHECKPOINT_NAME
    if resume and ckpt.exists():
        state = load_checkpoint(ckpt)
        state.config.epochs = config.epochs
    else:
        state = TrainState(config)
        if out_dir.exists() and (out_dir / LOSS_LOG_NAME).exists():
            (out_dir / LOSS_LOG_NAME).unlink()
    _check_resolution(samples, state.config.resolution)
    return train_on_samples(state, samples, out_dir, progress)


def _check_resolution(samples, resolution):
    for s in samples[:1]:
        h, w = s.input_image.shape[:2]
        if (h, w) != (resolution, resolution):
            raise ValueError(f"dataset images are {h}x{w}; model resolution is {resolution}")


# -- inference -----------------------------------------------------------

def resize_image(img: np.ndarray, height: int, width: int) -> np.ndarray:
    if img.shape[:2] == (height, width):
        return np.asarray(img, dtype=np.float32)
    chans = [Image.fromarray(np.asarray(img[..., c], dtype=np.float32), mode="F")
             .resize((width, height), Image.BILINEAR) for c in range(img.shape[2])]
    return np.stack([np.asarray(c) for c in chans], axis=-1).clip(0, 1).astype(np.float32)


def repose_batch(state: TrainState, images, target_poses) -> np.ndarray:
    """Repose same-sized images; returns the last stack's output in [0, 1]."""
    images = [np.asarray(im, dtype=np.float32) for im in images]
    if not images:
        return np.zeros((0, 0, 0, 3), np.float32)
    h, w = images[0].shape[:2]
    r = state.config.resolution
    poses = [rescale_pose(as_pose(p, state.tree), (h, w), (r, r)) for p in target_poses]
    small = [resize_image(im, r, r) for im in images]
    u = condition_tensor(small, poses, state.tree, state.config.jmap_thickness)
    out = predict_stacks(state, u)[-1]
    return np.stack([resize_image(o, h, w) for o in out])


def repose(state: TrainState, image, target_pose) -> np.ndarray:
    """Repose a single ``(H, W, 3)`` image in [0, 1] to ``target_pose``."""
    return repose_batch(state, [image], [target_pose])[0]

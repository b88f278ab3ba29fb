"""Procedural paired-frame dataset of articulated stick figures.

Every pair shares one appearance and one background and differs only in
pose, so pixels away from both figures are bit-identical between the input
and target images.  Joints are drawn as discs with distinct saturated colours
which lets :func:`figrepose.evaluator.detect_toy_joints` recover the pose of
any rendered (or generated) image.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from .skeleton import KinematicTree, as_pose, format_pose_line, make_default_tree, parse_pose_line

# Rest skeleton, as (length in figure heights, rest angle in degrees) of the
# bone from parent to child; image y points down so 90 degrees is "down".
REST_BONES = {
    "pelvis": (0.28, 90.0),
    "r_hip": (0.15, 180.0),
    "l_hip": (0.15, 0.0),
    "r_knee": (0.22, 100.0),
    "l_knee": (0.22, 80.0),
    "r_ankle": (0.22, 95.0),
    "l_ankle": (0.22, 85.0),
    "upper_neck": (0.15, -90.0),
    "head_top": (0.16, -90.0),
    "r_shoulder": (0.15, 180.0),
    "l_shoulder": (0.15, 0.0),
    "r_elbow": (0.17, 140.0),
    "l_elbow": (0.17, 40.0),
    "r_wrist": (0.16, 140.0),
    "l_wrist": (0.16, 40.0),
}

# half-width (degrees) of the uniform offset added to each bone's angle;
# offsets accumulate down the chain
ANGLE_RANGES = {
    "pelvis": 15.0, "r_hip": 8.0, "l_hip": 8.0,
    "r_knee": 30.0, "l_knee": 30.0, "r_ankle": 30.0, "l_ankle": 30.0,
    "upper_neck": 15.0, "head_top": 15.0,
    "r_shoulder": 8.0, "l_shoulder": 8.0,
    "r_elbow": 60.0, "l_elbow": 60.0, "r_wrist": 50.0, "l_wrist": 50.0,
}

PATTERNS = ("checker", "gradient", "blobs")

# muted colours: a gray level plus a small per-channel deviation; a convex
# set kept far from the saturated joint palette
_GRAY_RANGE = (0.25, 0.75)
_MUTED_DEV = 0.12


class DatasetError(OSError):
    pass


@dataclass
class ToyConfig:
    height: int = 64
    width: int = 64
    figure_height: float = 0.6        # fraction of the raster height
    scale_jitter: float = 0.1
    bone_jitter: float = 0.08
    limb_width: float = 3.0
    joint_radius: float = 2.0
    palette: str = "fixed"            # fixed | random
    patterns: tuple = PATTERNS
    min_inside: float = 0.8           # bbox area fraction kept inside the raster
    joints_inside: bool = True        # every joint disc fully on the raster
    min_joint_separation: float = 4.5  # pixels between joint centres; 0 disables
    placement_retries: int = 100
    angle_scale: float = 1.0          # multiplies every ANGLE_RANGES entry

    def __post_init__(self):
        self.patterns = tuple(self.patterns)
        if self.palette not in ("fixed", "random"):
            raise ValueError(f"unknown palette mode {self.palette!r}")
        for p in self.patterns:
            if p not in PATTERNS:
                raise ValueError(f"unknown background pattern {p!r}")
        if self.height < 1 or self.width < 1:
            raise ValueError("raster extents must be >= 1")


@dataclass
class ToyAppearance:
    bone_lengths: np.ndarray          # (N,) length of joint i -> parent(i); 0 for roots
    limb_colors: np.ndarray           # (N, 3) colour of the bone ending at joint i
    joint_colors: np.ndarray          # (N, 3)
    limb_width: float
    joint_radius: float
    figure_scale: float

    def __post_init__(self):
        self.bone_lengths = np.asarray(self.bone_lengths, dtype=np.float64)
        self.limb_colors = np.asarray(self.limb_colors, dtype=np.float64)
        self.joint_colors = np.asarray(self.joint_colors, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "bone_lengths": self.bone_lengths.tolist(),
            "limb_colors": self.limb_colors.tolist(),
            "joint_colors": self.joint_colors.tolist(),
            "limb_width": self.limb_width,
            "joint_radius": self.joint_radius,
            "figure_scale": self.figure_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyAppearance":
        return cls(**d)


@dataclass
class BackgroundSpec:
    pattern: str
    params: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class Sample:
    input_image: np.ndarray           # (H, W, 3) float32 in [0, 1]
    input_pose: np.ndarray            # (N, 2)
    target_image: np.ndarray
    target_pose: np.ndarray
    input_mask: Optional[np.ndarray] = None    # (H, W) bool
    target_mask: Optional[np.ndarray] = None
    appearance: Optional[ToyAppearance] = None
    background: Optional[BackgroundSpec] = None


def joint_palette(n: int = 16, hue_offset: float = 0.0) -> np.ndarray:
    """``n`` fully saturated colours evenly spaced in hue."""
    hues = (np.arange(n) / n + hue_offset) % 1.0
    h6 = hues * 6.0
    k = np.stack([(5 + h6) % 6, (3 + h6) % 6, (1 + h6) % 6], axis=1)
    return 1.0 - np.clip(np.minimum(k, 4 - k), 0, 1)


def _muted_color(rng: np.random.Generator) -> np.ndarray:
    gray = rng.uniform(*_GRAY_RANGE)
    return gray + rng.uniform(-_MUTED_DEV, _MUTED_DEV, size=3)


def sample_appearance(rng: np.random.Generator, config: ToyConfig,
                      tree: KinematicTree | None = None) -> ToyAppearance:
    tree = tree or make_default_tree()
    n = tree.n_joints
    scale = config.figure_height * config.height * (
        1.0 + rng.uniform(-config.scale_jitter, config.scale_jitter))
    lengths = np.zeros(n)
    for i, p in tree.edges:
        rest = REST_BONES[tree.joint_names[i]][0]
        lengths[i] = scale * rest * (1.0 + rng.uniform(-config.bone_jitter, config.bone_jitter))
    if config.palette == "fixed":
        colors = joint_palette(n)
    else:
        colors = joint_palette(n, rng.uniform())[rng.permutation(n)]
    limb_colors = np.stack([_muted_color(rng) for _ in range(n)])
    return ToyAppearance(lengths, limb_colors, colors, config.limb_width,
                         config.joint_radius, scale)


def _forward_kinematics(tree: KinematicTree, appearance: ToyAppearance,
                        offsets_deg: np.ndarray) -> np.ndarray:
    """Joint positions relative to a root at the origin."""
    pos = np.zeros((tree.n_joints, 2))
    accumulated = np.zeros(tree.n_joints)
    for i in tree.topological_order():
        p = tree.parent[i]
        if p < 0:
            continue
        accumulated[i] = accumulated[p] + offsets_deg[i]
        angle = math.radians(REST_BONES[tree.joint_names[i]][1] + accumulated[i])
        length = appearance.bone_lengths[i]
        pos[i] = pos[p] + length * np.array([math.cos(angle), math.sin(angle)])
    return pos


def _inside_fraction(lo: np.ndarray, hi: np.ndarray, height: int, width: int) -> float:
    ext = np.maximum(hi - lo, 1e-9)
    clip_lo = np.maximum(lo, 0.0)
    clip_hi = np.minimum(hi, [width - 1.0, height - 1.0])
    inter = np.clip(clip_hi - clip_lo, 0.0, None)
    return float(np.prod(inter) / np.prod(ext))


def _separated(pose: np.ndarray, min_dist: float) -> bool:
    if min_dist <= 0:
        return True
    d2 = np.sum((pose[:, None, :] - pose[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    return bool(d2.min() >= min_dist * min_dist)


def sample_pose(rng: np.random.Generator, tree: KinematicTree, appearance: ToyAppearance,
                height: int, width: int, config: ToyConfig | None = None) -> np.ndarray:
    """Draw joint angles, run forward kinematics and place the root.

    Angles are redrawn until no two joints are closer than
    ``config.min_joint_separation``.  The root is then rejection-sampled until
    at least ``config.min_inside`` of the bounding box (and, with
    ``joints_inside``, every joint disc) lies on the raster.  Both loops give
    up after ``placement_retries`` draws; the last figure is then centred.
    """
    config = config or ToyConfig(height=height, width=width)
    for _ in range(max(1, config.placement_retries)):
        offsets = np.zeros(tree.n_joints)
        for i, _p in tree.edges:
            half = ANGLE_RANGES[tree.joint_names[i]] * config.angle_scale
            offsets[i] = rng.uniform(-half, half) if half > 0 else 0.0
        rel = _forward_kinematics(tree, appearance, offsets)
        if _separated(rel, config.min_joint_separation):
            break
    lo, hi = rel.min(axis=0), rel.max(axis=0)
    ext = hi - lo
    slack = (1.0 - config.min_inside) * ext
    margin = appearance.joint_radius if config.joints_inside else 0.0
    x_range = (-lo[0] - slack[0], width - 1 - hi[0] + slack[0])
    y_range = (-lo[1] - slack[1], height - 1 - hi[1] + slack[1])
    if config.joints_inside:
        x_range = (max(x_range[0], margin - lo[0]), min(x_range[1], width - 1 - margin - hi[0]))
        y_range = (max(y_range[0], margin - lo[1]), min(y_range[1], height - 1 - margin - hi[1]))
    for _ in range(config.placement_retries):
        if x_range[0] > x_range[1] or y_range[0] > y_range[1]:
            break
        root = np.array([rng.uniform(*x_range), rng.uniform(*y_range)])
        if _inside_fraction(lo + root, hi + root, height, width) >= config.min_inside:
            return rel + root
    centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    return rel + centre - (lo + hi) / 2.0


def render_background(spec: BackgroundSpec, height: int, width: int) -> np.ndarray:
    p = spec.params
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    if spec.pattern == "checker":
        cell = p.get("cell", 8)
        a, b = np.asarray(p["color_a"]), np.asarray(p["color_b"])
        odd = ((xs // cell + ys // cell) % 2).astype(bool)
        img = np.where(odd[..., None], b, a)
    elif spec.pattern == "gradient":
        a, b = np.asarray(p["color_a"]), np.asarray(p["color_b"])
        theta = math.radians(p.get("angle", 0.0))
        t = xs * math.cos(theta) + ys * math.sin(theta)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = a + t[..., None] * (b - a)
    elif spec.pattern == "blobs":
        img = np.broadcast_to(np.asarray(p["base"], dtype=np.float64), (height, width, 3)).copy()
        for blob in p["blobs"]:
            cx, cy, sigma = blob["x"], blob["y"], blob["sigma"]
            w = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))[..., None]
            img = (1 - w) * img + w * np.asarray(blob["color"])
    else:
        raise ValueError(f"unknown background pattern {spec.pattern!r}")
    return np.clip(img, 0.0, 1.0)


def sample_background(rng: np.random.Generator, config: ToyConfig) -> BackgroundSpec:
    pattern = config.patterns[rng.integers(len(config.patterns))]
    if pattern == "checker":
        params = {"cell": int(rng.integers(4, 13)),
                  "color_a": _muted_color(rng).tolist(), "color_b": _muted_color(rng).tolist()}
    elif pattern == "gradient":
        params = {"angle": float(rng.uniform(0, 360)),
                  "color_a": _muted_color(rng).tolist(), "color_b": _muted_color(rng).tolist()}
    else:
        blobs = [{"x": float(rng.uniform(0, config.width)),
                  "y": float(rng.uniform(0, config.height)),
                  "sigma": float(rng.uniform(0.08, 0.25) * max(config.height, config.width)),
                  "color": _muted_color(rng).tolist()}
                 for _ in range(int(rng.integers(2, 6)))]
        params = {"base": _muted_color(rng).tolist(), "blobs": blobs}
    return BackgroundSpec(pattern, params, int(rng.integers(2 ** 31)))


def _segment_distance(xs, ys, a, b):
    v = b - a
    denom = float(v @ v)
    if denom == 0.0:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - a[0]) * v[0] + (ys - a[1]) * v[1]) / denom, 0.0, 1.0)
    return np.hypot(xs - (a[0] + t * v[0]), ys - (a[1] + t * v[1]))


def render_figure(pose, appearance: ToyAppearance, background, height: int, width: int,
                  tree: KinematicTree | None = None):
    """Draw the figure over ``background``; return (image, mask).

    ``background`` is a :class:`BackgroundSpec` or an already rendered
    ``(H, W, 3)`` array.  Limbs are capsules, joint discs go on top in index
    order.
    """
    tree = tree or make_default_tree()
    pose = as_pose(pose, tree)
    if isinstance(background, BackgroundSpec):
        img = render_background(background, height, width)
    else:
        img = np.array(background, dtype=np.float64, copy=True)
    mask = np.zeros((height, width), dtype=bool)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    half = appearance.limb_width / 2.0
    for i, p in tree.edges:
        hit = _segment_distance(xs, ys, pose[i], pose[p]) <= half
        img[hit] = appearance.limb_colors[i]
        mask |= hit
    r2 = appearance.joint_radius ** 2
    for i in range(tree.n_joints):
        hit = (xs - pose[i, 0]) ** 2 + (ys - pose[i, 1]) ** 2 <= r2
        img[hit] = appearance.joint_colors[i]
        mask |= hit
    return quantize(img), mask


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG storage is lossless."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def make_pair(rng: np.random.Generator, config: ToyConfig | None = None,
              tree: KinematicTree | None = None) -> Sample:
    config = config or ToyConfig()
    tree = tree or make_default_tree()
    h, w = config.height, config.width
    appearance = sample_appearance(rng, config, tree)
    bg_spec = sample_background(rng, config)
    bg = render_background(bg_spec, h, w)
    pose_in = sample_pose(rng, tree, appearance, h, w, config)
    pose_tg = sample_pose(rng, tree, appearance, h, w, config)
    img_in, mask_in = render_figure(pose_in, appearance, bg, h, w, tree)
    img_tg, mask_tg = render_figure(pose_tg, appearance, bg, h, w, tree)
    return Sample(img_in, pose_in, img_tg, pose_tg, mask_in, mask_tg, appearance, bg_spec)


def _pair_at(args):
    config, seed, index = args
    return make_pair(np.random.default_rng([seed, index]), config)


def make_dataset(config: ToyConfig, n: int, seed: int, workers: int = 1,
                 start: int = 0) -> list[Sample]:
    """Samples ``start .. start+n-1``; sample ``i`` depends only on (config, seed, i)."""
    jobs = [(config, seed, i) for i in range(start, start + n)]
    if workers <= 1 or n < 2:
        return [_pair_at(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_pair_at, jobs, chunksize=max(1, n // (4 * workers))))


# -- storage -------------------------------------------------------------

MANIFEST = "manifest.txt"


def record_files(record_id: str) -> dict[str, str]:
    return {
        "input_image": f"{record_id}_in.png",
        "target_image": f"{record_id}_tg.png",
        "poses": f"{record_id}_poses.txt",
        "input_mask": f"{record_id}_in_mask.png",
        "target_mask": f"{record_id}_tg_mask.png",
        "meta": f"{record_id}_meta.json",
    }


def save_image(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)


def _save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool)).save(path, format="PNG")


def _load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)


def write_dataset(samples, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for k, s in enumerate(samples):
        rid = f"{k:06d}"
        files = record_files(rid)
        save_image(directory / files["input_image"], s.input_image)
        save_image(directory / files["target_image"], s.target_image)
        (directory / files["poses"]).write_text(
            format_pose_line(s.input_pose) + "\n" + format_pose_line(s.target_pose) + "\n")
        if s.input_mask is not None and s.target_mask is not None:
            _save_mask(directory / files["input_mask"], s.input_mask)
            _save_mask(directory / files["target_mask"], s.target_mask)
        meta = {}
        if s.appearance is not None:
            meta["appearance"] = s.appearance.to_dict()
        if s.background is not None:
            meta["background"] = asdict(s.background)
        (directory / files["meta"]).write_text(json.dumps(meta, sort_keys=True))
        ids.append(rid)
    (directory / MANIFEST).write_text("".join(i + "\n" for i in ids))
    return directory


def read_manifest(directory) -> list[str]:
    path = Path(directory) / MANIFEST
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    ids = [ln.strip() for ln in lines if ln.strip()]
    for rid in ids:
        if "/" in rid or rid.startswith("."):
            raise DatasetError(f"corrupt manifest {path}: bad record id {rid!r}")
    return ids


def read_record(directory, record_id: str, tree: KinematicTree | None = None) -> Sample:
    directory = Path(directory)
    files = record_files(record_id)
    try:
        img_in = load_image(directory / files["input_image"])
        img_tg = load_image(directory / files["target_image"])
        lines = [ln for ln in (directory / files["poses"]).read_text().splitlines() if ln.strip()]
        if len(lines) != 2:
            raise DatasetError(f"{directory / files['poses']}: expected 2 pose lines, got {len(lines)}")
        pose_in, pose_tg = (parse_pose_line(ln, tree) for ln in lines)
        mask_in = mask_tg = None
        if (directory / files["input_mask"]).exists():
            mask_in = _load_mask(directory / files["input_mask"])
            mask_tg = _load_mask(directory / files["target_mask"])
        appearance = background = None
        meta_path = directory / files["meta"]
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            if "appearance" in meta:
                appearance = ToyAppearance.from_dict(meta["appearance"])
            if "background" in meta:
                background = BackgroundSpec(**meta["background"])
    except DatasetError:
        raise
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read record {record_id!r} in {directory}: {exc}") from exc
    return Sample(img_in, pose_in, img_tg, pose_tg, mask_in, mask_tg, appearance, background)


def read_dataset(directory, tree: KinematicTree | None = None) -> list[Sample]:
    return [read_record(directory, rid, tree) for rid in read_manifest(directory)]


# -- external video clips ------------------------------------------------

@dataclass
class ClipMetadata:
    clip_id: str
    n_frames: int
    height: int = 0
    width: int = 0


def select_frame_pair(clip: ClipMetadata) -> tuple[int, int]:
    """First frame as input, the 60th (or the last, if shorter) as target."""
    if clip.n_frames < 2:
        raise ValueError(f"clip {clip.clip_id!r} has {clip.n_frames} frame(s); need >= 2")
    return 0, min(59, clip.n_frames - 1)


def frame_has_figure(pose, height: int, width: int, min_fraction: float = 0.5) -> bool:
    pose = as_pose(pose)
    inside = ((pose[:, 0] >= 0) & (pose[:, 0] <= width - 1)
              & (pose[:, 1] >= 0) & (pose[:, 1] <= height - 1))
    return bool(inside.sum() >= min_fraction * len(pose))


FrameDecoder = Callable[[ClipMetadata, int], tuple]


def clip_to_sample(clip: ClipMetadata, decode: FrameDecoder,
                   min_fraction: float = 0.5) -> Optional[Sample]:
    """Build an input/target pair from a clip, or None if it is filtered out.

    ``decode(clip, index)`` returns ``(image, pose)`` or ``(image, pose, mask)``
    with the image as ``(H, W, 3)`` floats in [0, 1].
    """
    try:
        i, j = select_frame_pair(clip)
    except ValueError:
        return None
    first, second = decode(clip, i), decode(clip, j)
    img_in, pose_in = first[0], as_pose(first[1])
    img_tg, pose_tg = second[0], as_pose(second[1])
    h, w = np.shape(img_in)[:2]
    if not (frame_has_figure(pose_in, h, w, min_fraction)
            and frame_has_figure(pose_tg, h, w, min_fraction)):
        return None
    mask_in = first[2] if len(first) > 2 else None
    mask_tg = second[2] if len(second) > 2 else None
    return Sample(np.asarray(img_in, np.float32), pose_in, np.asarray(img_tg, np.float32),
                  pose_tg, mask_in, mask_tg)

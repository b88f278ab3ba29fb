"""Kinematic trees, pose descriptors and the pose -> joint-map rasterizer.

A pose is an ``(N, 2)`` float array of ``(x, y)`` pixel coordinates, ``x``
rightward and ``y`` downward with the origin at the top-left pixel centre.
A joint map is an ``(N, H, W)`` raster where channel ``i`` holds the segment
from joint ``i`` to its parent (or a single disc for a root joint).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MPII_JOINT_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "pelvis", "thorax", "upper_neck", "head_top",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
)

# thorax is the root; legs hang off the pelvis, arms and neck off the thorax
MPII_PARENTS = (1, 2, 6, 6, 3, 4, 7, -1, 7, 8, 11, 12, 7, 7, 13, 14)

# coordinates beyond this magnitude are clamped before integer rasterization
_COORD_LIMIT = float(2 ** 40)


class DescriptorError(ValueError):
    """Raised when a pose does not fit its kinematic tree."""


@dataclass(frozen=True)
class KinematicTree:
    parent: tuple[int, ...]
    joint_names: tuple[str, ...]

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        names = tuple(str(n) for n in self.joint_names)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "joint_names", names)
        n = len(parent)
        if len(names) != n:
            raise ValueError(f"{n} parents but {len(names)} joint names")
        for i, p in enumerate(parent):
            if p == i:
                raise ValueError(f"joint {i} is its own parent")
            if not -1 <= p < n:
                raise ValueError(f"joint {i} has out-of-range parent {p}")
        if not self.roots:
            raise ValueError("tree has no root")
        for i in range(n):
            self.chain(i)

    @property
    def n_joints(self) -> int:
        return len(self.parent)

    @property
    def roots(self) -> list[int]:
        return [i for i, p in enumerate(self.parent) if p == -1]

    @property
    def edges(self) -> list[tuple[int, int]]:
        """(child, parent) pairs, one per non-root joint."""
        return [(i, p) for i, p in enumerate(self.parent) if p >= 0]

    def children(self, joint: int) -> list[int]:
        return [i for i, p in enumerate(self.parent) if p == joint]

    def chain(self, joint: int) -> list[int]:
        """Joints visited walking from ``joint`` up to its root, inclusive."""
        seen = [joint]
        while self.parent[seen[-1]] != -1:
            nxt = self.parent[seen[-1]]
            if nxt in seen:
                raise ValueError(f"cycle through joint {nxt}")
            seen.append(nxt)
        return seen

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def topological_order(self) -> list[int]:
        """Joints ordered so every parent precedes its children."""
        order = list(self.roots)
        k = 0
        while k < len(order):
            order.extend(self.children(order[k]))
            k += 1
        return order


@dataclass(frozen=True)
class JointMap:
    channels: np.ndarray
    fg_value: float = 1.0
    bg_value: float = 0.0

    @property
    def shape(self):
        return self.channels.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.channels
        return self.channels.astype(dtype)


def make_default_tree() -> KinematicTree:
    """The 16-joint MPII-ordered body tree rooted at the thorax."""
    return KinematicTree(MPII_PARENTS, MPII_JOINT_NAMES)


def as_pose(pose, tree: KinematicTree | None = None) -> np.ndarray:
    """Validate and return ``pose`` as a float64 ``(N, 2)`` array."""
    arr = np.asarray(pose, dtype=np.float64)
    if arr.ndim == 1 and arr.size % 2 == 0:
        arr = arr.reshape(-1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DescriptorError(f"pose must have shape (N, 2), got {arr.shape}")
    if tree is not None and arr.shape[0] != tree.n_joints:
        raise DescriptorError(
            f"pose has {arr.shape[0]} joints but tree has {tree.n_joints}")
    if not np.all(np.isfinite(arr)):
        raise DescriptorError("pose coordinates must be finite")
    return arr


def rescale_pose(pose, from_hw: tuple[int, int], to_hw: tuple[int, int]) -> np.ndarray:
    """Scale coordinates from a ``from_hw`` raster to a ``to_hw`` raster."""
    (h0, w0), (h1, w1) = from_hw, to_hw
    if min(h0, w0, h1, w1) < 1:
        raise ValueError("raster extents must be >= 1")
    pose = as_pose(pose)
    if (h0, w0) == (h1, w1):
        return pose.copy()
    return pose * np.array([w1 / w0, h1 / h0])


def _round_half_up(v: float) -> int:
    return int(np.floor(np.clip(v, -_COORD_LIMIT, _COORD_LIMIT) + 0.5))


def _line_pixels(x0: int, y0: int, x1: int, y1: int, lo: int, hi_x: int, hi_y: int):
    """Integer line pixels from (x0, y0) to (x1, y1).

    Midpoint rule with ties resolved toward the direction of travel; only the
    steps whose major coordinate falls in ``[lo, hi]`` are generated so that
    far-off segments stay cheap.
    """
    adx, ady = abs(x1 - x0), abs(y1 - y0)
    sx = 1 if x1 >= x0 else -1
    sy = 1 if y1 >= y0 else -1
    if adx >= ady:
        major0, smaj, n, hi = x0, sx, adx, hi_x
        along, across = adx, ady
    else:
        major0, smaj, n, hi = y0, sy, ady, hi_y
        along, across = ady, adx
    # restrict i so that major0 + smaj * i lies in [lo, hi]
    a, b = (lo - major0) * smaj, (hi - major0) * smaj
    i_lo, i_hi = max(0, min(a, b)), min(n, max(a, b))
    if i_lo > i_hi:
        return np.empty((0, 2), dtype=np.int64)
    i = np.arange(i_lo, i_hi + 1, dtype=np.int64)
    if n == 0:
        q = np.zeros_like(i)
    else:
        q = (2 * i * across + along) // (2 * along)
    if adx >= ady:
        return np.stack([x0 + sx * i, y0 + sy * q], axis=1)
    return np.stack([x0 + sx * q, y0 + sy * i], axis=1)


def disc_offsets(thickness: int) -> np.ndarray:
    """Integer offsets (dx, dy) within radius ``thickness / 2``."""
    r = thickness / 2.0
    k = int(np.floor(r))
    dy, dx = np.mgrid[-k:k + 1, -k:k + 1]
    keep = dx * dx + dy * dy <= r * r
    return np.stack([dx[keep], dy[keep]], axis=1)


def draw_segment(canvas: np.ndarray, p0, p1, thickness: int, value) -> None:
    """Draw a thick integer segment into ``canvas`` (H, W) in place."""
    h, w = canvas.shape
    x0, y0 = _round_half_up(p0[0]), _round_half_up(p0[1])
    x1, y1 = _round_half_up(p1[0]), _round_half_up(p1[1])
    offsets = disc_offsets(thickness)
    pad = int(np.abs(offsets).max()) if len(offsets) else 0
    pts = _line_pixels(x0, y0, x1, y1, -pad, w - 1 + pad, h - 1 + pad)
    if len(pts) == 0:
        return
    stamped = (pts[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
    inside = ((stamped[:, 0] >= 0) & (stamped[:, 0] < w)
              & (stamped[:, 1] >= 0) & (stamped[:, 1] < h))
    stamped = stamped[inside]
    canvas[stamped[:, 1], stamped[:, 0]] = value


def rasterize_jmap(pose, tree: KinematicTree, height: int, width: int,
                   thickness: int = 3, fg: float = 1.0, bg: float = 0.0,
                   dtype=np.float32) -> JointMap:
    """Encode ``pose`` as an N-channel joint map.

    Channel ``i`` draws the segment joint ``i`` -> ``parent[i]``; root joints
    get a single disc.  Everything outside the raster is clipped silently.
    """
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    if thickness < 1:
        raise ValueError("thickness must be >= 1")
    pose = as_pose(pose, tree)
    out = np.full((tree.n_joints, height, width), bg, dtype=dtype)
    for i, p in enumerate(tree.parent):
        end = pose[p] if p >= 0 else pose[i]
        draw_segment(out[i], pose[i], end, thickness, fg)
    return JointMap(out, float(fg), float(bg))


def rasterize_batch(poses, tree: KinematicTree, height: int, width: int,
                    thickness: int = 3) -> np.ndarray:
    """Stack joint maps for a batch of poses into ``(B, N, H, W)`` float32."""
    return np.stack([rasterize_jmap(p, tree, height, width, thickness).channels
                     for p in poses])


def format_pose_line(pose) -> str:
    return " ".join(repr(float(v)) for v in as_pose(pose).ravel())


def parse_pose_line(line: str, tree: KinematicTree | None = None) -> np.ndarray:
    try:
        values = [float(tok) for tok in line.split()]
    except ValueError as exc:
        raise DescriptorError(f"unparseable pose line: {line!r}") from exc
    if len(values) % 2:
        raise DescriptorError(f"odd number of coordinates ({len(values)})")
    return as_pose(np.array(values).reshape(-1, 2), tree)


def write_pose_file(path, poses: Sequence) -> None:
    """One pose per line: ``x0 y0 x1 y1 ...`` in pixel coordinates."""
    text = "".join(format_pose_line(p) + "\n" for p in poses)
    Path(path).write_text(text)


def read_pose_file(path, tree: KinematicTree | None = None) -> list[np.ndarray]:
    lines = Path(path).read_text().splitlines()
    return [parse_pose_line(ln, tree) for ln in lines if ln.strip()]

"""Pose recoverability (PCK) and inner-space preservation (masked RMSE)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .skeleton import KinematicTree, as_pose, make_default_tree
from .toydata import Sample, ToyAppearance

DETECT_DELTA = 0.15


class EvaluationError(ValueError):
    pass


def pose_scale(gt) -> float:
    """Longer side of the tight bounding box of ``gt``."""
    gt = as_pose(gt)
    ext = gt.max(axis=0) - gt.min(axis=0)
    return float(max(ext))


def pck(pred, gt, threshold_fraction: float = 0.5) -> np.ndarray:
    """Per-joint correctness: distance <= threshold_fraction * bbox max side of ``gt``."""
    pred, gt = as_pose(pred), as_pose(gt)
    if pred.shape != gt.shape:
        raise EvaluationError(f"joint count mismatch: {len(pred)} vs {len(gt)}")
    scale = pose_scale(gt)
    if scale <= 0:
        raise EvaluationError("degenerate ground-truth pose (all joints coincide)")
    dist = np.linalg.norm(pred - gt, axis=1)
    return dist <= threshold_fraction * scale


def detect_toy_joints(image, appearance: ToyAppearance, tree: KinematicTree | None = None,
                      delta: float = DETECT_DELTA):
    """Locate each joint as the centroid of pixels within ``delta`` of its colour.

    Returns ``(pose, missing)``.  A joint with no matching pixels is placed at
    the other end of its limb (parent, else first found child, else the mean
    of found joints, else the image centre) and flagged in ``missing``.
    Assumes a single figure in the image.
    """
    tree = tree or make_default_tree()
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    flat = img.reshape(-1, 3)
    ys, xs = np.divmod(np.arange(h * w), w)
    n = tree.n_joints
    pose = np.zeros((n, 2))
    missing = np.zeros(n, dtype=bool)
    for i in range(n):
        d2 = np.sum((flat - appearance.joint_colors[i]) ** 2, axis=1)
        hit = d2 <= delta * delta
        if hit.any():
            pose[i] = [xs[hit].mean(), ys[hit].mean()]
        else:
            missing[i] = True
    if missing.all():
        pose[:] = [(w - 1) / 2.0, (h - 1) / 2.0]
        return pose, missing
    found_mean = pose[~missing].mean(axis=0)
    for i in tree.topological_order():
        if not missing[i]:
            continue
        p = tree.parent[i]
        kids = [c for c in tree.children(i) if not missing[c]]
        if p >= 0 and not missing[p]:
            pose[i] = pose[p]
        elif kids:
            pose[i] = pose[kids[0]]
        else:
            pose[i] = found_mean
    return pose, missing


def masked_rmse(a, b, mask) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or a.shape[:2] != mask.shape:
        raise EvaluationError(f"shape mismatch: {a.shape}, {b.shape}, mask {mask.shape}")
    if not mask.any():
        raise EvaluationError("empty mask")
    diff = (a[mask] - b[mask]) ** 2
    return math.sqrt(math.fsum(diff.ravel()) / diff.size)


def background_mask(sample: Sample) -> np.ndarray:
    return ~(sample.input_mask | sample.target_mask)


def blocked_mask(sample: Sample) -> np.ndarray:
    return sample.input_mask & ~sample.target_mask


@dataclass
class EvalReport:
    pck_per_joint: list[float]
    pck_mean: float
    rmse_background: Optional[float]
    rmse_blocked: Optional[float]
    n_samples: int
    threshold: float = 0.5
    pck_stderr: float = 0.0
    rmse_background_stderr: Optional[float] = None
    rmse_blocked_stderr: Optional[float] = None
    n_missing_joints: int = 0
    per_sample: list[dict] = field(default_factory=list, repr=False)

    SCALARS = ("n_samples", "threshold", "pck_mean", "pck_stderr", "rmse_background",
               "rmse_background_stderr", "rmse_blocked", "rmse_blocked_stderr",
               "n_missing_joints")

    def to_text(self) -> str:
        lines = [f"samples             {self.n_samples}",
                 f"PCK@{self.threshold:g}             {self.pck_mean:.4f} +/- {self.pck_stderr:.4f}"]
        if self.rmse_background is not None:
            lines.append(f"RMSE background     {self.rmse_background:.4f} +/- {self.rmse_background_stderr:.4f}")
        if self.rmse_blocked is not None:
            lines.append(f"RMSE blocked area   {self.rmse_blocked:.4f} +/- {self.rmse_blocked_stderr:.4f}")
        lines.append(f"missing detections  {self.n_missing_joints}")
        lines.append("per-joint PCK       " + " ".join(f"{v:.3f}" for v in self.pck_per_joint))
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        out = [f"{k} = {_fmt(getattr(self, k))}" for k in self.SCALARS]
        out.append("pck_per_joint = " + " ".join(repr(float(v)) for v in self.pck_per_joint))
        return "\n".join(out) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "EvalReport":
        values = {}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
        kwargs = {"pck_per_joint": [float(v) for v in values.pop("pck_per_joint").split()]}
        for k in cls.SCALARS:
            raw = values.pop(k)
            if raw == "none":
                kwargs[k] = None
            elif k in ("n_samples", "n_missing_joints"):
                kwargs[k] = int(raw)
            else:
                kwargs[k] = float(raw)
        if values:
            raise ValueError(f"unknown report keys: {sorted(values)}")
        return cls(**kwargs)


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _mean_stderr(values: Sequence[float]):
    values = [v for v in values if v is not None and not math.isnan(v)]
    if not values:
        return None, None
    mean = math.fsum(values) / len(values)
    if len(values) < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var / len(values))


Reposer = Callable[[Sequence[Sample]], np.ndarray]
PoseEstimator = Callable[[np.ndarray, Sample], np.ndarray]


def evaluate_outputs(outputs: Sequence[np.ndarray], samples: Sequence[Sample],
                     tree: KinematicTree | None = None, threshold: float = 0.5,
                     estimator: PoseEstimator | None = None) -> EvalReport:
    """Score already-reposed images against their samples' targets."""
    tree = tree or make_default_tree()
    if len(outputs) != len(samples):
        raise EvaluationError(f"{len(outputs)} outputs for {len(samples)} samples")
    if not samples:
        raise EvaluationError("no samples to evaluate")
    correct = []
    rows = []
    bg_vals, bl_vals = [], []
    n_missing = 0
    have_masks = all(s.input_mask is not None and s.target_mask is not None for s in samples)
    for k, (out, s) in enumerate(zip(outputs, samples)):
        if estimator is not None:
            pred = as_pose(estimator(out, s), tree)
            missing = np.zeros(tree.n_joints, dtype=bool)
        else:
            if s.appearance is None:
                raise EvaluationError(f"sample {k} has no toy appearance; pass an estimator")
            pred, missing = detect_toy_joints(out, s.appearance, tree)
        ok = pck(pred, s.target_pose, threshold)
        correct.append(ok)
        n_missing += int(missing.sum())
        row = {"index": k, "pck": float(ok.mean()), "missing": int(missing.sum())}
        if have_masks:
            bg = background_mask(s)
            bl = blocked_mask(s)
            row["rmse_background"] = masked_rmse(out, s.target_image, bg) if bg.any() else math.nan
            row["rmse_blocked"] = masked_rmse(out, s.target_image, bl) if bl.any() else math.nan
            bg_vals.append(row["rmse_background"])
            bl_vals.append(row["rmse_blocked"])
        rows.append(row)
    correct = np.array(correct)
    per_joint = [math.fsum(col) / len(col) for col in correct.T.astype(float)]
    pck_mean, pck_se = _mean_stderr([r["pck"] for r in rows])
    report = EvalReport(
        pck_per_joint=per_joint, pck_mean=math.fsum(per_joint) / len(per_joint),
        rmse_background=None, rmse_blocked=None, n_samples=len(samples),
        threshold=threshold, pck_stderr=pck_se, n_missing_joints=n_missing, per_sample=rows)
    if have_masks:
        report.rmse_background, report.rmse_background_stderr = _mean_stderr(bg_vals)
        report.rmse_blocked, report.rmse_blocked_stderr = _mean_stderr(bl_vals)
    return report


def evaluate(reposer, samples: Sequence[Sample], tree: KinematicTree | None = None,
             threshold: float = 0.5, batch_size: int = 16,
             estimator: PoseEstimator | None = None) -> EvalReport:
    """Repose every sample and score it.

    ``reposer`` is a trained state (anything :func:`figrepose.trainer.repose_batch`
    accepts) or a callable mapping a list of samples to reposed images.
    """
    if not callable(reposer):
        from .trainer import repose_batch
        state = reposer
        tree = tree or state.tree

        def reposer(batch):
            return repose_batch(state, [s.input_image for s in batch], [s.target_pose for s in batch])
    outputs = []
    for start in range(0, len(samples), batch_size):
        outputs.extend(reposer(samples[start:start + batch_size]))
    return evaluate_outputs(outputs, samples, tree, threshold, estimator)


def identity_reposer(batch: Sequence[Sample]) -> list[np.ndarray]:
    """Debug baseline that returns the ground-truth target."""
    return [s.target_image for s in batch]


def copy_input_reposer(batch: Sequence[Sample]) -> list[np.ndarray]:
    """Debug baseline that returns the unchanged input."""
    return [s.input_image for s in batch]


PER_SAMPLE_FIELDS = ("index", "pck", "missing", "rmse_background", "rmse_blocked")


def write_report(report: EvalReport, path) -> list[Path]:
    """Write ``<path>`` (key = value), ``<path>.txt`` and ``<path>.samples.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_kv())
    text_path = path.with_name(path.name + ".txt")
    text_path.write_text(report.to_text())
    csv_path = path.with_name(path.name + ".samples.csv")
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PER_SAMPLE_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in report.per_sample:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return [path, text_path, csv_path]


def read_report(path) -> EvalReport:
    return EvalReport.from_kv(Path(path).read_text())

"""Stacked adversarial and L1 losses.

``D`` is any callable ``D(condition, image) -> probabilities``; ``outputs``
is the list of per-stack generator predictions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import torch

EPS = 1e-7
DEFAULT_LAMBDA = 100.0
ADV_MODES = ("minimax", "nonsaturating")


@dataclass
class LossReport:
    l1: float
    g_adv: float
    d_loss: float
    total_g: float
    per_stack_l1: list[float] = field(default_factory=list)


def _clamped(p):
    return p.clamp(EPS, 1.0 - EPS)


def l1_loss(outputs, target):
    """Return ``(total, per_stack)``: per-stack mean absolute error and its sum."""
    per_stack = []
    for out in outputs:
        if out.shape != target.shape:
            raise ValueError(f"output shape {tuple(out.shape)} != target {tuple(target.shape)}")
        per_stack.append((target - out).abs().mean())
    if not per_stack:
        raise ValueError("no generator outputs")
    return torch.stack(per_stack).sum(), per_stack


def generator_adv_loss(D, u, outputs, mode: str = "minimax"):
    """Sum over stacks of ``mean log(1 - D(u, G_i))`` (or ``-mean log D`` when
    ``mode='nonsaturating'``)."""
    if mode not in ADV_MODES:
        raise ValueError(f"mode must be one of {ADV_MODES}")
    terms = []
    for out in outputs:
        p = _clamped(D(u, out))
        if mode == "minimax":
            terms.append(torch.log1p(-p).mean())
        else:
            terms.append(-torch.log(p).mean())
    return torch.stack(terms).sum()


def discriminator_loss(D, u, v, outputs):
    """``-[mean log D(u, v) + mean_i mean log(1 - D(u, G_i))]``.

    Fake terms are averaged over stacks; the generator outputs are detached.
    """
    real = torch.log(_clamped(D(u, v))).mean()
    fakes = [torch.log1p(-_clamped(D(u, out.detach()))).mean() for out in outputs]
    return -(real + torch.stack(fakes).mean())


def combined_generator_objective(D, u, v, outputs, lam: float = DEFAULT_LAMBDA,
                                 mode: str = "minimax", d_loss=None):
    """Return ``(total_g tensor, LossReport)`` with ``total_g = g_adv + lam * l1``.

    ``D=None`` drops the adversarial term (L1-only training); ``g_adv`` is then 0.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    l1, per_stack = l1_loss(outputs, v)
    if D is None:
        g_adv = torch.zeros((), dtype=l1.dtype)
    else:
        g_adv = generator_adv_loss(D, u, outputs, mode)
    total = g_adv + lam * l1
    report = LossReport(
        l1=float(l1.detach()), g_adv=float(g_adv.detach()),
        d_loss=float(d_loss.detach()) if torch.is_tensor(d_loss) else float(d_loss or 0.0),
        total_g=float(total.detach()), per_stack_l1=[float(x.detach()) for x in per_stack])
    return total, report


LOG_FIELDS = ("iteration", "l1", "g_adv", "d_loss", "total_g")


class LossLog:
    """Append-only CSV of per-iteration losses."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    def append(self, iteration: int, report: LossReport) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([iteration, repr(report.l1), repr(report.g_adv),
                                     repr(report.d_loss), repr(report.total_g)])

    def truncate(self, last_iteration: int) -> None:
        """Drop rows past ``last_iteration`` (used when resuming)."""
        rows = read_loss_log(self.path)
        with self.path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in rows:
                if r["iteration"] <= last_iteration:
                    w.writerow([r["iteration"]] + [repr(r[k]) for k in LOG_FIELDS[1:]])


def read_loss_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{"iteration": int(r["iteration"]), **{k: float(r[k]) for k in LOG_FIELDS[1:]}}
                for r in csv.DictReader(fh)]

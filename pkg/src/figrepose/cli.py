"""Command-line entry point: ``figrepose {gen-data,train,repose,eval}``.

Configuration is resolved as defaults < ``--config`` file < flags.  Exit
codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .trainer import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SECTION = "figrepose"

logger = logging.getLogger("figrepose")


@dataclass
class RunConfig(TrainConfig):
    # dataset generation (image size is ``resolution``; seed is shared)
    n_samples: int = 2000
    palette: str = "fixed"
    workers: int = 1

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def validate(self):
        super().validate()
        if self.n_samples < 0 or self.workers < 1:
            raise ValueError("n_samples must be >= 0 and workers >= 1")
        if self.palette not in ("fixed", "random"):
            raise ValueError("palette must be 'fixed' or 'random'")

    def to_ini(self) -> str:
        lines = [f"[{SECTION}]"]
        lines += [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


class UsageError(Exception):
    pass


def _coerce(name: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        return kind(raw.strip())
    except ValueError as exc:
        raise UsageError(f"config key {name!r}: cannot parse {raw!r} as {kind.__name__}") from exc


def load_config_file(path) -> dict:
    """Read ``key = value`` pairs (optionally under ``[figrepose]``)."""
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = f"[{SECTION}]\n" + text
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"bad config file {path}: {exc}") from exc
    extra = [s for s in parser.sections() if s != SECTION]
    if extra:
        raise UsageError(f"unknown config sections: {extra}")
    kinds = {f.name: type(f.default) for f in fields(RunConfig)}
    values = {}
    for key, raw in parser.items(SECTION) if parser.has_section(SECTION) else []:
        if key not in kinds:
            raise UsageError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, kinds[key])
    return values


# flag -> (RunConfig field, argparse kwargs)
_FLAGS = {
    "--stacks": ("n_stacks", dict(type=int)),
    "--resolution": ("resolution", dict(type=int)),
    "--depth": ("depth", dict(type=int)),
    "--feat": ("feat_channels", dict(type=int)),
    "--lambda": ("lam", dict(type=float)),
    "--lr": ("lr", dict(type=float)),
    "--beta1": ("adam_beta1", dict(type=float)),
    "--beta2": ("adam_beta2", dict(type=float)),
    "--batch": ("batch_size", dict(type=int)),
    "--d-layers": ("d_layers", dict(type=int, choices=[2, 3, 4])),
    "--d-base": ("d_base_channels", dict(type=int)),
    "--downsample": ("downsample_mode", dict(choices=["conv", "maxpool"])),
    "--adv-mode": ("adv_mode", dict(choices=["minimax", "nonsaturating"])),
    "--epochs": ("epochs", dict(type=int)),
    "--iterations-per-epoch": ("iterations_per_epoch", dict(type=int)),
    "--thickness": ("jmap_thickness", dict(type=int)),
    "--sample-every": ("sample_every", dict(type=int)),
    "--checkpoint-every": ("checkpoint_every", dict(type=int)),
    "--seed": ("seed", dict(type=int)),
    "--n": ("n_samples", dict(type=int)),
    "--palette": ("palette", dict(choices=["fixed", "random"])),
    "--workers": ("workers", dict(type=int)),
}
_DOWNSAMPLE = {"conv": "strided_conv", "maxpool": "max_pool"}


def resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(load_config_file(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
    for name, _ in _FLAGS.values():
        v = getattr(args, name, None)
        if v is not None:
            values[name] = _DOWNSAMPLE.get(v, v) if name == "downsample_mode" else v
    if getattr(args, "no_discriminator", False):
        values["use_discriminator"] = False
    cfg = RunConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser(print_only: bool = False) -> argparse.ArgumentParser:
    """``print_only`` relaxes positionals so ``--print-config`` works anywhere."""
    pos = {"nargs": "?"} if print_only else {}
    # SUPPRESS keeps a subcommand from resetting flags given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", metavar="FILE", help="INI file of configuration keys")
    g.add_argument("--print-config", action="store_true",
                   help="print the resolved configuration and exit")
    for flag, (name, kw) in _FLAGS.items():
        g.add_argument(flag, dest=name, **kw)
    g.add_argument("--no-discriminator", action="store_true", help="train with the L1 loss only")
    g.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="figrepose", parents=[common],
                description="Pose-conditioned figure reposing.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write a toy dataset")
    s.add_argument("out_dir", **pos)

    s = sub.add_parser("train", parents=[common], help="train a reposing model")
    s.add_argument("data_dir", **pos)
    s.add_argument("out_dir", **pos)
    s.add_argument("--resume", action="store_true", help="continue out_dir/checkpoint.npz")

    s = sub.add_parser("repose", parents=[common], help="repose one image")
    s.add_argument("checkpoint", **pos)
    s.add_argument("image", **pos)
    s.add_argument("pose", **pos, help="pose file; the first line is used")
    s.add_argument("out", **pos)
    s.add_argument("--overlay", metavar="PATH", help="also write the output with the target skeleton drawn on")

    s = sub.add_parser("eval", parents=[common], help="score a model on a dataset")
    s.add_argument("data_dir", **pos)
    s.add_argument("report", **pos)
    s.add_argument("--checkpoint", metavar="PATH")
    s.add_argument("--baseline", choices=["identity", "copy-input"],
                   help="score a debug baseline instead of a model")
    s.add_argument("--threshold", type=float, default=0.5)
    return p


# -- commands ------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out_dir) -> int:
    from .toydata import ToyConfig, make_dataset, write_dataset
    toy = ToyConfig(height=cfg.resolution, width=cfg.resolution, palette=cfg.palette)
    samples = make_dataset(toy, cfg.n_samples, seed=cfg.seed, workers=cfg.workers)
    write_dataset(samples, out_dir)
    print(f"wrote {len(samples)} pairs ({cfg.resolution}x{cfg.resolution}) to {out_dir}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, data_dir, out_dir, resume: bool = False) -> int:
    from .trainer import train

    def progress(state, report):
        if state.iteration % 100 == 0:
            logger.info("iter %d  l1 %.4f  g_adv %.4f  d_loss %.4f",
                        state.iteration, report.l1, report.g_adv, report.d_loss)
    state = train(cfg.train_config(), data_dir, out_dir, resume=resume, progress=progress)
    print(f"trained to iteration {state.iteration}; checkpoint in {out_dir}")
    return EXIT_OK


def skeleton_overlay(image: np.ndarray, pose, tree) -> np.ndarray:
    """Draw each limb in its joint's palette colour on a copy of ``image``."""
    from .skeleton import rasterize_jmap
    from .toydata import joint_palette
    h, w = image.shape[:2]
    out = np.array(image, dtype=np.float32, copy=True)
    jm = rasterize_jmap(pose, tree, h, w, thickness=1).channels
    colors = joint_palette(tree.n_joints)
    for i in range(tree.n_joints):
        out[jm[i] > 0] = colors[i]
    return out


def cmd_repose(checkpoint, image_path, pose_path, out_path, overlay_path=None) -> int:
    from .skeleton import read_pose_file
    from .toydata import load_image, save_image
    from .trainer import load_checkpoint, repose
    state = load_checkpoint(checkpoint)
    image = load_image(image_path)
    poses = read_pose_file(pose_path, state.tree)
    if not poses:
        raise ValueError(f"{pose_path} holds no pose")
    out = repose(state, image, poses[0])
    save_image(out_path, out)
    if overlay_path:
        save_image(overlay_path, skeleton_overlay(out, poses[0], state.tree))
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_eval(data_dir, report_path, checkpoint=None, baseline=None, threshold=0.5) -> int:
    from .evaluator import copy_input_reposer, evaluate, identity_reposer, write_report
    from .toydata import read_dataset
    samples = read_dataset(data_dir)
    if baseline:
        reposer = identity_reposer if baseline == "identity" else copy_input_reposer
    else:
        from .trainer import load_checkpoint
        reposer = load_checkpoint(checkpoint)
    report = evaluate(reposer, samples, threshold=threshold)
    write_report(report, report_path)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser(print_only="--print-config" in argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "eval" and bool(args.checkpoint) == bool(args.baseline):
            raise UsageError("eval needs exactly one of --checkpoint or --baseline")
    except UsageError as exc:
        print(f"figrepose: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "print_config", False):
        sys.stdout.write(cfg.to_ini())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out_dir)
        if args.command == "train":
            return cmd_train(cfg, args.data_dir, args.out_dir, args.resume)
        if args.command == "repose":
            return cmd_repose(args.checkpoint, args.image, args.pose, args.out, args.overlay)
        return cmd_eval(args.data_dir, args.report, args.checkpoint, args.baseline,
                        args.threshold)
    except Exception as exc:  # runtime failures become exit code 2
        logger.debug("command failed", exc_info=True)
        print(f"figrepose: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

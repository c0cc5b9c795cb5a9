"""Command line: synth -> train -> infer -> eval, plus ablation sweeps.

Every command exits 0 on success; on error it prints one ``error: ...`` line
to stderr and exits 1.
"""
import argparse
import logging
import os
import sys

import numpy as np
import yaml

from actloc import config, data, evaluation, experiment, plotting, train
from actloc.nn import checkpoint

log = logging.getLogger("actloc")


def config_sidecar(checkpoint_path):
    """Config file stored next to a checkpoint so ``infer`` can rebuild the model."""
    return checkpoint_path + ".yaml"


def _figure_path(path):
    return os.path.splitext(path)[0] + ".png"


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _load_config(path):
    return config.load(path) if path else config.ExperimentConfig()


def _apply_train_flags(cfg, args):
    flags = {
        "total_steps": args.steps,
        "seed": args.seed,
        "base_lr": args.lr,
    }
    if args.no_augment:
        flags["augment"] = False
    if args.per_class_regression:
        flags["class_agnostic"] = False
    if args.static_backbone:
        flags["static_backbone"] = True
    if args.context:
        flags["context"] = True
    return config.override(cfg, "train", **flags)


def load_model(checkpoint_path, cfg):
    """Detector for ``cfg`` with weights from ``checkpoint_path``.

    Any difference between the checkpoint and the parameters the config
    implies is an error naming the first offending parameter.
    """
    arrays = checkpoint.load(checkpoint_path)
    model = train.build_model(cfg)
    expected = model.state()
    for name, value in expected.items():
        if name not in arrays:
            raise config.ConfigError(
                f"checkpoint/config mismatch: parameter {name!r} missing from checkpoint")
        if arrays[name].shape != value.shape:
            raise config.ConfigError(
                f"checkpoint/config mismatch: parameter {name!r} has shape "
                f"{arrays[name].shape} in checkpoint, config expects {value.shape}")
    extra = [name for name in arrays if name not in expected]
    if extra:
        raise config.ConfigError(
            f"checkpoint/config mismatch: parameter {extra[0]!r} not in config's model")
    model.load_state(arrays)
    return model


def cmd_synth(args):
    cfg = _load_config(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    for split in ("train", "val"):
        samples = data.generate_synthetic(cfg.synth, split)
        data.save_split(args.out_dir, split, samples)
        print(f"{split}: {len(samples)} clips -> {data.clips_path(args.out_dir, split)}")


def cmd_train(args):
    cfg = _apply_train_flags(_load_config(args.config), args)
    samples = data.load_split(args.data_dir, "train")

    def progress(row):
        if row["step"] % 100 == 0:
            log.info("step %d lr %.5f loss %.4f", row["step"], row["lr"], row["total"])

    model, loss_log = train.train_loop(samples, cfg, callback=progress)
    for path in (args.out_checkpoint, args.loss_log):
        _ensure_parent(path)
    checkpoint.save(args.out_checkpoint, model.state())
    config.dump(cfg, config_sidecar(args.out_checkpoint))
    header = yaml.safe_dump(cfg.to_dict(), sort_keys=False).rstrip()
    with open(args.loss_log, "w", encoding="utf-8") as fh:
        fh.write(train.format_loss_log(loss_log, header=header))
    plotting.loss_curve(loss_log, _figure_path(args.loss_log))
    print(f"final loss {loss_log[-1]['total']:.6f}")


def cmd_infer(args):
    cfg_path = args.config or config_sidecar(args.checkpoint)
    if not os.path.exists(cfg_path):
        raise config.ConfigError(f"no config given and no sidecar {cfg_path}")
    cfg = config.load(cfg_path)
    model = load_model(args.checkpoint, cfg)
    samples = data.load_split(args.data_dir, args.split)
    dets, counts = experiment.infer(model, samples)
    _ensure_parent(args.out_detections)
    with open(args.out_detections, "w", encoding="utf-8", newline="") as fh:
        fh.write(data.write_detections_csv(dets))
    print(f"{len(dets)} detections on {len(samples)} keyframes "
          f"(max proposals per keyframe {max(counts, default=0)})")


def cmd_eval(args):
    with open(args.detections, encoding="utf-8") as fh:
        dets = data.parse_detections_csv(fh.read())
    with open(args.groundtruth, encoding="utf-8") as fh:
        gt = data.parse_ava_groundtruth_csv(fh.read())
    report = evaluation.evaluate(dets, gt)
    _ensure_parent(args.report)
    with open(args.report, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())
    plotting.per_class_ap(report, _figure_path(args.report))
    print(report.summary())


def cmd_ablate(args):
    cfg = _load_config(args.config)
    if args.steps:
        cfg = config.override(cfg, "train", total_steps=args.steps)
    train_samples = data.load_split(args.data_dir, "train")
    val_samples = data.load_split(args.data_dir, "val")
    results = experiment.run_ablation(cfg, train_samples, val_samples, seeds=args.seeds,
                                      names=args.names)
    _ensure_parent(args.out)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(experiment.ablation_csv(results, args.seeds))
    plotting.ablation(results, _figure_path(args.out))
    for name, scores in results.items():
        print(f"{name}: median mAP={float(np.median(scores)):.6f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="actloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic train/val splits")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector on the train split")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--loss-log", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--per-class-regression", action="store_true")
    p.add_argument("--static-backbone", action="store_true")
    p.add_argument("--context", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="detect actions on every keyframe of a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-detections", required=True)
    p.add_argument("--config", help="defaults to the config saved next to the checkpoint")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="frame mAP of a detections CSV")
    p.add_argument("--detections", required=True)
    p.add_argument("--groundtruth", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate every ablation over several seeds")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--names", nargs="+", choices=list(experiment.ABLATIONS))
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, KeyError, FloatingPointError,
            checkpoint.CheckpointFormatError) as exc:
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

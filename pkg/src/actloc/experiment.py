"""Train / infer / evaluate compositions shared by the CLI and the acceptance suite."""
import dataclasses
import logging

import numpy as np

from actloc import config, data, evaluation, train

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": {},
    "static_backbone": {"static_backbone": True},
    "no_augment": {"augment": False},
    "per_class_regression": {"class_agnostic": False},
}


def infer(model, samples, batch_size=4):
    """Detections for every sample keyframe, as scored single-action annotations."""
    out, proposal_counts = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        results = model.detect(np.stack([s.pixels for s in chunk]))
        for s, (props, _, dets) in zip(chunk, results):
            proposal_counts.append(len(props))
            for box, c, score in zip(dets.boxes, dets.classes, dets.scores):
                out.append(data.Annotation(s.video_id, s.timestamp,
                                           tuple(float(v) for v in box),
                                           frozenset({int(c)}), float(score)))
    return out, proposal_counts


def run(cfg, train_samples, val_samples, callback=None):
    model, loss_log = train.train_loop(train_samples, cfg, callback=callback)
    dets, _ = infer(model, val_samples)
    gt = [a for s in val_samples for a in s.annotations()]
    return evaluation.evaluate(dets, gt), loss_log, model


def ablation_config(cfg, name, seed):
    flags = dict(ABLATIONS[name], seed=seed)
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **flags))


def run_ablation(cfg, train_samples, val_samples, seeds=(0, 1, 2), names=None):
    """mAP for every (ablation, seed) pair: ``{name: [mAP per seed]}``."""
    names = list(ABLATIONS) if names is None else names
    results = {}
    for name in names:
        scores = []
        for seed in seeds:
            report, _, _ = run(ablation_config(cfg, name, seed), train_samples, val_samples)
            log.info("ablation %s seed %d: %s", name, seed, report.summary())
            scores.append(report.mean_ap)
        results[name] = scores
    return results


def ablation_csv(results, seeds):
    lines = ["config," + ",".join(f"seed{s}" for s in seeds) + ",median"]
    for name, scores in results.items():
        lines.append(",".join([name, *(f"{v:.6f}" for v in scores),
                               f"{float(np.median(scores)):.6f}"]))
    return "\n".join(lines) + "\n"


def load_config(path=None):
    return config.load(path) if path else config.ExperimentConfig()

"""Matplotlib figures written next to the CSV outputs of the CLI."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from actloc.data import CLASS_NAMES  # noqa: E402


def _label(c):
    return f"{c}: {CLASS_NAMES[c]}" if 0 <= c < len(CLASS_NAMES) else str(c)


def per_class_ap(report, path):
    """Bar chart of per-class AP with the mean as a horizontal line."""
    classes = sorted(report.per_class_ap)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(classes) + 2), 3.5))
    ax.bar([_label(c) for c in classes], [report.per_class_ap[c] for c in classes],
           color="tab:blue")
    ax.axhline(report.mean_ap, color="tab:red", linestyle="--",
               label=f"mAP = {report.mean_ap:.3f}")
    ax.set_ylim(0, 1)
    ax.set_ylabel("AP @ IoU 0.5")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def loss_curve(log, path, window=50):
    """Loss components per step, smoothed with a trailing moving average."""
    steps = np.array([row["step"] for row in log])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("rpn_cls", "rpn_reg", "cls", "reg", "total"):
        values = np.array([row[key] for row in log], dtype=np.float64)
        w = max(1, min(window, len(values)))
        smooth = np.convolve(values, np.ones(w) / w, mode="valid")
        ax.plot(steps[w - 1:], smooth, label=key, linewidth=2 if key == "total" else 1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def ablation(results, path):
    """Per-seed mAP points and the median for every ablation config."""
    names = list(results)
    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(names) + 1), 3.5))
    for i, name in enumerate(names):
        scores = results[name]
        ax.scatter([i] * len(scores), scores, color="tab:gray", zorder=2)
        ax.hlines(np.median(scores), i - 0.3, i + 0.3, color="tab:red", zorder=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=15)
    ax.set_ylabel("val mAP (median in red)")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)

import pytest

from actloc import config

TINY = {
    "synth": {"seed": 3, "train_clips": 4, "val_clips": 2, "frames": 4, "image_size": 16,
              "min_size": 0.25, "max_size": 0.4},
    "backbone": {
        "clip_length": 4,
        "image_size": 16,
        "trunk": [
            {"channels": 4, "kernel": [3, 3, 3], "stride": [1, 2, 2]},
            {"channels": 6, "kernel": [3, 3, 3], "stride": [2, 2, 2]},
        ],
        "head": [{"channels": 6, "kernel": [3, 3, 3], "stride": [1, 1, 1]}],
        "context_channels": [4],
    },
    "detection": {"anchor_scales": [0.3, 0.5], "anchor_aspects": [1.0], "rpn_channels": 6,
                  "roi_size": 2},
    "train": {"total_steps": 6, "batch_size": 2, "base_lr": 0.002, "rois_per_image": 8},
}


@pytest.fixture
def tiny_cfg():
    """A complete experiment small enough to train for a few steps in well under a second."""
    return config.from_dict(TINY)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts (one line per criterion) at the end of the run."""
    module = __import__("sys").modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])

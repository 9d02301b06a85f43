import json

import numpy as np
import pytest
import torch

from branchnas.config import ArchConfig, build_config


def tiny_arch(**kw) -> ArchConfig:
    base = dict(branches=2, num_stages=1, modules_per_stage=1, nodes_individual=2,
                nodes_aggregation=1, channels=(4, 8))
    base.update(kw)
    return ArchConfig(**base)


def tiny_layer(**sections) -> dict:
    layer = {
        "arch": {"branches": 2, "num_stages": 2, "modules_per_stage": 1, "nodes_individual": 1,
                 "nodes_aggregation": 1, "channels": [4, 8]},
        "supernet": {"input_size": [16, 12], "num_keypoints": 5, "stem_width": 4},
        "search": {"epochs": 2, "iters_per_epoch": 2, "warmup_epochs": 1, "controller_steps": 2,
                   "batch_size": 4, "reward_batch_size": 4, "controller_samples": 2,
                   "val_eval_size": 8, "entropy_samples": 8},
        "train": {"epochs": 1, "batch_size": 8, "lr_decay_epochs": [1, 1]},
        "data": {"image_size": [16, 12], "train_size": 24, "val_size": 8},
    }
    for name, values in sections.items():
        layer.setdefault(name, {}).update(values)
    return layer


def tiny_run_config(**sections):
    """Run config small enough for a full search in seconds."""
    return build_config(tiny_layer(**sections))


def write_toml(layer: dict, path) -> str:
    """Minimal writer for flat config sections (ints, floats, strings, lists)."""
    lines = []
    for section, values in layer.items():
        lines.append(f"[{section}]")
        for key, v in values.items():
            lines.append(f"{key} = {json.dumps(v)}")
        lines.append("")
    path.write_text("\n".join(lines))
    return str(path)


@pytest.fixture
def seeded():
    torch.manual_seed(0)
    np.random.seed(0)
    return 0


# --- acceptance reporting: one pass/fail line per criterion -------------------------

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        detail = getattr(item, "acceptance_detail", "")
        if failed:
            detail = str(report.longrepr).strip().splitlines()[-1][:160] if report.longrepr \
                else detail
        prev = _ACCEPTANCE.get(number)
        if prev is None or prev[1]:
            _ACCEPTANCE[number] = (title, not failed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)

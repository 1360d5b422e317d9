import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cxrsearch import core


def write_gray_png(path: Path, side: int = 32, value: int = 100, seed: int | None = None):
    if seed is None:
        arr = np.full((side, side), value, dtype=np.uint8)
    else:
        arr = np.random.default_rng(seed).integers(0, 256, (side, side), dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(path)
    return path


def make_manifest(tmp_path: Path, per_class=(2, 2, 2), sites=("s1",)) -> Path:
    """Hand-written manifest with real (tiny) image files."""
    images = []
    i = 0
    for label, count in zip(("control", "pneumonia", "covid19"), per_class):
        for _ in range(count):
            name = f"img{i:03d}.png"
            write_gray_png(tmp_path / name, seed=i)
            images.append(
                {
                    "id": f"im-{i:03d}",
                    "path": name,
                    "label": label,
                    "split": "train" if i % 4 else "val",
                    "site": sites[i % len(sites)],
                    "clinical": {"age": 50 + i, "sex": "M" if i % 2 else "F"},
                }
            )
            i += 1
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"version": 1, "images": images}))
    return path


@pytest.fixture
def manifest6(tmp_path):
    return core.load_manifest(make_manifest(tmp_path))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance" in rep.nodeid:
                name = rep.nodeid.split("::")[-1]
                lines.append((name, status.upper()))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, status in sorted(lines):
            terminalreporter.write_line(f"[{status:>6}] {name}")

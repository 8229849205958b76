import sys
from pathlib import Path

import pytest
import torch
from torch import nn

sys.path.insert(0, str(Path(__file__).parent))

from discernible.codec import CodecArch, CodecModel  # noqa: E402
from discernible.perceptual import FeatureExtractor, Normalize  # noqa: E402

torch.set_num_threads(1)


def tiny_fx(seed: int = 0, dim: int = 4, dtype=torch.float64) -> FeatureExtractor:
    """Two-conv extractor with ``dim`` outputs; small enough for exhaustive checks."""
    torch.manual_seed(seed)
    trunk = nn.Sequential(
        nn.Conv2d(3, 4, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(4, dim, 3, stride=2, padding=1), nn.ReLU(),
    )
    return FeatureExtractor(Normalize((0.5,) * 3, (0.25,) * 3), trunk).to(dtype)


def tiny_codec(seed: int = 0, steps: int = 1, dtype=torch.float64) -> CodecModel:
    return CodecModel(CodecArch(widths=(4, 4), latent_channels=8, max_steps=steps, seed=seed)).to(dtype)


@pytest.fixture
def fx64():
    return tiny_fx()


@pytest.fixture
def codec64():
    return tiny_codec()


# one "CRITERION n ..." line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

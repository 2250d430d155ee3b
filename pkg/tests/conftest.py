import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from countlab.model import CountingTransformer, ModelConfig, VisionConfig, save_checkpoint  # noqa: E402


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=16, n_layers=2, n_heads=2, d_mlp=32, max_seq_len=128, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return CountingTransformer(tiny_config())


@pytest.fixture
def tiny_visual_model():
    return CountingTransformer(tiny_config(vision=VisionConfig(n_encoder_layers=1, grid_size=10)))


@pytest.fixture(scope="session")
def tiny_checkpoints(tmp_path_factory):
    """Untrained tiny text and visual checkpoints on disk."""
    d = tmp_path_factory.mktemp("ckpt")
    text = CountingTransformer(tiny_config(n_layers=3))
    vis = CountingTransformer(tiny_config(n_layers=3, vision=VisionConfig(1, 10)))
    save_checkpoint(text, d / "text.ckpt")
    save_checkpoint(vis, d / "visual.ckpt")
    return str(d / "text.ckpt"), str(d / "visual.ckpt")


# one line per acceptance criterion, echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import numpy as np
import pytest
import torch

from corda.datasets import Domain, generate_synthetic_domain, preset
from corda.model import CorDANet, ModelConfig


@pytest.fixture
def tiny_cfg():
    return ModelConfig(num_classes=5, input_dims=(32, 32),
                       backbone=[(8, 2), (8, 2), (16, 2)], feature_channels=8, groups=4)


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return CorDANet(tiny_cfg).eval()


def randomize(module, seed=0, scale=0.3):
    """Overwrite every parameter of ``module`` with Gaussian noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_benchmark(tmp_path_factory):
    """Small 32x32 dual-domain dataset shared across tests."""
    root = tmp_path_factory.mktemp("bench")
    src, tgt = preset("default", seed=3)
    s = generate_synthetic_domain(src, 6, root / "source", dims=(32, 32), eval_count=2, domain=Domain.SOURCE)
    t = generate_synthetic_domain(tgt, 6, root / "target", dims=(32, 32), eval_count=3, domain=Domain.TARGET)
    return s, t


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest
import torch

from urbanmtl.core import ModelConfig, SampleBatch
from urbanmtl.model import MTLNet

_ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _ACCEPTANCE.get(report.nodeid)
    if marker is None:
        return
    number, title = marker
    prev = _ACCEPTANCE.get(("result", number))
    ok = report.outcome == "passed"
    _ACCEPTANCE[("result", number)] = (title, ok and (prev is None or prev[1]))


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _ACCEPTANCE[item.nodeid] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    results = sorted((k[1], v) for k, v in _ACCEPTANCE.items() if isinstance(k, tuple))
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, (title, ok) in results:
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture
def tiny_cfg():
    return ModelConfig(bands=2, patch_h=8, patch_w=8, base_features=2, num_classes=3, dropout_rate=0.0)


@pytest.fixture
def small_cfg():
    return ModelConfig(bands=3, patch_h=16, patch_w=16, base_features=4, num_classes=17)


@pytest.fixture
def random_batch():
    def _batch(cfg: ModelConfig, n: int = 2, seed: int = 0) -> SampleBatch:
        rng = np.random.default_rng(seed)
        return SampleBatch(
            images=rng.random((n, cfg.bands, cfg.patch_h, cfg.patch_w), dtype=np.float32),
            hse_ref=rng.random((n, cfg.patch_h // 2, cfg.patch_w // 2), dtype=np.float32),
            lcz_ref=rng.integers(0, cfg.num_classes, (n, cfg.patch_h, cfg.patch_w)).astype(np.uint8),
        )

    return _batch


@pytest.fixture
def make_model():
    def _make(cfg, seed=0, double=False):
        m = MTLNet(cfg, seed=seed)
        return m.double() if double else m

    return _make


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)

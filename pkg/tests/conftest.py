import numpy as np
import pytest

from listrerank.model import ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(d=8, layers=2, heads=2, ffn_dim=16, seed=3)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config)


def unit_rows(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@pytest.fixture(scope="session")
def small_checkpoint(tmp_path_factory):
    from listrerank.model import save_checkpoint

    cfg = ModelConfig(d=16, layers=1, heads=2, ffn_dim=16, seed=5)
    path = tmp_path_factory.mktemp("ckpt") / "model.json"
    save_checkpoint(path, cfg, init_params(cfg))
    return path


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            if "test_acceptance.py::test_criterion_" in rep.nodeid:
                name = rep.nodeid.split("::", 1)[1]
                lines.append((name, "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict in sorted(lines):
            terminalreporter.write_line(f"{verdict}  {name}")

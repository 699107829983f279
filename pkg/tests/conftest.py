import pytest
from hypothesis import settings

from vdit_lab.model import ModelConfig, build_model

settings.register_profile("lab", deadline=None, max_examples=60)
settings.load_profile("lab")

TINY = dict(num_layers=2, num_heads=2, head_dim=8, num_frames=2, height=4, width=4, num_text=2, steps=3, text_dim=8)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture(scope="session")
def default_model():
    return build_model(ModelConfig())


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)

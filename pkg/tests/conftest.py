import pytest
import torch

from slagrade.backbone import ModelConfig
from slagrade.corpus import GenConfig, generate_corpus
from slagrade.train import TrainConfig

torch.set_num_threads(1)

# long frames keep sequences short in unit tests
TINY_GEN = GenConfig(frame_period_s=2.0)
TINY_MODEL = ModelConfig(d_model=16, n_layers=1, n_heads=2, audio_stride=2)
TINY_TRAIN = TrainConfig(warmup_steps=1, grad_accum=2, epochs=2, lr=1e-3)


@pytest.fixture(scope="session")
def tiny_gen():
    return TINY_GEN


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return TINY_MODEL


@pytest.fixture(scope="session")
def tiny_train_cfg():
    return TINY_TRAIN


@pytest.fixture(scope="session")
def tiny_sessions():
    return generate_corpus(8, 11, TINY_GEN)


@pytest.fixture(scope="session")
def default_sessions():
    return generate_corpus(6, 5)


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE = {}  # criterion number -> [outcome, detail]


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_") or report.when != "call" and report.outcome == "passed":
        return
    n = int(name.split("_")[2])
    entry = ACCEPTANCE.setdefault(n, ["PASS", ""])
    if report.outcome != "passed":
        entry[0] = "FAIL"
    for key, value in report.user_properties:
        if key == "detail":
            entry[1] = f"{entry[1]}; {value}" if entry[1] else value


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        outcome, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {outcome}  {detail}")

import pytest

from maskseg.config import TrainConfig

TINY = {
    "data.height": 16, "data.width": 16, "data.num_classes": 3,
    "data.n_labeled": 4, "data.n_unlabeled": 8, "data.n_eval": 4,
    "model.enc1": 4, "model.enc2": 6, "model.dec_channels": 6, "model.trunk_dim": 5,
    "mask.patch_size": 4, "augment.crop_pad": 2, "weights.psi": 0.5,
    "batch_size": 2, "iterations": 4,
}


def tiny_config(**over) -> TrainConfig:
    return TrainConfig().override({**TINY, **over})


@pytest.fixture
def tiny():
    return tiny_config


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    def record(label: str, passed: bool, detail: str):
        ACCEPTANCE_LINES.append(f"{label} {'PASS' if passed else 'FAIL'}: {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)

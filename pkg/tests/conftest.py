import numpy as np
import pytest
import torch
import torch.nn as nn

torch.set_num_threads(1)


class FixedLogits(nn.Module):
    """Returns the same logits for every input, but keeps the input in the graph."""

    arch = "fixed"
    config: dict = {}

    def __init__(self, logits):
        super().__init__()
        self.register_buffer("logits", torch.as_tensor(logits, dtype=torch.float32))

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1) + 0.0 * x.flatten(1).sum(1, keepdim=True)


class PixelLinear(nn.Module):
    """Two-class logits ``(w * mean(x), 0)``; the loss slope in x has the sign of ``w``."""

    arch = "pixel_linear"
    config: dict = {}

    def __init__(self, w):
        super().__init__()
        self.w = float(w)

    def forward(self, x):
        s = self.w * x.flatten(1).mean(1)
        return torch.stack([s, torch.zeros_like(s)], 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def digits_small():
    from semirobust.data import make_digits

    return make_digits(600, 200, seed=3)


@pytest.fixture(scope="session")
def trained_cnn(digits_small):
    """A quickly trained, undefended CNN on the small digit set."""
    from semirobust.models import build_model
    from semirobust.training import LRSchedule, TrainPlan, train

    train_set, _ = digits_small
    model = build_model("cnn", seed=0)
    plan = TrainPlan("standard", epochs=15, batch_size=50, schedule=LRSchedule("step", lr=0.02), seed=0)
    model, _ = train(plan, model, train_set)
    return model.eval()


ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

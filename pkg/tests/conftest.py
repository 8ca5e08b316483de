import pytest
import torch
from torch import nn

from rgnft.model_graph import ModelGraph, Role, StageMap
from rgnft.synth import ToyBackboneSpec, build_model, make_dataset

ACCEPTANCE_LINES: list[str] = []

TINY = ToyBackboneSpec(widths=(4, 8, 8, 8), image_size=16, decoder_width=8)


class TwoLayer(nn.Module):
    """Two backbone convs and a dense decoder head; small enough for loop oracles."""

    def __init__(self, c=3, h=4, k=3, n_out=2):
        super().__init__()
        self.backbone = nn.Sequential(nn.Conv2d(c, h, k, padding=1, bias=False, dtype=torch.float64),
                                      nn.ReLU(),
                                      nn.Conv2d(h, h, k, padding=1, bias=True, dtype=torch.float64))
        self.decoder = nn.Linear(h, n_out, dtype=torch.float64)

    def forward(self, x):
        f = torch.tanh(self.backbone(x)).mean(dim=(2, 3))
        return self.decoder(f)


def two_layer_graph(seed=0, **kw) -> ModelGraph:
    torch.manual_seed(seed)
    m = TwoLayer(**kw)
    return ModelGraph(m, {"backbone.": Role.BACKBONE, "decoder.": Role.DECODER},
                      StageMap(((1, "backbone."),), 2))


def mse_loss(pred, target):
    return ((pred - target) ** 2).mean()


@pytest.fixture
def two_layer():
    return two_layer_graph(0)


@pytest.fixture
def tiny_model():
    return build_model(TINY, seed=0, pretrained=False)


@pytest.fixture(scope="session")
def tiny_data():
    return make_dataset(96, seed=11, image_size=16)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

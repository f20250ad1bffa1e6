import numpy as np
import pytest

from cmgan.data import SynthSpec, generate_synthetic
from cmgan.model import CmGanModel, ModelDims

TINY_DIMS = ModelDims(d_img=8, d_txt=12, n_classes=3, enc_hidden=16, common_dim=16,
                      dec_hidden=16, inter_hidden=8)
TINY_SPEC = SynthSpec(classes=3, per_class=10, latent_dim=4, d_img=8, d_txt=12, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return CmGanModel.build(TINY_DIMS, seed=0)


@pytest.fixture
def tiny_dataset():
    return generate_synthetic(TINY_SPEC)


def snapshot_equal(a, b) -> bool:
    """Bitwise comparison of two ``CmGanModel.param_snapshot`` results."""
    if a.keys() != b.keys():
        return False
    for k in a:
        if a[k].keys() != b[k].keys():
            return False
        for n in a[k]:
            if a[k][n].tobytes() != b[k][n].tobytes():
                return False
    return True


def changed_layers(a, b) -> set[str]:
    return {k for k in a if any(a[k][n].tobytes() != b[k][n].tobytes() for n in a[k])}


# Lines recorded by the acceptance suite, echoed once more at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

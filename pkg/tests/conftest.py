import numpy as np
import pytest

from mtpt.datasets import BUILTIN_DOMAINS, gen_split


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance criterion lines even when stdout was captured."""
    try:
        from test_acceptance import _LINES
    except ImportError:
        return
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
from mtpt.model import (
    FrozenModel,
    ModelConfig,
    PretrainConfig,
    PromptState,
    init_weights,
    pretrain_source,
)

TINY_CFG = ModelConfig(
    n_classes=4,
    channels=3,
    image_size=8,
    patch_size=4,
    d_model=16,
    n_blocks=2,
    n_ctx=2,
    n_vp=1,
    fusion_hidden=16,
)


@pytest.fixture(scope="session")
def tiny_frozen() -> FrozenModel:
    rng = np.random.default_rng(7)
    return FrozenModel(TINY_CFG, init_weights(TINY_CFG, rng))


@pytest.fixture(scope="session")
def tiny_prompts() -> PromptState:
    return PromptState.init(TINY_CFG, np.random.default_rng(8))


@pytest.fixture(scope="session")
def tiny_image() -> np.ndarray:
    return np.random.default_rng(9).random((3, 8, 8))


@pytest.fixture(scope="session")
def source_split():
    return gen_split(BUILTIN_DOMAINS["source"], n_per_class=200, seed=0)


@pytest.fixture(scope="session")
def trained(source_split):
    """The default pretrained model (seed 0, default recipe)."""
    frozen, prompts, meta = pretrain_source(
        source_split.images, source_split.labels, ModelConfig(), PretrainConfig(), seed=0
    )
    return frozen, prompts, meta


@pytest.fixture(scope="session")
def checkpoint_path(tmp_path_factory, trained):
    from mtpt.checkpoint import save_model

    frozen, prompts, meta = trained
    path = tmp_path_factory.mktemp("ckpt") / "model.mtpt"
    save_model(path, frozen, prompts, meta)
    return path


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory):
    """Tiny splits for harness tests: 3 per class, two domains."""
    from mtpt.datasets import save_split

    d = tmp_path_factory.mktemp("data")
    for name in ("source", "geo-mild"):
        split = gen_split(BUILTIN_DOMAINS[name], n_per_class=3, seed=0)
        save_split(d / f"{name}.bin", split)
    return d

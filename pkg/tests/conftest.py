import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from c2ftp.config import Config
from c2ftp.data import SceneTensors, SyntheticConfig, generate_synthetic, prepare_scenes

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_cfg():
    """Small widths so float64 gradient checks and short training runs stay quick."""
    return Config(hidden=8, embed=8, heads=2, context_dim=12, decoder_hidden=10,
                  refiner_dim=8, refiner_heads=2, chi_dim=8, estimator_hidden=16, step_embed=8,
                  batch_size=16, seed=0)


@pytest.fixture(scope="session")
def toy_scenes():
    tracks = generate_synthetic(SyntheticConfig(agents=60, duration=8, seed=3, straight=0.4, lane_change=0.3, brake=0.3))
    return prepare_scenes(tracks, 10)


@pytest.fixture(scope="session")
def toy_tensors(toy_scenes):
    return SceneTensors(toy_scenes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


TINY = dict(hidden=8, embed=8, heads=2, context_dim=12, decoder_hidden=10, refiner_dim=8, refiner_heads=2,
            chi_dim=8, estimator_hidden=16, step_embed=8, batch_size=16, seed=0)


@pytest.fixture(scope="session")
def trained(toy_scenes):
    """Refiner, standalone and stage-2 checkpoints from a couple of epochs on the toy scenes."""
    from c2ftp.data import split_dataset
    from c2ftp.pipeline import train_interaction, train_interaction_standalone, train_refiner

    parts = split_dataset(toy_scenes, 0)
    tr, va = SceneTensors(parts["train"]), SceneTensors(parts["val"])
    cfg = Config(**TINY, epochs=2, k=4, mse_warmup_epochs=1)
    rf = train_refiner(tr, va, cfg)
    s1 = train_interaction_standalone(tr, va, cfg)
    s2 = train_interaction(tr, va, rf, cfg, init=s1)
    return {"refiner": rf, "standalone": s1, "full": s2, "parts": parts, "cfg": cfg}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

import numpy as np
import pytest
import torch

from fretcontour.dataset import bend_fixture_specs, demo_fixture_specs, synthesize_fixture
from fretcontour.features import FeatureConfig
from fretcontour.training import TrainConfig, prepare_track, train_fold

torch.set_num_threads(1)

ACCEPTANCE_LINES = []

# the overfit run shared by the acceptance and transcription tests
OVERFIT_ITERATIONS = 500
OVERFIT_SEQUENCE_FRAMES = 64


def record_criterion(name, passed, detail=""):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" -- {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bend_fixture():
    return synthesize_fixture(bend_fixture_specs(), duration=3.2)


@pytest.fixture(scope="session")
def demo_tracks():
    fcfg = FeatureConfig.hcqt()
    tracks = []
    for i, specs in enumerate(demo_fixture_specs()):
        clip, notes, obs = synthesize_fixture(specs, duration=4.6)
        tracks.append(prepare_track(f"00_demo{i}", clip, notes, obs, fcfg))
    return tracks


@pytest.fixture(scope="session")
def overfit_run(demo_tracks, tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit")
    cfg = TrainConfig(iterations=OVERFIT_ITERATIONS, sequence_frames=OVERFIT_SEQUENCE_FRAMES,
                      checkpoint_interval=50, seed=0)
    result = train_fold(demo_tracks, demo_tracks, cfg, out)
    return result, out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import time
from dataclasses import dataclass

import pytest

from advldm import ldm
from advldm.data import TextureSpec, make_textures
from advldm.ldm import ModelParams, NoiseSchedule
from advldm.rng import Rng


@dataclass
class TrainedModel:
    params: ModelParams
    schedule: NoiseSchedule
    log: ldm.TrainLog
    seconds: float


def train_default_model() -> TrainedModel:
    """The default recipe: 256 textures, 3000 + 3000 steps, seed 0."""
    schedule = ldm.make_schedule()
    dataset = make_textures(TextureSpec())
    rng = Rng(0)
    start = time.perf_counter()
    params, log = ldm.train(ldm.init_params(rng.fork(0)), schedule, dataset, rng=rng.fork(1))
    return TrainedModel(params, schedule, log, time.perf_counter() - start)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained() -> TrainedModel:
    # trained once per session; the runtime is reported by the acceptance suite
    return train_default_model()


@pytest.fixture(scope="session")
def untrained():
    return ldm.init_params(Rng(123)), ldm.make_schedule()


@pytest.fixture
def images():
    return make_textures(TextureSpec(count=4, seed=77)).images

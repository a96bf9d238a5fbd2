import numpy as np
import pytest
from hypothesis import settings

from gatedcap import data as dt
from gatedcap import decoder as dec

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

SMALL = dec.Dims(r=8, q=6, a=7, v=11, d_in=5, d_f=4, n_pos=3)


def random_model(seed: int, cell: str = "lstm", dims: dec.Dims = SMALL, mode: str = "gated",
                 gate_scale: float = 2.0) -> dec.DecoderModel:
    rng = np.random.default_rng(seed)
    model = dec.DecoderModel.init(dims, cell, rng)
    for b in model.biases.values():
        b.data[:] += rng.normal(size=b.shape) * 0.1
    if mode == "gated":
        model.add_gates()
        for p in model.gate_list():
            p.G.data[:] = rng.normal(size=p.G.shape) * gate_scale
    elif mode == "masked":
        model.masks = {n: (rng.random(w.shape) > 0.5).astype(float) for n, w in model.weights.items()}
    return model


@pytest.fixture(scope="session")
def small_dataset():
    return dt.generate(3, n_scenes=120)


@pytest.fixture(scope="session")
def small_prep(small_dataset):
    return dt.preprocess(small_dataset, min_freq=1)


# -- acceptance verdict lines ------------------------------------------------------

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])

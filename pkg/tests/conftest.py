import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qvqa import tensor as T
from qvqa.data import corpus_vocab, make_samples
from qvqa.model import ModelConfig, QVQAModel
from qvqa.trainer import encode_sample

settings.register_profile(
    "qvqa", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("qvqa")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


def tiny_model_config(vocab_size, **kw):
    base = dict(
        vocab_size=vocab_size, image_size=64, patch_size=16, d_model=16, n_heads=2,
        vis_layers=1, txt_layers=1, qft_layers=1, gen_layers=1, m=4, max_gen_len=40,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_world():
    samples = make_samples(3, 6)
    vocab = corpus_vocab(samples)
    return samples, vocab, [encode_sample(s, vocab) for s in samples]


@pytest.fixture
def tiny_model(small_world):
    _, vocab, _ = small_world
    return QVQAModel(tiny_model_config(len(vocab)))


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    """Remember one acceptance outcome for the end-of-run summary, then assert it."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

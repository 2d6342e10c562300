import sys

import numpy as np
import pytest

from fashionke.dataio import SynthConfig, generate_synthetic
from fashionke.model import ModelConfig, init_params
from fashionke.numcore import kernels
from fashionke.ontology import load_ontology


@pytest.fixture(scope="session")
def tiny_space():
    return load_ontology("tiny")


@pytest.fixture(scope="session")
def default_space():
    return load_ontology("default")


@pytest.fixture(scope="session")
def small_synth():
    return SynthConfig(n_posts=60, d=8, vocab_size=20, max_regions=3, max_tokens=6, seed=3)


@pytest.fixture(scope="session")
def small_data(small_synth, tiny_space):
    return generate_synthetic(small_synth, tiny_space)


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(d=8, d_emb=4, vocab_size=20, n_maps=3)


@pytest.fixture
def small_params(small_cfg, tiny_space):
    params = init_params(small_cfg, tiny_space, 11)
    rng = np.random.default_rng(5)
    for t in params:  # move biases and zero-initialized weights off their special values
        t.values += rng.normal(0.0, 0.1, size=t.shape)
    return params


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request, monkeypatch):
    """Run a test once per available LSTM kernel backend."""
    fwd, bwd = kernels.backends()[request.param]
    monkeypatch.setattr(kernels, "lstm_forward", fwd)
    monkeypatch.setattr(kernels, "lstm_backward", bwd)
    return request.param


def pytest_terminal_summary(terminalreporter):
    """Repeat the one-line acceptance verdicts at the end of the run."""
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

from __future__ import annotations

import pytest
import torch

from dtts import corpus
from dtts.model import ModelConfig

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(criterion_line(number))


def criterion_line(number: int) -> str:
    passed, detail = ACCEPTANCE[number]
    return f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(criterion_line(n))


@pytest.fixture(autouse=True)
def _no_cache_env(monkeypatch):
    monkeypatch.delenv(corpus.CACHE_ENV, raising=False)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(n_tokens=9, n_languages=2, n_speakers=3, dim=16, ld_encoder_blocks=2, ld_decoder_blocks=1,
                       sd_encoder_blocks=1, sd_decoder_blocks=1, text_predictor_blocks=1, ff_mult=2,
                       variance_filters=16, dropout=0.0, ssl_dim=8)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    manifest = corpus.make_toy_corpus(root / "corpus", per_speaker=2, seed=3)
    return manifest


@pytest.fixture(scope="session")
def toy_cache(toy_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cache") / "cache"
    report = corpus.prepare(toy_corpus, out, "stub", seed=0)
    assert not report.failed
    return out


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)

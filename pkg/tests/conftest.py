from __future__ import annotations

from importlib.resources import files

import pytest

from ehrqa.backend import CostLedger, DiskCache, MockBackend
from ehrqa.corpus import load_corpus
from ehrqa.prompting import load_templates

PACKAGED_CORPUS = str(files("ehrqa").joinpath("data/fixture_corpus.json"))
PACKAGED_REFERENCES = str(files("ehrqa").joinpath("data/q3_references.json"))
PACKAGED_TEMPLATES = str(files("ehrqa").joinpath("templates"))


@pytest.fixture(scope="session")
def corpus():
    return load_corpus(PACKAGED_CORPUS)


@pytest.fixture(scope="session")
def registry():
    return load_templates(PACKAGED_TEMPLATES)


@pytest.fixture()
def mock_backend(tmp_path):
    return MockBackend(cache=DiskCache(tmp_path / "cache"), ledger=CostLedger())


@pytest.fixture()
def bare_mock():
    """No cache, no ledger; for tests that count invocations directly."""
    return MockBackend()

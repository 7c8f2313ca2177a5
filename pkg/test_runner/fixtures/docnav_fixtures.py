from __future__ import annotations

import os
import shutil
import sys
from pathlib import Path
from typing import Iterator

import pytest
from _pytest.fixtures import FixtureRequest

from docnav.corpus import Corpus, SynthSpec, synth_corpus, write_corpus
from docnav.log_helper import log
from fixtures.utils import get_self_dir

"""
This file contains fixtures for docnav tests: seeded synthetic corpora, the same corpora
written to disk, and a per-test output directory.

Corpora are session scoped and immutable, so tests may share them freely. Anything a
test writes goes to `test_output_dir`, which lives under $TEST_OUTPUT (or
<repo>/test_output) and is wiped at the start of each test.
"""

DEFAULT_OUTPUT_DIR = "test_output"

# 20 documents of 12 pages with 4 single-hop facts each
ACCEPTANCE_SPEC = SynthSpec(n_docs=20, pages_min=12, pages_max=12, facts_per_doc=4, rng_seed=0)

# Small pages keep the on-disk corpora quick to write and load
SMALL_SPEC = SynthSpec(
    n_docs=3,
    pages_min=12,
    pages_max=12,
    facts_per_doc=4,
    rng_seed=7,
    page_width=512,
    page_height=384,
)

MIXED_SPEC = SynthSpec(
    n_docs=6,
    pages_min=10,
    pages_max=14,
    facts_per_doc=4,
    multi_hop_fraction=0.25,
    unanswerable_fraction=0.25,
    rng_seed=3,
    page_width=512,
    page_height=384,
)


def get_test_output_dir(request: FixtureRequest, top_output_dir: Path) -> Path:
    """Compute the working directory for an individual test."""
    test_name = request.node.name
    test_dir = top_output_dir / test_name.replace("/", "-").replace("[", "-").replace("]", "")
    log.info(f"get_test_output_dir is {test_dir}")
    # make mypy happy
    assert isinstance(test_dir, Path)
    return test_dir


@pytest.fixture(scope="session")
def base_dir() -> Iterator[Path]:
    # the repository root
    base_dir = get_self_dir().parent.parent
    log.info(f"base_dir is {base_dir}")

    yield base_dir


@pytest.fixture(scope="session")
def top_output_dir(base_dir: Path) -> Iterator[Path]:
    # Compute the top-level directory for all tests.
    if env_test_output := os.environ.get("TEST_OUTPUT"):
        output_dir = Path(env_test_output).resolve()
    else:
        output_dir = base_dir / DEFAULT_OUTPUT_DIR
    output_dir.mkdir(exist_ok=True)

    log.info(f"top_output_dir is {output_dir}")
    yield output_dir


# This is autouse, so the test output directory always gets created, even
# if a test doesn't put anything there.
@pytest.fixture(scope="function", autouse=True)
def test_output_dir(request: FixtureRequest, top_output_dir: Path) -> Iterator[Path]:
    """Create the working directory for an individual test."""

    # one directory per test
    test_dir = get_test_output_dir(request, top_output_dir)
    log.info(f"test_output_dir is {test_dir}")
    shutil.rmtree(test_dir, ignore_errors=True)
    test_dir.mkdir()

    yield test_dir


@pytest.fixture(scope="session")
def acceptance_corpus() -> Corpus:
    return synth_corpus(ACCEPTANCE_SPEC)


@pytest.fixture(scope="session")
def small_corpus() -> Corpus:
    return synth_corpus(SMALL_SPEC)


@pytest.fixture(scope="session")
def mixed_corpus() -> Corpus:
    return synth_corpus(MIXED_SPEC)


@pytest.fixture(scope="session")
def small_corpus_dir(small_corpus: Corpus, tmp_path_factory: pytest.TempPathFactory) -> Path:
    root = tmp_path_factory.mktemp("small_corpus")
    write_corpus(small_corpus, root)
    return root


@pytest.fixture(scope="session")
def mixed_corpus_dir(mixed_corpus: Corpus, tmp_path_factory: pytest.TempPathFactory) -> Path:
    root = tmp_path_factory.mktemp("mixed_corpus")
    write_corpus(mixed_corpus, root)
    return root


@pytest.fixture(scope="session")
def echo_agent_cmd() -> str:
    """exec: endpoint command line for the stdio echo agent, without arguments."""
    return f"{sys.executable} {get_self_dir() / 'echo_agent.py'}"

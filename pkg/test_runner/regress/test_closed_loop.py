import time
from typing import List

import pytest

from docnav.agents.scripted import greedy_retrieval_agent, oracle_agent
from docnav.corpus import Corpus
from docnav.environment import EnvConfig, EpisodeRunner
from docnav.metrics import aggregate, build_record, page_f1
from docnav.protocol import Trajectory
from docnav.retrieval import Bm25Provider, NoisyProvider, OracleProvider
from docnav.types import NOT_ANSWERABLE, TerminatedBy

"""
Whole-loop checks on the seeded acceptance corpus: scripted agents against the real
environment, retrievers and rewards.
"""


def run(corpus: Corpus, agent_factory, retrievers, jobs: int = 4) -> List[Trajectory]:
    runner = EpisodeRunner(corpus, agent_factory, retrievers, EnvConfig(), jobs=jobs)
    return list(runner.run(corpus.qa_items))


def answer_accuracy(corpus: Corpus, trajs: List[Trajectory]) -> float:
    by_id = corpus.qa_by_id()
    records = [build_record(t, by_id[t.qa_id], corpus.document(t.doc_id)) for t in trajs]
    return aggregate(records).accuracy


def test_oracle_closed_loop(acceptance_corpus: Corpus):
    assert len(acceptance_corpus.documents) == 20
    assert len(acceptance_corpus.qa_items) == 80

    started = time.monotonic()
    trajs = run(acceptance_corpus, oracle_agent, OracleProvider())
    assert time.monotonic() - started < 30

    by_id = acceptance_corpus.qa_by_id()
    for traj in trajs:
        qa = by_id[traj.qa_id]
        assert traj.terminated_by is TerminatedBy.ANSWER
        assert len(traj.turns) <= 3
        assert traj.final_answer == qa.gold_answers[0]
        assert traj.reward is not None
        assert traj.reward["total"] == pytest.approx(1.0, abs=1e-6)
        assert page_f1(traj.relevant_pages(), qa.evidence_pages)[2] == 1.0


def test_noisy_retrieval_breaks_greedy_agent_only(acceptance_corpus: Corpus):
    clean = run(acceptance_corpus, greedy_retrieval_agent, Bm25Provider())
    assert answer_accuracy(acceptance_corpus, clean) >= 0.9

    # Every retrieved page is swapped for a non-evidence page
    noisy = NoisyProvider(Bm25Provider(), flip_prob=1.0, rng_seed=0)
    broken = run(acceptance_corpus, greedy_retrieval_agent, noisy)
    assert all(t.final_answer == NOT_ANSWERABLE for t in broken)
    # abstaining on every answerable item scores nothing
    floor = 0.0
    assert answer_accuracy(acceptance_corpus, broken) <= floor

    oracle = run(acceptance_corpus, oracle_agent, noisy)
    assert answer_accuracy(acceptance_corpus, oracle) == 1.0
    assert all(len(t.turns) <= 3 for t in oracle)

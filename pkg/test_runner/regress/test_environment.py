import random
from typing import List, Sequence

import pytest

from docnav.agents.base import AgentPolicy, compose_turn
from docnav.agents.scripted import RandomAgent, oracle_agent
from docnav.corpus import Corpus, Document, Page, QAItem
from docnav.environment import (
    EnvConfig,
    EnvironmentUsageError,
    EpisodeRunner,
    adaptive_k,
    reset,
    run_episode,
    step,
    working_memory,
)
from docnav.protocol import Answer, Fetch, FormatError, Retrieval, parse_turn
from docnav.retrieval import Bm25Provider, OracleProvider, OracleRetriever
from docnav.types import ActionKind, AnswerKind, DeliverySource, Outcome, TerminatedBy
from docnav.wire import TransportError
from fixtures.metrics import snapshot

NO_OVERVIEW = EnvConfig(use_overview=False)


def text_document(n_pages: int) -> Document:
    pages = tuple(
        Page(index=i, width=64, height=48, text=(f"page {i} token{i}",))
        for i in range(1, n_pages + 1)
    )
    return Document(doc_id="d", pages=pages)


def item(evidence=(2,)) -> QAItem:
    return QAItem("q", "d", "What?", ("a",), AnswerKind.FREEFORM, frozenset(evidence))


def start(n_pages: int = 10, config: EnvConfig = NO_OVERVIEW, evidence=(2,)):
    doc = text_document(n_pages)
    qa = item(evidence)
    return reset(doc, qa.question, config, OracleRetriever(qa, n_pages), qa_id=qa.qa_id)


def turn(t: int, action, relevant: Sequence[int] = (), summary: str = "s"):
    return parse_turn(compose_turn(t, action, "a", summary, relevant_pages=relevant), t)


def test_adaptive_k_exhaustive():
    for n in range(1, 501):
        assert adaptive_k(n) == min((n + 9) // 10, 4)
    with pytest.raises(ValueError):
        adaptive_k(0)


def test_env_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(max_turns=0)
    with pytest.raises(ValueError):
        EnvConfig(retrieval_k=0)
    with pytest.raises(ValueError):
        EnvConfig(enabled_actions=frozenset())
    assert EnvConfig(retrieval_k=7).top_k(100) == 7
    assert EnvConfig().top_k(100) == 4


def test_reset_builds_overview(small_corpus: Corpus):
    doc = small_corpus.document("doc000")
    qa = next(q for q in small_corpus.qa_items if q.doc_id == "doc000")
    state, obs = reset(
        doc, qa.question, EnvConfig(), OracleRetriever(qa, doc.n_pages), qa_id=qa.qa_id
    )
    assert obs.overview is not None and obs.overview.k == 1
    assert obs.overview.images[0].pages == list(range(1, 13))
    assert (obs.page_count, obs.budget, obs.question) == (12, 8, qa.question)
    assert state.t == 0 and not state.done and state.visited == set()


def test_reset_without_overview():
    _, obs = start()
    assert obs.overview is None


def test_fetch_delivers_in_request_order_with_reminders():
    state, _ = start(10)
    _, feedback, done = step(state, turn(0, Fetch((5, 3))))
    assert not done
    assert [p.index for p in feedback.pages] == [5, 3]
    assert [p.label for p in feedback.pages] == ["Page 5:", "Page 3:"]
    assert feedback.source is DeliverySource.FETCH

    _, feedback, _ = step(state, turn(1, Fetch((3, 11, 4))))
    assert [p.index for p in feedback.pages] == [4]
    assert feedback.reminders == ("Page 3 already visited.", "Page 11 does not exist.")
    assert state.visited == {3, 4, 5}


def test_retrieval_skips_visited_pages():
    state, _ = start(10, evidence=(2, 6))
    # adaptive k for 10 pages is 1
    _, feedback, _ = step(state, turn(0, Retrieval("x")))
    assert [p.index for p in feedback.pages] == [2]
    assert feedback.source is DeliverySource.RETRIEVAL
    _, feedback, _ = step(state, turn(1, Retrieval("x")))
    assert [p.index for p in feedback.pages] == [6]


def test_retrieval_k_override():
    state, _ = start(10, config=EnvConfig(use_overview=False, retrieval_k=3), evidence=(9,))
    _, feedback, _ = step(state, turn(0, Retrieval("x")))
    assert [p.index for p in feedback.pages] == [9, 1, 2]


def test_answer_ends_episode():
    state, _ = start()
    _, feedback, done = step(state, turn(0, Answer("42")))
    assert done
    assert state.outcome is Outcome.ANSWERED and state.answer == "42"
    assert feedback.pages == () and feedback.reminders == ()
    with pytest.raises(EnvironmentUsageError):
        step(state, turn(1, Answer("43")))


def test_turn_index_mismatch():
    state, _ = start()
    with pytest.raises(EnvironmentUsageError):
        step(state, turn(1, Answer("42")))


def test_format_error_consumes_a_turn():
    state, _ = start()
    error = FormatError("missing think block", turn_index=0)
    _, feedback, done = step(state, error)
    assert not done
    assert state.t == 1
    assert not state.format_valid
    assert feedback.format_notice is not None and "missing think block" in feedback.format_notice
    assert state.memory == [""]

    step(state, turn(1, Fetch((1,)), summary="read page one"))
    assert len(state.memory) == state.t == 2
    assert working_memory(state) == "read page one"


def test_disabled_action_is_invalid():
    config = EnvConfig(
        use_overview=False, enabled_actions=frozenset({ActionKind.FETCH, ActionKind.ANSWER})
    )
    state, _ = start(config=config)
    _, feedback, done = step(state, turn(0, Retrieval("x")))
    assert not done
    assert feedback.pages == ()
    assert "action disabled" in (feedback.format_notice or "")
    assert not state.format_valid


def test_out_of_range_relevant_pages_flagged():
    state, _ = start(5)
    step(state, turn(0, Fetch((1,))))
    _, feedback, _ = step(state, turn(1, Fetch((2,)), relevant=(1, 9)))
    assert [p.index for p in feedback.pages] == [2]
    assert feedback.format_notice is not None
    assert not state.format_valid


def test_budget_exhaustion():
    state, _ = start(config=EnvConfig(use_overview=False, max_turns=2))
    _, _, done = step(state, turn(0, Retrieval("x")))
    assert not done
    _, _, done = step(state, turn(1, Retrieval("x")))
    assert done
    assert state.outcome is Outcome.NO_ANSWER


class ScriptAgent(AgentPolicy):
    def __init__(self, actions):
        self.actions = list(actions)
        self.memories: List[str] = []

    def act(self, observation, history: Sequence[str]) -> str:
        t = len(history)
        if t > 0:
            self.memories.append(observation.working_memory)
        return compose_turn(t, self.actions[t], "a", f"summary {t}")


def test_working_memory_switch():
    doc, qa = text_document(6), item()
    actions = [Fetch((1,)), Fetch((2,)), Answer("a")]

    agent = ScriptAgent(actions)
    run_episode(doc, qa, agent, OracleRetriever(qa, 6), NO_OVERVIEW)
    assert agent.memories == ["summary 0", "summary 0\nsummary 1"]

    agent = ScriptAgent(actions)
    config = EnvConfig(use_overview=False, use_working_memory=False)
    run_episode(doc, qa, agent, OracleRetriever(qa, 6), config)
    assert agent.memories == ["", ""]


def test_run_episode_records_everything():
    doc, qa = text_document(6), item(evidence=(2,))
    agent = ScriptAgent([Fetch((2, 7)), Answer("a")])
    traj = run_episode(doc, qa, agent, OracleRetriever(qa, 6), NO_OVERVIEW, run_config={"seed": 1})
    assert traj.terminated_by is TerminatedBy.ANSWER
    assert traj.final_answer == "a"
    assert [rec.t for rec in traj.turns] == [0, 1]
    assert traj.turns[0].feedback.pages == (2,)
    assert traj.turns[0].feedback.reminders == ("Page 7 does not exist.",)
    assert traj.run_config == {"seed": 1}
    assert traj.reward is not None and traj.reward["ans"] == 1.0


class BrokenAgent(AgentPolicy):
    def __init__(self):
        self.closed = False
        self.finished = False

    def act(self, observation, history):
        if history:
            raise TransportError("agent went away")
        return compose_turn(0, Fetch((1,)), "a", "s")

    def finish(self, trajectory):
        self.finished = True

    def close(self):
        self.closed = True


def test_transport_error_aborts_episode():
    before = snapshot().value("docnav_episodes_total", {"terminated_by": "error"})
    doc, qa = text_document(4), item()
    traj = run_episode(doc, qa, BrokenAgent(), OracleRetriever(qa, 4), NO_OVERVIEW)
    assert traj.terminated_by is TerminatedBy.ERROR
    assert traj.error == "agent went away"
    assert traj.final_answer is None
    assert len(traj.turns) == 1
    assert traj.reward is not None and traj.reward["fmt"] == 0.0
    after = snapshot().value("docnav_episodes_total", {"terminated_by": "error"})
    assert after == before + 1


def test_runner_closes_agents_and_keeps_order(small_corpus: Corpus):
    agents: List[BrokenAgent] = []

    def factory(doc, qa):
        agents.append(BrokenAgent())
        return agents[-1]

    runner = EpisodeRunner(small_corpus, factory, OracleProvider(), NO_OVERVIEW, jobs=3)
    trajs = list(runner.run(small_corpus.qa_items))
    assert [t.qa_id for t in trajs] == [qa.qa_id for qa in small_corpus.qa_items]
    assert all(t.terminated_by is TerminatedBy.ERROR for t in trajs)
    assert all(a.closed for a in agents)


def test_runner_parallel_matches_sequential(small_corpus: Corpus):
    config = EnvConfig()
    one = EpisodeRunner(small_corpus, oracle_agent, OracleProvider(), config, jobs=1)
    many = EpisodeRunner(small_corpus, oracle_agent, OracleProvider(), config, jobs=4)
    a = [t.to_json() for t in one.run(small_corpus.qa_items)]
    b = [t.to_json() for t in many.run(small_corpus.qa_items)]
    assert a == b


def test_runner_caches_overviews(small_corpus: Corpus):
    runner = EpisodeRunner(small_corpus, oracle_agent, OracleProvider(), EnvConfig())
    doc = small_corpus.document("doc000")
    assert runner.overview(doc) is runner.overview(doc)
    off = EpisodeRunner(small_corpus, oracle_agent, OracleProvider(), NO_OVERVIEW)
    assert off.overview(doc) is None


def test_random_episodes_are_sound(small_corpus: Corpus, mixed_corpus: Corpus):
    """Random agents never get a page twice, never exceed the budget, and every bad fetch
    index earns a reminder."""
    rng = random.Random(42)
    providers = [Bm25Provider(), OracleProvider()]
    corpora = [small_corpus, mixed_corpus]
    episodes = 0
    while episodes < 10_000:
        corpus = corpora[episodes % 2]
        qa = rng.choice(corpus.qa_items)
        doc = corpus.document(qa.doc_id)
        agent = RandomAgent(rng_seed=episodes, episode_key=qa.qa_id)
        retriever = providers[episodes % 2].for_episode(doc, qa)
        traj = run_episode(doc, qa, agent, retriever, NO_OVERVIEW)
        episodes += 1

        assert len(traj.turns) <= NO_OVERVIEW.max_turns
        assert traj.terminated_by in (TerminatedBy.ANSWER, TerminatedBy.BUDGET)
        assert traj.reward is not None and traj.reward["fmt"] == 1.0

        delivered: List[int] = []
        for rec in traj.turns:
            action = rec.turn.action if rec.turn is not None else None
            if isinstance(action, Fetch):
                expected = []
                for i in action.indices:
                    if not 1 <= i <= doc.n_pages:
                        expected.append(f"Page {i} does not exist.")
                    elif i in delivered:
                        expected.append(f"Page {i} already visited.")
                assert list(rec.feedback.reminders) == expected
            else:
                assert rec.feedback.reminders == ()
            delivered.extend(rec.feedback.pages)

        assert len(delivered) == len(set(delivered))
        assert all(1 <= i <= doc.n_pages for i in delivered)

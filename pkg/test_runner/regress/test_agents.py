import json
import socketserver
import threading
from pathlib import Path
from typing import Iterator, List

import numpy as np
import pytest
from PIL import Image

from docnav.agents import make_agent_factory
from docnav.agents.base import compose_turn
from docnav.agents.bridge import BridgeAgentFactory, ImageSpool, decode_png, encode_png
from docnav.agents.scripted import (
    RandomAgent,
    ReplayAgent,
    greedy_retrieval_agent,
    oracle_agent,
    random_agent_factory,
)
from docnav.config import AgentSpec, RunConfig
from docnav.corpus import Corpus, QAItem
from docnav.environment import EnvConfig, EpisodeRunner, run_episode
from docnav.protocol import Answer, Fetch
from docnav.retrieval import OracleProvider, OracleRetriever
from docnav.types import NOT_ANSWERABLE, ImageMode, TerminatedBy
from docnav.wire import Endpoint
from fixtures.utils import free_port, read_jsonl


def first_item(corpus: Corpus) -> QAItem:
    return corpus.qa_items[0]


def play(corpus: Corpus, qa: QAItem, agent, config: EnvConfig = EnvConfig()):
    doc = corpus.document(qa.doc_id)
    return run_episode(doc, qa, agent, OracleRetriever(qa, doc.n_pages), config)


def test_oracle_agent_solves_answerable_items(mixed_corpus: Corpus):
    answerable = [qa for qa in mixed_corpus.qa_items if qa.answerable]
    assert answerable
    for qa in answerable:
        traj = play(mixed_corpus, qa, oracle_agent(mixed_corpus.document(qa.doc_id), qa))
        assert traj.terminated_by is TerminatedBy.ANSWER
        assert traj.final_answer == qa.gold_answers[0]
        assert traj.relevant_pages() == set(qa.evidence_pages)
        assert traj.reward is not None
        assert traj.reward["total"] == pytest.approx(1.0, abs=1e-6)


def test_oracle_agent_abstains(mixed_corpus: Corpus):
    unanswerable = [qa for qa in mixed_corpus.qa_items if not qa.answerable]
    assert unanswerable
    for qa in unanswerable:
        traj = play(mixed_corpus, qa, oracle_agent(mixed_corpus.document(qa.doc_id), qa))
        assert traj.final_answer == NOT_ANSWERABLE
        assert len(traj.turns) == 2
        assert traj.reward is not None and traj.reward["ans"] == 1.0


def test_oracle_agent_answers_on_last_turn(small_corpus: Corpus):
    qa = first_item(small_corpus)
    agent = oracle_agent(small_corpus.document(qa.doc_id), qa)
    traj = play(small_corpus, qa, agent, EnvConfig(max_turns=1))
    assert len(traj.turns) == 1
    assert traj.terminated_by is TerminatedBy.ANSWER


def test_greedy_agent_reads_retrieved_pages(small_corpus: Corpus):
    for qa in small_corpus.qa_items:
        traj = play(small_corpus, qa, greedy_retrieval_agent(small_corpus.document(qa.doc_id), qa))
        assert [type(a) for a in traj.actions()][-1] is Answer
        assert len(traj.turns) == 2
        assert traj.final_answer == qa.gold_answers[0]


def test_random_agent_is_deterministic(small_corpus: Corpus):
    qa = first_item(small_corpus)
    doc = small_corpus.document(qa.doc_id)
    factory = random_agent_factory(11)
    a = play(small_corpus, qa, factory(doc, qa))
    b = play(small_corpus, qa, factory(doc, qa))
    assert [r.raw for r in a.turns] == [r.raw for r in b.turns]
    c = play(small_corpus, qa, RandomAgent(12, episode_key=qa.qa_id))
    d = play(small_corpus, qa, RandomAgent(11, episode_key=qa.qa_id))
    assert [r.raw for r in d.turns] == [r.raw for r in a.turns]
    assert c.reward is not None and c.reward["fmt"] == 1.0


def test_replay_agent(small_corpus: Corpus):
    qa = first_item(small_corpus)
    turns = [compose_turn(0, Fetch((1,)), "a", "s"), "not a turn"]
    traj = play(small_corpus, qa, ReplayAgent(turns), EnvConfig(use_overview=False, max_turns=3))
    assert [r.raw for r in traj.turns] == [turns[0], turns[1], turns[1]]
    assert [r.format_error is not None for r in traj.turns] == [False, True, True]
    assert traj.terminated_by is TerminatedBy.BUDGET
    with pytest.raises(ValueError):
        ReplayAgent([])


def test_png_base64_roundtrip(small_corpus: Corpus):
    page = small_corpus.document("doc000").page(3)
    img = page.image()
    back = decode_png(encode_png(img))
    assert back.size == img.size
    assert np.array_equal(np.asarray(back.convert("RGB")), np.asarray(img.convert("RGB")))


def test_image_spool(small_corpus: Corpus, test_output_dir: Path):
    page = small_corpus.document("doc000").page(2)
    spool = ImageSpool(ImageMode.PATH, test_output_dir / "images")
    ref = spool.page("doc000", page)
    assert ref == {"path": str(test_output_dir / "images" / "doc000" / "page_0002.png")}
    mtime = Path(ref["path"]).stat().st_mtime_ns
    assert spool.page("doc000", page) == ref
    assert Path(ref["path"]).stat().st_mtime_ns == mtime
    with Image.open(ref["path"]) as img:
        assert img.size == (page.width, page.height)

    assert set(ImageSpool(ImageMode.B64).page("doc000", page)) == {"b64"}
    with pytest.raises(ValueError):
        ImageSpool(ImageMode.PATH)


def run_bridge(
    corpus: Corpus, factory: BridgeAgentFactory, config: EnvConfig = EnvConfig(), jobs=1
):
    runner = EpisodeRunner(corpus, factory, OracleProvider(), config, jobs=jobs)
    try:
        return list(runner.run(corpus.qa_items))
    finally:
        factory.close()


def test_stdio_bridge_answers(small_corpus: Corpus, echo_agent_cmd: str, test_output_dir: Path):
    log_file = test_output_dir / "agent.jsonl"
    endpoint = Endpoint.parse(f"exec:{echo_agent_cmd} --answer hello --log {log_file}")
    trajs = run_bridge(small_corpus, BridgeAgentFactory(endpoint, ImageMode.B64))
    assert len(trajs) == len(small_corpus.qa_items)
    for traj in trajs:
        assert traj.terminated_by is TerminatedBy.ANSWER
        assert traj.final_answer == "hello"
        assert len(traj.turns) == 1

    messages = read_jsonl(log_file)
    resets = [m for m in messages if m["type"] == "reset"]
    dones = [m for m in messages if m["type"] == "done"]
    assert len(resets) == len(dones) == len(trajs)
    assert resets[0]["budget"] == 8
    assert resets[0]["page_count"] == 12
    # one overview image, payload replaced by its length
    assert [i["role"] for i in resets[0]["images"]] == ["overview"]
    assert resets[0]["images"][0]["b64"] > 0
    assert dones[0] == {
        "type": "done",
        "qa_id": trajs[0].qa_id,
        "outcome": "answer",
        "final_answer": "hello",
    }


def test_stdio_bridge_fetches_pages(
    small_corpus: Corpus, echo_agent_cmd: str, test_output_dir: Path
):
    log_file = test_output_dir / "agent.jsonl"
    image_dir = test_output_dir / "images"
    endpoint = Endpoint.parse(f"exec:{echo_agent_cmd} --fetch-first --log {log_file}")
    factory = BridgeAgentFactory(endpoint, ImageMode.PATH, image_dir)
    trajs = run_bridge(small_corpus, factory, EnvConfig(use_overview=False))
    for traj in trajs:
        assert len(traj.turns) == 2
        assert traj.turns[0].feedback.pages == (1,)
        assert traj.final_answer == "echo"

    feedback = [m for m in read_jsonl(log_file) if m["type"] == "feedback"]
    assert len(feedback) == len(trajs)
    page = feedback[0]["pages"][0]
    assert (page["index"], page["label"]) == (1, "Page 1:")
    assert Path(page["path"]).exists()
    assert feedback[0]["turn"] == 1
    assert feedback[0]["working_memory"] == "Replied."


class EchoHandler(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            msg = json.loads(line)
            if msg["type"] == "done":
                continue
            t = 0 if msg["type"] == "reset" else msg["turn"]
            text = compose_turn(t, Answer("over tcp"), "a", "s")
            self.wfile.write((json.dumps({"type": "turn", "text": text}) + "\n").encode())
            self.wfile.flush()


@pytest.fixture
def tcp_agent() -> Iterator[Endpoint]:
    server = socketserver.ThreadingTCPServer(("127.0.0.1", 0), EchoHandler)
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield Endpoint(kind="tcp", host="127.0.0.1", port=server.server_address[1])
    finally:
        server.shutdown()
        server.server_close()


def test_tcp_bridge(small_corpus: Corpus, tcp_agent: Endpoint):
    trajs = run_bridge(small_corpus, BridgeAgentFactory(tcp_agent, ImageMode.B64), jobs=2)
    assert [t.final_answer for t in trajs] == ["over tcp"] * len(small_corpus.qa_items)


def test_unreachable_agent_aborts_episodes_only(small_corpus: Corpus):
    endpoint = Endpoint(kind="tcp", host="127.0.0.1", port=free_port())
    factory = BridgeAgentFactory(endpoint, ImageMode.B64, connect_timeout=0.5)
    trajs = run_bridge(small_corpus, factory)
    assert len(trajs) == len(small_corpus.qa_items)
    for traj in trajs:
        assert traj.terminated_by is TerminatedBy.ERROR
        assert traj.error is not None and "cannot connect" in traj.error
        assert traj.reward is not None and traj.reward["total"] == 0.0


def test_turn_timeout(small_corpus: Corpus, echo_agent_cmd: str):
    endpoint = Endpoint.parse(f"exec:{echo_agent_cmd} --sleep 2")
    factory = BridgeAgentFactory(endpoint, ImageMode.B64, turn_timeout=0.3)
    qa = first_item(small_corpus)
    doc = small_corpus.document(qa.doc_id)
    agent = factory(doc, qa)
    try:
        traj = run_episode(
            doc, qa, agent, OracleRetriever(qa, doc.n_pages), EnvConfig(use_overview=False)
        )
    finally:
        agent.close()
        factory.close()
    assert traj.terminated_by is TerminatedBy.ERROR
    assert traj.error is not None and "no message within" in traj.error


def test_make_agent_factory(test_output_dir: Path):
    config = RunConfig(seed=5)
    assert make_agent_factory(AgentSpec.parse("oracle"), config) is oracle_agent
    assert make_agent_factory(AgentSpec.parse("greedy"), config) is greedy_retrieval_agent
    assert callable(make_agent_factory(AgentSpec.parse("random:3"), config))

    bridge = make_agent_factory(AgentSpec.parse("bridge:127.0.0.1:1"), config, test_output_dir)
    assert isinstance(bridge, BridgeAgentFactory)
    assert bridge.spool.image_dir == test_output_dir
    bridge.close()

    b64 = make_agent_factory(AgentSpec.parse("bridge:127.0.0.1:1"), RunConfig(image_mode="b64"))
    assert isinstance(b64, BridgeAgentFactory)
    assert b64.spool.mode is ImageMode.B64
    b64.close()

    with pytest.raises(ValueError):
        make_agent_factory(AgentSpec(kind="human"), config)


def test_random_factory_uses_run_seed(small_corpus: Corpus):
    qa = first_item(small_corpus)
    doc = small_corpus.document(qa.doc_id)
    from_run = make_agent_factory(AgentSpec.parse("random"), RunConfig(seed=5))(doc, qa)
    explicit = RandomAgent(5, episode_key=qa.qa_id)
    raws: List[List[str]] = []
    for agent in (from_run, explicit):
        raws.append([r.raw for r in play(small_corpus, qa, agent).turns])
    assert raws[0] == raws[1]

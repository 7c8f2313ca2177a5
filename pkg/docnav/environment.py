from __future__ import annotations

import concurrent.futures
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import (
    TYPE_CHECKING,
    Any,
    Dict,
    FrozenSet,
    Iterable,
    Iterator,
    List,
    Optional,
    Set,
    Tuple,
    Union,
)

from docnav import telemetry
from docnav.corpus import Corpus, Document, Page, QAItem
from docnav.log_helper import log
from docnav.overview import (
    DEFAULT_GROUP_CAPACITY,
    DEFAULT_HEADER_HEIGHT,
    OverviewSet,
    build_overview,
)
from docnav.protocol import (
    RULE_DISABLED_ACTION,
    Answer,
    Fetch,
    FormatError,
    Retrieval,
    Trajectory,
    Turn,
    TurnFeedback,
    TurnRecord,
    parse_turn,
)
from docnav.retrieval import Retriever, RetrieverProvider
from docnav.rewards import RewardScorer
from docnav.types import ActionKind, DeliverySource, Outcome, TerminatedBy
from docnav.wire import TransportError

if TYPE_CHECKING:
    from docnav.agents.base import AgentFactory, AgentPolicy

DEFAULT_MAX_TURNS = 8
RETRIEVAL_CAP = 4


class EnvironmentUsageError(Exception):
    pass


def adaptive_k(n_pages: int, cap: int = RETRIEVAL_CAP) -> int:
    """Retrieval budget: one page per ten, at most `cap`."""
    if n_pages < 1:
        raise ValueError(f"document needs at least one page, got {n_pages}")
    return min(math.ceil(n_pages / 10), cap)


@dataclass(frozen=True)
class EnvConfig:
    max_turns: int = DEFAULT_MAX_TURNS
    group_capacity: int = DEFAULT_GROUP_CAPACITY
    header_height: int = DEFAULT_HEADER_HEIGHT
    # Fixed top-k instead of the adaptive rule
    retrieval_k: Optional[int] = None
    retrieval_cap: int = RETRIEVAL_CAP
    page_label: str = "Page {i}:"
    visited_reminder: str = "Page {i} already visited."
    missing_reminder: str = "Page {i} does not exist."
    format_notice: str = (
        "Invalid turn ({rule}). Reply with exactly one <think> block followed by one <action> block."
    )
    enabled_actions: FrozenSet[ActionKind] = frozenset(ActionKind)
    use_overview: bool = True
    use_working_memory: bool = True

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError(f"max_turns must be at least 1, got {self.max_turns}")
        if self.retrieval_k is not None and self.retrieval_k < 1:
            raise ValueError(f"retrieval_k must be at least 1, got {self.retrieval_k}")
        if self.retrieval_cap < 1:
            raise ValueError(f"retrieval_cap must be at least 1, got {self.retrieval_cap}")
        if not self.enabled_actions:
            raise ValueError("at least one action must be enabled")

    def top_k(self, n_pages: int) -> int:
        if self.retrieval_k is not None:
            return self.retrieval_k
        return adaptive_k(n_pages, self.retrieval_cap)


@dataclass(frozen=True)
class DeliveredPage:
    index: int
    label: str
    page: Page = field(repr=False, compare=False)


@dataclass(frozen=True)
class Feedback:
    pages: Tuple[DeliveredPage, ...] = ()
    reminders: Tuple[str, ...] = ()
    format_notice: Optional[str] = None
    source: Optional[DeliverySource] = None

    def record(self) -> TurnFeedback:
        return TurnFeedback(
            pages=tuple(p.index for p in self.pages),
            reminders=self.reminders,
            format_notice=self.format_notice,
            source=self.source,
        )


@dataclass(frozen=True)
class InitialObservation:
    qa_id: str
    doc_id: str
    question: str
    # None when the overview is switched off
    overview: Optional[OverviewSet]
    page_count: int
    budget: int


@dataclass(frozen=True)
class AugmentedObservation:
    turn: int
    feedback: Feedback
    working_memory: str


Observation = Union[InitialObservation, AugmentedObservation]


@dataclass
class EnvState:
    doc: Document
    question: str
    config: EnvConfig
    retriever: Retriever
    visited: Set[int] = field(default_factory=set)
    memory: List[str] = field(default_factory=list)
    t: int = 0
    outcome: Outcome = Outcome.PENDING
    answer: Optional[str] = None
    format_valid: bool = True

    @property
    def done(self) -> bool:
        return self.outcome is not Outcome.PENDING


def working_memory(state: EnvState) -> str:
    """Summaries of all completed turns, newline-joined. Empty summaries are skipped."""
    return "\n".join(s for s in state.memory if s)


def reset(
    doc: Document,
    question: str,
    config: EnvConfig,
    retriever: Retriever,
    overview: Optional[OverviewSet] = None,
    qa_id: str = "",
) -> Tuple[EnvState, InitialObservation]:
    if config.use_overview and overview is None:
        overview = build_overview(doc, config.group_capacity, config.header_height)
    state = EnvState(doc=doc, question=question, config=config, retriever=retriever)
    observation = InitialObservation(
        qa_id=qa_id,
        doc_id=doc.doc_id,
        question=question,
        overview=overview if config.use_overview else None,
        page_count=doc.n_pages,
        budget=config.max_turns,
    )
    return state, observation


def _deliver(state: EnvState, index: int) -> DeliveredPage:
    state.visited.add(index)
    return DeliveredPage(
        index=index, label=state.config.page_label.format(i=index), page=state.doc.page(index)
    )


def _reject(state: EnvState, rule: str) -> Feedback:
    state.format_valid = False
    telemetry.TURNS.labels("invalid").inc()
    telemetry.FORMAT_ERRORS.labels(rule).inc()
    notice = state.config.format_notice.format(rule=rule)
    log.debug(f"turn {state.t}: {notice}")
    return Feedback(format_notice=notice)


def _execute(state: EnvState, turn: Turn) -> Feedback:
    config = state.config
    action = turn.action
    telemetry.TURNS.labels(str(action.kind)).inc()

    if isinstance(action, Answer):
        state.outcome = Outcome.ANSWERED
        state.answer = action.text
        return Feedback()

    delivered: List[DeliveredPage] = []
    reminders: List[str] = []
    if isinstance(action, Retrieval):
        source = DeliverySource.RETRIEVAL
        k = config.top_k(state.doc.n_pages)
        ranked = state.retriever.retrieve(action.query, frozenset(state.visited), k)
        for r in ranked:
            if r.index in state.visited or not 1 <= r.index <= state.doc.n_pages:
                log.warning(f"retriever returned unusable page {r.index}, dropped")
                continue
            delivered.append(_deliver(state, r.index))
    else:
        assert isinstance(action, Fetch)
        source = DeliverySource.FETCH
        for i in action.indices:
            if not 1 <= i <= state.doc.n_pages:
                reminders.append(config.missing_reminder.format(i=i))
                telemetry.REMINDERS.labels("missing").inc()
            elif i in state.visited:
                reminders.append(config.visited_reminder.format(i=i))
                telemetry.REMINDERS.labels("visited").inc()
            else:
                delivered.append(_deliver(state, i))

    for reminder in reminders:
        log.debug(f"turn {state.t}: {reminder}")
    telemetry.PAGES_DELIVERED.labels(str(source)).inc(len(delivered))
    return Feedback(pages=tuple(delivered), reminders=tuple(reminders), source=source)


def step(state: EnvState, turn: Union[Turn, FormatError]) -> Tuple[EnvState, Feedback, bool]:
    """Consume one agent turn. The state is updated in place and returned."""
    if state.done:
        raise EnvironmentUsageError("episode already finished")
    turn_index = turn.turn_index
    if turn_index is not None and turn_index != state.t:
        raise EnvironmentUsageError(f"got turn {turn_index}, environment is at turn {state.t}")

    if isinstance(turn, FormatError):
        state.memory.append("")
        feedback = _reject(state, turn.rule)
    elif turn.action.kind not in state.config.enabled_actions:
        state.memory.append("")
        feedback = _reject(state, RULE_DISABLED_ACTION)
    else:
        state.memory.append(turn.think.summary)
        feedback = _execute(state, turn)
        out_of_range = [i for i in turn.think.relevant_pages or () if i > state.doc.n_pages]
        if out_of_range:
            state.format_valid = False
            notice = f"relevant pages {out_of_range} do not exist"
            log.debug(f"turn {state.t}: {notice}")
            feedback = Feedback(
                pages=feedback.pages,
                reminders=feedback.reminders,
                format_notice=notice,
                source=feedback.source,
            )

    state.t += 1
    if not state.done and state.t >= state.config.max_turns:
        state.outcome = Outcome.NO_ANSWER
    return state, feedback, state.done


def _observe(state: EnvState, feedback: Feedback) -> AugmentedObservation:
    return AugmentedObservation(
        turn=state.t,
        feedback=feedback,
        working_memory=working_memory(state) if state.config.use_working_memory else "",
    )


def _error_trajectory(traj: Trajectory, error: Exception) -> Trajectory:
    log.error(f"episode {traj.qa_id} aborted: {error}", exc_info=error)
    traj.terminated_by = TerminatedBy.ERROR
    traj.error = str(error)
    traj.final_answer = None
    return traj


def run_episode(
    doc: Document,
    qa: QAItem,
    agent: AgentPolicy,
    retriever: Retriever,
    config: EnvConfig,
    overview: Optional[OverviewSet] = None,
    scorer: RewardScorer = RewardScorer(),
    run_config: Optional[Dict[str, Any]] = None,
) -> Trajectory:
    """Drive one episode until the agent answers or the budget runs out."""
    traj = Trajectory(
        qa_id=qa.qa_id,
        doc_id=doc.doc_id,
        page_count=doc.n_pages,
        budget=config.max_turns,
        run_config=run_config,
    )
    try:
        state, observation = reset(doc, qa.question, config, retriever, overview, qa.qa_id)
        history: List[str] = []
        obs: Observation = observation
        agent.start(observation)
        while not state.done:
            t = state.t
            raw = agent.act(obs, history)
            history.append(raw)
            parsed: Union[Turn, FormatError]
            try:
                parsed = parse_turn(raw, t)
            except FormatError as e:
                parsed = e
            turn = parsed if isinstance(parsed, Turn) else None
            if isinstance(parsed, FormatError):
                format_error: Optional[str] = parsed.rule
            elif parsed.action.kind not in config.enabled_actions:
                format_error = RULE_DISABLED_ACTION
            else:
                format_error = None
            _, feedback, done = step(state, parsed)
            traj.turns.append(
                TurnRecord(
                    t=t,
                    raw=raw,
                    turn=turn,
                    feedback=feedback.record(),
                    format_error=format_error,
                )
            )
            if not done:
                obs = _observe(state, feedback)

        if state.outcome is Outcome.ANSWERED:
            traj.terminated_by = TerminatedBy.ANSWER
            traj.final_answer = state.answer
        else:
            traj.terminated_by = TerminatedBy.BUDGET
        agent.finish(traj)
    except TransportError as e:
        _error_trajectory(traj, e)
    finally:
        retriever.close()

    traj.reward = scorer.score(traj, qa).to_json()
    telemetry.EPISODES.labels(str(traj.terminated_by)).inc()
    log.info(
        f"episode {qa.qa_id}: {traj.terminated_by} after {len(traj.turns)} turn(s), "
        f"reward {traj.reward['total']:.3f}"
    )
    return traj


class EpisodeRunner:
    """Runs episodes over a shared corpus, optionally on a thread pool. Results come back
    in input order."""

    def __init__(
        self,
        corpus: Corpus,
        agent_factory: AgentFactory,
        retrievers: RetrieverProvider,
        config: EnvConfig = EnvConfig(),
        scorer: RewardScorer = RewardScorer(),
        jobs: int = 1,
        run_config: Optional[Dict[str, Any]] = None,
    ):
        if jobs < 1:
            raise ValueError(f"jobs must be at least 1, got {jobs}")
        self.corpus = corpus
        self.agent_factory = agent_factory
        self.retrievers = retrievers
        self.config = config
        self.scorer = scorer
        self.jobs = jobs
        self.run_config = run_config
        self._lock = threading.Lock()
        # Recently built overviews, most recent last
        self._overviews: OrderedDict[str, OverviewSet] = OrderedDict()
        self._max_overviews = 2 * jobs + 2

    def overview(self, doc: Document) -> Optional[OverviewSet]:
        if not self.config.use_overview:
            return None
        with self._lock:
            cached = self._overviews.get(doc.doc_id)
            if cached is not None:
                self._overviews.move_to_end(doc.doc_id)
                return cached
        built = build_overview(doc, self.config.group_capacity, self.config.header_height)
        with self._lock:
            self._overviews[doc.doc_id] = built
            while len(self._overviews) > self._max_overviews:
                self._overviews.popitem(last=False)
        return built

    def run_one(self, qa: QAItem) -> Trajectory:
        doc = self.corpus.document(qa.doc_id)
        agent: Optional[AgentPolicy] = None
        try:
            agent = self.agent_factory(doc, qa)
            retriever = self.retrievers.for_episode(doc, qa)
        except TransportError as e:
            if agent is not None:
                agent.close()
            traj = _error_trajectory(
                Trajectory(
                    qa_id=qa.qa_id,
                    doc_id=doc.doc_id,
                    page_count=doc.n_pages,
                    budget=self.config.max_turns,
                    run_config=self.run_config,
                ),
                e,
            )
            traj.reward = self.scorer.score(traj, qa).to_json()
            telemetry.EPISODES.labels(str(traj.terminated_by)).inc()
            return traj
        try:
            return run_episode(
                doc,
                qa,
                agent,
                retriever,
                self.config,
                overview=self.overview(doc),
                scorer=self.scorer,
                run_config=self.run_config,
            )
        finally:
            agent.close()

    def run(self, qa_items: Iterable[QAItem]) -> Iterator[Trajectory]:
        if self.jobs == 1:
            for qa in qa_items:
                yield self.run_one(qa)
            return
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.jobs) as executor:
            yield from executor.map(self.run_one, qa_items)


def run_all(
    corpus: Corpus,
    agent_factory: AgentFactory,
    retrievers: RetrieverProvider,
    config: EnvConfig = EnvConfig(),
    qa_items: Optional[Iterable[QAItem]] = None,
    jobs: int = 1,
) -> List[Trajectory]:
    runner = EpisodeRunner(corpus, agent_factory, retrievers, config, jobs=jobs)
    return list(runner.run(corpus.qa_items if qa_items is None else qa_items))



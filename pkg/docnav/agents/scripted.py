from __future__ import annotations

import random
from typing import List, Sequence, Set

from docnav.agents.base import AgentPolicy, compose_turn
from docnav.corpus import Document, QAItem, answer_from_text
from docnav.environment import AugmentedObservation, InitialObservation, Observation
from docnav.protocol import Action, Answer, Fetch, Retrieval
from docnav.types import NOT_ANSWERABLE

FETCH_CHUNK = 4

RANDOM_WORDS = ("budget", "owner", "report", "summary", "table", "revenue", "index", "notes")


class OracleAgent(AgentPolicy):
    """Knows the evidence pages: fetches them in chunks, then answers with the first gold
    answer. Unanswerable items get one retrieval and an abstention."""

    def __init__(self, qa: QAItem, chunk: int = FETCH_CHUNK):
        self.qa = qa
        self.chunk = chunk
        self.budget = 0
        self.requested: Set[int] = set()
        self.delivered: Set[int] = set()

    def start(self, observation: InitialObservation):
        self.budget = observation.budget

    def act(self, observation: Observation, history: Sequence[str]) -> str:
        t = len(history)
        if isinstance(observation, AugmentedObservation):
            self.delivered.update(p.index for p in observation.feedback.pages)
        relevant = sorted(self.delivered & self.qa.evidence_pages)
        last_chance = self.budget > 0 and t >= self.budget - 1

        if not self.qa.answerable:
            if t == 0 and not last_chance:
                return compose_turn(
                    t,
                    Retrieval(query=self.qa.question),
                    analysis="Search for the entity named in the question.",
                    summary="Searched for the question.",
                )
            return compose_turn(
                t,
                Answer(text=NOT_ANSWERABLE),
                analysis="Nothing in the document answers the question.",
                summary="Abstained.",
            )

        remaining = [i for i in sorted(self.qa.evidence_pages) if i not in self.requested]
        if remaining and not last_chance:
            batch = remaining[: self.chunk]
            self.requested.update(batch)
            return compose_turn(
                t,
                Fetch(indices=tuple(batch)),
                analysis=f"The answer is on pages {batch}.",
                summary=f"Requested pages {batch}.",
                relevant_pages=relevant,
            )
        return compose_turn(
            t,
            Answer(text=self.qa.gold_answers[0]),
            analysis="All evidence pages have been read.",
            summary="Answered.",
            relevant_pages=relevant,
        )


class GreedyRetrievalAgent(AgentPolicy):
    """Retrieve once with the question, then answer from the delivered pages' text or
    abstain."""

    def __init__(self, question: str):
        self.question = question
        self.delivered: List[int] = []
        self.lines: List[str] = []

    def act(self, observation: Observation, history: Sequence[str]) -> str:
        t = len(history)
        if t == 0:
            return compose_turn(
                t,
                Retrieval(query=self.question),
                analysis="Look up the question directly.",
                summary="Retrieved pages for the question.",
            )

        assert isinstance(observation, AugmentedObservation)
        for delivered in observation.feedback.pages:
            self.delivered.append(delivered.index)
            self.lines.extend(delivered.page.text or ())
        answer = answer_from_text(self.question, self.lines)
        return compose_turn(
            t,
            Answer(text=answer if answer is not None else NOT_ANSWERABLE),
            analysis="Read the retrieved pages.",
            summary="Answered." if answer is not None else "No answer found, abstained.",
            relevant_pages=self.delivered,
        )


class RandomAgent(AgentPolicy):
    """Uniformly random well-formed actions. Fetches may name pages beyond the document
    and pages already seen."""

    def __init__(self, rng_seed: int, episode_key: str = ""):
        self.rng = random.Random(f"{rng_seed}:{episode_key}")
        self.n_pages = 1
        self.last_delivered: List[int] = []

    def start(self, observation: InitialObservation):
        self.n_pages = observation.page_count

    def act(self, observation: Observation, history: Sequence[str]) -> str:
        t = len(history)
        if isinstance(observation, AugmentedObservation):
            self.last_delivered = [p.index for p in observation.feedback.pages]
        relevant = [i for i in self.last_delivered if self.rng.random() < 0.5]

        kind = self.rng.randrange(3)
        if kind == 0:
            words = self.rng.sample(RANDOM_WORDS, self.rng.randint(0, 3))
            action: Action = Retrieval(query=" ".join(words))
        elif kind == 1:
            indices = [self.rng.randint(1, self.n_pages + 2) for _ in range(self.rng.randint(1, 4))]
            action = Fetch(indices=tuple(dict.fromkeys(indices)))
        else:
            action = Answer(text=self.rng.choice(RANDOM_WORDS))
        return compose_turn(
            t,
            action,
            analysis="Random move.",
            summary=f"Took a random {type(action).__name__.lower()} action.",
            relevant_pages=relevant,
        )


class ReplayAgent(AgentPolicy):
    """Plays back fixed turn texts; repeats the last one when they run out."""

    def __init__(self, turns: Sequence[str]):
        if not turns:
            raise ValueError("replay agent needs at least one turn")
        self.turns = list(turns)

    def act(self, observation: Observation, history: Sequence[str]) -> str:
        return self.turns[min(len(history), len(self.turns) - 1)]


def oracle_agent(doc: Document, qa: QAItem) -> AgentPolicy:
    return OracleAgent(qa)


def greedy_retrieval_agent(doc: Document, qa: QAItem) -> AgentPolicy:
    return GreedyRetrievalAgent(qa.question)


def random_agent_factory(rng_seed: int):
    def factory(doc: Document, qa: QAItem) -> AgentPolicy:
        return RandomAgent(rng_seed, episode_key=qa.qa_id)

    return factory


def replay_agent_factory(turns: Sequence[str]):
    def factory(doc: Document, qa: QAItem) -> AgentPolicy:
        return ReplayAgent(turns)

    return factory

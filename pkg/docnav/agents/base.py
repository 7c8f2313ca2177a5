from __future__ import annotations

import abc
from typing import Callable, Optional, Sequence

from docnav.corpus import Document, QAItem
from docnav.environment import InitialObservation, Observation
from docnav.protocol import Action, ThinkBlock, Trajectory, Turn, render_turn


class AgentPolicy(abc.ABC):
    """One agent instance plays one episode.

    The environment calls start() with the initial observation, then act() once per turn
    with the latest observation and the agent's own earlier raw turns, then finish() when
    the episode ends. close() is always called last.
    """

    def start(self, observation: InitialObservation):
        pass

    @abc.abstractmethod
    def act(self, observation: Observation, history: Sequence[str]) -> str:
        pass

    def finish(self, trajectory: Trajectory):
        pass

    def close(self):
        pass


AgentFactory = Callable[[Document, QAItem], AgentPolicy]


def compose_turn(
    t: int,
    action: Action,
    analysis: str,
    summary: str,
    plan: Optional[str] = None,
    relevant_pages: Sequence[int] = (),
) -> str:
    """Well-formed turn text for turn t."""
    think = ThinkBlock(
        analysis=analysis,
        summary=summary,
        plan=(plan or "Inspect the overview, then gather evidence.") if t == 0 else None,
        relevant_pages=None if t == 0 else tuple(sorted(set(relevant_pages))),
    )
    return render_turn(Turn(turn_index=t, think=think, action=action))

from __future__ import annotations

from pathlib import Path
from typing import Optional

from docnav.agents.base import AgentFactory, AgentPolicy, compose_turn
from docnav.agents.bridge import BridgeAgent, BridgeAgentFactory, ImageSpool
from docnav.agents.scripted import (
    GreedyRetrievalAgent,
    OracleAgent,
    RandomAgent,
    ReplayAgent,
    greedy_retrieval_agent,
    oracle_agent,
    random_agent_factory,
    replay_agent_factory,
)
from docnav.config import AgentSpec, RunConfig
from docnav.types import ImageMode

__all__ = [
    "AgentFactory",
    "AgentPolicy",
    "BridgeAgent",
    "BridgeAgentFactory",
    "GreedyRetrievalAgent",
    "ImageSpool",
    "OracleAgent",
    "RandomAgent",
    "ReplayAgent",
    "compose_turn",
    "make_agent_factory",
]


def make_agent_factory(
    spec: AgentSpec, config: RunConfig, image_dir: Optional[Path] = None
) -> AgentFactory:
    """Agent factory for a parsed agent spec. Random agents without their own seed use the
    run seed; bridges spool page images under `image_dir` in path mode."""
    if spec.kind == "oracle":
        return oracle_agent
    if spec.kind == "greedy":
        return greedy_retrieval_agent
    if spec.kind == "random":
        return random_agent_factory(config.seed if spec.seed is None else spec.seed)
    if spec.kind == "bridge":
        assert spec.endpoint is not None
        mode = ImageMode(config.image_mode)
        if config.image_dir is not None:
            image_dir = Path(config.image_dir)
        return BridgeAgentFactory(
            spec.endpoint,
            image_mode=mode,
            image_dir=image_dir if mode is ImageMode.PATH else None,
            connect_timeout=config.connect_timeout,
            turn_timeout=config.turn_timeout,
        )
    raise ValueError(f"unknown agent kind '{spec.kind}'")

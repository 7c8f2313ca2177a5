"""
Run configuration. Values come from built-in defaults, then an optional JSON or TOML
file, then command-line flags, each layer overriding the previous one.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import toml

from docnav.environment import EnvConfig
from docnav.rewards import RewardScorer, RewardWeights
from docnav.types import ActionKind, ImageMode
from docnav.wire import Endpoint


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class AgentSpec:
    kind: str
    seed: Optional[int] = None
    endpoint: Optional[Endpoint] = None

    @classmethod
    def parse(cls, spec: str) -> AgentSpec:
        """oracle | greedy | random[:<seed>] | bridge:<addr>"""
        kind, _, arg = spec.partition(":")
        if kind in ("oracle", "greedy") and not arg:
            return AgentSpec(kind=kind)
        if kind == "random":
            if not arg:
                return AgentSpec(kind=kind)
            if arg.lstrip("-").isdigit():
                return AgentSpec(kind=kind, seed=int(arg))
        if kind == "bridge" and arg:
            try:
                return AgentSpec(kind=kind, endpoint=Endpoint.parse(arg))
            except ValueError as e:
                raise ConfigError(str(e)) from e
        raise ConfigError(
            f"bad agent spec '{spec}', expected oracle, greedy, random[:<seed>] or bridge:<addr>"
        )


@dataclass(frozen=True)
class RetrieverSpec:
    kind: str
    flip_prob: float = 0.0
    seed: int = 0
    endpoint: Optional[Endpoint] = None

    @classmethod
    def parse(cls, spec: str) -> RetrieverSpec:
        """bm25 | oracle | noisy:<p>:<seed> | bridge:<addr>"""
        kind, _, arg = spec.partition(":")
        if kind in ("bm25", "oracle") and not arg:
            return RetrieverSpec(kind=kind)
        if kind == "noisy":
            p, _, seed = arg.partition(":")
            try:
                flip_prob, rng_seed = float(p), int(seed)
            except ValueError:
                raise ConfigError(
                    f"bad noisy retriever spec '{spec}', expected noisy:<p>:<seed>"
                ) from None
            if not 0.0 <= flip_prob <= 1.0:
                raise ConfigError(f"flip probability {flip_prob} outside [0, 1]")
            return RetrieverSpec(kind=kind, flip_prob=flip_prob, seed=rng_seed)
        if kind == "bridge" and arg:
            try:
                return RetrieverSpec(kind=kind, endpoint=Endpoint.parse(arg))
            except ValueError as e:
                raise ConfigError(str(e)) from e
        raise ConfigError(
            f"bad retriever spec '{spec}', expected bm25, oracle, noisy:<p>:<seed> or bridge:<addr>"
        )


@dataclass(frozen=True)
class RunConfig:
    corpus: Optional[str] = None
    agent: str = "oracle"
    retriever: str = "bm25"
    seed: int = 0
    jobs: int = 1

    # environment
    max_turns: int = 8
    group_capacity: int = 36
    header_height: int = 28
    retrieval_k: Optional[int] = None
    retrieval_cap: int = 4
    enabled_actions: List[str] = field(default_factory=lambda: [str(k) for k in ActionKind])
    use_overview: bool = True
    use_working_memory: bool = True

    # rewards and filtering
    w_ans: float = 0.6
    w_evi: float = 0.3
    w_fmt: float = 0.1
    tau: float = 0.5
    tau_anls: float = 0.7
    beta_sq: float = 2.0
    eps: float = 1e-8
    clip: float = 0.2
    bm25_k1: float = 1.2
    bm25_b: float = 0.75

    # bridges
    image_mode: str = "path"
    image_dir: Optional[str] = None
    connect_timeout: float = 10.0
    turn_timeout: float = 120.0

    # Reference training schedule, recorded for reproducibility only
    sft_lr: float = 3e-6
    sft_epochs: int = 3
    grpo_group_size: int = 8
    grpo_temperature: float = 1.0
    grpo_lr: float = 2e-6
    grpo_epochs: int = 3
    difficulty_rollouts: int = 4
    bucket_proportions: List[float] = field(default_factory=lambda: [0.10, 0.70, 0.20])

    def __post_init__(self):
        # Parse eagerly so bad values surface before any work starts
        self.agent_spec()
        self.retriever_spec()
        try:
            self.env_config()
            self.weights()
            ImageMode(self.image_mode)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.jobs < 1:
            raise ConfigError(f"jobs must be at least 1, got {self.jobs}")

    def agent_spec(self) -> AgentSpec:
        return AgentSpec.parse(self.agent)

    def retriever_spec(self) -> RetrieverSpec:
        return RetrieverSpec.parse(self.retriever)

    def env_config(self) -> EnvConfig:
        return EnvConfig(
            max_turns=self.max_turns,
            group_capacity=self.group_capacity,
            header_height=self.header_height,
            retrieval_k=self.retrieval_k,
            retrieval_cap=self.retrieval_cap,
            enabled_actions=frozenset(ActionKind(a) for a in self.enabled_actions),
            use_overview=self.use_overview,
            use_working_memory=self.use_working_memory,
        )

    def weights(self) -> RewardWeights:
        return RewardWeights(w_ans=self.w_ans, w_evi=self.w_evi, w_fmt=self.w_fmt)

    def scorer(self) -> RewardScorer:
        return RewardScorer(self.weights(), tau=self.tau, beta_sq=self.beta_sq, eps=self.eps)

    def to_json(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


CONFIG_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    try:
        if path.suffix == ".toml":
            values = toml.load(path)
        elif path.suffix == ".json":
            values = json.loads(path.read_text())
        else:
            raise ConfigError(f"{path}: config files must be .json or .toml")
    except (OSError, ValueError, toml.TomlDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: config must be a table/object")
    return values


def resolve_config(
    file_values: Optional[Mapping[str, Any]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Defaults, overridden by file values, overridden by flags. None flags are unset."""
    merged: Dict[str, Any] = {}
    for layer in (file_values or {}, overrides or {}):
        unknown = sorted(set(layer) - CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update({k: v for k, v in layer.items() if v is not None})
    try:
        return RunConfig(**merged)
    except TypeError as e:
        raise ConfigError(str(e)) from e

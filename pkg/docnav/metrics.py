from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import AbstractSet, Any, Dict, Iterable, List, Sequence, Tuple

from docnav.corpus import Document, QAItem
from docnav.overview import DEFAULT_GROUP_CAPACITY, DEFAULT_HEADER_HEIGHT, layout_token_cost
from docnav.protocol import Fetch, Retrieval, Trajectory
from docnav.rewards import RewardBreakdown, RewardScorer, answer_reward
from docnav.types import DeliverySource

TOOL_ACTIONS = {DeliverySource.RETRIEVAL: Retrieval, DeliverySource.FETCH: Fetch}


def page_f1(pred: AbstractSet[int], gold: AbstractSet[int]) -> Tuple[float, float, float]:
    """(precision, recall, f1); an empty side counts as 0."""
    hits = len(pred & gold)
    precision = hits / len(pred) if pred else 0.0
    recall = hits / len(gold) if gold else 0.0
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class EpisodeRecord:
    trajectory: Trajectory
    qa: QAItem
    reward: RewardBreakdown
    # Delivered page -> tool that delivered it
    provenance: Dict[int, DeliverySource]
    overview_tokens: int
    page_tokens: int

    @property
    def tokens(self) -> int:
        return self.overview_tokens + self.page_tokens

    def invoked(self, source: DeliverySource) -> bool:
        action_type = TOOL_ACTIONS[source]
        return any(isinstance(a, action_type) for a in self.trajectory.actions())

    def pages_from(self, source: DeliverySource) -> set:
        return {i for i, s in self.provenance.items() if s is source}


def build_record(
    traj: Trajectory,
    qa: QAItem,
    doc: Document,
    scorer: RewardScorer = RewardScorer(),
    group_capacity: int = DEFAULT_GROUP_CAPACITY,
    header_height: int = DEFAULT_HEADER_HEIGHT,
    use_overview: bool = True,
) -> EpisodeRecord:
    provenance = traj.delivered_pages()
    return EpisodeRecord(
        trajectory=traj,
        qa=qa,
        reward=scorer.score(traj, qa),
        provenance=provenance,
        overview_tokens=(
            layout_token_cost(doc.n_pages, group_capacity, header_height) if use_overview else 0
        ),
        page_tokens=sum(doc.page(i).token_cost for i in provenance),
    )


@dataclass(frozen=True)
class ToolStats:
    # All in percent
    ratio: float
    precision: float
    recall: float
    f1: float


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def tool_usage_stats(records: Sequence[EpisodeRecord]) -> Dict[DeliverySource, ToolStats]:
    """Per tool: share of episodes invoking it, and page-level P/R/F1 of the pages it
    delivered, averaged over the invoking episodes that have gold evidence."""
    stats = {}
    for source in DeliverySource:
        invoking = [r for r in records if r.invoked(source)]
        scored = [
            page_f1(r.pages_from(source), r.qa.evidence_pages)
            for r in invoking
            if r.qa.evidence_pages
        ]
        stats[source] = ToolStats(
            ratio=100.0 * len(invoking) / len(records) if records else 0.0,
            precision=100.0 * _mean([p for p, _, _ in scored]),
            recall=100.0 * _mean([r for _, r, _ in scored]),
            f1=100.0 * _mean([f for _, _, f in scored]),
        )
    return stats


@dataclass(frozen=True)
class Report:
    n_episodes: int
    accuracy: float
    mean_answer_score: float
    mean_reward: float
    format_valid_rate: float
    mean_page_precision: float
    mean_page_recall: float
    mean_page_f1: float
    avg_pages: float
    avg_turns: float
    avg_tokens: float
    avg_overview_tokens: float
    terminated_by: Dict[str, int]
    tools: Dict[str, ToolStats]

    def to_json(self) -> Dict[str, Any]:
        d = asdict(self)
        d["tools"] = {name: asdict(s) for name, s in self.tools.items()}
        return d


def aggregate(records: Sequence[EpisodeRecord]) -> Report:
    if not records:
        raise ValueError("cannot aggregate an empty episode set")
    n = len(records)
    with_evidence = [r for r in records if r.qa.evidence_pages]
    page_scores = [
        page_f1(r.trajectory.relevant_pages(), r.qa.evidence_pages) for r in with_evidence
    ]
    terminated = Counter(str(r.trajectory.terminated_by) for r in records)

    return Report(
        n_episodes=n,
        accuracy=_mean([1.0 if r.reward.r_ans > 0 else 0.0 for r in records]),
        mean_answer_score=_mean([r.reward.r_ans for r in records]),
        mean_reward=_mean([r.reward.total for r in records]),
        format_valid_rate=_mean([r.reward.r_fmt for r in records]),
        mean_page_precision=_mean([p for p, _, _ in page_scores]),
        mean_page_recall=_mean([rc for _, rc, _ in page_scores]),
        mean_page_f1=_mean([f for _, _, f in page_scores]),
        avg_pages=_mean([float(len(r.provenance)) for r in records]),
        avg_turns=_mean([float(len(r.trajectory.turns)) for r in records]),
        avg_tokens=_mean([float(r.tokens) for r in records]),
        avg_overview_tokens=_mean([float(r.overview_tokens) for r in records]),
        terminated_by=dict(sorted(terminated.items())),
        tools={str(source): s for source, s in tool_usage_stats(records).items()},
    )


def prediction_rows(trajectories: Iterable[Trajectory]) -> List[Dict[str, Any]]:
    """Rows for external official scorers."""
    return [
        {
            "qa_id": traj.qa_id,
            "answer": traj.final_answer,
            "relevant_pages": sorted(traj.relevant_pages()),
        }
        for traj in trajectories
    ]


def accuracy(trajectories: Iterable[Trajectory], qa_by_id: Dict[str, QAItem]) -> float:
    """Binarized answer accuracy, without building full records."""
    scores = [answer_reward(t.final_answer, qa_by_id[t.qa_id]) for t in trajectories]
    return _mean([1.0 if s > 0 else 0.0 for s in scores])

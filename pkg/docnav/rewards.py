from __future__ import annotations

from dataclasses import dataclass
from typing import AbstractSet, Dict, Optional

from rapidfuzz.distance import Levenshtein

from docnav.corpus import QAItem
from docnav.protocol import Trajectory, validate_trajectory
from docnav.types import NOT_ANSWERABLE, AnswerKind

ANLS_THRESHOLD = 0.5
EVIDENCE_BETA_SQ = 2.0
EPSILON = 1e-8


def normalize(text: str) -> str:
    """Lowercase, trim, collapse inner whitespace."""
    return " ".join(text.lower().split())


def nls(a: str, b: str) -> float:
    """Normalized Levenshtein similarity of the normalized strings. Both empty gives 1."""
    a, b = normalize(a), normalize(b)
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - Levenshtein.distance(a, b) / longest


def answer_reward(pred: Optional[str], qa: QAItem, tau: float = ANLS_THRESHOLD) -> float:
    """Thresholded ANLS for freeform answers, exact match for identifiers, abstention match
    for unanswerable items. No answer scores 0."""
    if pred is None:
        return 0.0
    if qa.answer_kind is AnswerKind.UNANSWERABLE:
        return 1.0 if normalize(pred) == NOT_ANSWERABLE else 0.0
    if qa.answer_kind is AnswerKind.IDENTIFIER:
        return 1.0 if any(normalize(pred) == normalize(g) for g in qa.gold_answers) else 0.0
    score = max(nls(pred, g) for g in qa.gold_answers)
    return score if score >= tau else 0.0


def evidence_reward(
    relevant: AbstractSet[int],
    gold: AbstractSet[int],
    beta_sq: float = EVIDENCE_BETA_SQ,
    eps: float = EPSILON,
) -> float:
    """Recall-weighted F-beta between declared and gold evidence pages, 0 without overlap."""
    hits = len(relevant & gold)
    if hits == 0:
        return 0.0
    p = hits / (len(relevant) + eps)
    r = hits / (len(gold) + eps)
    return (1 + beta_sq) * p * r / (beta_sq * p + r)


def format_reward(traj: Trajectory) -> float:
    return 1.0 if validate_trajectory(traj).valid else 0.0


@dataclass(frozen=True)
class RewardWeights:
    w_ans: float = 0.6
    w_evi: float = 0.3
    w_fmt: float = 0.1

    def __post_init__(self):
        for name in ("w_ans", "w_evi", "w_fmt"):
            if getattr(self, name) < 0:
                raise ValueError(f"reward weight {name} must not be negative")

    @property
    def total(self) -> float:
        return self.w_ans + self.w_evi + self.w_fmt


@dataclass(frozen=True)
class RewardBreakdown:
    r_ans: float
    r_evi: float
    r_fmt: float
    total: float

    def to_json(self) -> Dict[str, float]:
        return {"ans": self.r_ans, "evi": self.r_evi, "fmt": self.r_fmt, "total": self.total}


def total_reward(
    traj: Trajectory,
    qa: QAItem,
    weights: RewardWeights = RewardWeights(),
    tau: float = ANLS_THRESHOLD,
    beta_sq: float = EVIDENCE_BETA_SQ,
    eps: float = EPSILON,
) -> RewardBreakdown:
    r_ans = answer_reward(traj.final_answer, qa, tau)
    r_evi = evidence_reward(traj.relevant_pages(), qa.evidence_pages, beta_sq, eps)
    r_fmt = format_reward(traj)
    return RewardBreakdown(
        r_ans=r_ans,
        r_evi=r_evi,
        r_fmt=r_fmt,
        total=weights.w_ans * r_ans + weights.w_evi * r_evi + weights.w_fmt * r_fmt,
    )


@dataclass(frozen=True)
class RewardScorer:
    """Reward weights plus the thresholds the component rewards use."""

    weights: RewardWeights = RewardWeights()
    tau: float = ANLS_THRESHOLD
    beta_sq: float = EVIDENCE_BETA_SQ
    eps: float = EPSILON

    def score(self, traj: Trajectory, qa: QAItem) -> RewardBreakdown:
        return total_reward(traj, qa, self.weights, self.tau, self.beta_sq, self.eps)

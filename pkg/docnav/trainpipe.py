from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from docnav.corpus import QAItem
from docnav.log_helper import log
from docnav.protocol import Trajectory, validate_trajectory
from docnav.rewards import EPSILON, nls, normalize
from docnav.types import NOT_ANSWERABLE, AnswerKind, Difficulty, FilterReason

"""
Training-side math: the SFT trajectory filter, masked NLL, difficulty buckets and
stratified sampling, group-normalized advantages and the token-level clipped objective.
A softmax toy policy with analytic gradients serves as a gradient-check fixture.
"""

FILTER_ANLS_THRESHOLD = 0.7
CLIP_RANGE = 0.2
DIFFICULTY_ROLLOUTS = 4
BUCKET_PROPORTIONS = (0.10, 0.70, 0.20)
BUCKET_ORDER = (Difficulty.EASY, Difficulty.MEDIUM, Difficulty.HARD)
BACKFILL_ORDER = {
    Difficulty.EASY: (Difficulty.MEDIUM, Difficulty.HARD),
    Difficulty.MEDIUM: (Difficulty.HARD, Difficulty.EASY),
    Difficulty.HARD: (Difficulty.MEDIUM, Difficulty.EASY),
}

Judge = Callable[[Trajectory, QAItem], bool]
T = TypeVar("T")


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: FilterReason
    anls: float
    em: bool
    overlap: int

    def to_json(self) -> Dict[str, object]:
        return {
            "keep": self.keep,
            "reason": str(self.reason),
            "anls": self.anls,
            "em": self.em,
            "overlap": self.overlap,
        }


def _answer_check(pred: Optional[str], qa: QAItem, tau_anls: float) -> Tuple[float, bool, bool]:
    """(best anls, exact match, passes) for a predicted answer."""
    if pred is None:
        return 0.0, False, False
    anls = max(nls(pred, g) for g in qa.gold_answers)
    em = any(normalize(pred) == normalize(g) for g in qa.gold_answers)
    if qa.answer_kind is AnswerKind.UNANSWERABLE:
        passed = normalize(pred) == NOT_ANSWERABLE
    elif qa.answer_kind is AnswerKind.IDENTIFIER:
        passed = em
    else:
        passed = anls >= tau_anls
    return anls, em, passed


def filter_trajectory(
    traj: Trajectory,
    qa: QAItem,
    tau_anls: float = FILTER_ANLS_THRESHOLD,
    answer_judge: Optional[Judge] = None,
    evidence_judge: Optional[Judge] = None,
) -> FilterDecision:
    """Gates in order format, answer, evidence. A judge is only asked when its gate fails
    and can overturn that failure."""
    anls, em, answer_ok = _answer_check(traj.final_answer, qa, tau_anls)
    overlap = len(traj.relevant_pages() & qa.evidence_pages)

    def decision(reason: FilterReason) -> FilterDecision:
        return FilterDecision(
            keep=reason is FilterReason.OK, reason=reason, anls=anls, em=em, overlap=overlap
        )

    if not validate_trajectory(traj).valid:
        return decision(FilterReason.FORMAT)
    if not answer_ok and not (answer_judge is not None and answer_judge(traj, qa)):
        return decision(FilterReason.ANSWER)
    if (
        qa.answer_kind is not AnswerKind.UNANSWERABLE
        and overlap == 0
        and not (evidence_judge is not None and evidence_judge(traj, qa))
    ):
        return decision(FilterReason.EVIDENCE)
    return decision(FilterReason.OK)


def rollout_success(traj: Trajectory, qa: QAItem, tau_anls: float = FILTER_ANLS_THRESHOLD) -> bool:
    return _answer_check(traj.final_answer, qa, tau_anls)[2]


def difficulty_bucket(
    successes: int,
    rollouts: int = DIFFICULTY_ROLLOUTS,
    easy_at: Optional[int] = None,
    hard_at: int = 0,
) -> Difficulty:
    """All rollouts succeed: easy. None succeed: hard. Anything between: medium."""
    if not 0 <= successes <= rollouts:
        raise ValueError(f"successes must lie in 0..{rollouts}, got {successes}")
    if successes >= (rollouts if easy_at is None else easy_at):
        return Difficulty.EASY
    if successes <= hard_at:
        return Difficulty.HARD
    return Difficulty.MEDIUM


def estimate_difficulty(
    rollouts: Sequence[Trajectory], qa: QAItem, tau_anls: float = FILTER_ANLS_THRESHOLD
) -> Difficulty:
    if not rollouts:
        raise ValueError(f"no rollouts to estimate difficulty of {qa.qa_id}")
    successes = sum(rollout_success(t, qa, tau_anls) for t in rollouts)
    return difficulty_bucket(successes, rollouts=len(rollouts))


def bucket_targets(n: int, proportions: Sequence[float] = BUCKET_PROPORTIONS) -> List[int]:
    """Largest-remainder rounding of n * proportions, summing exactly to n."""
    if n < 0:
        raise ValueError(f"sample size must not be negative, got {n}")
    if any(p < 0 for p in proportions) or not math.isclose(sum(proportions), 1.0, abs_tol=1e-9):
        raise ValueError(f"proportions must be non-negative and sum to 1, got {proportions}")
    raw = [n * p for p in proportions]
    counts = [math.floor(x) for x in raw]
    by_remainder = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in by_remainder[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_sample(
    buckets: Dict[Difficulty, Sequence[T]],
    n: int,
    proportions: Sequence[float] = BUCKET_PROPORTIONS,
    rng_seed: int = 0,
) -> List[T]:
    """Sample n items with the given easy/medium/hard proportions. A bucket that runs short
    is backfilled from its neighbors."""
    available = sum(len(buckets.get(d, ())) for d in BUCKET_ORDER)
    if n > available:
        raise ValueError(f"cannot sample {n} items from {available}")

    rng = random.Random(rng_seed)
    pools: Dict[Difficulty, List[T]] = {}
    for d in BUCKET_ORDER:
        pool = list(buckets.get(d, ()))
        rng.shuffle(pool)
        pools[d] = pool

    targets = dict(zip(BUCKET_ORDER, bucket_targets(n, proportions)))
    taken = {d: min(targets[d], len(pools[d])) for d in BUCKET_ORDER}
    for d in BUCKET_ORDER:
        shortfall = targets[d] - taken[d]
        for neighbor in BACKFILL_ORDER[d]:
            if shortfall == 0:
                break
            spare = len(pools[neighbor]) - taken[neighbor]
            moved = min(spare, shortfall)
            if moved > 0:
                log.warning(f"{d} bucket short by {shortfall}, backfilling {moved} from {neighbor}")
                taken[neighbor] += moved
                shortfall -= moved

    sample = [item for d in BUCKET_ORDER for item in pools[d][: taken[d]]]
    rng.shuffle(sample)
    return sample


#
# Token-level objectives
#


@dataclass(frozen=True)
class TokenBatch:
    """Per-token log-probs of B padded sequences. Only mask == True tokens count."""

    logp_new: np.ndarray
    logp_old: np.ndarray
    mask: np.ndarray
    group_ids: np.ndarray

    def __post_init__(self):
        shape = self.logp_new.shape
        if len(shape) != 2:
            raise ValueError(f"log-probs must be (sequences, tokens), got shape {shape}")
        if self.logp_old.shape != shape or self.mask.shape != shape:
            raise ValueError(
                f"misaligned batch: logp_new {shape}, logp_old {self.logp_old.shape}, "
                f"mask {self.mask.shape}"
            )
        if self.mask.dtype != np.bool_:
            raise ValueError("mask must be boolean")
        if self.group_ids.shape != (shape[0],):
            raise ValueError(f"need one group id per sequence, got shape {self.group_ids.shape}")

    @classmethod
    def from_lists(
        cls,
        logp_new: Sequence[Sequence[float]],
        logp_old: Sequence[Sequence[float]],
        mask: Sequence[Sequence[int]],
        group_ids: Optional[Sequence[int]] = None,
    ) -> TokenBatch:
        """Pad ragged sequences; padding is never masked in."""
        n = len(logp_new)
        width = max((len(s) for s in logp_new), default=0)
        new = np.zeros((n, width))
        old = np.zeros((n, width))
        m = np.zeros((n, width), dtype=bool)
        for i, (sn, so, sm) in enumerate(zip(logp_new, logp_old, mask)):
            if not len(sn) == len(so) == len(sm):
                raise ValueError(f"sequence {i}: logp_new, logp_old and mask differ in length")
            new[i, : len(sn)] = sn
            old[i, : len(so)] = so
            m[i, : len(sm)] = np.asarray(sm, dtype=bool)
        ids = np.zeros(n, dtype=int) if group_ids is None else np.asarray(group_ids, dtype=int)
        return TokenBatch(logp_new=new, logp_old=old, mask=m, group_ids=ids)

    @property
    def n_sequences(self) -> int:
        return int(self.logp_new.shape[0])


def masked_nll(batch: TokenBatch) -> float:
    """Negative log-likelihood of the masked tokens, summed per sequence, mean over sequences."""
    if batch.n_sequences == 0:
        return 0.0
    per_sequence = -np.where(batch.mask, batch.logp_new, 0.0).sum(axis=1)
    return float(per_sequence.mean())


def group_advantages(rewards: Sequence[float], eps: float = EPSILON) -> np.ndarray:
    """(R_i - mean) / (population std + eps)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 1:
        raise ValueError("a group needs at least one reward")
    return (r - r.mean()) / (r.std() + eps)


@dataclass(frozen=True)
class GroupRewards:
    rewards: Tuple[float, ...]
    eps: float = EPSILON

    def advantages(self) -> np.ndarray:
        return group_advantages(self.rewards, self.eps)


def _ratios(batch: TokenBatch) -> np.ndarray:
    return np.exp(np.where(batch.mask, batch.logp_new - batch.logp_old, 0.0))


def grpo_objective(
    batch: TokenBatch, advantages: Sequence[float], clip: float = CLIP_RANGE
) -> float:
    """-(1/G) sum_i sum_t min(rho A_i, clip(rho, 1 - c, 1 + c) A_i) over masked tokens.
    `advantages` holds one value per sequence; clip may be math.inf."""
    if clip < 0:
        raise ValueError(f"clip range must not be negative, got {clip}")
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.shape != (batch.n_sequences,):
        raise ValueError(f"need one advantage per sequence, got {adv.shape}")
    if batch.n_sequences == 0:
        return 0.0
    rho = _ratios(batch)
    a = adv[:, None]
    surrogate = np.minimum(rho * a, np.clip(rho, 1 - clip, 1 + clip) * a)
    return float(-np.where(batch.mask, surrogate, 0.0).sum() / batch.n_sequences)


def sequence_advantages(
    batch: TokenBatch, rewards: Sequence[float], eps: float = EPSILON
) -> np.ndarray:
    """Group-normalize one reward per sequence within its group id."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape != (batch.n_sequences,):
        raise ValueError(f"need one reward per sequence, got {r.shape}")
    adv = np.zeros_like(r)
    for gid in np.unique(batch.group_ids):
        members = batch.group_ids == gid
        adv[members] = group_advantages(r[members], eps)
    return adv


class ToyPolicy:
    """Categorical policy over a small vocabulary: p = softmax(params), every position
    draws from the same distribution."""

    def __init__(self, params: Sequence[float]):
        self.params = np.asarray(params, dtype=np.float64)
        if self.params.ndim != 1 or self.params.size < 1:
            raise ValueError("params must be a non-empty vector")

    @property
    def vocab_size(self) -> int:
        return int(self.params.size)

    def log_probs(self) -> np.ndarray:
        shifted = self.params - self.params.max()
        return shifted - np.log(np.exp(shifted).sum())

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def token_logprobs(self, tokens: np.ndarray) -> np.ndarray:
        return self.log_probs()[np.asarray(tokens)]

    def token_batch(
        self,
        tokens: np.ndarray,
        mask: np.ndarray,
        logp_old: Optional[np.ndarray] = None,
        group_ids: Optional[np.ndarray] = None,
    ) -> TokenBatch:
        tokens = np.asarray(tokens)
        logp_new = self.token_logprobs(tokens)
        return TokenBatch(
            logp_new=logp_new,
            logp_old=(
                logp_new.copy() if logp_old is None else np.asarray(logp_old, dtype=np.float64)
            ),
            mask=np.asarray(mask, dtype=bool),
            group_ids=(
                np.zeros(tokens.shape[0], dtype=int) if group_ids is None else np.asarray(group_ids)
            ),
        )

    def _score_terms(self, tokens: np.ndarray, weights: np.ndarray) -> np.ndarray:
        # sum over positions of weight * d log p(token) / d params = weight * (onehot - p)
        tokens = np.asarray(tokens)
        counts = np.bincount(tokens.ravel(), weights=weights.ravel(), minlength=self.vocab_size)
        return counts - weights.sum() * self.probs()

    def nll_grad(self, tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """d masked_nll / d params."""
        tokens = np.asarray(tokens)
        weights = np.asarray(mask, dtype=np.float64)
        return -self._score_terms(tokens, weights) / tokens.shape[0]

    def grpo_grad(
        self,
        tokens: np.ndarray,
        mask: np.ndarray,
        logp_old: np.ndarray,
        advantages: Sequence[float],
        clip: float = CLIP_RANGE,
    ) -> np.ndarray:
        """d grpo_objective / d params. Tokens whose clipped branch is active contribute
        nothing."""
        batch = self.token_batch(tokens, mask, logp_old)
        rho = _ratios(batch)
        a = np.asarray(advantages, dtype=np.float64)[:, None]
        unclipped = rho * a <= np.clip(rho, 1 - clip, 1 + clip) * a
        weights = np.where(batch.mask & unclipped, a * rho, 0.0)
        return -self._score_terms(tokens, weights) / batch.n_sequences

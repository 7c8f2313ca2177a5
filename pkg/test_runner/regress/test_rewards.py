import random
from typing import Optional

import pytest

from docnav.corpus import QAItem
from docnav.protocol import Trajectory, TurnFeedback, TurnRecord, parse_turn
from docnav.rewards import (
    RewardScorer,
    RewardWeights,
    answer_reward,
    evidence_reward,
    format_reward,
    nls,
    normalize,
    total_reward,
)
from docnav.types import AnswerKind, TerminatedBy


def dp_levenshtein(a: str, b: str) -> int:
    """Full-matrix edit distance, as an independent oracle."""
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
    return d[len(a)][len(b)]


def qa(kind: AnswerKind, *gold: str, evidence=frozenset({2})) -> QAItem:
    return QAItem("q", "d", "?", tuple(gold), kind, frozenset(evidence))


def test_normalize():
    assert normalize("  Net   Income\t") == "net income"


def test_nls_examples():
    assert nls("Net Income", "net income") == 1.0
    assert nls("abc", "abd") == pytest.approx(2 / 3)
    assert nls("abc", "xyz") == 0.0
    assert nls("", "  ") == 1.0


def test_nls_matches_dp_oracle():
    rng = random.Random(0)
    for _ in range(10_000):
        a = "".join(rng.choice("abcé ") for _ in range(rng.randint(0, 8)))
        b = "".join(rng.choice("abcé ") for _ in range(rng.randint(0, 8)))
        na, nb = normalize(a), normalize(b)
        longest = max(len(na), len(nb))
        expected = 1.0 if longest == 0 else 1.0 - dp_levenshtein(na, nb) / longest
        assert nls(a, b) == expected
        assert nls(a, b) == nls(b, a)
        assert 0.0 <= nls(a, b) <= 1.0


def test_answer_reward_threshold():
    item = qa(AnswerKind.FREEFORM, "abc")
    assert answer_reward("abd", item) == pytest.approx(2 / 3)
    # 49 of 100 characters right
    gold = "a" * 100
    below = qa(AnswerKind.FREEFORM, gold)
    assert nls("a" * 49, gold) == pytest.approx(0.49)
    assert answer_reward("a" * 49, below) == 0.0
    assert answer_reward("a" * 50, below) == pytest.approx(0.5)
    assert answer_reward(None, item) == 0.0


def test_answer_reward_max_over_golds():
    item = qa(AnswerKind.FREEFORM, "xyz", "abc")
    assert answer_reward("abc", item) == 1.0


def test_answer_reward_identifier_and_unanswerable():
    ident = qa(AnswerKind.IDENTIFIER, "1997")
    assert answer_reward("1997", ident) == 1.0
    assert answer_reward(" 1997 ", ident) == 1.0
    assert answer_reward("1998", ident) == 0.0

    none = qa(AnswerKind.UNANSWERABLE, "not answerable", evidence=())
    assert answer_reward("Not  Answerable", none) == 1.0
    assert answer_reward("1997", none) == 0.0


def test_evidence_reward():
    assert evidence_reward({1, 2}, {2, 3}, eps=0.0) == pytest.approx(0.5, abs=1e-9)
    # the smoothing term shifts the value by 2.5e-9
    assert evidence_reward({1, 2}, {2, 3}) == pytest.approx(0.5, abs=1e-8)
    assert evidence_reward({4, 5}, {4, 5}) == pytest.approx(1.0, abs=1e-6)
    assert evidence_reward({1}, {2}) == 0.0
    assert evidence_reward(set(), {2}) == 0.0
    assert evidence_reward({1}, set()) == 0.0


def test_evidence_reward_is_recall_weighted():
    gold = {1, 2, 3, 4}
    # same F1, recall-heavy prediction scores higher
    recall_heavy = evidence_reward({1, 2, 3, 4, 5, 6, 7, 8}, gold)
    precision_heavy = evidence_reward({1, 2}, gold)
    assert recall_heavy > precision_heavy


def test_evidence_reward_monotone():
    rng = random.Random(1)
    for _ in range(500):
        gold = set(rng.sample(range(1, 20), rng.randint(1, 5)))
        rel = set(rng.sample(range(1, 20), rng.randint(1, 6)))
        base = evidence_reward(rel, gold)
        missing = sorted(gold - rel)
        if missing:
            assert evidence_reward(rel | {missing[0]}, gold) >= base - 1e-12
        wrong = sorted(set(range(1, 20)) - gold - rel)
        if wrong:
            assert evidence_reward(rel | {wrong[0]}, gold) <= base + 1e-12


FIRST = "<think><analysis>a</analysis><plan>p</plan><summary>s</summary></think>"


def later(pages: str) -> str:
    return f"<think><analysis>a</analysis><relevant_pages>{pages}</relevant_pages><summary>s</summary></think>"


def trajectory(*raws: str, answer: Optional[str] = None, budget: int = 8) -> Trajectory:
    traj = Trajectory(qa_id="q", doc_id="d", page_count=10, budget=budget)
    for t, raw in enumerate(raws):
        turn = parse_turn(raw, t)
        traj.turns.append(TurnRecord(t=t, raw=raw, turn=turn, feedback=TurnFeedback()))
    traj.final_answer = answer
    traj.terminated_by = TerminatedBy.ANSWER if answer is not None else TerminatedBy.BUDGET
    return traj


def test_total_reward_perfect_episode():
    traj = trajectory(
        FIRST + "<action><fetch_page>[2]</action>",
        later("[2]") + "<action><answer>abc</action>",
        answer="abc",
    )
    item = qa(AnswerKind.FREEFORM, "abc")
    breakdown = total_reward(traj, item)
    assert breakdown.r_ans == 1.0
    assert breakdown.r_fmt == 1.0
    assert breakdown.total == pytest.approx(1.0, abs=1e-6)
    assert set(breakdown.to_json()) == {"ans", "evi", "fmt", "total"}


def test_total_reward_without_relevant_pages():
    traj = trajectory(FIRST + "<action><answer>1997</action>", answer="1997")
    breakdown = total_reward(traj, qa(AnswerKind.IDENTIFIER, "1997"))
    assert (breakdown.r_ans, breakdown.r_evi, breakdown.r_fmt) == (1.0, 0.0, 1.0)
    assert breakdown.total == pytest.approx(0.7)


def test_total_reward_is_linear_in_weights():
    traj = trajectory(
        FIRST + "<action><fetch_page>[2,3]</action>",
        later("[2,3]") + "<action><answer>abd</action>",
        answer="abd",
    )
    item = qa(AnswerKind.FREEFORM, "abc")
    weights = RewardWeights(w_ans=0.2, w_evi=0.5, w_fmt=0.3)
    default = total_reward(traj, item)
    other = total_reward(traj, item, weights)
    assert (default.r_ans, default.r_evi, default.r_fmt) == (other.r_ans, other.r_evi, other.r_fmt)
    assert other.total == 0.2 * other.r_ans + 0.5 * other.r_evi + 0.3 * other.r_fmt
    assert default.total == 0.6 * default.r_ans + 0.3 * default.r_evi + 0.1 * default.r_fmt


def test_format_reward_budget_violation():
    raws = [FIRST + "<action><retrieval_page>x</action>"] + [
        later("[]") + "<action><retrieval_page>x</action>"
    ] * 3
    assert format_reward(trajectory(*raws, budget=4)) == 1.0
    assert format_reward(trajectory(*raws, budget=3)) == 0.0


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        RewardWeights(w_ans=-0.1)
    assert RewardWeights().total == pytest.approx(1.0)


def test_reward_scorer_thresholds():
    traj = trajectory(FIRST + "<action><answer>abd</action>", answer="abd")
    item = qa(AnswerKind.FREEFORM, "abc")
    assert RewardScorer().score(traj, item).r_ans == pytest.approx(2 / 3)
    assert RewardScorer(tau=0.7).score(traj, item).r_ans == 0.0

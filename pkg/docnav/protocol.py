from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, ClassVar, Dict, List, Optional, Set, Tuple, Union

from docnav.types import ActionKind, DeliverySource, TerminatedBy

"""
Turn grammar, parser and canonical serializer, plus the trajectory record.

A turn is exactly

    <think>
    <analysis>...</analysis>
    <plan>...</plan>                      first turn only
    <relevant_pages>[i, j]</relevant_pages> later turns only
    <summary>...</summary>
    </think>
    <action><retrieval_page>query | <fetch_page>[i,j] | <answer>text</action>

Unknown tags inside <think> are ignored. Sub-blocks do not nest.
The closing tag of the action tag is optional.
"""

THINK_BLOCK_RE = re.compile(r"\s*<think>(.*?)</think>\s*<action>(.*?)</action>\s*", re.DOTALL)
ACTION_TAG_RE = re.compile(r"<(retrieval_page|fetch_page|answer)>(.*)", re.DOTALL)
INDEX_LIST_RE = re.compile(r"\[\s*(\d+\s*(?:,\s*\d+\s*)*)?\]")

SUB_BLOCKS = ("analysis", "plan", "relevant_pages", "summary")
SUB_BLOCK_OPEN_RE = re.compile(r"<(analysis|plan|relevant_pages|summary)>")
SUB_BLOCK_TAG_RE = re.compile(r"</?(?:analysis|plan|relevant_pages|summary)>")

# FormatError rules
RULE_MISSING_THINK = "missing think block"
RULE_DUPLICATE_THINK = "exactly one think block"
RULE_MISSING_ACTION = "missing action block"
RULE_DUPLICATE_ACTION = "exactly one action"
RULE_LAYOUT = "think block must be followed by the action block with nothing outside them"
RULE_ACTION_TAG = "exactly one action tag"
RULE_UNKNOWN_ACTION = "unknown action tag"
RULE_BAD_INDEX_LIST = "bad index list"
RULE_NONPOSITIVE_INDEX = "page indices must be positive"
RULE_EMPTY_FETCH = "fetch needs at least one index"
RULE_EMPTY_ANSWER = "empty answer"
RULE_DUPLICATE_SUB_BLOCK = "duplicate sub-block"
RULE_UNCLOSED_SUB_BLOCK = "unclosed sub-block"
RULE_NESTED_SUB_BLOCK = "sub-blocks must not nest"
RULE_MISSING_ANALYSIS = "missing analysis"
RULE_MISSING_SUMMARY = "missing summary"
RULE_FIRST_TURN_PLAN = "first turn needs a plan and no relevant_pages"
RULE_LATER_TURN_PAGES = "later turns need relevant_pages and no plan"
RULE_DISABLED_ACTION = "action disabled"


class FormatError(Exception):
    def __init__(self, rule: str, turn_index: Optional[int] = None, detail: str = ""):
        message = rule if not detail else f"{rule}: {detail}"
        if turn_index is not None:
            message = f"turn {turn_index}: {message}"
        super().__init__(message)
        self.rule = rule
        self.turn_index = turn_index
        self.detail = detail


@dataclass(frozen=True)
class Retrieval:
    kind: ClassVar[ActionKind] = ActionKind.RETRIEVAL
    query: str

    def to_json(self) -> Dict[str, Any]:
        return {"type": str(self.kind), "query": self.query}


@dataclass(frozen=True)
class Fetch:
    kind: ClassVar[ActionKind] = ActionKind.FETCH
    indices: Tuple[int, ...]

    def to_json(self) -> Dict[str, Any]:
        return {"type": str(self.kind), "indices": list(self.indices)}


@dataclass(frozen=True)
class Answer:
    kind: ClassVar[ActionKind] = ActionKind.ANSWER
    text: str

    def to_json(self) -> Dict[str, Any]:
        return {"type": str(self.kind), "text": self.text}


Action = Union[Retrieval, Fetch, Answer]


@dataclass(frozen=True)
class ThinkBlock:
    analysis: str
    summary: str
    plan: Optional[str] = None
    relevant_pages: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class Turn:
    turn_index: int
    think: ThinkBlock
    action: Action
    raw: str = field(default="", compare=False, repr=False)


def _index_list(text: str, turn_index: int) -> Tuple[int, ...]:
    m = INDEX_LIST_RE.fullmatch(text.strip())
    if m is None:
        raise FormatError(RULE_BAD_INDEX_LIST, turn_index, text.strip()[:40])
    indices: List[int] = []
    for part in (m.group(1) or "").split(","):
        if not part.strip():
            continue
        i = int(part)
        if i < 1:
            raise FormatError(RULE_NONPOSITIVE_INDEX, turn_index, str(i))
        if i not in indices:
            indices.append(i)
    return tuple(indices)


def _parse_think(body: str, turn_index: int) -> ThinkBlock:
    # Sub-blocks are read left to right at the top level; text between them is ignored.
    found: Dict[str, str] = {}
    pos = 0
    while (m := SUB_BLOCK_OPEN_RE.search(body, pos)) is not None:
        tag = m.group(1)
        closing = f"</{tag}>"
        end = body.find(closing, m.end())
        if end < 0:
            raise FormatError(RULE_UNCLOSED_SUB_BLOCK, turn_index, tag)
        content = body[m.end() : end]
        if SUB_BLOCK_TAG_RE.search(content) is not None:
            raise FormatError(RULE_NESTED_SUB_BLOCK, turn_index, tag)
        if tag in found:
            raise FormatError(RULE_DUPLICATE_SUB_BLOCK, turn_index, tag)
        found[tag] = content.strip()
        pos = end + len(closing)

    if "analysis" not in found:
        raise FormatError(RULE_MISSING_ANALYSIS, turn_index)
    if "summary" not in found:
        raise FormatError(RULE_MISSING_SUMMARY, turn_index)

    if turn_index == 0:
        if "plan" not in found or "relevant_pages" in found:
            raise FormatError(RULE_FIRST_TURN_PLAN, turn_index)
        return ThinkBlock(analysis=found["analysis"], summary=found["summary"], plan=found["plan"])

    if "relevant_pages" not in found or "plan" in found:
        raise FormatError(RULE_LATER_TURN_PAGES, turn_index)
    return ThinkBlock(
        analysis=found["analysis"],
        summary=found["summary"],
        relevant_pages=_index_list(found["relevant_pages"], turn_index),
    )


def _parse_action(body: str, turn_index: int) -> Action:
    body = body.strip()
    n_tags = sum(body.count(f"<{kind.tag}>") for kind in ActionKind)
    if n_tags > 1:
        raise FormatError(RULE_ACTION_TAG, turn_index)
    m = ACTION_TAG_RE.fullmatch(body)
    if m is None:
        raise FormatError(
            RULE_UNKNOWN_ACTION if n_tags == 0 else RULE_ACTION_TAG, turn_index, body[:40]
        )

    kind = ActionKind.from_tag(m.group(1))
    arg = m.group(2)
    # at most one trailing closing tag belongs to the grammar
    closing = f"</{m.group(1)}>"
    if arg.endswith(closing):
        arg = arg[: -len(closing)]
    arg = arg.strip()
    if kind is ActionKind.RETRIEVAL:
        return Retrieval(query=arg)
    if kind is ActionKind.FETCH:
        indices = _index_list(arg, turn_index)
        if not indices:
            raise FormatError(RULE_EMPTY_FETCH, turn_index)
        return Fetch(indices=indices)
    if not arg:
        raise FormatError(RULE_EMPTY_ANSWER, turn_index)
    return Answer(text=arg)


def parse_turn(raw: str, turn_index: int) -> Turn:
    """Parse one agent turn. Raises FormatError naming the first violated rule."""
    for tag, missing, duplicate in (
        ("think", RULE_MISSING_THINK, RULE_DUPLICATE_THINK),
        ("action", RULE_MISSING_ACTION, RULE_DUPLICATE_ACTION),
    ):
        opened, closed = raw.count(f"<{tag}>"), raw.count(f"</{tag}>")
        if opened == 0 or closed == 0:
            raise FormatError(missing, turn_index)
        if opened > 1 or closed > 1:
            raise FormatError(duplicate, turn_index)

    m = THINK_BLOCK_RE.fullmatch(raw)
    if m is None:
        raise FormatError(RULE_LAYOUT, turn_index)

    think = _parse_think(m.group(1), turn_index)
    action = _parse_action(m.group(2), turn_index)
    return Turn(turn_index=turn_index, think=think, action=action, raw=raw)


def _render_indices(indices: Tuple[int, ...]) -> str:
    return "[" + ",".join(str(i) for i in indices) + "]"


def render_action(action: Action) -> str:
    if isinstance(action, Retrieval):
        arg = action.query
    elif isinstance(action, Fetch):
        arg = _render_indices(action.indices)
    else:
        arg = action.text
    return f"<{action.kind.tag}>{arg}</{action.kind.tag}>"


def render_turn(turn: Turn) -> str:
    lines = ["<think>", f"<analysis>{turn.think.analysis}</analysis>"]
    if turn.think.plan is not None:
        lines.append(f"<plan>{turn.think.plan}</plan>")
    if turn.think.relevant_pages is not None:
        pages = _render_indices(turn.think.relevant_pages)
        lines.append(f"<relevant_pages>{pages}</relevant_pages>")
    lines.append(f"<summary>{turn.think.summary}</summary>")
    lines.append("</think>")
    lines.append(f"<action>{render_action(turn.action)}</action>")
    return "\n".join(lines)


def action_from_json(d: Dict[str, Any]) -> Action:
    kind = ActionKind(d["type"])
    if kind is ActionKind.RETRIEVAL:
        return Retrieval(query=d["query"])
    if kind is ActionKind.FETCH:
        return Fetch(indices=tuple(d["indices"]))
    return Answer(text=d["text"])


#
# Trajectory records
#


@dataclass(frozen=True)
class TurnFeedback:
    pages: Tuple[int, ...] = ()
    reminders: Tuple[str, ...] = ()
    format_notice: Optional[str] = None
    # Tool that delivered `pages`, None when nothing was requested
    source: Optional[DeliverySource] = None

    def to_json(self) -> Dict[str, Any]:
        return {
            "pages": list(self.pages),
            "reminders": list(self.reminders),
            "format_notice": self.format_notice,
            "source": None if self.source is None else str(self.source),
        }

    @classmethod
    def from_json(cls, d: Dict[str, Any]) -> TurnFeedback:
        return TurnFeedback(
            pages=tuple(d.get("pages", [])),
            reminders=tuple(d.get("reminders", [])),
            format_notice=d.get("format_notice"),
            source=None if d.get("source") is None else DeliverySource(d["source"]),
        )


@dataclass(frozen=True)
class TurnRecord:
    t: int
    raw: str
    turn: Optional[Turn]
    feedback: TurnFeedback
    format_error: Optional[str] = None

    def to_json(self) -> Dict[str, Any]:
        think = self.turn.think if self.turn is not None else None
        return {
            "t": self.t,
            "raw": self.raw,
            "action": self.turn.action.to_json() if self.turn is not None else None,
            "relevant_pages": (
                list(think.relevant_pages)
                if think is not None and think.relevant_pages is not None
                else None
            ),
            "summary": think.summary if think is not None else None,
            "format_error": self.format_error,
            "feedback": self.feedback.to_json(),
        }

    @classmethod
    def from_json(cls, d: Dict[str, Any]) -> TurnRecord:
        t = int(d["t"])
        turn: Optional[Turn] = None
        format_error = d.get("format_error")
        try:
            turn = parse_turn(d["raw"], t)
        except FormatError as e:
            format_error = format_error or e.rule
        return TurnRecord(
            t=t,
            raw=d["raw"],
            turn=turn,
            feedback=TurnFeedback.from_json(d.get("feedback", {})),
            format_error=format_error,
        )


@dataclass
class Trajectory:
    qa_id: str
    doc_id: str
    page_count: int
    budget: int
    turns: List[TurnRecord] = field(default_factory=list)
    final_answer: Optional[str] = None
    terminated_by: Optional[TerminatedBy] = None
    error: Optional[str] = None
    reward: Optional[Dict[str, float]] = None
    run_config: Optional[Dict[str, Any]] = None

    def relevant_pages(self) -> Set[int]:
        """Union of every <relevant_pages> list across the episode."""
        pages: Set[int] = set()
        for rec in self.turns:
            if rec.turn is not None and rec.turn.think.relevant_pages is not None:
                pages.update(rec.turn.think.relevant_pages)
        return pages

    def delivered_pages(self) -> Dict[int, DeliverySource]:
        """Every delivered page with the tool that delivered it."""
        delivered: Dict[int, DeliverySource] = {}
        for rec in self.turns:
            if rec.feedback.source is None:
                continue
            for index in rec.feedback.pages:
                delivered.setdefault(index, rec.feedback.source)
        return delivered

    def actions(self) -> List[Optional[Action]]:
        return [rec.turn.action if rec.turn is not None else None for rec in self.turns]

    def to_json(self) -> Dict[str, Any]:
        return {
            "qa_id": self.qa_id,
            "doc_id": self.doc_id,
            "page_count": self.page_count,
            "budget": self.budget,
            "turns": [rec.to_json() for rec in self.turns],
            "final_answer": self.final_answer,
            "terminated_by": None if self.terminated_by is None else str(self.terminated_by),
            "error": self.error,
            "reward": self.reward,
            "run_config": self.run_config,
        }

    @classmethod
    def from_json(cls, d: Dict[str, Any]) -> Trajectory:
        terminated_by = d.get("terminated_by")
        return Trajectory(
            qa_id=str(d["qa_id"]),
            doc_id=str(d["doc_id"]),
            page_count=int(d["page_count"]),
            budget=int(d["budget"]),
            turns=[TurnRecord.from_json(t) for t in d.get("turns", [])],
            final_answer=d.get("final_answer"),
            terminated_by=None if terminated_by is None else TerminatedBy(terminated_by),
            error=d.get("error"),
            reward=d.get("reward"),
            run_config=d.get("run_config"),
        )


@dataclass(frozen=True)
class FormatReport:
    valid: bool
    violations: Tuple[str, ...] = ()


def validate_trajectory(traj: Trajectory) -> FormatReport:
    """Every turn parses, indices are consecutive, an Answer can only come last, the turn
    count stays within the recorded budget, and relevant pages exist in the document."""
    violations: List[str] = []

    if traj.error is not None or traj.terminated_by is TerminatedBy.ERROR:
        violations.append(f"episode aborted: {traj.error}")

    if len(traj.turns) > traj.budget:
        violations.append(f"budget violation: {len(traj.turns)} turns under budget {traj.budget}")

    answered_at: Optional[int] = None
    for pos, rec in enumerate(traj.turns):
        if rec.t != pos:
            violations.append(f"turn index {rec.t} at position {pos}")
        if answered_at is not None:
            violations.append("action after answer")
            answered_at = None

        try:
            turn = parse_turn(rec.raw, pos)
        except FormatError as e:
            violations.append(str(e))
            continue
        if rec.feedback.format_notice is not None:
            violations.append(f"turn {pos}: {rec.feedback.format_notice}")

        pages = turn.think.relevant_pages or ()
        out_of_range = [i for i in pages if not 1 <= i <= traj.page_count]
        if out_of_range:
            violations.append(
                f"turn {pos}: relevant pages {out_of_range} outside 1..{traj.page_count}"
            )
        if isinstance(turn.action, Answer):
            answered_at = pos

    if traj.terminated_by is TerminatedBy.ANSWER and (
        not traj.turns or not isinstance(traj.actions()[-1], Answer)
    ):
        violations.append("terminated by answer without a final answer turn")

    return FormatReport(valid=not violations, violations=tuple(violations))

import enum
from typing import Optional

"""
Shared enumerations. All of them inherit from str so they serialize to JSON as
plain strings and can be passed straight from the command line.
"""

# Canonical abstention answer, compared after normalization
NOT_ANSWERABLE = "not answerable"


class _StrEnum(str, enum.Enum):
    # TODO: use enum.StrEnum for Python >= 3.11

    # Make it less confusing in logs
    def __repr__(self) -> str:
        return f"'{self.value}'"

    # Make this explicit for Python 3.11 compatibility, which changes the behavior of enums
    def __str__(self) -> str:
        return self.value

    @classmethod
    def _missing_(cls, value):
        # Accept any casing, e.g. "FreeForm" from hand-written qa files
        if isinstance(value, str):
            for member in cls:
                if member.value == value.lower():
                    return member
        return None


@enum.unique
class AnswerKind(_StrEnum):
    FREEFORM = "freeform"
    IDENTIFIER = "identifier"
    UNANSWERABLE = "unanswerable"


@enum.unique
class ActionKind(_StrEnum):
    RETRIEVAL = "retrieval"
    FETCH = "fetch"
    ANSWER = "answer"

    @property
    def tag(self) -> str:
        """Tag name used inside the <action> block."""
        return _ACTION_TAGS[self]

    @classmethod
    def from_tag(cls, tag: str) -> Optional["ActionKind"]:
        for kind, kind_tag in _ACTION_TAGS.items():
            if kind_tag == tag:
                return kind
        return None


_ACTION_TAGS = {
    ActionKind.RETRIEVAL: "retrieval_page",
    ActionKind.FETCH: "fetch_page",
    ActionKind.ANSWER: "answer",
}


@enum.unique
class Outcome(_StrEnum):
    PENDING = "pending"
    ANSWERED = "answered"
    NO_ANSWER = "no_answer"


@enum.unique
class TerminatedBy(_StrEnum):
    ANSWER = "answer"
    BUDGET = "budget"
    # transport failure, the episode was aborted
    ERROR = "error"


@enum.unique
class DeliverySource(_StrEnum):
    """Which tool delivered a page."""

    RETRIEVAL = "retrieval"
    FETCH = "fetch"


@enum.unique
class FilterReason(_StrEnum):
    OK = "ok"
    FORMAT = "format"
    ANSWER = "answer"
    EVIDENCE = "evidence"


@enum.unique
class Difficulty(_StrEnum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


@enum.unique
class ImageMode(_StrEnum):
    PATH = "path"
    B64 = "b64"

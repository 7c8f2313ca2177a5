from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, write_to_textfile

"""
Harness counters, kept in a private registry so they never mix with anything else
running in the same process. Counters only grow; tests compare before/after values.
"""

REGISTRY = CollectorRegistry()

EPISODES = Counter(
    "docnav_episodes",
    "Finished episodes, by how they ended",
    ["terminated_by"],
    registry=REGISTRY,
)
TURNS = Counter(
    "docnav_turns",
    "Agent turns, by action kind ('invalid' for format errors)",
    ["action"],
    registry=REGISTRY,
)
PAGES_DELIVERED = Counter(
    "docnav_pages_delivered",
    "Page images delivered to agents, by tool",
    ["source"],
    registry=REGISTRY,
)
REMINDERS = Counter(
    "docnav_reminders",
    "Text reminders sent instead of page images",
    ["kind"],
    registry=REGISTRY,
)
FORMAT_ERRORS = Counter(
    "docnav_format_errors",
    "Turns rejected by the turn grammar, by rule",
    ["rule"],
    registry=REGISTRY,
)


def write_metrics(path: Path):
    write_to_textfile(str(path), REGISTRY)

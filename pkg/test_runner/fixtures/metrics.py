from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Optional, Tuple

from prometheus_client import generate_latest
from prometheus_client.parser import text_string_to_metric_families

from docnav import telemetry

SeriesKey = Tuple[str, FrozenSet[Tuple[str, str]]]


@dataclass
class CounterSnapshot:
    """docnav counter values at one moment, keyed by sample name and label set."""

    series: Dict[SeriesKey, float] = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str) -> "CounterSnapshot":
        snap = cls()
        for family in text_string_to_metric_families(text):
            for sample in family.samples:
                snap.series[(sample.name, frozenset(sample.labels.items()))] = sample.value
        return snap

    def value(self, name: str, labels: Optional[Dict[str, str]] = None) -> float:
        """Sum over the series carrying these labels, 0 when none was ever touched."""
        wanted = set((labels or {}).items())
        return float(sum(v for (n, ls), v in self.series.items() if n == name and wanted <= ls))


def read_metrics_file(path: Path) -> CounterSnapshot:
    """Counters as written by `docnav run --metrics-file`."""
    return CounterSnapshot.from_text(Path(path).read_text())


def snapshot() -> CounterSnapshot:
    return CounterSnapshot.from_text(generate_latest(telemetry.REGISTRY).decode())

"""Run reports, console output and the events log."""

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterator, List, Optional, Tuple

import pandas as pd

from .certification import RelationCertificate
from .config import EVENTS_LOG_PATH
from .guarantees import MetricRecord

TIMING_PREFIX = "#"
RECORD_COLUMNS = ["name", "theoretical", "empirical", "interval", "verdict"]


def now() -> str:
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")


def log_to_console(message: str, timestamp: Optional[str] = None) -> None:
    """Print a timestamped line."""
    print(f"[{timestamp or now()}] {message}")


def log_to_file(message: str, timestamp: Optional[str] = None) -> None:
    """Append a timestamped line to the events log."""
    with open(EVENTS_LOG_PATH, "a") as f:
        f.write(f"[{timestamp or now()}] {message}\n")


def log_event(message: str) -> None:
    timestamp = now()
    log_to_console(message, timestamp)
    log_to_file(message, timestamp)


def format_record(record: MetricRecord) -> str:
    """name | theoretical | empirical | interval | verdict"""
    return " | ".join([record.name, record.theoretical, record.empirical, record.interval, record.verdict])


def records_frame(records: List[MetricRecord]) -> pd.DataFrame:
    return pd.DataFrame([[getattr(r, c) for c in RECORD_COLUMNS] for r in records], columns=RECORD_COLUMNS)


def certificate_records(cert: RelationCertificate) -> List[MetricRecord]:
    """Evidence of one certificate as report records."""
    records = []
    for check in cert.evidence:
        verdict = "PASS" if check.passed else "FAIL"
        records.append(MetricRecord(f"{cert.name}.{check.name}", check.detail or "-", f"{check.residual:.6g}",
                                    "-", verdict))
    records.append(MetricRecord(f"{cert.name}.path", "-", cert.path, f"lambda {cert.lam:.6g}", "INFO"))
    for flag in cert.flags:
        records.append(MetricRecord(f"{cert.name}.flag", "-", flag, "-", "INFO"))
    return records


@dataclass
class RunReport:
    """Stage verdicts, records and timings of one run.

    Timings render as lines starting with ``#`` so that two runs with the same
    seed compare equal after ``strip_timing``.
    """

    title: str
    seed: Optional[int] = None
    sections: List[Tuple[str, List[MetricRecord]]] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)

    def add(self, section: str, records: List[MetricRecord]) -> None:
        self.sections.append((section, list(records)))

    @property
    def passed(self) -> bool:
        return all(r.verdict != "FAIL" for _, records in self.sections for r in records)

    @contextmanager
    def timed(self, stage: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - start

    def render(self) -> str:
        lines = [f"simrel report: {self.title}"]
        if self.seed is not None:
            lines.append(f"seed: {self.seed}")
        for section, records in self.sections:
            lines.append("")
            lines.append(f"== {section} ==")
            lines.extend(format_record(r) for r in records)
        lines.append("")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        for stage, seconds in self.timings.items():
            lines.append(f"{TIMING_PREFIX} {stage}: {seconds:.3f} s")
        return "\n".join(lines) + "\n"

    def summary(self) -> pd.DataFrame:
        """All records as one table with a section column."""
        frames = []
        for section, records in self.sections:
            df = records_frame(records)
            df.insert(0, "section", section)
            frames.append(df)
        if not frames:
            return pd.DataFrame(columns=["section"] + RECORD_COLUMNS)
        return pd.concat(frames, ignore_index=True)


def strip_timing(text: str) -> str:
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith(TIMING_PREFIX))


def parse_report(text: str) -> RunReport:
    """Read back a rendered report; timing lines are restored as timings."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("simrel report: "):
        raise ValueError("not a simrel report")
    report = RunReport(lines[0][len("simrel report: "):])
    current: Optional[List[MetricRecord]] = None
    for line in lines[1:]:
        if line.startswith("seed: "):
            report.seed = int(line[len("seed: "):])
        elif line.startswith("== ") and line.endswith(" =="):
            current = []
            report.sections.append((line[3:-3], current))
        elif line.startswith(TIMING_PREFIX):
            stage, _, seconds = line[len(TIMING_PREFIX):].strip().rpartition(": ")
            report.timings[stage] = float(seconds.split()[0])
        elif " | " in line and current is not None:
            parts = line.split(" | ")
            if len(parts) == len(RECORD_COLUMNS):
                current.append(MetricRecord(*parts))
    return report

"""Time-stamped ballot events and their CSV form."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

HEADER = ["timestamp_sec", "task_id", "worker_id", "label", "pay_level"]


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class BallotEvent:
    timestamp_sec: int
    task_id: int
    worker_id: int
    label: int
    pay_level: int


class BallotTrace:
    """Ordered, validated list of ballot events.

    Events are kept sorted by (timestamp, task_id, worker_id) so that
    simultaneous ballots have a deterministic order.
    """

    def __init__(self, events: Iterable[BallotEvent] = (), n_pay_levels: int | None = None):
        evs = sorted(events)
        for e in evs:
            if e.label not in (0, 1):
                raise ValueError(f"label must be binary, got {e.label}")
            if e.timestamp_sec < 0:
                raise ValueError("timestamps must be nonnegative")
            if e.pay_level < 0 or (n_pay_levels is not None and e.pay_level >= n_pay_levels):
                raise ValueError(f"pay level {e.pay_level} outside the pay grid")
        self.events = evs

    def __iter__(self) -> Iterator[BallotEvent]:
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def __eq__(self, other):
        return isinstance(other, BallotTrace) and self.events == other.events

    def by_task(self) -> dict:
        out: dict = {}
        for e in self.events:
            out.setdefault(e.task_id, []).append(e)
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for e in self.events:
            w.writerow([e.timestamp_sec, e.task_id, e.worker_id, e.label, e.pay_level])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, source, n_pay_levels: int | None = None) -> "BallotTrace":
        """Parse from a path or a file-like object; errors carry line numbers."""
        if hasattr(source, "read"):
            text = source.read()
        else:
            text = Path(source).read_text(encoding="utf-8")
        lines = text.splitlines()
        if not lines or [h.strip() for h in lines[0].split(",")] != HEADER:
            raise TraceFormatError(f"line 1: expected header {','.join(HEADER)}")
        events = []
        for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(HEADER):
                raise TraceFormatError(f"line {lineno}: expected {len(HEADER)} fields, got {len(row)}")
            try:
                vals = [int(c) for c in row]
            except ValueError:
                raise TraceFormatError(f"line {lineno}: non-integer field in {row!r}") from None
            try:
                ev = BallotEvent(*vals)
                cls([ev], n_pay_levels)
            except ValueError as exc:
                raise TraceFormatError(f"line {lineno}: {exc}") from None
            events.append(ev)
        return cls(events, n_pay_levels)


def read_gold(path) -> dict:
    """Gold labels CSV with header ``task_id,label``."""
    gold = {}
    with open(path, encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or [h.strip() for h in header] != ["task_id", "label"]:
            raise TraceFormatError("line 1: expected header task_id,label")
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            try:
                t, lab = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise TraceFormatError(f"line {lineno}: bad gold row {row!r}") from None
            if lab not in (0, 1):
                raise TraceFormatError(f"line {lineno}: label must be 0 or 1")
            gold[t] = lab
    return gold


def write_gold(gold: dict, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "label"])
        for t in sorted(gold):
            w.writerow([t, gold[t]])

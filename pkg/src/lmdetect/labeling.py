"""Attach red-team ground truth to authentication events."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Iterable, Iterator, NamedTuple

from .logs import AuthEvent, RedTeamEvent


class LabeledAuthEvent(NamedTuple):
    event: AuthEvent
    is_malicious: bool


_new_labeled = partial(tuple.__new__, LabeledAuthEvent)


def _key(time, user, src, dst):
    return (time, user, src, dst)


@dataclass
class LabelSummary:
    total_events: int = 0
    malicious: int = 0
    redteam_records: int = 0
    unmatched: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "total_events": self.total_events,
            "malicious": self.malicious,
            "redteam_records": self.redteam_records,
            "unmatched_redteam": len(self.unmatched),
            "unmatched_examples": [list(k) for k in self.unmatched[:20]],
        }


class Labeler:
    """Exact join of auth events against a red-team set.

    The join key is ``(time, src_user, src_computer, dst_computer)``. The
    red-team set is held read-only; one labeler can serve several
    partitions of a stream, and ``summary()`` reports the red-team keys
    none of them matched.
    """

    def __init__(self, redteam: Iterable[RedTeamEvent]):
        self.keys = frozenset(_key(r.time, r.user, r.src_computer, r.dst_computer) for r in redteam)
        self._seen: set = set()
        self.total = 0
        self.malicious = 0

    def label(self, event: AuthEvent) -> bool:
        self.total += 1
        if not self.keys:
            return False
        k = _key(event.time, event.src_user, event.src_computer, event.dst_computer)
        if k in self.keys:
            self.malicious += 1
            self._seen.add(k)
            return True
        return False

    def label_stream(self, events: Iterable[AuthEvent]) -> Iterator[LabeledAuthEvent]:
        keys = self.keys
        if not keys:
            for e in events:
                self.total += 1
                yield _new_labeled((e, False))
            return
        for e in events:
            self.total += 1
            k = (e.time, e.src_user, e.src_computer, e.dst_computer)
            if k in keys:
                self.malicious += 1
                self._seen.add(k)
                yield _new_labeled((e, True))
            else:
                yield _new_labeled((e, False))

    def summary(self) -> LabelSummary:
        unmatched = sorted(self.keys - self._seen, key=lambda k: (k[0], str(k[1:])))
        return LabelSummary(self.total, self.malicious, len(self.keys), unmatched)


def label_events(events: Iterable[AuthEvent], redteam: Iterable[RedTeamEvent]) -> Iterator[LabeledAuthEvent]:
    return Labeler(redteam).label_stream(events)

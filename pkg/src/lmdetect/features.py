"""Streaming per-user behavioral features for remote logon events.

The engine consumes one time-sorted stream of labelled authentication
events and process events and emits one ``FeatureRecord`` per successful
remote LogOn. A record waits in a pending buffer until either a process
Start for the destination identity arrives inside the process window or
the stream moves past that window.
"""

from __future__ import annotations

import heapq
import json
import logging
from bisect import bisect_left, bisect_right, insort
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Optional

from .labeling import LabeledAuthEvent
from .logs import AuthEvent, Outcome, Phase, ProcEvent

_SUCCESS = Outcome.SUCCESS

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "was_source_logged_on",
    "how_long_ago",
    "other_interactive_logins",
    "was_process_run",
    "previous_login_fraction",
    "number_of_failed",
    "fraction_from_same_box",
    "auth_type_code",
)


class OutOfOrderEvent(ValueError):
    """Input time went backwards further than the reorder tolerance."""


class FeatureRecord(NamedTuple):
    event_id: int
    time: int
    src_user: Optional[str]
    src_computer: str
    dst_computer: str
    was_source_logged_on: int
    how_long_ago: int
    other_interactive_logins: int
    was_process_run: int
    previous_login_fraction: float
    number_of_failed: int
    fraction_from_same_box: float
    auth_type_code: int
    is_malicious: bool
    # raw category kept so the code can be (re)assigned once an encoding
    # has been fitted on the training split
    auth_type: Optional[str] = None

    def features(self) -> tuple:
        return (
            self.was_source_logged_on, self.how_long_ago, self.other_interactive_logins,
            self.was_process_run, self.previous_login_fraction, self.number_of_failed,
            self.fraction_from_same_box, self.auth_type_code,
        )


# index of was_process_run inside a pending record list
_WPR = FeatureRecord._fields.index("was_process_run")


class SessionRecord(NamedTuple):
    user: Optional[str]
    src_computer: str
    logon_time: int
    logoff_time: Optional[int]

    @property
    def duration(self) -> Optional[int]:
        return None if self.logoff_time is None else self.logoff_time - self.logon_time


class LabelEncoding:
    """Frequency-ranked label encoding; code 0 is missing or unseen."""

    def __init__(self, table: Optional[dict] = None):
        self.table: dict[str, int] = dict(table or {})

    def encode(self, value: Optional[str]) -> int:
        if value is None:
            return 0
        return self.table.get(value, 0)

    def __len__(self):
        return len(self.table)

    def __eq__(self, other):
        return isinstance(other, LabelEncoding) and self.table == other.table

    def __repr__(self):
        return f"LabelEncoding({self.table!r})"

    def to_json(self) -> str:
        return json.dumps(self.table, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LabelEncoding":
        return cls({str(k): int(v) for k, v in json.loads(text).items()})


def fit_label_encoding(values: Iterable) -> LabelEncoding:
    """Fit on training-split auth types (``AuthEvent``s or raw strings).

    Categories are ranked by descending frequency, ties broken by
    case-insensitive then exact lexicographic order, and numbered from 1.
    """
    counts: Counter = Counter()
    for v in values:
        if isinstance(v, AuthEvent):
            v = v.auth_type
        if v is not None:
            counts[v] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0].casefold(), kv[0]))
    return LabelEncoding({k: i for i, (k, _) in enumerate(ranked, 1)})


@dataclass
class EngineConfig:
    interactive_logon_types: frozenset = frozenset({"Interactive"})
    session_window: int = 86400
    failure_window: int = 3600
    process_window: int = 60
    tod_band: int = 3600
    empty_history_fraction: float = 1.0
    reorder_tolerance: int = 0
    # "hour": bounded per-user bucket counts with linear edge interpolation;
    # "exact": per-second history, bit-exact against a rescan
    tod_mode: str = "hour"

    def __post_init__(self):
        self.interactive_logon_types = frozenset(self.interactive_logon_types)
        if self.tod_mode not in ("hour", "exact"):
            raise ValueError(f"tod_mode must be 'hour' or 'exact', not {self.tod_mode!r}")
        if 86400 % self.tod_band or not 0 < self.tod_band < 43200:
            raise ValueError("tod_band must divide 86400 and be below 12h")
        for name in ("session_window", "failure_window", "process_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.reorder_tolerance < 0:
            raise ValueError("reorder_tolerance must be >= 0")

    def to_dict(self) -> dict:
        return {
            "interactive_logon_types": sorted(self.interactive_logon_types),
            "session_window": self.session_window,
            "failure_window": self.failure_window,
            "process_window": self.process_window,
            "tod_band": self.tod_band,
            "empty_history_fraction": self.empty_history_fraction,
            "reorder_tolerance": self.reorder_tolerance,
            "tod_mode": self.tod_mode,
        }


@dataclass
class DataQuality:
    auth_events: int = 0
    proc_events: int = 0
    missing_endpoint_logons: int = 0
    unmatched_logoffs: int = 0
    ignored_orientations: int = 0
    emitted: int = 0
    emitted_with_process: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BehaviorState:
    watermark: int = -1
    next_event_id: int = 0
    # user -> computer -> start times of open interactive sessions
    sessions: dict = field(default_factory=dict)
    # (user, computer) -> time of latest interactive logon
    last_interactive: dict = field(default_factory=dict)
    login_total: dict = field(default_factory=dict)
    login_from: dict = field(default_factory=dict)
    tod: dict = field(default_factory=dict)
    # source computer -> times of failed remote logons
    failures: dict = field(default_factory=dict)
    pending: deque = field(default_factory=deque)
    pending_by_key: dict = field(default_factory=dict)
    durations: list = field(default_factory=list)
    last_sweep: int = 0
    quality: DataQuality = field(default_factory=DataQuality)


def is_remote(event: AuthEvent) -> bool:
    s, d = event.src_computer, event.dst_computer
    return s is not None and d is not None and s != d


def is_interactive_logon(event: AuthEvent, interactive_types=frozenset({"Interactive"})) -> bool:
    return (
        event.orientation == "LogOn"
        and event.outcome is Outcome.SUCCESS
        and event.logon_type in interactive_types
    )


class FeatureEngine:
    """Single-pass behavioral state machine.

    ``process`` accepts ``LabeledAuthEvent``, bare ``AuthEvent`` (label
    False) or ``ProcEvent`` items in non-decreasing time order and returns
    the records that became final, in event order. ``finalize`` flushes
    whatever is still pending once the input is exhausted.
    """

    def __init__(self, config: Optional[EngineConfig] = None, encoding: Optional[LabelEncoding] = None):
        self.config = config or EngineConfig()
        self.encoding = encoding
        self.state = BehaviorState()
        c = self.config
        self._exact_tod = c.tod_mode == "exact"
        self._width = c.tod_band
        self._swin = c.session_window
        self._fwin = c.failure_window
        self._pwin = c.process_window
        self._empty = c.empty_history_fraction
        self._interactive = c.interactive_logon_types
        self._reorder: list = []
        self._seq = 0
        self._max_seen = -1

    @property
    def quality(self) -> DataQuality:
        q = self.state.quality
        q.auth_events = self.state.next_event_id
        return q

    def process(self, item) -> list[FeatureRecord]:
        out: list = []
        tol = self.config.reorder_tolerance
        if tol == 0:
            self._dispatch(item, out)
        else:
            self._buffer(item, tol, out)
        return out

    def run(self, stream: Iterable) -> Iterator[FeatureRecord]:
        """Feed a whole stream and finalize, yielding records in event order."""
        out: list = []
        tol = self.config.reorder_tolerance
        step = self._dispatch if tol == 0 else (lambda it, o: self._buffer(it, tol, o))
        for item in stream:
            step(item, out)
            if out:
                yield from out
                out.clear()
        yield from self.finalize()

    def finalize(self) -> list[FeatureRecord]:
        out: list = []
        while self._reorder:
            self._dispatch(heapq.heappop(self._reorder)[3], out)
        st = self.state
        q = st.quality
        while st.pending:
            rec = st.pending.popleft()
            q.emitted += 1
            q.emitted_with_process += rec[_WPR]
            out.append(FeatureRecord._make(rec[:-1]))
        st.pending_by_key.clear()
        return out

    def drain_durations(self) -> list[SessionRecord]:
        """Closed interactive sessions recorded since the last drain."""
        d = self.state.durations
        self.state.durations = []
        return d

    # ---- internals --------------------------------------------------

    def _buffer(self, item, tol: int, out: list) -> None:
        ev = item[0] if isinstance(item, LabeledAuthEvent) else item
        t = ev.time
        if t < self._max_seen - tol:
            raise OutOfOrderEvent(f"time {t} is more than {tol}s behind {self._max_seen}")
        if isinstance(ev, ProcEvent):
            rank = 2
        else:
            rank = 0 if ev.orientation == "LogOff" else 1
        heapq.heappush(self._reorder, (t, rank, self._seq, item))
        self._seq += 1
        if t > self._max_seen:
            self._max_seen = t
        limit = self._max_seen - tol
        heap = self._reorder
        while heap and heap[0][0] < limit:
            self._dispatch(heapq.heappop(heap)[3], out)

    def _flush(self, now: int, out: list) -> None:
        st = self.state
        pending = st.pending
        horizon = now - self.config.process_window
        q = st.quality
        while pending:
            rec = pending[0]
            if not rec[_WPR]:
                if rec[1] >= horizon:
                    break
                lst = st.pending_by_key[rec[-1]]
                lst.popleft()
                if not lst:
                    del st.pending_by_key[rec[-1]]
            pending.popleft()
            q.emitted += 1
            q.emitted_with_process += rec[_WPR]
            out.append(FeatureRecord._make(rec[:-1]))

    def _sweep(self, t: int) -> None:
        st = self.state
        c = self.config
        fcut = t - c.failure_window
        for comp, dq in list(st.failures.items()):
            while dq and dq[0] <= fcut:
                dq.popleft()
            if not dq:
                del st.failures[comp]
        scut = t - c.session_window
        for user, comps in list(st.sessions.items()):
            for comp, dq in list(comps.items()):
                while dq and dq[0] <= scut:
                    dq.popleft()
                if not dq:
                    del comps[comp]
            if not comps:
                del st.sessions[user]
        for k in [k for k, v in st.last_interactive.items() if v <= scut]:
            del st.last_interactive[k]
        st.last_sweep = t

    def _dispatch(self, item, out: list) -> None:
        # One inlined function: this runs once per input event.
        st = self.state
        tp = type(item)
        if tp is LabeledAuthEvent:
            ev, mal = item
        elif tp is ProcEvent:
            self._proc(item, out)
            return
        else:
            ev, mal = item, False
        t = ev[0]
        if t != st.watermark:
            if t < st.watermark:
                raise OutOfOrderEvent(f"auth event at {t} after watermark {st.watermark}")
            st.watermark = t
            pending = st.pending
            if pending and (pending[0][_WPR] or pending[0][1] < t - self._pwin):
                self._flush(t, out)
            if t - st.last_sweep >= self._fwin:
                self._sweep(t)
        eid = st.next_event_id
        st.next_event_id = eid + 1
        orient = ev[9]
        if orient == "LogOn":
            s = ev[5]
            d = ev[6]
            if s is None or d is None:
                st.quality.missing_endpoint_logons += 1
                remote = False
            else:
                remote = s != d
            if ev[10] is _SUCCESS:
                u = ev[1]
                total = st.login_total.get(u, 0)
                if remote:
                    self._features(ev, eid, u, s, d, mal, total)
                # history updates come after the features: they describe the past
                st.login_total[u] = total + 1
                k = (u, s)
                login_from = st.login_from
                login_from[k] = login_from.get(k, 0) + 1
                h, r = divmod(t % 86400, self._width)
                hist = st.tod.get(u)
                if hist is None:
                    hist = st.tod[u] = self._new_hist()
                if self._exact_tod:
                    insort(hist[h], r)
                else:
                    hist[h] += 1
                if d is not None and ev[8] in self._interactive:
                    self._open_session(ev[3], d, t)
            elif remote:
                fq = st.failures.get(s)
                if fq is None:
                    st.failures[s] = deque((t,))
                else:
                    cut = t - self._fwin
                    while fq and fq[0] <= cut:
                        fq.popleft()
                    fq.append(t)
        elif orient == "LogOff":
            if ev[8] in self._interactive:
                self._close_session(ev[3], ev[6], t)
        else:
            st.quality.ignored_orientations += 1

    def _features(self, ev, eid, u, s, d, mal, total) -> None:
        st = self.state
        t = ev[0]
        wslo = 0
        other = 0
        comps = st.sessions.get(u)
        if comps:
            cut = t - self._swin
            for comp, dq in comps.items():
                while dq and dq[0] <= cut:
                    dq.popleft()
                if dq:
                    if comp == s:
                        wslo = 1
                    else:
                        other += 1
        hla = t - st.last_interactive[(u, s)] if wslo else self._swin
        if total:
            plf = self._tod_count(u, t) / total
            ffsb = st.login_from.get((u, s), 0) / total
        else:
            plf = ffsb = self._empty
        fq = st.failures.get(s)
        if fq:
            cut = t - self._fwin
            while fq and fq[0] <= cut:
                fq.popleft()
            nf = len(fq)
        else:
            nf = 0
        code = self.encoding.encode(ev[7]) if self.encoding is not None else 0
        key = (d, ev[3])
        rec = [eid, t, u, s, d, wslo, hla, other, 0, plf, nf, ffsb, code, mal, ev[7], key]
        st.pending.append(rec)
        lst = st.pending_by_key.get(key)
        if lst is None:
            st.pending_by_key[key] = deque((rec,))
        else:
            lst.append(rec)

    def _new_hist(self):
        n = 86400 // self._width
        return [[] for _ in range(n)] if self._exact_tod else [0] * n

    def _tod_count(self, u, t):
        """Prior logins of ``u`` within one band of ``t``'s time of day (circular)."""
        hist = self.state.tod[u]
        width = self.config.tod_band
        n = len(hist)
        h, r = divmod(t % 86400, width)
        prev = hist[h - 1]
        nxt = hist[(h + 1) % n]
        if self._exact_tod:
            return len(hist[h]) + len(prev) - bisect_left(prev, r) + bisect_right(nxt, r)
        return hist[h] + prev * (width - r) / width + nxt * (r + 1) / width

    def _open_session(self, user, comp, t) -> None:
        st = self.state
        comps = st.sessions.get(user)
        if comps is None:
            comps = st.sessions[user] = {}
        dq = comps.get(comp)
        if dq is None:
            comps[comp] = deque((t,))
        else:
            dq.append(t)
        st.last_interactive[(user, comp)] = t

    def _close_session(self, user, comp, t) -> None:
        st = self.state
        comps = st.sessions.get(user)
        dq = comps.get(comp) if comps else None
        if dq:
            cut = t - self.config.session_window
            while dq and dq[0] <= cut:
                dq.popleft()
        if not dq:
            st.quality.unmatched_logoffs += 1
            return
        start = dq.pop()
        st.durations.append(SessionRecord(user, comp, start, t))

    def _proc(self, ev: ProcEvent, out: list) -> None:
        st = self.state
        t = ev.time
        if t < st.watermark:
            raise OutOfOrderEvent(f"process event at {t} after watermark {st.watermark}")
        if t > st.watermark:
            st.watermark = t
            pending = st.pending
            if pending and (pending[0][_WPR] or pending[0][1] < t - self._pwin):
                self._flush(t, out)
        st.quality.proc_events += 1
        if ev.phase is Phase.START and st.pending_by_key:
            lst = st.pending_by_key.pop((ev.computer, ev.user), None)
            if lst is not None:
                for rec in lst:
                    rec[_WPR] = 1
                self._flush(t, out)


def featurize(
    auth: Iterable,
    proc: Iterable = (),
    config: Optional[EngineConfig] = None,
    encoding: Optional[LabelEncoding] = None,
) -> list[FeatureRecord]:
    """Run the engine over separately sorted auth and process streams."""
    from .logs import merge_streams

    engine = FeatureEngine(config, encoding)
    return list(engine.run(merge_streams(auth, proc)))

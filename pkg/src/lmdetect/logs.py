"""LANL-format authentication, process and red-team log records.

Every record type is an immutable ``NamedTuple``. The missing-value marker
``?`` of the source files is represented as ``None``.
"""

from __future__ import annotations

import enum
import gzip
import heapq
import io
import logging
import os
import tempfile
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Iterable, Iterator, NamedTuple, Optional, TextIO, Union

logger = logging.getLogger(__name__)

MISSING = "?"
_MAX_TIME = 2**63 - 1


class MalformedLine(ValueError):
    """A log line that cannot be parsed into a record."""

    def __init__(self, reason: str, line: str = "", lineno: Optional[int] = None):
        self.reason = reason
        self.line = line
        self.lineno = lineno
        where = f" (line {lineno})" if lineno is not None else ""
        super().__init__(f"{reason}{where}: {line[:120]!r}")


class Outcome(str, enum.Enum):
    SUCCESS = "Success"
    FAIL = "Fail"


class Phase(str, enum.Enum):
    START = "Start"
    END = "End"


_OUTCOMES = {"Success": Outcome.SUCCESS, "Fail": Outcome.FAIL}
_PHASES = {"Start": Phase.START, "End": Phase.END}


class AuthEvent(NamedTuple):
    time: int
    src_user: Optional[str]
    src_domain: Optional[str]
    dst_user: Optional[str]
    dst_domain: Optional[str]
    src_computer: Optional[str]
    dst_computer: Optional[str]
    auth_type: Optional[str]
    logon_type: Optional[str]
    orientation: str
    outcome: Outcome


class ProcEvent(NamedTuple):
    time: int
    user: Optional[str]
    domain: Optional[str]
    computer: Optional[str]
    process_name: Optional[str]
    phase: Phase


class RedTeamEvent(NamedTuple):
    time: int
    user: str
    domain: str
    src_computer: str
    dst_computer: str


LogRecord = Union[AuthEvent, ProcEvent, RedTeamEvent]

# C-level constructor, skipping the generated Python __new__
_new_auth = partial(tuple.__new__, AuthEvent)


def _opt(token: str) -> Optional[str]:
    return None if token == MISSING else token


def _show(value: Optional[str]) -> str:
    return MISSING if value is None else value


def split_principal(token: str) -> tuple[Optional[str], Optional[str]]:
    """Split ``user@domain`` at the first ``@``.

    A token without ``@`` is kept whole as the user with a missing domain.
    """
    if token == MISSING:
        return None, None
    user, sep, domain = token.partition("@")
    if not sep or domain == MISSING:
        return _opt(user), None
    return _opt(user), domain


def join_principal(user: Optional[str], domain: Optional[str]) -> str:
    if domain is None:
        return _show(user)
    return f"{_show(user)}@{domain}"


def _parse_time(token: str, line: str) -> int:
    # plain ASCII digits only; int() alone would accept " 5", "+5" and "5_0"
    if token.isdigit() and token.isascii():
        t = int(token)
        if t > _MAX_TIME:
            raise MalformedLine("time out of range", line)
        return t
    if token.startswith("-") and token[1:].isdigit():
        raise MalformedLine("negative time", line)
    raise MalformedLine("non-integer time", line)


def parse_auth_line(line: str) -> AuthEvent:
    fields = line.rstrip("\r\n").split(",")
    if len(fields) != 9:
        raise MalformedLine(f"expected 9 fields, got {len(fields)}", line)
    t, src, dst, src_c, dst_c, auth_type, logon_type, orientation, outcome = fields
    out = _OUTCOMES.get(outcome)
    if out is None:
        raise MalformedLine(f"unknown outcome {outcome!r}", line)
    if orientation == MISSING or not orientation:
        raise MalformedLine("missing orientation", line)
    # inlined split_principal: this is the hot path of every featurize run
    if src == MISSING:
        su = sd = None
    else:
        su, sep, sd = src.partition("@")
        if not sep or sd == MISSING:
            sd = None
        if su == MISSING:
            su = None
    if dst == src:
        du, dd = su, sd
    else:
        du, dd = split_principal(dst)
    return _new_auth((
        _parse_time(t, line), su, sd, du, dd,
        None if src_c == MISSING else src_c,
        None if dst_c == MISSING else dst_c,
        None if auth_type == MISSING else auth_type,
        None if logon_type == MISSING else logon_type,
        orientation, out,
    ))


def parse_proc_line(line: str) -> ProcEvent:
    fields = line.rstrip("\r\n").split(",")
    if len(fields) != 5:
        raise MalformedLine(f"expected 5 fields, got {len(fields)}", line)
    t, principal, computer, name, phase = fields
    ph = _PHASES.get(phase)
    if ph is None:
        raise MalformedLine(f"unknown phase {phase!r}", line)
    user, domain = split_principal(principal)
    return ProcEvent(_parse_time(t, line), user, domain, _opt(computer), _opt(name), ph)


def parse_redteam_line(line: str) -> RedTeamEvent:
    fields = line.rstrip("\r\n").split(",")
    if len(fields) != 4:
        raise MalformedLine(f"expected 4 fields, got {len(fields)}", line)
    t, principal, src_c, dst_c = fields
    user, sep, domain = principal.partition("@")
    if not sep:
        raise MalformedLine("user field lacks '@'", line)
    if MISSING in (user, domain, src_c, dst_c) or not (user and domain and src_c and dst_c):
        raise MalformedLine("red-team fields may not be missing", line)
    return RedTeamEvent(_parse_time(t, line), user, domain, src_c, dst_c)


def format_auth(e: AuthEvent) -> str:
    return ",".join((
        str(e.time),
        join_principal(e.src_user, e.src_domain),
        join_principal(e.dst_user, e.dst_domain),
        _show(e.src_computer), _show(e.dst_computer),
        _show(e.auth_type), _show(e.logon_type),
        e.orientation, e.outcome.value,
    ))


def format_proc(e: ProcEvent) -> str:
    return ",".join((
        str(e.time), join_principal(e.user, e.domain),
        _show(e.computer), _show(e.process_name), e.phase.value,
    ))


def format_redteam(e: RedTeamEvent) -> str:
    return f"{e.time},{e.user}@{e.domain},{e.src_computer},{e.dst_computer}"


def open_text(path: Union[str, os.PathLike], mode: str = "r") -> TextIO:
    """Open a possibly gzip-compressed text file (by ``.gz`` suffix)."""
    path = os.fspath(path)
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, mode.replace("t", "") + "b"), encoding="utf-8", newline="\n")
    return open(path, mode, encoding="utf-8", newline="\n")


@dataclass
class ParseReport:
    """Counters from one streaming read."""

    path: str = ""
    lines: int = 0
    parsed: int = 0
    malformed: int = 0
    examples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "lines": self.lines,
            "parsed": self.parsed,
            "malformed": self.malformed,
            "malformed_examples": self.examples,
        }


def iter_records(
    source: Union[str, os.PathLike, Iterable[str]],
    parse: Callable[[str], LogRecord],
    strict: bool = False,
    report: Optional[ParseReport] = None,
) -> Iterator:
    """Stream parsed records from a file path or an iterable of lines.

    With ``strict`` a malformed line raises; otherwise it is skipped and
    counted in ``report``. Blank lines are skipped in both modes.
    """
    if report is None:
        report = ParseReport()
    if isinstance(source, (str, os.PathLike)):
        report.path = os.fspath(source)
        with open_text(source) as fh:
            yield from _iter_lines(fh, parse, strict, report)
    else:
        yield from _iter_lines(source, parse, strict, report)


def _iter_lines(lines, parse, strict, report):
    lineno = 0
    for lineno, line in enumerate(lines, 1):
        try:
            rec = parse(line)
        except MalformedLine as exc:
            if not line.strip():
                continue
            if strict:
                exc.lineno = lineno
                raise MalformedLine(exc.reason, line, lineno) from None
            report.malformed += 1
            if len(report.examples) < 10:
                report.examples.append({"lineno": lineno, "reason": exc.reason})
            continue
        report.parsed += 1
        yield rec
    report.lines = lineno
    if report.malformed:
        logger.warning("%s: skipped %d malformed of %d lines", report.path or "<stream>",
                       report.malformed, report.lines)


def read_auth(source, strict: bool = False, report: Optional[ParseReport] = None) -> Iterator[AuthEvent]:
    return iter_records(source, parse_auth_line, strict, report)


def read_proc(source, strict: bool = False, report: Optional[ParseReport] = None) -> Iterator[ProcEvent]:
    return iter_records(source, parse_proc_line, strict, report)


def read_redteam(source, strict: bool = False, report: Optional[ParseReport] = None) -> Iterator[RedTeamEvent]:
    return iter_records(source, parse_redteam_line, strict, report)


# Same-second ordering: auth LogOffs, other auth events, then process events.
def auth_order_key(e: AuthEvent) -> tuple[int, int]:
    return (e.time, 0 if e.orientation == "LogOff" else 1)


def merge_streams(auth: Iterable, proc: Iterable) -> Iterator:
    """Merge two individually time-sorted streams into one.

    At equal timestamps authentication items come before process events;
    the relative order inside each input is preserved. ``auth`` items may
    be ``AuthEvent`` or pairs whose first element is one (labelled events).
    """
    pit = iter(proc)
    p = next(pit, None)
    if p is None:
        yield from auth
        return
    pt = p.time
    for a in auth:
        at = a.time if type(a) is AuthEvent else a[0].time
        while p is not None and pt < at:
            yield p
            p = next(pit, None)
            if p is not None:
                pt = p.time
        yield a
    if p is not None:
        yield p
        yield from pit


def sort_log_file(
    src: Union[str, os.PathLike],
    dst: Union[str, os.PathLike],
    kind: str = "auth",
    chunk_lines: int = 1_000_000,
    strict: bool = False,
) -> ParseReport:
    """External merge sort of a log file by time.

    Sorted runs of ``chunk_lines`` records are spilled to temporary files
    and merged. Auth files additionally place LogOffs before other events
    sharing a timestamp; ties otherwise keep input order.
    """
    parse, fmt = {
        "auth": (parse_auth_line, format_auth),
        "proc": (parse_proc_line, format_proc),
        "redteam": (parse_redteam_line, format_redteam),
    }[kind]
    key = auth_order_key if kind == "auth" else (lambda e: (e.time, 0))
    report = ParseReport()
    runs: list[str] = []
    tmpdir = tempfile.mkdtemp(prefix="lmsort-")
    try:
        chunk: list = []

        def spill():
            chunk.sort(key=key)
            name = os.path.join(tmpdir, f"run{len(runs):05d}.txt")
            with open(name, "w", encoding="utf-8", newline="\n") as fh:
                for e in chunk:
                    fh.write(fmt(e))
                    fh.write("\n")
            runs.append(name)
            chunk.clear()

        for rec in iter_records(src, parse, strict, report):
            chunk.append(rec)
            if len(chunk) >= chunk_lines:
                spill()
        if chunk or not runs:
            spill()
        handles = [open(r, encoding="utf-8", newline="\n") for r in runs]
        try:
            streams = [(parse(line) for line in h) for h in handles]
            tmp_out = os.fspath(dst) + ".tmp"
            if os.fspath(dst).endswith(".gz"):
                tmp_out = os.fspath(dst)[:-3] + ".tmp.gz"
            with open_text(tmp_out, "w") as out:
                for e in heapq.merge(*streams, key=key):
                    out.write(fmt(e))
                    out.write("\n")
            os.replace(tmp_out, dst)
        finally:
            for h in handles:
                h.close()
    finally:
        for r in runs:
            os.remove(r)
        os.rmdir(tmpdir)
    return report

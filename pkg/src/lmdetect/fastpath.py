"""Columnar batch featurization.

Produces exactly the records of ``FeatureEngine`` for a sorted auth file
and a sorted process file, but parses with polars and runs the state
machine as one compiled loop over integer-coded columns. Use it for whole
files; the streaming engine remains the incremental API.
"""

from __future__ import annotations

import gzip
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import polars as pl
from numba import njit, types
from numba.typed import Dict, List

from .features import DataQuality, EngineConfig, LabelEncoding, OutOfOrderEvent, SessionRecord
from .labeling import LabelSummary
from .logs import (MalformedLine, ParseReport, RedTeamEvent, parse_auth_line, parse_proc_line,
                   read_redteam)
from .table import COLUMNS, FeatureTable

logger = logging.getLogger(__name__)

_MISSING = "?"
_LOGON, _LOGOFF, _OTHER = 0, 1, 2

Source = Union[str, os.PathLike, Sequence[str]]


class _Vocab:
    """Append-only string table; ``?`` stands for a missing value."""

    def __init__(self):
        self.items: list = []
        self.index: dict = {}

    def id(self, s: str) -> int:
        j = self.index.get(s)
        if j is None:
            j = self.index[s] = len(self.items)
            self.items.append(s)
        return j

    def codes(self, col: pl.Series) -> np.ndarray:
        cat = col.cast(pl.Categorical)
        lut = np.array([self.id(s) for s in cat.cat.get_categories().to_list()] + [0], dtype=np.int32)
        phys = cat.to_physical().to_numpy()
        return lut[phys.astype(np.int64)] if len(phys) else np.zeros(0, np.int32)

    def decoded(self) -> list:
        return [None if s == _MISSING else s for s in self.items]

    def __len__(self):
        return len(self.items)


def _lines(source: Source) -> pl.Series:
    if isinstance(source, (str, os.PathLike)):
        path = os.fspath(source)
        with open(path, "rb") as fh:
            raw = fh.read()
        if path.endswith(".gz"):
            raw = gzip.decompress(raw)
        text = raw.decode("utf-8")
        lines = pl.Series("line", [text]).str.split("\n").explode(empty_as_null=False)
        if not text or text.endswith("\n"):
            lines = lines.slice(0, len(lines) - 1)
    else:
        lines = pl.Series("line", list(source), dtype=pl.Utf8).str.strip_chars_end("\n")
    return lines.str.strip_chars_end("\r\n")


def _fields(lines: pl.Series, n: int) -> pl.DataFrame:
    df = pl.DataFrame({"line": lines})
    return df.with_columns(
        pl.col("line").str.count_matches(",", literal=True).alias("_commas"),
        pl.col("line").str.split_exact(",", n - 1).alias("_f"),
    ).unnest("_f")


def _time_col() -> pl.Expr:
    return pl.when(pl.col("field_0").str.contains(r"^[0-9]+$")).then(
        pl.col("field_0").cast(pl.Int64, strict=False)).otherwise(None)


def _user_col(name: str) -> pl.Expr:
    # text before the first '@'; a bare '?' token and '?@dom' both mean missing
    return pl.col(name).str.split_exact("@", 1).struct.field("field_0")


def _reject(df: pl.DataFrame, valid: np.ndarray, parse, strict: bool, report: ParseReport) -> None:
    bad = np.flatnonzero(~valid)
    if not len(bad):
        return
    lines = df["line"].gather(bad).to_list()
    for lineno, line in zip((bad + 1).tolist(), lines):
        if not line.strip():
            continue
        try:
            parse(line)
        except MalformedLine as exc:
            if strict:
                raise MalformedLine(exc.reason, line, lineno) from None
            report.malformed += 1
            if len(report.examples) < 10:
                report.examples.append({"lineno": lineno, "reason": exc.reason})
        else:
            raise AssertionError(f"line {lineno} rejected by the columnar parser only: {line!r}")


def _finish_report(report: ParseReport, n_lines: int, parsed: int) -> None:
    report.lines = n_lines
    report.parsed = parsed
    if report.malformed:
        logger.warning("%s: skipped %d malformed of %d lines", report.path or "<stream>",
                       report.malformed, report.lines)


@dataclass
class _AuthCols:
    time: np.ndarray
    src_user: np.ndarray
    dst_user: np.ndarray
    src_comp: np.ndarray
    dst_comp: np.ndarray
    auth_type: np.ndarray
    orient: np.ndarray
    success: np.ndarray
    interactive: np.ndarray


def _load_auth(source, users, comps, auths, interactive_types, strict, report) -> _AuthCols:
    df = _fields(_lines(source), 9)
    valid = (
        (pl.col("_commas") == 8)
        & _time_col().is_not_null()
        & pl.col("field_8").is_in(["Success", "Fail"])
        & ~pl.col("field_7").is_in(["?", ""])
    ).fill_null(False)
    df = df.with_columns(valid.alias("_ok"), _time_col().alias("_t"))
    ok = df["_ok"].to_numpy()
    _reject(df, ok, parse_auth_line, strict, report)
    good = df.filter(pl.col("_ok"))
    _finish_report(report, len(df), len(good))
    good = good.with_columns(_user_col("field_1").alias("_su"), _user_col("field_2").alias("_du"))
    orient = good["field_7"]
    return _AuthCols(
        time=good["_t"].to_numpy().astype(np.int64),
        src_user=users.codes(good["_su"]),
        dst_user=users.codes(good["_du"]),
        src_comp=comps.codes(good["field_3"]),
        dst_comp=comps.codes(good["field_4"]),
        auth_type=auths.codes(good["field_5"]),
        orient=np.where((orient == "LogOn").to_numpy(), _LOGON,
                        np.where((orient == "LogOff").to_numpy(), _LOGOFF, _OTHER)).astype(np.int8),
        success=(good["field_8"] == "Success").to_numpy(),
        interactive=good["field_6"].is_in(sorted(interactive_types)).to_numpy()
        & (good["field_6"] != _MISSING).to_numpy(),
    )


def _load_proc(source, users, comps, strict, report):
    df = _fields(_lines(source), 5)
    valid = (
        (pl.col("_commas") == 4)
        & _time_col().is_not_null()
        & pl.col("field_4").is_in(["Start", "End"])
    ).fill_null(False)
    df = df.with_columns(valid.alias("_ok"), _time_col().alias("_t"))
    ok = df["_ok"].to_numpy()
    _reject(df, ok, parse_proc_line, strict, report)
    good = df.filter(pl.col("_ok"))
    _finish_report(report, len(df), len(good))
    good = good.with_columns(_user_col("field_1").alias("_u"))
    return (good["_t"].to_numpy().astype(np.int64), users.codes(good["_u"]),
            comps.codes(good["field_2"]), (good["field_4"] == "Start").to_numpy())


_i8 = types.int64
_list_i8 = types.ListType(types.int64)


@njit(cache=True)
def _bisect_left(lst, x):
    lo, hi = 0, len(lst)
    while lo < hi:
        mid = (lo + hi) // 2
        if lst[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def _bisect_right(lst, x):
    lo, hi = 0, len(lst)
    while lo < hi:
        mid = (lo + hi) // 2
        if x < lst[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True)
def _prune(lst, cut):
    n = 0
    while n < len(lst) and lst[n] <= cut:
        n += 1
    for _ in range(n):
        lst.pop(0)


@njit(cache=True)
def _expire(horizon, head, k, rec_t, rec_key, wpr, pend):
    while head < k and rec_t[head] < horizon:
        if wpr[head] == 0:
            key = rec_key[head]
            lst = pend[key]
            lst.pop(0)
            if len(lst) == 0:
                del pend[key]
        head += 1
    return head


@njit(cache=True)
def _kernel(at, asu, adu, asc, adc, aor, asucc, ainter,
            pt, pu, pc, pstart,
            swin, fwin, pwin, width, exact, empty, n_users, n_comps, missing_comp,
            wslo, hla, other, wpr, plf, nf, ffsb,
            dur_u, dur_c, dur_start, dur_end):
    nb = 86400 // width
    login_total = np.zeros(n_users, np.int64)
    hist = np.zeros(n_users * nb if not exact else 1, np.int64)
    tod = Dict.empty(_i8, _list_i8)
    login_from = Dict.empty(_i8, _i8)
    user_comps = Dict.empty(_i8, _list_i8)
    sessions = Dict.empty(_i8, _list_i8)
    last_inter = Dict.empty(_i8, _i8)
    failures = Dict.empty(_i8, _list_i8)
    pend = Dict.empty(_i8, _list_i8)
    n_rec = len(wslo)
    rec_t = np.empty(n_rec, np.int64)
    rec_key = np.empty(n_rec, np.int64)
    head = 0
    k = 0
    nd = 0
    unmatched = 0
    wm = -1
    last_sweep = 0
    na = len(at)
    npr = len(pt)
    i = 0
    j = 0
    while i < na or j < npr:
        if j < npr and (i >= na or pt[j] < at[i]):
            t = pt[j]
            if t > wm:
                wm = t
                head = _expire(t - pwin, head, k, rec_t, rec_key, wpr, pend)
            if pstart[j] and len(pend) > 0:
                key = pc[j] * n_users + pu[j]
                if key in pend:
                    for r in pend.pop(key):
                        wpr[r] = 1
            j += 1
            continue

        t = at[i]
        if t != wm:
            wm = t
            head = _expire(t - pwin, head, k, rec_t, rec_key, wpr, pend)
            if t - last_sweep >= fwin:
                fcut = t - fwin
                dead = List.empty_list(_i8)
                for c, lst in failures.items():
                    _prune(lst, fcut)
                    if len(lst) == 0:
                        dead.append(c)
                for c in dead:
                    del failures[c]
                scut = t - swin
                dead_users = List.empty_list(_i8)
                kept_users = List.empty_list(_i8)
                kept = List.empty_list(_list_i8)
                for u0, cl in user_comps.items():
                    keep = List.empty_list(_i8)
                    for c in cl:
                        key = u0 * n_comps + c
                        lst = sessions[key]
                        _prune(lst, scut)
                        if len(lst) == 0:
                            del sessions[key]
                        else:
                            keep.append(c)
                    if len(keep) == 0:
                        dead_users.append(u0)
                    elif len(keep) < len(cl):
                        kept_users.append(u0)
                        kept.append(keep)
                for n in range(len(kept_users)):
                    user_comps[kept_users[n]] = kept[n]
                for u0 in dead_users:
                    del user_comps[u0]
                stale = List.empty_list(_i8)
                for key, v in last_inter.items():
                    if v <= scut:
                        stale.append(key)
                for key in stale:
                    del last_inter[key]
                last_sweep = t

        o = aor[i]
        if o == 0:
            s = asc[i]
            d = adc[i]
            remote = s != missing_comp and d != missing_comp and s != d
            if asucc[i]:
                u = asu[i]
                total = login_total[u]
                if remote:
                    w = 0
                    oth = 0
                    if u in user_comps:
                        cut = t - swin
                        for c in user_comps[u]:
                            lst = sessions[u * n_comps + c]
                            _prune(lst, cut)
                            if len(lst) > 0:
                                if c == s:
                                    w = 1
                                else:
                                    oth += 1
                    wslo[k] = w
                    other[k] = oth
                    hla[k] = t - last_inter[u * n_comps + s] if w else swin
                    if total:
                        tod_t = t % 86400
                        h = tod_t // width
                        r = tod_t % width
                        hp = (h + nb - 1) % nb
                        hn = (h + 1) % nb
                        if exact:
                            base = u * nb
                            cnt = 0
                            if base + h in tod:
                                cnt += len(tod[base + h])
                            if base + hp in tod:
                                prev = tod[base + hp]
                                cnt += len(prev) - _bisect_left(prev, r)
                            if base + hn in tod:
                                cnt += _bisect_right(tod[base + hn], r)
                            plf[k] = cnt / total
                        else:
                            base = u * nb
                            c0 = hist[base + h] + hist[base + hp] * (width - r) / width \
                                + hist[base + hn] * (r + 1) / width
                            plf[k] = c0 / total
                        ffsb[k] = login_from.get(u * n_comps + s, 0) / total
                    else:
                        plf[k] = empty
                        ffsb[k] = empty
                    if s in failures:
                        fl = failures[s]
                        _prune(fl, t - fwin)
                        nf[k] = len(fl)
                    else:
                        nf[k] = 0
                    key = d * n_users + adu[i]
                    rec_t[k] = t
                    rec_key[k] = key
                    if key in pend:
                        pend[key].append(k)
                    else:
                        lst = List.empty_list(_i8)
                        lst.append(k)
                        pend[key] = lst
                    k += 1
                login_total[u] = total + 1
                lk = u * n_comps + s
                login_from[lk] = login_from.get(lk, 0) + 1
                tod_t = t % 86400
                h = tod_t // width
                if exact:
                    hk = u * nb + h
                    r = tod_t % width
                    if hk in tod:
                        hl = tod[hk]
                        hl.insert(_bisect_right(hl, r), r)
                    else:
                        hl = List.empty_list(_i8)
                        hl.append(r)
                        tod[hk] = hl
                else:
                    hist[u * nb + h] += 1
                if d != missing_comp and ainter[i]:
                    du = adu[i]
                    key = du * n_comps + d
                    if key in sessions:
                        sessions[key].append(t)
                    else:
                        lst = List.empty_list(_i8)
                        lst.append(t)
                        sessions[key] = lst
                        if du in user_comps:
                            user_comps[du].append(d)
                        else:
                            cl = List.empty_list(_i8)
                            cl.append(d)
                            user_comps[du] = cl
                    last_inter[key] = t
            elif remote:
                if s in failures:
                    fl = failures[s]
                    _prune(fl, t - fwin)
                    fl.append(t)
                else:
                    fl = List.empty_list(_i8)
                    fl.append(t)
                    failures[s] = fl
        elif o == 1:
            if ainter[i]:
                key = adu[i] * n_comps + adc[i]
                matched = False
                if key in sessions:
                    lst = sessions[key]
                    _prune(lst, t - swin)
                    if len(lst) > 0:
                        dur_u[nd] = adu[i]
                        dur_c[nd] = adc[i]
                        dur_start[nd] = lst.pop()
                        dur_end[nd] = t
                        nd += 1
                        matched = True
                if not matched:
                    unmatched += 1
        i += 1
    return k, nd, unmatched


@dataclass
class FastResult:
    table: FeatureTable
    quality: DataQuality
    durations: list
    label_summary: LabelSummary
    reports: dict = field(default_factory=dict)


def _check_sorted(t: np.ndarray, what: str) -> None:
    if len(t) > 1:
        back = np.flatnonzero(np.diff(t) < 0)
        if len(back):
            i = back[0]
            raise OutOfOrderEvent(f"{what} event at {t[i + 1]} after watermark {t[i]}")


def featurize_columnar(
    auth: Source,
    proc: Optional[Source] = None,
    redteam: Union[None, Source, Iterable[RedTeamEvent]] = None,
    config: Optional[EngineConfig] = None,
    encoding: Optional[LabelEncoding] = None,
    strict: bool = False,
) -> FastResult:
    """Featurize whole sorted auth/proc sources (paths or lists of lines)."""
    config = config or EngineConfig()
    if config.reorder_tolerance:
        raise ValueError("the columnar path requires sorted input (reorder_tolerance=0)")
    users, comps, auths = _Vocab(), _Vocab(), _Vocab()
    comps.id(_MISSING)
    auth_rep = ParseReport(path=os.fspath(auth) if isinstance(auth, (str, os.PathLike)) else "")
    proc_rep = ParseReport(path=os.fspath(proc) if isinstance(proc, (str, os.PathLike)) else "")
    a = _load_auth(auth, users, comps, auths, config.interactive_logon_types, strict, auth_rep)
    if proc is not None:
        pt, pu, pc, pstart = _load_proc(proc, users, comps, strict, proc_rep)
    else:
        pt = np.zeros(0, np.int64)
        pu = pc = np.zeros(0, np.int32)
        pstart = np.zeros(0, bool)
    _check_sorted(a.time, "auth")
    _check_sorted(pt, "process")

    # labels
    if redteam is None:
        rt = []
    elif isinstance(redteam, (str, os.PathLike)) or (
            isinstance(redteam, (list, tuple)) and redteam and isinstance(redteam[0], str)):
        rt = list(read_redteam(redteam, strict=strict))
    else:
        rt = list(redteam)
    rt_keys = {(r.time, r.user, r.src_computer, r.dst_computer) for r in rt}
    mal = np.zeros(len(a.time), dtype=bool)
    seen = set()
    if rt_keys:
        cand = np.flatnonzero(np.isin(a.time, np.array(sorted({k[0] for k in rt_keys}), np.int64)))
        U, C = users.decoded(), comps.decoded()
        for i in cand.tolist():
            k = (int(a.time[i]), U[a.src_user[i]], C[a.src_comp[i]], C[a.dst_comp[i]])
            if k in rt_keys:
                mal[i] = True
                seen.add(k)
    unmatched = sorted(rt_keys - seen, key=lambda k: (k[0], str(k[1:])))
    labels = LabelSummary(len(a.time), int(mal.sum()), len(rt_keys), unmatched)

    missing = 0
    logon = a.orient == _LOGON
    has_ends = (a.src_comp != missing) & (a.dst_comp != missing)
    rec_mask = logon & a.success & has_ends & (a.src_comp != a.dst_comp)
    n_rec = int(rec_mask.sum())
    dur_cap = int(((a.orient == _LOGOFF) & a.interactive).sum())
    out = {name: np.zeros(n_rec, dt) for name, dt in (
        ("wslo", np.uint8), ("hla", np.int64), ("other", np.int64), ("wpr", np.uint8),
        ("plf", np.float64), ("nf", np.int64), ("ffsb", np.float64))}
    dur = [np.zeros(dur_cap, np.int64) for _ in range(4)]
    k, nd, unmatched_logoffs = _kernel(
        a.time, a.src_user.astype(np.int64), a.dst_user.astype(np.int64),
        a.src_comp.astype(np.int64), a.dst_comp.astype(np.int64), a.orient, a.success, a.interactive,
        pt, pu.astype(np.int64), pc.astype(np.int64), pstart,
        config.session_window, config.failure_window, config.process_window, config.tod_band,
        config.tod_mode == "exact", float(config.empty_history_fraction),
        max(len(users), 1), max(len(comps), 1), missing,
        out["wslo"], out["hla"], out["other"], out["wpr"], out["plf"], out["nf"], out["ffsb"],
        *dur)
    assert k == n_rec

    idx = np.flatnonzero(rec_mask)
    auth_vocab = auths.decoded()
    at_codes = a.auth_type[idx]
    at_out = np.array([-1 if v is None else j for j, v in enumerate(auth_vocab)] + [-1], np.int32)[at_codes]
    if encoding is not None:
        lut = np.array([encoding.encode(v) for v in auth_vocab] + [0], np.int32)
        codes = lut[at_codes]
    else:
        codes = np.zeros(n_rec, np.int32)
    cols = {
        "event_id": idx.astype(np.int64),
        "time": a.time[idx],
        "src_user": a.src_user[idx],
        "src_computer": a.src_comp[idx],
        "dst_computer": a.dst_comp[idx],
        "was_source_logged_on": out["wslo"],
        "how_long_ago": out["hla"].astype(np.int32),
        "other_interactive_logins": out["other"].astype(np.int32),
        "was_process_run": out["wpr"],
        "previous_login_fraction": out["plf"],
        "number_of_failed": out["nf"].astype(np.int32),
        "fraction_from_same_box": out["ffsb"],
        "auth_type_code": codes,
        "is_malicious": mal[idx],
        "auth_type": at_out,
    }
    assert tuple(cols) == COLUMNS
    table = FeatureTable(cols, users.decoded(), comps.decoded(), auth_vocab)

    quality = DataQuality(
        auth_events=len(a.time),
        proc_events=len(pt),
        missing_endpoint_logons=int((logon & ~has_ends).sum()),
        unmatched_logoffs=int(unmatched_logoffs),
        ignored_orientations=int((a.orient == _OTHER).sum()),
        emitted=n_rec,
        emitted_with_process=int(out["wpr"].sum()),
    )
    U, C = users.decoded(), comps.decoded()
    du, dc, ds, de = (d[:nd].tolist() for d in dur)
    durations = [SessionRecord(U[x], C[y], s, e) for x, y, s, e in zip(du, dc, ds, de)]
    return FastResult(table, quality, durations, labels, {"auth": auth_rep, "proc": proc_rep})

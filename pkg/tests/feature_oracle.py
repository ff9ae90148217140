"""Brute-force feature recomputation used as a reference for the engine.

Every remote logon is recomputed from scratch by rescanning the whole
prefix of the merged stream before it. Nothing is carried between events
except the column arrays built once up front, so the cost is quadratic;
it is meant for corpora of ~10^4 events.
"""

from __future__ import annotations

import numpy as np

from lmdetect.labeling import LabeledAuthEvent
from lmdetect.logs import Outcome, Phase, ProcEvent

DAY = 86400


class _Ids:
    def __init__(self):
        self.map = {}

    def __call__(self, v):
        return self.map.setdefault(v, len(self.map))


def oracle_records(items, encoding=None, interactive=("Interactive",), session_window=DAY,
                   failure_window=3600, process_window=60, tod_band=3600, empty=1.0):
    """Feature tuples (FeatureRecord field order) for a merged, ordered stream.

    ``items`` holds LabeledAuthEvent and ProcEvent values in stream order.
    """
    interactive = set(interactive)
    uid, cid = _Ids(), _Ids()
    A = {k: [] for k in ("pos", "t", "su", "du", "sc", "dc", "ok", "fail_remote", "ilogon", "ilogoff")}
    P = {k: [] for k in ("pos", "t", "u", "c", "start")}
    auth = []
    for pos, it in enumerate(items):
        if isinstance(it, ProcEvent):
            P["pos"].append(pos)
            P["t"].append(it.time)
            P["u"].append(uid(it.user))
            P["c"].append(cid(it.computer))
            P["start"].append(it.phase is Phase.START)
            continue
        ev, mal = it if isinstance(it, LabeledAuthEvent) else (it, False)
        both = ev.src_computer is not None and ev.dst_computer is not None
        logon = ev.orientation == "LogOn"
        ok = logon and ev.outcome is Outcome.SUCCESS
        auth.append((pos, ev, mal))
        A["pos"].append(pos)
        A["t"].append(ev.time)
        A["su"].append(uid(ev.src_user))
        A["du"].append(uid(ev.dst_user))
        A["sc"].append(cid(ev.src_computer))
        A["dc"].append(cid(ev.dst_computer))
        A["ok"].append(ok)
        A["fail_remote"].append(logon and not ok and both and ev.src_computer != ev.dst_computer)
        A["ilogon"].append(ok and ev.dst_computer is not None and ev.logon_type in interactive)
        A["ilogoff"].append(ev.orientation == "LogOff" and ev.logon_type in interactive)
    A = {k: np.asarray(v) for k, v in A.items()}
    P = {k: np.asarray(v) for k, v in P.items()}
    tod = A["t"] % DAY

    out = []
    for eid, (pos, ev, mal) in enumerate(auth):
        if not (ev.orientation == "LogOn" and ev.outcome is Outcome.SUCCESS):
            continue
        s, d = ev.src_computer, ev.dst_computer
        if s is None or d is None or s == d:
            continue
        t = ev.time
        u = A["su"][eid]
        sc = A["sc"][eid]
        pre = slice(0, eid)

        # sessions: replay this user's interactive logons/logoffs from the start
        mine = np.flatnonzero((A["ilogon"][pre] | A["ilogoff"][pre]) & (A["du"][pre] == u))
        open_by_comp: dict = {}
        last_logon: dict = {}
        for j in mine.tolist():
            c, tj = A["dc"][j], A["t"][j]
            starts = open_by_comp.setdefault(c, [])
            if A["ilogon"][j]:
                starts.append(tj)
                last_logon[c] = tj
            else:
                live = [x for x in starts if x > tj - session_window]
                if live:
                    starts.remove(max(live))
        live_comps = {c for c, st in open_by_comp.items() if any(x > t - session_window for x in st)}
        wslo = int(sc in live_comps)
        other = len(live_comps - {sc})
        hla = t - last_logon[sc] if wslo else session_window

        prior_ok = A["ok"][pre] & (A["su"][pre] == u)
        total = int(prior_ok.sum())
        if total:
            diff = np.abs(tod[pre][prior_ok] - t % DAY)
            near = np.minimum(diff, DAY - diff) <= tod_band
            plf = int(near.sum()) / total
            ffsb = int((prior_ok & (A["sc"][pre] == sc)).sum()) / total
        else:
            plf = ffsb = empty

        nf = int((A["fail_remote"][pre] & (A["sc"][pre] == sc) & (A["t"][pre] > t - failure_window)).sum())

        wpr = 0
        if len(P["pos"]):
            hit = ((P["pos"] > pos) & P["start"] & (P["t"] <= t + process_window)
                   & (P["u"] == A["du"][eid]) & (P["c"] == A["dc"][eid]))
            wpr = int(hit.any())

        code = encoding.encode(ev.auth_type) if encoding is not None else 0
        out.append((eid, t, ev.src_user, s, d, wslo, hla, other, wpr, plf, nf, ffsb, code, bool(mal),
                    ev.auth_type))
    return out


def compare(expected, actual, rel=1e-12):
    """First mismatch as a message, or None. Fractions compare to ``rel``."""
    if len(expected) != len(actual):
        return f"{len(expected)} oracle records vs {len(actual)}"
    for e, a in zip(expected, actual):
        a = tuple(a)
        for i, (x, y) in enumerate(zip(e, a)):
            if i in (9, 11):
                if abs(x - y) > rel * max(abs(x), abs(y)):
                    return f"event {e[0]} field {i}: {x!r} vs {y!r}"
            elif x != y or type(x) is bool and bool(y) != x:
                return f"event {e[0]} field {i}: {x!r} vs {y!r}"
    return None

"""Deterministic LANL-schema corpus generator with injected lateral movement.

Benign humans sit at a home workstation during business hours, usually
log on interactively first and reach a handful of favourite servers.
Machine accounts (``C123$``) authenticate around the clock from their own
box. Attack chains reuse a victim's credentials from computers the victim
never uses, at off-hours, after a burst of failures, and often start a
process on the destination right after the logon.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from .logs import open_text

HOUR = 3600
DAY = 86400

AUTH_TYPES = ("?", "Kerberos", "NTLM", "Negotiate")
LOGON_TYPES = ("?", "Interactive", "Network", "Batch", "Service")
ORIENTATIONS = ("LogOn", "LogOff", "TGS", "TGT")
OUTCOMES = ("Success", "Fail")
PHASES = ("Start", "End")

_A_Q, _A_KERB, _A_NTLM, _A_NEG = range(4)
_L_Q, _L_INTER, _L_NET, _L_BATCH, _L_SVC = range(5)
_O_ON, _O_OFF, _O_TGS, _O_TGT = range(4)


class ConfigInvalid(ValueError):
    pass


@dataclass
class SynthConfig:
    seed: int = 7
    n_users: int = 1600
    n_machine_accounts: int = 300
    n_computers: int = 2500
    n_servers: int = 300
    days: int = 30
    domain: str = "DOM1"
    # benign profile
    business_center_mean: float = 12.5 * HOUR
    business_center_sd: float = 1.0 * HOUR
    activity_sd: float = 1.75 * HOUR
    active_day_prob: float = 0.9
    remote_per_day: float = 42.0
    favourite_servers: int = 5
    interactive_habit: float = 0.9
    second_session_prob: float = 0.05
    secondary_box_prob: float = 0.05
    failure_rate: float = 0.01
    benign_process_prob: float = 0.3
    machine_remote_per_day: float = 40.0
    tgs_rate: float = 0.05
    # attack profile
    n_chains: int = 40
    chain_length: int = 5
    off_hours: bool = True
    stolen_credential: bool = True
    failure_burst: int = 3
    attack_process_prob: float = 0.8
    warmup_days: int = 3
    max_malicious_fraction: float = 1e-4

    def validate(self) -> None:
        for name in ("n_users", "n_computers", "n_servers", "days", "chain_length", "favourite_servers"):
            if getattr(self, name) <= 0:
                raise ConfigInvalid(f"{name} must be positive")
        for name in ("n_machine_accounts", "n_chains", "failure_burst", "warmup_days"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"{name} must be >= 0")
        for name in ("active_day_prob", "interactive_habit", "second_session_prob", "secondary_box_prob",
                     "failure_rate", "benign_process_prob", "tgs_rate", "attack_process_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigInvalid(f"{name} must be a probability, got {p}")
        if self.n_servers >= self.n_computers - 2:
            raise ConfigInvalid("need at least two workstations beyond the server pool")
        if self.n_machine_accounts > self.n_computers:
            raise ConfigInvalid("more machine accounts than computers")
        if self.n_chains > self.n_users:
            raise ConfigInvalid("each chain needs a distinct victim user")
        if self.n_chains and self.warmup_days >= self.days - 1:
            raise ConfigInvalid("warmup_days leaves no room for attack chains")
        if self.favourite_servers > self.n_servers:
            raise ConfigInvalid("favourite_servers exceeds n_servers")
        if self.remote_per_day < 0 or self.machine_remote_per_day < 0:
            raise ConfigInvalid("activity rates must be >= 0")
        if not 0 < self.max_malicious_fraction <= 1:
            raise ConfigInvalid("max_malicious_fraction must lie in (0, 1]")

    # flat key=value text ------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in types:
                raise ConfigInvalid(f"unknown synth key {k!r}")
            kwargs[k] = _coerce(types[k], v, k)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: Union[str, os.PathLike]) -> "SynthConfig":
        return cls.from_mapping(parse_kv(open(path, encoding="utf-8").read()))


def parse_kv(text: str) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(typ, value, key):
    if not isinstance(value, str):
        return value
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigInvalid(f"bad value for {key}: {value!r}") from None
    return value


class _Events:
    """Column accumulator for integer-coded events."""

    def __init__(self, names):
        self.names = names
        self.cols = {n: [] for n in names}

    def add(self, **cols):
        n = None
        for k, v in cols.items():
            a = np.atleast_1d(np.asarray(v, dtype=np.int64))
            n = len(a) if n is None else max(n, len(a))
            cols[k] = a
        for k in self.names:
            a = cols[k]
            if len(a) != n:
                a = np.broadcast_to(a, (n,))
            self.cols[k].append(a)

    def finish(self) -> dict:
        return {
            k: (np.concatenate(v) if v else np.zeros(0, dtype=np.int64))
            for k, v in self.cols.items()
        }


_AUTH_COLS = ("time", "user", "src", "dst", "auth", "logon", "orient", "outcome")
_PROC_COLS = ("time", "user", "comp", "proc", "phase")


@dataclass
class SynthCorpus:
    """Generated events as sorted integer columns plus vocabularies."""

    config: SynthConfig
    principals: list
    computers: list
    auth: dict
    proc: dict
    redteam: dict

    @property
    def n_auth(self) -> int:
        return len(self.auth["time"])

    @property
    def n_proc(self) -> int:
        return len(self.proc["time"])

    @property
    def n_malicious(self) -> int:
        return len(self.redteam["time"])

    def iter_auth_lines(self) -> Iterator[str]:
        a = self.auth
        P, C = self.principals, self.computers
        for t, u, s, d, at, lt, o, oc in zip(*(a[k].tolist() for k in _AUTH_COLS)):
            p = P[u]
            yield (f"{t},{p},{p},{C[s]},{C[d]},{AUTH_TYPES[at]},{LOGON_TYPES[lt]},"
                   f"{ORIENTATIONS[o]},{OUTCOMES[oc]}")

    def iter_proc_lines(self) -> Iterator[str]:
        a = self.proc
        P, C = self.principals, self.computers
        for t, u, c, pn, ph in zip(*(a[k].tolist() for k in _PROC_COLS)):
            yield f"{t},{P[u]},{C[c]},P{pn},{PHASES[ph]}"

    def iter_redteam_lines(self) -> Iterator[str]:
        a = self.redteam
        P, C = self.principals, self.computers
        for t, u, s, d in zip(*(a[k].tolist() for k in ("time", "user", "src", "dst"))):
            yield f"{t},{P[u]},{C[s]},{C[d]}"

    def write(self, outdir: Union[str, os.PathLike], compress: bool = False) -> dict:
        """Write ``auth.txt``, ``proc.txt`` and ``redteam.txt``; returns the paths."""
        os.makedirs(outdir, exist_ok=True)
        ext = ".txt.gz" if compress else ".txt"
        paths = {}
        for name, lines in (("auth", self.iter_auth_lines()), ("proc", self.iter_proc_lines()),
                            ("redteam", self.iter_redteam_lines())):
            path = os.path.join(outdir, name + ext)
            tmp = os.path.join(outdir, f".{name}.partial{ext}")
            with open_text(tmp, "w") as fh:
                buf = []
                for line in lines:
                    buf.append(line)
                    if len(buf) >= 65536:
                        fh.write("\n".join(buf))
                        fh.write("\n")
                        buf.clear()
                if buf:
                    fh.write("\n".join(buf))
                    fh.write("\n")
            os.replace(tmp, path)
            paths[name] = path
        return paths


def _sort(cols: dict, rank=None) -> dict:
    seq = np.arange(len(cols["time"]))
    keys = (seq, cols["time"]) if rank is None else (seq, rank, cols["time"])
    order = np.lexsort(keys)
    return {k: v[order] for k, v in cols.items()}


def generate(config: SynthConfig) -> SynthCorpus:
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n_comp = cfg.n_computers
    computers = [f"C{i + 1}" for i in range(n_comp)]
    servers = np.arange(cfg.n_servers)
    workstations = np.arange(cfg.n_servers, n_comp)
    dom = cfg.domain
    principals = [f"U{i + 1}@{dom}" for i in range(cfg.n_users)]
    machine_hosts = np.sort(rng.choice(n_comp, size=cfg.n_machine_accounts, replace=False))
    principals += [f"{computers[h]}$@{dom}" for h in machine_hosts]

    auth = _Events(_AUTH_COLS)
    proc = _Events(_PROC_COLS)
    n_proc_names = 400

    homes = rng.choice(workstations, size=cfg.n_users, replace=True)
    second = rng.choice(workstations, size=cfg.n_users, replace=True)
    second = np.where(second == homes, workstations[(np.searchsorted(workstations, homes) + 1) % len(workstations)], second)
    centers = rng.normal(cfg.business_center_mean, cfg.business_center_sd, size=cfg.n_users)
    centers = np.clip(centers, 6 * HOUR, 18 * HOUR)
    days = np.arange(cfg.days)

    for u in range(cfg.n_users):
        favs = rng.choice(servers, size=cfg.favourite_servers, replace=False)
        active = days[rng.random(cfg.days) < cfg.active_day_prob]
        if not len(active):
            continue
        base = active * DAY
        has_session = rng.random(len(active)) < cfg.interactive_habit
        logon = base + np.round(centers[u] - 4.5 * HOUR + rng.normal(0, 0.5 * HOUR, len(active))).astype(np.int64)
        length = np.round(rng.normal(9 * HOUR, HOUR, len(active))).astype(np.int64)
        logon = np.clip(logon, base + 60, base + DAY - 2 * HOUR)
        logoff = np.minimum(logon + np.maximum(length, HOUR), base + DAY - 60)
        sl, so = logon[has_session], logoff[has_session]
        h = homes[u]
        auth.add(time=sl, user=u, src=h, dst=h, auth=_A_NEG, logon=_L_INTER, orient=_O_ON, outcome=0)
        auth.add(time=so, user=u, src=h, dst=h, auth=_A_Q, logon=_L_INTER, orient=_O_OFF, outcome=0)
        extra = rng.random(len(sl)) < cfg.second_session_prob
        if extra.any():
            off = rng.integers(600, 3 * HOUR, extra.sum())
            auth.add(time=sl[extra] + off, user=u, src=second[u], dst=second[u], auth=_A_NEG,
                     logon=_L_INTER, orient=_O_ON, outcome=0)
            auth.add(time=so[extra] - off, user=u, src=second[u], dst=second[u], auth=_A_Q,
                     logon=_L_INTER, orient=_O_OFF, outcome=0)

        counts = rng.poisson(cfg.remote_per_day, len(active))
        n = int(counts.sum())
        if not n:
            continue
        day_idx = np.repeat(np.arange(len(active)), counts)
        t = base[day_idx] + np.round(centers[u] + rng.normal(0, cfg.activity_sd, n)).astype(np.int64)
        lo = np.where(has_session[day_idx], logon[day_idx] + 1, base[day_idx] + 1)
        hi = np.where(has_session[day_idx], logoff[day_idx] - 1, base[day_idx] + DAY - 200)
        t = np.clip(t, lo, hi)
        src = np.where(rng.random(n) < cfg.secondary_box_prob, second[u], h)
        dst = favs[rng.integers(0, len(favs), n)]
        at = rng.choice([_A_KERB, _A_NTLM, _A_NEG], size=n, p=[0.7, 0.2, 0.1])
        auth.add(time=t, user=u, src=src, dst=dst, auth=at, logon=_L_NET, orient=_O_ON, outcome=0)
        _benign_extras(rng, cfg, auth, proc, u, t, src, dst, at, n_proc_names)

    for m, host in enumerate(machine_hosts):
        uid = cfg.n_users + m
        n = int(rng.poisson(cfg.machine_remote_per_day * cfg.days))
        if not n:
            continue
        t = np.sort(rng.integers(1, cfg.days * DAY - 200, n))
        dst = servers[rng.integers(0, len(servers), n)]
        dst = np.where(dst == host, servers[(dst + 1) % len(servers)], dst)
        at = rng.choice([_A_KERB, _A_NTLM], size=n, p=[0.9, 0.1])
        auth.add(time=t, user=uid, src=host, dst=dst, auth=at, logon=_L_NET, orient=_O_ON, outcome=0)
        _benign_extras(rng, cfg, auth, proc, uid, t, np.full(n, host), dst, at, n_proc_names)

    red = _Events(("time", "user", "src", "dst"))
    if cfg.n_chains:
        victims = rng.choice(cfg.n_users, size=cfg.n_chains, replace=False)
        for v in victims:
            _attack_chain(rng, cfg, auth, proc, red, int(v), homes[v], second[v], centers[v],
                          workstations, n_comp, n_proc_names)

    a = auth.finish()
    rank = np.where(a["orient"] == _O_OFF, 0, 1)
    a = _sort(a, rank)
    p = _sort(proc.finish())
    r = _sort(red.finish())
    corpus = SynthCorpus(cfg, principals, computers, a, p, r)
    frac = corpus.n_malicious / max(corpus.n_auth, 1)
    if frac > cfg.max_malicious_fraction:
        raise ConfigInvalid(
            f"malicious fraction {frac:.3g} exceeds max_malicious_fraction={cfg.max_malicious_fraction}")
    return corpus


def _benign_extras(rng, cfg, auth, proc, u, t, src, dst, at, n_proc_names):
    n = len(t)
    fail = rng.random(n) < cfg.failure_rate
    if fail.any():
        auth.add(time=np.maximum(t[fail] - rng.integers(2, 31, fail.sum()), 0), user=u, src=src[fail], dst=dst[fail],
                 auth=at[fail], logon=_L_NET, orient=_O_ON, outcome=1)
    tgs = rng.random(n) < cfg.tgs_rate
    if tgs.any():
        auth.add(time=np.maximum(t[tgs] - rng.integers(0, 6, tgs.sum()), 0), user=u, src=src[tgs], dst=dst[tgs],
                 auth=_A_KERB, logon=_L_Q, orient=_O_TGS, outcome=0)
    run = rng.random(n) < cfg.benign_process_prob
    k = int(run.sum())
    if k:
        tp = t[run] + rng.integers(0, 121, k)
        names = rng.integers(0, n_proc_names, k)
        proc.add(time=tp, user=u, comp=dst[run], proc=names, phase=0)
        proc.add(time=tp + rng.integers(1, 601, k), user=u, comp=dst[run], proc=names, phase=1)


def _attack_chain(rng, cfg, auth, proc, red, victim, home, second, center, workstations, n_comp, n_proc_names):
    own = {int(home), int(second)}
    day = int(rng.integers(cfg.warmup_days, cfg.days - 1))
    if cfg.off_hours:
        tod = (center + 6 * HOUR + rng.uniform(0, 12 * HOUR)) % DAY
    else:
        tod = center + rng.normal(0, cfg.activity_sd)
    t = max(int(day * DAY + round(tod % DAY)), 600)

    def pick(exclude):
        while True:
            c = int(rng.integers(0, n_comp))
            if c not in exclude:
                return c

    src = int(rng.choice([w for w in workstations[:4096] if int(w) not in own] or list(workstations)))
    if not cfg.stolen_credential:
        auth.add(time=t - int(rng.integers(60, 601)), user=victim, src=src, dst=src, auth=_A_NEG,
                 logon=_L_INTER, orient=_O_ON, outcome=0)
    for _ in range(cfg.chain_length):
        dst = pick(own | {src})
        at = int(rng.choice([_A_NTLM, _A_KERB, _A_NEG], p=[0.6, 0.2, 0.2]))
        if cfg.failure_burst:
            gaps = rng.integers(5, 21, cfg.failure_burst)
            tf = t - np.cumsum(gaps)[::-1]
            auth.add(time=tf, user=victim, src=src, dst=dst, auth=at, logon=_L_NET, orient=_O_ON, outcome=1)
        auth.add(time=t, user=victim, src=src, dst=dst, auth=at, logon=_L_NET, orient=_O_ON, outcome=0)
        red.add(time=t, user=victim, src=src, dst=dst)
        if rng.random() < cfg.attack_process_prob:
            tp = t + int(rng.integers(1, 60))
            name = int(rng.integers(0, n_proc_names))
            proc.add(time=tp, user=victim, comp=dst, proc=name, phase=0)
            proc.add(time=tp + int(rng.integers(1, 601)), user=victim, comp=dst, proc=name, phase=1)
        src = dst
        t += int(rng.integers(120, 901))

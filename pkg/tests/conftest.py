import os
import sys
from dataclasses import dataclass

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lmdetect.labeling import Labeler  # noqa: E402
from lmdetect.logs import ProcEvent, format_auth, format_proc, merge_streams, parse_auth_line, \
    parse_proc_line, parse_redteam_line  # noqa: E402
from lmdetect.synth import SynthConfig, generate  # noqa: E402

# small corpus for the brute-force comparison: ~12k events, first 10k kept
ORACLE_SYNTH = dict(seed=7, n_users=20, n_machine_accounts=3, n_computers=40, n_servers=8, days=8,
                    warmup_days=2, n_chains=3, max_malicious_fraction=0.01)
ORACLE_EVENTS = 10_000


@dataclass
class Corpus:
    auth_lines: list
    proc_lines: list
    redteam_lines: list

    def merged(self):
        """Labelled auth and process events in stream order."""
        labeler = Labeler([parse_redteam_line(x) for x in self.redteam_lines])
        auth = labeler.label_stream(parse_auth_line(x) for x in self.auth_lines)
        return list(merge_streams(auth, (parse_proc_line(x) for x in self.proc_lines)))


def truncated_corpus(config: SynthConfig, n_events: int) -> Corpus:
    c = generate(config)
    full = Corpus(list(c.iter_auth_lines()), list(c.iter_proc_lines()), list(c.iter_redteam_lines()))
    items = full.merged()[:n_events]
    auth = [format_auth(x[0]) for x in items if not isinstance(x, ProcEvent)]
    proc = [format_proc(x) for x in items if isinstance(x, ProcEvent)]
    return Corpus(auth, proc, full.redteam_lines)


@pytest.fixture(scope="session")
def oracle_corpus() -> Corpus:
    return truncated_corpus(SynthConfig(**ORACLE_SYNTH), ORACLE_EVENTS)


@pytest.fixture(scope="session")
def small_corpus() -> Corpus:
    c = generate(SynthConfig(seed=3, n_users=60, n_machine_accounts=6, n_computers=120, n_servers=20,
                             days=10, warmup_days=2, n_chains=10, max_malicious_fraction=0.01))
    return Corpus(list(c.iter_auth_lines()), list(c.iter_proc_lines()), list(c.iter_redteam_lines()))


# ---- acceptance report ------------------------------------------------------

def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])

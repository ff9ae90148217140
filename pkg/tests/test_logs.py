import gzip
import random

import pytest
from hypothesis import given, settings, strategies as st

from lmdetect.logs import (AuthEvent, MalformedLine, Outcome, ParseReport, Phase, ProcEvent, RedTeamEvent,
                           format_auth, format_proc, format_redteam, merge_streams, parse_auth_line,
                           parse_proc_line, parse_redteam_line, read_auth, read_proc, sort_log_file,
                           split_principal)

# tokens that survive a parse/format round trip: no separators, and a
# principal's domain is never the bare missing marker
_chars = st.characters(blacklist_characters=",\r\n", blacklist_categories=("Cs",))
token = st.text(_chars, min_size=1, max_size=8).filter(lambda s: "@" not in s)
field = st.one_of(st.just("?"), token)
principal = st.one_of(
    st.just("?"),
    token,
    st.builds(lambda u, d: f"{u}@{d}", field, token.filter(lambda s: s != "?")),
)
times = st.integers(0, 2**63 - 1).map(str)


@st.composite
def auth_lines(draw):
    orient = draw(token.filter(lambda s: s != "?"))
    outcome = draw(st.sampled_from(["Success", "Fail"]))
    parts = [draw(times), draw(principal), draw(principal), draw(field), draw(field), draw(field), draw(field),
             orient, outcome]
    return ",".join(parts)


@st.composite
def proc_lines(draw):
    return ",".join([draw(times), draw(principal), draw(field), draw(field), draw(st.sampled_from(["Start", "End"]))])


@st.composite
def redteam_lines(draw):
    user = draw(token.filter(lambda s: s != "?"))
    dom = draw(token.filter(lambda s: s != "?"))
    return ",".join([draw(times), f"{user}@{dom}", draw(token.filter(lambda s: s != "?")),
                     draw(token.filter(lambda s: s != "?"))])


class TestAuth:
    def test_example(self):
        e = parse_auth_line("1,C625$@DOM1,U147@DOM1,C625,C625,Negotiate,Batch,LogOn,Success")
        assert e == AuthEvent(1, "C625$", "DOM1", "U147", "DOM1", "C625", "C625", "Negotiate", "Batch",
                              "LogOn", Outcome.SUCCESS)

    def test_missing_marker(self):
        e = parse_auth_line("5,U1@DOM1,U1@DOM1,C1,C2,?,Network,LogOn,Fail")
        assert e.auth_type is None
        assert e.outcome is Outcome.FAIL

    @pytest.mark.parametrize("line", [
        "5,U1@DOM1,U1@DOM1,C1,C2,NTLM,Network",
        "x,U1@DOM1,U1@DOM1,C1,C2,NTLM,Network,LogOn,Success",
        "5,U1@DOM1,U1@DOM1,C1,C2,NTLM,Network,LogOn,Maybe",
        "5,U1@DOM1,U1@DOM1,C1,C2,NTLM,Network,?,Success",
        "5,U1@DOM1,U1@DOM1,C1,C2,NTLM,Network,,Success",
        "-5,U1@DOM1,U1@DOM1,C1,C2,NTLM,Network,LogOn,Success",
        " 5,U1@DOM1,U1@DOM1,C1,C2,NTLM,Network,LogOn,Success",
        "9223372036854775808,U1@DOM1,U1@DOM1,C1,C2,NTLM,Network,LogOn,Success",
        "",
    ])
    def test_malformed(self, line):
        with pytest.raises(MalformedLine):
            parse_auth_line(line)

    @given(auth_lines())
    def test_round_trip(self, line):
        assert format_auth(parse_auth_line(line)) == line

    @given(auth_lines())
    def test_required_fields_never_missing(self, line):
        e = parse_auth_line(line)
        assert e.orientation not in (None, "?") and e.time >= 0 and isinstance(e.outcome, Outcome)


class TestProc:
    def test_example(self):
        assert parse_proc_line("3,U1@DOM1,C1,P4,Start") == ProcEvent(3, "U1", "DOM1", "C1", "P4", Phase.START)

    def test_unknown_phase(self):
        with pytest.raises(MalformedLine):
            parse_proc_line("3,U1@DOM1,C1,P4,Stop")

    @given(proc_lines())
    def test_round_trip(self, line):
        assert format_proc(parse_proc_line(line)) == line


class TestRedTeam:
    def test_example(self):
        assert parse_redteam_line("150885,U620@DOM1,C17693,C1003") == RedTeamEvent(150885, "U620", "DOM1",
                                                                                    "C17693", "C1003")

    @pytest.mark.parametrize("line", ["150885,U620,C17693,C1003", "", "1,?@DOM1,C1,C2", "1,U1@DOM1,?,C2"])
    def test_malformed(self, line):
        with pytest.raises(MalformedLine):
            parse_redteam_line(line)

    @given(redteam_lines())
    def test_round_trip(self, line):
        assert format_redteam(parse_redteam_line(line)) == line


def test_split_principal_first_at():
    assert split_principal("a@b@c") == ("a", "b@c")
    assert split_principal("C625$") == ("C625$", None)
    assert split_principal("?") == (None, None)


def test_crlf_is_stripped():
    assert parse_proc_line("3,U1@DOM1,C1,P4,End\r\n").phase is Phase.END


@settings(max_examples=50)
@given(st.lists(auth_lines(), max_size=30), st.randoms(use_true_random=False))
def test_parsing_is_order_independent(lines, rnd):
    shuffled = list(lines)
    rnd.shuffle(shuffled)
    assert sorted(map(repr, read_auth(lines))) == sorted(map(repr, read_auth(shuffled)))


def test_skip_and_count(tmp_path):
    p = tmp_path / "auth.txt.gz"
    good = "1,U1@D,U1@D,C1,C2,NTLM,Network,LogOn,Success"
    with gzip.open(p, "wt", encoding="utf-8") as fh:
        fh.write(f"{good}\nbroken\n\n{good}\n")
    rep = ParseReport()
    assert len(list(read_auth(p, report=rep))) == 2
    assert (rep.lines, rep.parsed, rep.malformed) == (4, 2, 1)
    assert rep.examples[0]["lineno"] == 2


def test_strict_aborts_with_line_number():
    with pytest.raises(MalformedLine) as info:
        list(read_proc(["1,U1@D,C1,P1,Start", "2,U1@D,C1,P1"], strict=True))
    assert info.value.lineno == 2


def test_merge_orders_auth_before_proc_at_ties():
    a = [parse_auth_line(f"{t},U@D,U@D,C1,C2,?,?,LogOn,Success") for t in (1, 5, 5, 9)]
    p = [parse_proc_line(f"{t},U@D,C2,P,Start") for t in (0, 5, 10)]
    merged = list(merge_streams(a, p))
    assert [(type(x).__name__[0], x.time) for x in merged] == [
        ("P", 0), ("A", 1), ("A", 5), ("A", 5), ("P", 5), ("A", 9), ("P", 10)]


def test_sort_log_file(tmp_path):
    rng = random.Random(1)
    lines = []
    for i in range(500):
        t = rng.randrange(50)
        o = rng.choice(["LogOn", "LogOff", "TGS"])
        lines.append(f"{t},U{i}@D,U{i}@D,C1,C1,?,Interactive,{o},Success")
    src = tmp_path / "in.txt"
    src.write_text("\n".join(lines) + "\n")
    dst = tmp_path / "out.txt"
    sort_log_file(src, dst, "auth", chunk_lines=64)
    out = [parse_auth_line(x) for x in dst.read_text().splitlines()]
    assert len(out) == 500
    keys = [(e.time, 0 if e.orientation == "LogOff" else 1) for e in out]
    assert keys == sorted(keys)
    # stable: ties keep input order
    by_key = {}
    for e in out:
        by_key.setdefault((e.time, e.orientation == "LogOff"), []).append(int(e.src_user[1:]))
    assert all(v == sorted(v) for v in by_key.values())

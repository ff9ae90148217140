"""Feed a handful of hand-written log lines through the feature engine.

Alice logs on at her workstation, reaches a file server from it, and later
someone with her credentials tries a server from a box she never used,
after a few failed attempts, in the middle of the night.
"""

from lmdetect import EngineConfig, FeatureEngine
from lmdetect.labeling import Labeler
from lmdetect.logs import merge_streams, parse_auth_line, parse_proc_line, parse_redteam_line

AUTH = """\
28800,alice@CORP,alice@CORP,WS1,WS1,Negotiate,Interactive,LogOn,Success
29000,alice@CORP,alice@CORP,WS1,FS1,Kerberos,Network,LogOn,Success
30000,alice@CORP,alice@CORP,WS1,FS1,Kerberos,Network,LogOn,Success
61200,alice@CORP,alice@CORP,WS1,WS1,Negotiate,Interactive,LogOff,Success
97190,alice@CORP,alice@CORP,WS7,DC1,NTLM,Network,LogOn,Fail
97195,alice@CORP,alice@CORP,WS7,DC1,NTLM,Network,LogOn,Fail
97199,alice@CORP,alice@CORP,WS7,DC1,NTLM,Network,LogOn,Fail
97200,alice@CORP,alice@CORP,WS7,DC1,NTLM,Network,LogOn,Success
"""
PROC = """\
29005,alice@CORP,FS1,P12,Start
97230,alice@CORP,DC1,P99,Start
"""
REDTEAM = "97200,alice@CORP,WS7,DC1\n"

labeler = Labeler(parse_redteam_line(x) for x in REDTEAM.splitlines())
auth = labeler.label_stream(parse_auth_line(x) for x in AUTH.splitlines())
proc = (parse_proc_line(x) for x in PROC.splitlines())

engine = FeatureEngine(EngineConfig(tod_mode="exact"))
for rec in engine.run(merge_streams(auth, proc)):
    print(f"t={rec.time:>6} {rec.src_computer}->{rec.dst_computer} malicious={rec.is_malicious}")
    for name in ("was_source_logged_on", "how_long_ago", "other_interactive_logins", "was_process_run",
                 "previous_login_fraction", "number_of_failed", "fraction_from_same_box"):
        print(f"    {name:26s} {getattr(rec, name)}")

for s in engine.drain_durations():
    print(f"session {s.user} on {s.src_computer}: {s.duration}s")

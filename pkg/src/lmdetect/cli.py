"""Command-line front end.

    lmdetect pipeline --seed 7 --workdir work

Every stage reads and writes fixed paths under ``--workdir`` and leaves a
manifest in ``manifests/<stage>.json`` with content hashes of its inputs
and outputs, the effective configuration and library versions.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from typing import Optional

import numpy as np

from . import __version__
from . import evaluation, explain, gbdt, mlp
from .dataset import (InsufficientUsers, SplitManifest, Standardization, UnknownUser, assemble,
                      fit_train_encoding, split_by_user)
from .features import EngineConfig, FeatureEngine, LabelEncoding, OutOfOrderEvent
from .labeling import Labeler
from .logs import MalformedLine, ParseReport, merge_streams, read_auth, read_proc, read_redteam
from .synth import ConfigInvalid, SynthConfig, generate, parse_kv
from .table import FeatureTable, TableFormatError

log = logging.getLogger("lmdetect.cli")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MISSING, EXIT_INTERNAL = 0, 2, 3, 4, 5

PATHS = {
    "auth": "logs/auth.txt",
    "proc": "logs/proc.txt",
    "redteam": "logs/redteam.txt",
    "features": "features/features.lmfr",
    "features_csv": "features/features.csv",
    "durations": "features/durations.csv",
    "quality": "features/quality.json",
    "labels": "features/labels.json",
    "split": "split/split_manifest.json",
    "encoding": "split/encoding.json",
    "standardization": "split/standardization.json",
    "train": "split/train.lmfr",
    "test": "split/test.lmfr",
    "gbdt": "models/gbdt.lmgb",
    "gbdt_loss": "models/gbdt_loss.csv",
    "mlp": "models/mlp.lmnn",
    "mlp_loss": "models/mlp_loss.csv",
    "summary": "eval/summary.json",
}
MODELS = ("gbdt", "mlp")

# keys understood by each stage beyond the dataclass-backed sections
DEFAULTS = {
    "featurize.engine": "fast",
    "featurize.strict": "false",
    "featurize.csv": "true",
    "split.ratio": "0.8",
    "eval.threshold": "0.5",
    "eval.grid_step": "0.01",
    "explain.background": "1024",
    "explain.max_local": "50",
    "explain.global_rows": "32",
}
SECTIONS = {"synth": SynthConfig, "engine": EngineConfig, "gbdt": gbdt.GbdtConfig, "mlp": mlp.MlpConfig}


class CliError(Exception):
    category = "InternalError"
    code = EXIT_INTERNAL


class UsageError(CliError):
    category = "UsageError"
    code = EXIT_USAGE


class DataError(CliError):
    category = "DataError"
    code = EXIT_DATA


class MissingArtifact(CliError):
    category = "MissingArtifact"
    code = EXIT_MISSING


_DATA_ERRORS = (MalformedLine, OutOfOrderEvent, TableFormatError, UnknownUser, gbdt.DegenerateData,
                gbdt.NonFiniteFeature, gbdt.CorruptModel, gbdt.VersionMismatch, gbdt.DimensionMismatch,
                mlp.DegenerateData, mlp.NonFiniteLoss, mlp.CorruptModel, mlp.VersionMismatch,
                mlp.DimensionMismatch, evaluation.EmptyInput, explain.EmptyBackground, UnicodeDecodeError)


# ---- configuration ------------------------------------------------------

def derive_seed(seed: int, stage: str) -> int:
    h = hashlib.blake2b(f"{seed}/{stage}".encode(), digest_size=4).digest()
    return int.from_bytes(h, "little") & 0x7FFFFFFF


def _convert(typ: str, value, key: str):
    if not isinstance(value, str):
        return value
    typ = typ.replace("typing.", "")
    try:
        if typ == "bool":
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "Optional[float]":
            return None if value.strip().lower() in ("none", "") else float(value)
        if typ == "tuple":
            return tuple(int(v) for v in value.split(",") if v.strip())
        if typ == "frozenset":
            return frozenset(v.strip() for v in value.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None
    return value


class RunConfig:
    """Flat ``section.key=value`` settings: defaults < config file < --set < flags."""

    def __init__(self, workdir: str, seed: int, values: dict):
        self.workdir = workdir
        self.seed = seed
        self.values = dict(DEFAULTS)
        for k, v in values.items():
            section = k.split(".", 1)[0]
            if "." not in k or (section not in SECTIONS and k not in DEFAULTS):
                raise UsageError(f"unknown config key {k!r}")
            known = {f.name for f in dataclasses.fields(SECTIONS[section])} if section in SECTIONS else ()
            if section in SECTIONS and k.split(".", 1)[1] not in known:
                raise UsageError(f"unknown config key {k!r}")
            self.values[k] = v

    def get(self, key: str, typ: str = "str"):
        return _convert(typ, self.values[key], key)

    def section(self, name: str, **fixed):
        cls = SECTIONS[name]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in self.values.items():
            if not k.startswith(name + "."):
                continue
            field = k[len(name) + 1:]
            if field not in fields:
                raise UsageError(f"unknown config key {k!r}")
            kwargs[field] = _convert(str(fields[field].type), v, k)
        kwargs.update(fixed)
        try:
            cfg = cls(**kwargs)
            if hasattr(cfg, "validate"):
                cfg.validate()
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid {name} configuration: {exc}") from None
        return cfg

    def path(self, name: str) -> str:
        return os.path.join(self.workdir, PATHS[name])


def load_run_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise MissingArtifact(f"config file {args.config} not found")
        try:
            with open(args.config, encoding="utf-8") as fh:
                values.update(parse_kv(fh.read()))
        except ConfigInvalid as exc:
            raise UsageError(str(exc)) from None
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return RunConfig(args.workdir, args.seed, values)


# ---- artifacts ------------------------------------------------------------

def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    import numba
    import polars
    return {"lmdetect": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "polars": polars.__version__, "numba": numba.__version__}


@contextlib.contextmanager
def atomic_path(path: str):
    """Yield a temporary name next to ``path``; rename onto it on success."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_json(path: str, doc) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def require(rc: RunConfig, *names: str) -> None:
    for n in names:
        p = rc.path(n)
        if not os.path.exists(p):
            raise MissingArtifact(f"{PATHS[n]} not found in {rc.workdir}")


def write_manifest(rc: RunConfig, stage: str, inputs: list, outputs: list, config: dict) -> None:
    def hashes(paths):
        out = {}
        for p in paths:
            out[os.path.relpath(p, rc.workdir).replace(os.sep, "/")] = sha256_file(p)
        return out
    doc = {"stage": stage, "seed": rc.seed, "inputs": hashes(inputs), "outputs": hashes(outputs),
           "config": config, "versions": versions()}
    write_json(os.path.join(rc.workdir, "manifests", f"{stage}.json"), doc)


def _input_path(rc: RunConfig, given: Optional[str], name: str) -> str:
    path = given or rc.path(name)
    if not os.path.exists(path):
        raise MissingArtifact(f"{path} not found")
    return path


# ---- stages -------------------------------------------------------------

def stage_synth(rc: RunConfig, outdir: Optional[str] = None) -> dict:
    cfg = rc.section("synth", seed=derive_seed(rc.seed, "synth"))
    try:
        corpus = generate(cfg)
    except ConfigInvalid as exc:
        raise UsageError(str(exc)) from None
    outdir = outdir or os.path.join(rc.workdir, "logs")
    paths = corpus.write(outdir)
    log.info("synth: %d auth, %d proc, %d red-team lines", corpus.n_auth, corpus.n_proc, corpus.n_malicious)
    outs = [os.path.join(outdir, n) for n in ("auth.txt", "proc.txt", "redteam.txt")]
    write_manifest(rc, "synth", [], outs, dataclasses.asdict(cfg))
    return paths


def _write_durations(path: str, durations) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "src_computer", "logon_time", "logoff_time", "duration"])
            for d in durations:
                w.writerow(["?" if d.user is None else d.user, d.src_computer, d.logon_time,
                            d.logoff_time, d.duration])


def _featurize_python(auth, proc, redteam, config, strict):
    reports = {"auth": ParseReport(), "proc": ParseReport()}
    labeler = Labeler(read_redteam(redteam, strict=strict) if redteam else [])
    engine = FeatureEngine(config)
    stream = merge_streams(labeler.label_stream(read_auth(auth, strict, reports["auth"])),
                           read_proc(proc, strict, reports["proc"]) if proc else ())
    table = FeatureTable.from_records(engine.run(stream))
    return table, engine.quality, engine.drain_durations(), labeler.summary(), reports


def stage_featurize(rc: RunConfig, auth=None, proc=None, redteam=None) -> FeatureTable:
    from .fastpath import featurize_columnar

    auth = _input_path(rc, auth, "auth")
    proc = _input_path(rc, proc, "proc")
    redteam = redteam or rc.path("redteam")
    redteam = redteam if os.path.exists(redteam) else None
    config = rc.section("engine")
    strict = rc.get("featurize.strict", "bool")
    engine = rc.get("featurize.engine")
    if engine not in ("fast", "python"):
        raise UsageError("featurize.engine must be 'fast' or 'python'")
    if config.reorder_tolerance:
        engine = "python"
    t0 = time.perf_counter()
    if engine == "fast":
        res = featurize_columnar(auth, proc, redteam, config, strict=strict)
        table, quality, durations, labels, reports = (res.table, res.quality, res.durations,
                                                      res.label_summary, res.reports)
    else:
        table, quality, durations, labels, reports = _featurize_python(auth, proc, redteam, config, strict)
    elapsed = time.perf_counter() - t0
    n_events = quality.auth_events + quality.proc_events
    log.info("featurize: %d events -> %d records in %.1fs (%.0f events/s)", n_events, len(table),
             elapsed, n_events / elapsed if elapsed else 0.0)
    outs = [rc.path("features")]
    with atomic_path(rc.path("features")) as tmp:
        table.write_binary(tmp)
    if rc.get("featurize.csv", "bool"):
        with atomic_path(rc.path("features_csv")) as tmp:
            table.write_csv(tmp)
        outs.append(rc.path("features_csv"))
    _write_durations(rc.path("durations"), durations)
    write_json(rc.path("quality"), {
        "data_quality": quality.to_dict(),
        "parse": {k: {**v.to_dict(), "path": os.path.basename(v.path)} for k, v in reports.items()},
    })
    write_json(rc.path("labels"), labels.to_dict())
    outs += [rc.path("durations"), rc.path("quality"), rc.path("labels")]
    write_manifest(rc, "featurize", [p for p in (auth, proc, redteam) if p], outs,
                   {"engine": engine, "strict": strict, **config.to_dict()})
    return table


def stage_split(rc: RunConfig) -> None:
    require(rc, "features")
    table = FeatureTable.read_binary(rc.path("features"))
    ratio = rc.get("split.ratio", "float")
    seed = derive_seed(rc.seed, "split")
    import warnings
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", InsufficientUsers)
        try:
            manifest = split_by_user(table, ratio, seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    for w in caught:
        log.warning("split: %s", w.message)
    encoding = fit_train_encoding(table, manifest)
    train, test = assemble(table, manifest, standardize=True, encoding=encoding)
    write_json(rc.path("split"), manifest.to_dict())
    write_json(rc.path("encoding"), encoding.table)
    write_json(rc.path("standardization"), train.standardization.to_dict())
    for name, fm in (("train", train), ("test", test)):
        with atomic_path(rc.path(name)) as tmp:
            fm.table.write_binary(tmp)
    log.info("split: train %d rows (%d malicious), test %d rows (%d malicious)",
             len(train), int(train.y.sum()), len(test), int(test.y.sum()))
    write_manifest(rc, "split", [rc.path("features")],
                   [rc.path(n) for n in ("split", "encoding", "standardization", "train", "test")],
                   {"ratio": ratio, "split_seed": seed})


def _load_encoding(rc: RunConfig) -> LabelEncoding:
    with open(rc.path("encoding"), encoding="utf-8") as fh:
        return LabelEncoding(json.load(fh))


def _load_standardization(rc: RunConfig) -> Standardization:
    with open(rc.path("standardization"), encoding="utf-8") as fh:
        return Standardization.from_dict(json.load(fh))


def stage_train(rc: RunConfig, model: str) -> None:
    require(rc, "train", "encoding", "standardization")
    table = FeatureTable.read_binary(rc.path("train"))
    X, y = table.feature_matrix(), table.labels()
    enc = _load_encoding(rc)
    t0 = time.perf_counter()
    if model == "gbdt":
        cfg = rc.section("gbdt", seed=derive_seed(rc.seed, "gbdt"))
        m = gbdt.train(X, y, cfg, enc)
        with atomic_path(rc.path("gbdt")) as tmp:
            gbdt.save_file(m, tmp)
        with atomic_path(rc.path("gbdt_loss")) as tmp:
            gbdt.write_loss_trace(m, tmp)
        outs = [rc.path("gbdt"), rc.path("gbdt_loss")]
        inputs = [rc.path("train"), rc.path("encoding")]
    else:
        cfg = rc.section("mlp", seed=derive_seed(rc.seed, "mlp"))
        std = _load_standardization(rc)
        m = mlp.train(std.apply(X), y, cfg, std, enc)
        with atomic_path(rc.path("mlp")) as tmp:
            mlp.save_file(m, tmp)
        with atomic_path(rc.path("mlp_loss")) as tmp:
            mlp.write_loss_trace(m, tmp)
        outs = [rc.path("mlp"), rc.path("mlp_loss")]
        inputs = [rc.path("train"), rc.path("encoding"), rc.path("standardization")]
    log.info("train %s: %d rows in %.1fs, final loss %.6g", model, len(y), time.perf_counter() - t0,
             m.loss_trace[-1] if m.loss_trace else float("nan"))
    cfg_doc = dataclasses.asdict(cfg)
    cfg_doc = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg_doc.items()}
    write_manifest(rc, f"train_{model}", inputs, outs, cfg_doc)


def load_scorer(rc: RunConfig, model: str):
    """Function from raw feature rows to malicious probability."""
    require(rc, model)
    if model == "gbdt":
        m = gbdt.load_file(rc.path("gbdt"))
        return m.predict_proba
    m = mlp.load_file(rc.path("mlp"))
    return m.score_raw


def _models(arg: str) -> tuple:
    return MODELS if arg in (None, "all") else (arg,)


def stage_eval(rc: RunConfig, which: str = "all", out=None) -> dict:
    require(rc, "test")
    out = out or sys.stdout
    models = _models(which)
    scorers = {m: load_scorer(rc, m) for m in models}
    table = FeatureTable.read_binary(rc.path("test"))
    X, y = table.feature_matrix(), table.labels()
    threshold = rc.get("eval.threshold", "float")
    grid = evaluation.default_grid(rc.get("eval.grid_step", "float"))
    reports = {}
    outs = []
    for name, score in scorers.items():
        s = score(X)
        reports[name] = evaluation.evaluate(s, y, threshold)
        path = os.path.join(rc.workdir, "eval", f"{name}_sweep.csv")
        with atomic_path(path) as tmp:
            evaluation.write_sweep_csv(evaluation.threshold_sweep(s, y, grid), tmp)
        outs.append(path)
    summary_path = rc.path("summary")
    if which not in (None, "all"):
        summary_path = os.path.join(rc.workdir, "eval", f"summary_{which}.json")
    with atomic_path(summary_path) as tmp:
        evaluation.write_summary_json(reports, tmp)
    outs.append(summary_path)
    for name, r in reports.items():
        print(f"{name}: recall={r.recall:.6f} fpr={r.fpr:.8f} tp={r.true_positives} fp={r.false_positives} "
              f"meets_criteria={'yes' if r.meets_criteria else 'no'}", file=out)
    write_manifest(rc, "eval" if which in (None, "all") else f"eval_{which}",
                   [rc.path("test")] + [rc.path(m) for m in models], outs,
                   {"threshold": threshold, "grid_step": rc.get("eval.grid_step", "float")})
    return reports


def stage_explain(rc: RunConfig, which: str = "all") -> None:
    require(rc, "train", "test")
    models = _models(which)
    scorers = {m: load_scorer(rc, m) for m in models}
    train = FeatureTable.read_binary(rc.path("train"))
    test = FeatureTable.read_binary(rc.path("test"))
    Xte = test.feature_matrix()
    seed = derive_seed(rc.seed, "explain")
    bg = explain.sample_background(train.feature_matrix(), rc.get("explain.background", "int"), seed)
    threshold = rc.get("eval.threshold", "float")
    max_local = rc.get("explain.max_local", "int")
    n_global = min(rc.get("explain.global_rows", "int"), len(Xte))
    rng = np.random.default_rng(seed)
    global_idx = np.sort(rng.choice(len(Xte), size=n_global, replace=False)) if n_global else np.zeros(0, int)
    ids = test["event_id"]
    outs = []
    for name, score in scorers.items():
        flagged = np.flatnonzero(score(Xte) > threshold)[:max_local]
        local = [explain.explain_local(score, Xte[i], bg, int(ids[i])) for i in flagged]
        path = os.path.join(rc.workdir, "explain", f"{name}_local.json")
        with atomic_path(path) as tmp:
            explain.write_local_json(local, tmp)
        outs.append(path)
        if n_global:
            g = explain.explain_global(score, Xte[global_idx], bg, ids[global_idx])
            path = os.path.join(rc.workdir, "explain", f"{name}_global.csv")
            with atomic_path(path) as tmp:
                explain.write_global_csv(g, tmp)
            outs.append(path)
        log.info("explain %s: %d local attributions, global over %d rows", name, len(local), n_global)
    write_manifest(rc, "explain" if which in (None, "all") else f"explain_{which}",
                   [rc.path("train"), rc.path("test")] + [rc.path(m) for m in models], outs,
                   {"background": len(bg), "max_local": max_local, "global_rows": n_global,
                    "threshold": threshold, "explain_seed": seed})


def stage_pipeline(rc: RunConfig, out=None) -> dict:
    stage_synth(rc)
    stage_featurize(rc)
    stage_split(rc)
    for m in MODELS:
        stage_train(rc, m)
    reports = stage_eval(rc, "all", out)
    stage_explain(rc, "all")
    return reports


# ---- argument parsing -----------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default="work", help="directory for all stage artifacts")
    common.add_argument("--config", help="flat key=value file, e.g. gbdt.n_trees=100")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, default=7, help="root seed; stages derive their own")
    common.add_argument("-q", "--quiet", action="store_true", help="no progress on stderr")

    p = _Parser(prog="lmdetect", description="Lateral-movement detection toolkit.")
    p.add_argument("--version", action="version", version=f"lmdetect {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sp = sub.add_parser("synth", parents=[common], help="generate a labelled synthetic corpus")
    sp.add_argument("--out", help="output directory (default: WORKDIR/logs)")
    sp = sub.add_parser("featurize", parents=[common], help="compute feature records from logs")
    sp.add_argument("--auth")
    sp.add_argument("--proc")
    sp.add_argument("--redteam")
    sub.add_parser("split", parents=[common], help="user-stratified train/test split")
    sp = sub.add_parser("train", parents=[common], help="train one classifier")
    sp.add_argument("model", choices=MODELS)
    sp = sub.add_parser("eval", parents=[common], help="recall/FPR at the threshold and a sweep")
    sp.add_argument("--model", choices=MODELS + ("all",), default="all")
    sp = sub.add_parser("explain", parents=[common], help="Shapley attributions")
    sp.add_argument("--model", choices=MODELS + ("all",), default="all")
    sub.add_parser("pipeline", parents=[common], help="synth, featurize, split, train both, eval, explain")
    return p


def _setup_logging(quiet: bool) -> None:
    log.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("lmdetect: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def run(argv=None, out=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.quiet)
    rc = load_run_config(args)
    os.makedirs(rc.workdir, exist_ok=True)
    cmd = args.command
    if cmd == "synth":
        stage_synth(rc, args.out)
    elif cmd == "featurize":
        stage_featurize(rc, args.auth, args.proc, args.redteam)
    elif cmd == "split":
        stage_split(rc)
    elif cmd == "train":
        stage_train(rc, args.model)
    elif cmd == "eval":
        stage_eval(rc, args.model, out)
    elif cmd == "explain":
        stage_explain(rc, args.model)
    elif cmd == "pipeline":
        stage_pipeline(rc, out)
    return EXIT_OK


def _fail(exc: BaseException, category: str, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"lmdetect: error category={category} code={code} type={type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        return run(argv)
    except CliError as exc:
        return _fail(exc, exc.category, exc.code)
    except _DATA_ERRORS as exc:
        return _fail(exc, DataError.category, EXIT_DATA)
    except (ConfigInvalid,) as exc:
        return _fail(exc, UsageError.category, EXIT_USAGE)
    except FileNotFoundError as exc:
        return _fail(exc, MissingArtifact.category, EXIT_MISSING)
    except KeyboardInterrupt:
        return _fail(RuntimeError("interrupted"), "Interrupted", 130)
    except Exception as exc:  # noqa: BLE001 - last-resort classification
        log.debug("internal error", exc_info=True)
        return _fail(exc, "InternalError", EXIT_INTERNAL)

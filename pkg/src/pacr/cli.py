"""Command-line entry point: ``pacr {train,verify-proposition,analyze,segment,suite,emit-log}``.

Exit codes: 0 success, 1 runtime or check failure, 2 usage or config error.

Training config is a flat ``key = value`` file (``#`` comments allowed)::

    variant = dense-minmax
    suite = medium          # preset name, or a path to a suite JSON file
    learning_rate = 4.0
    total_updates = 120
    lambda1 = 0.9

Keys mirror the fields of ``TrainConfig`` and ``ShapingConfig``. ``PACR_SEED``
and ``PACR_OUT`` override the seed and output directory; command-line flags
override both.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional


from . import __version__
from . import analysis as A
from . import env as E
from .errors import ConfigError, PacrError, SchemaError
from .optimizer import METRIC_COLUMNS, NonFiniteGradientError, TrainConfig, train
from .reward import ShapingConfig
from .trace import WhitespaceTokenizer, segment

log = logging.getLogger("pacr")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

_SHAPING_KEYS = {f.name: f.type for f in dataclasses.fields(ShapingConfig)}
_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "shaping"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- config


def _convert(key: str, raw: str, kind):
    kind = str(kind)
    try:
        if "float" in kind:
            return float(raw)
        if "int" in kind:
            return int(raw)
        if "tuple" in kind:
            return tuple(float(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def load_train_config(path) -> tuple[TrainConfig, Optional[str]]:
    """Parse a key=value training config. Returns the config and an optional suite file path."""
    text = Path(path).read_text(encoding="utf-8")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[train]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    shaping, train_kw = {}, {}
    for key, raw in cp["train"].items():
        if key in _SHAPING_KEYS:
            shaping[key] = _convert(key, raw, _SHAPING_KEYS[key])
        elif key in _TRAIN_KEYS:
            train_kw[key] = _convert(key, raw, _TRAIN_KEYS[key])
        else:
            raise ConfigError(f"{key}: unknown config key")
    suite_file = None
    suite = train_kw.get("suite", "medium")
    if suite not in E.SUITE_PRESETS:
        suite_file = str((Path(path).parent / suite).resolve())
    return TrainConfig(shaping=ShapingConfig(**shaping), **train_kw), suite_file


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    suite_sha256: str
    version: str
    started_at: str
    finished_at: str = ""
    outputs: dict = dataclasses.field(default_factory=dict)

    def write(self, path) -> None:
        missing = [p for p in self.outputs.values() if not Path(p).exists()]
        if missing:
            raise PacrError(f"manifest references missing outputs: {missing}")
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    try:
        cfg, suite_file = load_train_config(args.config)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, TypeError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE

    seed = args.seed if args.seed is not None else os.environ.get("PACR_SEED")
    out = args.out or os.environ.get("PACR_OUT") or "runs/latest"
    try:
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=int(seed))
        if args.variant:
            cfg = dataclasses.replace(cfg, shaping=dataclasses.replace(cfg.shaping, variant=args.variant))
        suite = E.TaskSuite.load(suite_file) if suite_file else E.make_suite(cfg.suite, cfg.suite_seed)
    except (ConfigError, ValueError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, SchemaError) as exc:
        print(f"error: cannot load suite: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = A.ensure_dir(out)
    manifest = RunManifest("train", cfg.to_dict(), cfg.seed, suite.digest(), __version__, _now())
    suite_path = out / "suite.json"
    suite.save(suite_path)
    metrics_path = out / "metrics.csv"

    def progress(row, _state):
        if not args.quiet and (row["update"] % 10 == 0 or row["update"] == cfg.total_updates):
            print(f"update {row['update']:4d}  reward {row['mean_terminal_reward']:.3f}  heldout {row['heldout_accuracy']:.3f}", file=sys.stderr)

    try:
        rows = train(suite, cfg, progress)
    except NonFiniteGradientError as exc:
        dump = out / "nonfinite_dump.json"
        dump.write_text(json.dumps(exc.dump, default=str, indent=2), encoding="utf-8")
        print(f"error: {exc} (state dumped to {dump})", file=sys.stderr)
        return EXIT_FAIL
    except PacrError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_FAIL

    A.write_csv(rows, metrics_path, METRIC_COLUMNS)
    manifest.finished_at = _now()
    manifest.outputs = {"metrics": str(metrics_path), "suite": str(suite_path)}
    manifest.write(out / "manifest.json")
    print(f"wrote {metrics_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = args.suite or list(E.SUITE_PRESETS)
    worst_diff, worst_gain, checked, ok = 0.0, float("inf"), 0, True
    for name in names:
        suite = E.make_suite(name, args.suite_seed)
        rep = E.verify_oracle_gain(suite.tasks, trials=args.trials, seed=args.seed, break_bayes=args.break_bayes)
        checked += rep.checked
        worst_diff = max(worst_diff, rep.max_abs_diff)
        worst_gain = min(worst_gain, rep.min_expected_gain)
        if not rep.passed():
            ok = False
            qid, (t, v), draw = rep.worst
            print(f"FAIL {name}: task {qid} prefix (t={t}, v={v}) policy draw {draw} seed {args.seed}")
    print(f"checked {checked} prefixes over {args.trials} policy draws")
    print(f"max |E[C] - KL| = {worst_diff:.3e}   (tolerance 1e-9)")
    print(f"min E[C]        = {worst_gain:.3e}   (floor -1e-12)")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_analyze(args) -> int:
    try:
        records, problems = A.read_log(args.log, lenient=args.lenient)
        judgments = A.load_judgments(args.judgments, records) if args.judgments else None
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for p in problems:
        print(f"warning: skipped {p}", file=sys.stderr)

    report = A.observation_report(records, judgments, seed=args.seed, top_n=args.top_n)
    report["skipped_lines"] = problems
    out = A.ensure_dir(args.out)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    per_record = [
        {"question_id": r.question_id, "correct": r.correct, "coherence": r.coherence_label,
         "steps": len(r.steps), "consistency": r.consistency()}
        for r in records
    ]
    A.write_csv(per_record, out / "consistency.csv", ("question_id", "correct", "coherence", "steps", "consistency"))
    A.write_csv(A.pivotal_table(records, args.top_n), out / "pivotal_steps.csv", ("question_id", "correct", "rank", "step", "gain"))

    c = report["consistency_by_correctness"]
    if c["defined"]:
        print(f"consistency correct {c['mean_correct']:.4f} vs incorrect {c['mean_incorrect']:.4f}  "
              f"diff {c['difference']:.4f}  95% CI [{c['ci_low']:.4f}, {c['ci_high']:.4f}]")
    else:
        print(f"consistency by correctness: undefined ({c['reason']})")
    h = report["consistency_by_coherence"]
    print("consistency by coherence: " + (f"diff {h['difference']:.4f}  95% CI [{h['ci_low']:.4f}, {h['ci_high']:.4f}]" if h["defined"] else f"undefined ({h['reason']})"))
    if judgments is not None:
        w = report["pairwise_win_rate"]
        print("pairwise win rate: " + (f"{w['win_rate']:.3f} over {w['n_pairs']} pairs  95% CI [{w['ci_low']:.3f}, {w['ci_high']:.3f}]" if w["defined"] else f"undefined ({w['reason']})"))
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_segment(args) -> int:
    try:
        text = Path(args.file).read_bytes().decode("utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: cannot read {args.file}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    steps = segment(text, WhitespaceTokenizer(), min_tokens=args.min_tokens) if text else []
    for k, s in enumerate(steps, 1):
        print(f"{k}\t{len(s.tokens)}\t{json.dumps(s.raw_text, ensure_ascii=False)}")
    print(f"{len(steps)} steps")
    return EXIT_OK


def cmd_suite(args) -> int:
    try:
        suite = E.make_suite(args.name, args.seed, args.trap_rate)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    suite.save(args.out)
    print(f"{args.out}  sha256 {suite.digest()}")
    return EXIT_OK


def cmd_emit_log(args) -> int:
    from .experiments import mid_training_policy, simulate_records

    suite = E.make_suite(args.suite, args.suite_seed)
    cfg = TrainConfig(shaping=ShapingConfig(variant=args.variant), seed=args.seed)
    policy = mid_training_policy(suite, cfg, args.updates)
    records = simulate_records(suite.heldout, policy, args.per_task, args.seed)
    A.emit(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pacr", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"pacr {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run one training job and write metrics.csv + manifest.json")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=("baseline", "sparse", "dense-minmax", "dense-loo"))
    t.add_argument("--out")
    t.add_argument("-q", "--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify-proposition", help="check E_oracle[C] = KL >= 0 on the shipped suites")
    v.add_argument("--trials", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--suite", action="append", choices=list(E.SUITE_PRESETS))
    v.add_argument("--suite-seed", type=int, default=0)
    v.add_argument("--break-bayes", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("analyze", help="consistency / coherence / pivotal-step statistics of a JSONL log")
    a.add_argument("log")
    a.add_argument("--judgments")
    a.add_argument("--out", default="analysis")
    a.add_argument("--lenient", action="store_true")
    a.add_argument("--top-n", type=int, default=3)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("segment", help="print the reasoning steps of a text file")
    s.add_argument("file")
    s.add_argument("--min-tokens", type=int, default=5)
    s.set_defaults(func=cmd_segment)

    q = sub.add_parser("suite", help="write a task suite preset to JSON")
    q.add_argument("name", choices=list(E.SUITE_PRESETS))
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--trap-rate", type=float)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_suite)

    e = sub.add_parser("emit-log", help="write a JSONL trajectory log from a partly trained simulator policy")
    e.add_argument("--suite", default="medium", choices=list(E.SUITE_PRESETS))
    e.add_argument("--suite-seed", type=int, default=0)
    e.add_argument("--variant", default="baseline")
    e.add_argument("--updates", type=int, default=20)
    e.add_argument("--per-task", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_emit_log)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PacrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

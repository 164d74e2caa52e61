"""Command-line entry point: ``iotwl {extract,train,classify,evaluate,simulate}``.

Settings come from built-in defaults, then an optional flat JSON config
file, then command-line flags; later sources win. Exit codes: 0 success,
1 internal error, 2 bad input or usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .capture import read_sessions
from .dataset import Dataset, read_dataset_csv, write_dataset_csv
from .errors import InsufficientData, WhitelistError
from .features import extract_features, load_rank_table
from .forest import ForestParams, train_forest, undersample
from .whitelist import AlertTracker, WhiteListModel, tune_threshold, vote_stream

logger = logging.getLogger("iotwl")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "rank_table": None,
    "model": None,
    "corpus": None,
    "n_trees": 500,
    "max_depth": None,
    "min_leaf_size": 1,
    "features_per_split": None,
    "beta": 1.0,
    "w": 20,
    "cap_per_class": 2000,
    "grid_step": 0.01,
    "idle_timeout": 300.0,
    "rng_seed": 0,
    "alert_sink": "-",
    "n_jobs": 1,
}

PCAP_MAGICS = {b"\xd4\xc3\xb2\xa1", b"\xa1\xb2\xc3\xd4", b"\x4d\x3c\xb2\xa1", b"\xa1\xb2\x3c\x4d"}


class UsageError(Exception):
    pass


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    return raw


def check_config(cfg: dict) -> None:
    def need(ok, msg):
        if not ok:
            raise UsageError(msg)

    need(isinstance(cfg["n_trees"], int) and cfg["n_trees"] >= 1, "n_trees must be a positive integer")
    need(cfg["max_depth"] is None or cfg["max_depth"] >= 0, "max_depth must be >= 0")
    need(cfg["min_leaf_size"] >= 1, "min_leaf_size must be >= 1")
    need(cfg["features_per_split"] is None or cfg["features_per_split"] >= 1, "features_per_split must be >= 1")
    need(cfg["beta"] > 0, "beta must be positive")
    need(isinstance(cfg["w"], int) and cfg["w"] >= 1, "w must be a positive integer")
    need(cfg["cap_per_class"] >= 1, "cap_per_class must be >= 1")
    need(0 < cfg["grid_step"] < 1, "grid_step must lie in (0, 1)")
    need(cfg["idle_timeout"] > 0, "idle_timeout must be positive")
    need(cfg["n_jobs"] >= 1, "n_jobs must be >= 1")


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(load_config(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if args.seed is not None:
        cfg["rng_seed"] = args.seed
    check_config(cfg)
    return cfg


def forest_params(cfg: dict) -> ForestParams:
    return ForestParams(
        n_trees=cfg["n_trees"],
        max_depth=cfg["max_depth"],
        min_leaf_size=cfg["min_leaf_size"],
        features_per_split=cfg["features_per_split"],
        rng_seed=cfg["rng_seed"],
    )


def _ranks(cfg):
    return load_rank_table(cfg["rank_table"])


def _is_pcap(path) -> bool:
    with open(path, "rb") as fp:
        return fp.read(4) in PCAP_MAGICS


def _out(text: str, args) -> None:
    if not args.quiet:
        print(text)


def cmd_extract(args, cfg) -> int:
    labels = {}
    if args.label_map:
        labels = json.loads(Path(args.label_map).read_text(encoding="utf-8"))
    ranks = _ranks(cfg)
    sessions, stats = read_sessions(args.pcap, cfg["idle_timeout"])
    vectors = []
    for s in sessions:
        v = extract_features(s, ranks)
        vectors.append(replace(v, label=labels.get(s.key.client_ip)))
    write_dataset_csv(Dataset.from_vectors(vectors), args.output)
    reasons = ", ".join(f"{k}={v}" for k, v in sorted(stats.skipped_reasons.items())) or "none"
    _out(
        f"packets={stats.total} accepted={stats.accepted} skipped={stats.skipped} "
        f"dropped={stats.dropped} truncated={stats.truncated} sessions={len(sessions)} skip_reasons: {reasons}",
        args,
    )
    return EXIT_OK


def _corpus_path(args, cfg):
    path = args.dataset or cfg["corpus"]
    if not path:
        raise UsageError("no dataset given (positional argument or 'corpus' in config)")
    return path


def cmd_train(args, cfg) -> int:
    from .evaluation import temporal_split

    data = read_dataset_csv(_corpus_path(args, cfg))
    if args.validation:
        train, val = data, read_dataset_csv(args.validation, schema=data.schema)
    else:
        train, val, _ = temporal_split(data)
    if any(lab is None for lab in train.labels):
        raise InsufficientData("training rows must all be labeled")
    train = undersample(train, cfg["cap_per_class"], rng_seed=cfg["rng_seed"])
    forest = train_forest(train, forest_params(cfg), n_jobs=cfg["n_jobs"])
    val = val.take(val.label_mask(forest.class_names))
    report = tune_threshold(forest, val, cfg["beta"], cfg["grid_step"])
    model = WhiteListModel(forest, report.tr_star, cfg["beta"])
    out = args.output or cfg["model"]
    if not out:
        raise UsageError("no model output path (-o or 'model' in config)")
    model.save(out)
    tr, p, r, f = report.best
    counts = train.class_counts()
    _out(f"white list ({len(counts)} types): " + ", ".join(f"{k}={counts[k]}" for k in sorted(counts)), args)
    _out(f"tr*={tr:.2f} precision={p:.4f} recall={r:.4f} F{cfg['beta']:g}={f:.4f} validation_rows={len(val)}", args)
    _out(f"model {model.version} written to {out}", args)
    return EXIT_OK


def _classify_input(path, model: WhiteListModel, cfg) -> Dataset:
    if _is_pcap(path):
        sessions, _ = read_sessions(path, cfg["idle_timeout"])
        ranks = _ranks(cfg)
        return Dataset.from_vectors([extract_features(s, ranks, model.schema) for s in sessions], model.schema)
    return read_dataset_csv(path, schema=model.schema)


def _open_sink(target):
    if target in (None, "-"):
        return sys.stdout, False
    return open(target, "w", encoding="utf-8"), True


def cmd_classify(args, cfg) -> int:
    model_path = args.model or cfg["model"]
    if not model_path:
        raise UsageError("no model given (positional argument or 'model' in config)")
    model = WhiteListModel.load(model_path)
    data = _classify_input(args.input, model, cfg)
    w = cfg["w"]
    verdicts = []
    for sid, idx in data.streams().items():
        decisions = model.decisions(data.X[idx])
        verdicts.extend(vote_stream(decisions, data.start_times[idx], sid, w, model.white_list))
    verdicts.sort(key=lambda v: (v.decided_at, v.stream_id))

    tracker = AlertTracker(model.white_list, model.version, include_provisional=args.include_provisional)
    alerts = [a for a in map(tracker.update, verdicts) if a is not None]

    if args.verdicts:
        sink, close = _open_sink(args.verdicts)
        try:
            for v in verdicts:
                sink.write(json.dumps(v.to_dict(), sort_keys=True) + "\n")
        finally:
            if close:
                sink.close()
    sink, close = _open_sink(args.alerts or cfg["alert_sink"])
    try:
        for a in alerts:
            sink.write(a.to_json() + "\n")
    finally:
        if close:
            sink.close()
    logger.info("%d sessions, %d streams, %d alerts", len(data), len(data.streams()), len(alerts))
    return EXIT_OK


def _windows(text: str) -> list[int]:
    try:
        ws = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise UsageError(f"bad window list {text!r}") from None
    if not ws or ws[0] < 1:
        raise UsageError("window sizes must be positive integers")
    return ws


def cmd_evaluate(args, cfg) -> int:
    from . import evaluation as ev
    from . import plotting
    from . import report

    data = read_dataset_csv(_corpus_path(args, cfg))
    if any(lab is None for lab in data.labels):
        raise InsufficientData("evaluation needs a fully labeled dataset")
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    params = forest_params(cfg)
    common = dict(params=params, beta=cfg["beta"], cap_per_class=cfg["cap_per_class"])
    types = args.left_out or data.class_names
    unknown = sorted(set(types) - set(data.class_names))
    if unknown:
        raise UsageError(f"types not in the dataset: {unknown}")
    seed_of = {t: ev.experiment_seed(cfg["rng_seed"], i) for i, t in enumerate(data.class_names)}
    figures = not args.no_figures
    mode = args.mode

    if mode == "loo_all":
        results, summary = ev.run_all_experiments(
            data, w=cfg["w"], grid_step=cfg["grid_step"], master_seed=cfg["rng_seed"], n_jobs=cfg["n_jobs"], **common
        )
        for r in results:
            report.write_experiment_json(r, outdir / f"experiment_{r.left_out_type}.json")
            report.write_confusion_csv(r.confusion, outdir / f"confusion_{r.left_out_type}.csv")
            if figures:
                plotting.plot_confusion(r.confusion, outdir / f"confusion_{r.left_out_type}.png", f"{r.left_out_type} left out")
        report.write_summary_csv(results, summary, outdir / "summary.csv")
        report.write_json(summary.to_dict(), outdir / "summary.json")
        report.write_inter_arrival_csv(ev.inter_arrival_stats(data), outdir / "inter_arrival.csv")
        _out(f"mean unknown detection {summary.mean_unknown:.4f} (sd {summary.std_unknown:.4f}), "
             f"mean white-listed accuracy {summary.mean_whitelisted:.4f} (sd {summary.std_whitelisted:.4f})", args)
    elif mode == "window_curve":
        windows = _windows(args.windows)
        curves = {t: ev.accuracy_vs_window(data, t, windows, seed=seed_of[t], **common) for t in types}
        report.write_window_csv(curves, outdir / "window_unknown.csv", column=1)
        report.write_window_csv(curves, outdir / "window_whitelisted.csv", column=2)
        if figures:
            plotting.plot_window_curve(curves, outdir / "window_curve.png")
        _out(f"window curve for {len(types)} types over {len(windows)} window sizes", args)
    elif mode == "roc":
        for t in types:
            roc = ev.roc_experiment(data, t, grid_step=cfg["grid_step"], seed=seed_of[t], **common)
            report.write_roc_csv(roc, outdir / f"roc_{t}.csv")
            report.write_json(roc.to_dict(), outdir / f"roc_{t}.json")
            if figures:
                plotting.plot_roc(roc, outdir / f"roc_{t}.png", f"{t} left out")
            _out(f"{t}: AUC {roc.auc:.4f}", args)
    elif mode == "transport":
        if not args.test_corpus:
            raise UsageError("transport mode needs --test-corpus")
        test = read_dataset_csv(args.test_corpus, schema=data.schema)
        for t in types:
            r = ev.transportability_experiment(
                data, test, t, args.transport_mode, w=cfg["w"], grid_step=cfg["grid_step"], seed=seed_of[t], **common
            )
            report.write_experiment_json(r, outdir / f"transport_{t}.json")
            report.write_confusion_csv(r.confusion, outdir / f"transport_confusion_{t}.csv")
            if figures:
                plotting.plot_confusion(r.confusion, outdir / f"transport_confusion_{t}.png", f"{t} ({args.transport_mode})")
            _out(f"{t}: unknown detection {r.detected_unknown_rate}, white-listed accuracy "
                 f"{r.weighted_whitelisted_accuracy:.4f}", args)
    elif mode == "sstar":
        rows = {
            t: ev.minimal_perfect_window(data, t, args.w_max, seed=seed_of[t], criterion=args.criterion, **common)
            for t in types
        }
        report.write_sstar_csv(rows, outdir / "sstar.csv")
        for t, s in rows.items():
            _out(f"{t}: s*={'none' if s is None else s}", args)
    return EXIT_OK


def cmd_simulate(args, cfg) -> int:
    from .synth import CorpusSpec, default_spec, generate_corpus, generate_pcap_fixture, label_map

    spec = CorpusSpec.load(args.spec) if args.spec else default_spec()
    if args.seed is not None or not args.spec:
        spec = replace(spec, rng_seed=cfg["rng_seed"])
    if args.duration is not None:
        spec = replace(spec, duration=args.duration)
    if args.dump_spec:
        Path(args.dump_spec).write_text(spec.to_json() + "\n", encoding="utf-8")
    data = generate_corpus(spec, _ranks(cfg))
    write_dataset_csv(data, args.output)
    if args.pcap:
        generate_pcap_fixture(spec, args.pcap)
    if args.label_map:
        Path(args.label_map).write_text(json.dumps(label_map(spec), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    counts = data.class_counts()
    _out(f"{len(data)} sessions: " + ", ".join(f"{k}={counts[k]}" for k in sorted(counts)), args)
    return EXIT_OK


def _add_forest_flags(p):
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--min-leaf-size", dest="min_leaf_size", type=int)
    p.add_argument("--features-per-split", dest="features_per_split", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--grid-step", dest="grid_step", type=float)
    p.add_argument("--cap-per-class", dest="cap_per_class", type=int)
    p.add_argument("--n-jobs", dest="n_jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iotwl", description="White-listing of IoT device types from TCP session traffic.")
    parser.add_argument("--config", help="flat JSON config file; flags override it")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--quiet", action="store_true", help="only print errors")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="turn a pcap into a feature CSV")
    p.add_argument("pcap")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--rank-table", dest="rank_table")
    p.add_argument("--label-map", dest="label_map", help="JSON object mapping client IP to device type")
    p.add_argument("--idle-timeout", dest="idle_timeout", type=float)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train and tune a white-list model")
    p.add_argument("dataset", nargs="?")
    p.add_argument("-o", "--output")
    p.add_argument("--validation", help="separate validation CSV; skips the temporal split")
    _add_forest_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="vote over IP streams and emit alerts")
    p.add_argument("model", nargs="?")
    p.add_argument("input", help="feature CSV or pcap")
    p.add_argument("-w", "--window", dest="w", type=int)
    p.add_argument("--alerts", help="alert JSON-lines target, '-' for stdout")
    p.add_argument("--verdicts", help="write every stream verdict as JSON-lines here")
    p.add_argument("--include-provisional", action="store_true")
    p.add_argument("--rank-table", dest="rank_table")
    p.add_argument("--idle-timeout", dest="idle_timeout", type=float)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="run the evaluation protocol and write reports")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--mode", choices=["loo_all", "window_curve", "roc", "transport", "sstar"], default="loo_all")
    p.add_argument("-o", "--output", required=True, help="report directory")
    p.add_argument("--left-out", dest="left_out", action="append", help="restrict to this type (repeatable)")
    p.add_argument("-w", "--window", dest="w", type=int)
    p.add_argument("--windows", default="1,2,5,10,20,50,110")
    p.add_argument("--w-max", dest="w_max", type=int, default=400)
    p.add_argument("--criterion", choices=["both", "unknown", "whitelisted"], default="both")
    p.add_argument("--test-corpus", dest="test_corpus")
    p.add_argument("--transport-mode", dest="transport_mode", choices=["left_out", "white_listed"], default="left_out")
    p.add_argument("--no-figures", dest="no_figures", action="store_true")
    _add_forest_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="generate a synthetic corpus")
    p.add_argument("--spec", help="corpus spec JSON; default nine-type spec otherwise")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--pcap")
    p.add_argument("--label-map", dest="label_map", help="write client IP to type JSON here")
    p.add_argument("--dump-spec", dest="dump_spec", help="write the effective spec JSON here")
    p.add_argument("--duration", type=float)
    p.add_argument("--rank-table", dest="rank_table")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (UsageError, WhitelistError, OSError, ValueError, KeyError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        print(f"iotwl {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

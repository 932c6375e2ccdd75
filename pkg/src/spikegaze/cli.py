"""Command-line entry point: synth, train, eval, stream, cost.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import model as M
from . import weights
from .config import SECTIONS, ConfigError, RunConfig
from .costmodel import cost_report
from .events import DataFormatError, interpolate_labels, load_dataset, load_events, load_labels
from .streaming import StreamEngine, run_realtime
from .synthgen import write_dataset
from .training import TOLERANCES, evaluate, evaluate_sessions, train

log = logging.getLogger("spikegaze")

# sections whose keys become plain --flags, first section wins on clashes
FLAG_SECTIONS = {
    "synth": ("scene",),
    "train": ("train", "model", "augment", "data"),
    "eval": ("model", "data"),
    "stream": ("model", "data"),
    "cost": ("model", "cost", "energy"),
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag_map(command):
    out = {}
    for section in FLAG_SECTIONS[command]:
        for f in fields(SECTIONS[section]):
            out.setdefault(f.name.replace("_", "-"), f"{section}.{f.name}")
    return out


def _add_config_args(p, command):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    for flag, key in _flag_map(command).items():
        p.add_argument(f"--{flag}", dest=f"cfg:{key}", metavar="V", help=f"sets {key}")


def build_parser():
    parser = _Parser(prog="spikegaze", description="Spiking pupil tracking on event streams.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic sessions")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sessions", type=int, default=1)
    _add_config_args(p, "synth")

    p = sub.add_parser("train", help="train on a directory of sessions")
    p.add_argument("--data", required=True, help="directory of session folders")
    p.add_argument("--val", help="validation session directory (default: hold out the last sessions)")
    p.add_argument("--out", required=True, help="run directory")
    _add_config_args(p, "train")

    p = sub.add_parser("eval", help="score weights on sessions, or a prediction CSV")
    p.add_argument("--weights")
    p.add_argument("--data", help="directory of session folders")
    p.add_argument("--pred", help="prediction CSV (t_ms,x_pred,y_pred,...)")
    p.add_argument("--labels", help="label CSV matching --pred")
    _add_config_args(p, "eval")

    p = sub.add_parser("stream", help="run the 1 kHz engine over an event file")
    p.add_argument("--weights", help="weight file (default: freshly initialized model)")
    p.add_argument("--events", required=True)
    p.add_argument("--labels", help="label CSV; adds ground-truth columns")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--ticks", type=int, help="number of 1 ms steps (default: cover the input)")
    p.add_argument("--realtime", action="store_true", help="pace ticks to wall-clock milliseconds")
    _add_config_args(p, "stream")

    p = sub.add_parser("cost", help="op counts, energy, power and latency")
    p.add_argument("--weights", help="weights used to measure activity (default: initialized model)")
    p.add_argument("--events", help="event CSV to measure activity on (default: synthetic session)")
    p.add_argument("--out", help="directory for report.txt / report.csv / report.jsonl")
    _add_config_args(p, "cost")
    return parser


def _resolve(args, command):
    cfg = RunConfig()
    if args.config:
        if not os.path.isfile(args.config):
            raise DataError(f"config file not found: {args.config}")
        cfg.load(args.config)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, _, v = item.partition("=")
        cfg.set(k.strip(), v.strip())
    for name, value in vars(args).items():
        if name.startswith("cfg:") and value is not None:
            cfg.set(name[4:], value)
    return cfg


def _echo_config(cfg, directory):
    os.makedirs(directory, exist_ok=True)
    cfg.write(os.path.join(directory, "config.txt"))


def _f(v, d=4):
    return f"{v:.{d}f}"


def _load_params(path, cfg):
    if path:
        return weights.load(path)
    params, _ = M.build(cfg.model)
    return params


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg):
    if args.sessions < 1:
        raise UsageError("--sessions must be at least 1")
    _echo_config(cfg, args.out)
    paths = write_dataset(args.out, args.sessions, cfg.scene)
    for p in paths:
        print(p)
    return 0


def _sessions(path, cfg):
    if not os.path.isdir(path):
        raise DataError(f"not a directory: {path}")
    sessions = load_dataset(path, scale=cfg.data.label_scale)
    if not sessions:
        raise DataError(f"no sessions (sub-directories with events.csv) under {path}")
    return sessions


def cmd_train(args, cfg):
    sessions = _sessions(args.data, cfg)
    if args.val:
        train_s, val_s = sessions, _sessions(args.val, cfg)
    else:
        k = cfg.data.val_sessions
        if len(sessions) <= k:
            raise DataError(f"need more than {k} sessions to hold out validation data")
        train_s, val_s = sessions[:-k], sessions[-k:]
    _echo_config(cfg, args.out)

    def progress(rec):
        print(f"epoch {rec['epoch']} loss {_f(rec['loss'], 6)} val_euc {_f(rec['val_euc'])} "
              f"val_p10 {_f(rec['val_p10'])}", flush=True)

    params, hist = train(train_s, val_s, cfg.train, cfg.model, cfg.augment, progress=progress)
    hist.write_csv(os.path.join(args.out, "history.csv"))
    weights.save(params, os.path.join(args.out, "best.sgz"))
    print(f"best epoch {hist.best_epoch}; weights {os.path.join(args.out, 'best.sgz')}")
    return 0


def _print_report(rep):
    cols = [f"p{p}" for p in TOLERANCES] + ["euc", "frames_scored", "frames_blinked"]
    vals = [_f(rep.p_acc[p], 3) for p in TOLERANCES] + [_f(rep.euclidean, 3),
                                                        str(rep.frames_scored), str(rep.frames_blinked)]
    print(",".join(cols))
    print(",".join(vals))


def _read_pred_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["t_ms", "x_pred", "y_pred"]:
        raise DataError(f"{path}: expected header t_ms,x_pred,y_pred[,...]")
    head = rows[0]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64).reshape(-1, len(head))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return head, data


def cmd_eval(args, cfg):
    if args.pred:
        if not args.labels:
            raise UsageError("--pred needs --labels")
        _, data = _read_pred_csv(args.pred)
        track = load_labels(args.labels, scale=cfg.data.label_scale)
        n_ms = int(round(track.times_ms[-1] + 1000.0 / track.rate_hz))
        lab = interpolate_labels(track, 1000.0, duration_ms=n_ms)
        t = data[:, 0].astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= len(lab)):
            raise DataError("prediction times fall outside the label track")
        rep = evaluate(data[:, 1:3], lab.xy[t], lab.blink[t])
    elif args.weights and args.data:
        params = weights.load(args.weights)
        rep = evaluate_sessions(params, _sessions(args.data, cfg))
    else:
        raise UsageError("eval needs --pred/--labels or --weights/--data")
    _print_report(rep)
    return 0


def cmd_stream(args, cfg):
    params = _load_params(args.weights, cfg)
    events = load_events(args.events)
    lab = None
    n_ticks = args.ticks
    if args.labels:
        track = load_labels(args.labels, scale=cfg.data.label_scale)
        n_ms = int(round(track.times_ms[-1] + 1000.0 / track.rate_hz))
        lab = interpolate_labels(track, 1000.0, duration_ms=n_ms)
        n_ticks = n_ticks or n_ms
    if n_ticks is None:
        n_ticks = int(events["t"].max()) // 1000 + 1 if events.size else 0
    engine = StreamEngine(params, scale=cfg.data.label_scale, probes=False)
    if args.realtime:
        preds = np.array([p for _, p in run_realtime(engine, events, n_ticks)]).reshape(-1, 2)
    else:
        preds = engine.run(events, n_ticks)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        head = "t_ms,x_pred,y_pred" + (",x_gt,y_gt,dist" if lab is not None else "")
        out.write(head + "\n")
        for k in range(n_ticks):
            row = [str(k), _f(preds[k, 0]), _f(preds[k, 1])]
            if lab is not None:
                g = lab.xy[min(k, len(lab) - 1)]
                row += [_f(g[0]), _f(g[1]), _f(float(np.hypot(*(preds[k] - g))))]
            out.write(",".join(row) + "\n")
    finally:
        if args.out:
            out.close()
    if args.out:
        cfg.write(args.out + ".config.txt")
    if engine.stale:
        print(f"dropped {engine.stale} stale events", file=sys.stderr)
    return 0


def measure_activity(params, events, n_ticks):
    engine = StreamEngine(params)
    engine.run(events, n_ticks)
    return engine.snapshot_activity()


def cmd_cost(args, cfg):
    params = _load_params(args.weights, cfg)
    if args.events:
        events = load_events(args.events)
        n_ticks = min(cfg.cost.activity_ms, int(events["t"].max()) // 1000 + 1) if events.size else 1
    else:
        from dataclasses import replace

        from .synthgen import generate_session

        scene = replace(cfg.scene, duration_ms=cfg.cost.activity_ms, seed=cfg.cost.activity_seed)
        _, events = generate_session(scene)
        n_ticks = cfg.cost.activity_ms
    stats = measure_activity(params, events, n_ticks)
    rep = cost_report(params.config, stats, cfg.energy, cfg.cost.f_hz)
    text = rep.to_text()
    sys.stdout.write(text)
    if args.out:
        _echo_config(cfg, args.out)
        with open(os.path.join(args.out, "report.txt"), "w") as fh:
            fh.write(text)
        header, rows = rep.csv_rows()
        with open(os.path.join(args.out, "report.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        with open(os.path.join(args.out, "report.jsonl"), "w") as fh:
            fh.write(rep.to_jsonl())
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "stream": cmd_stream, "cost": cmd_cost}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose one of " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _resolve(args, args.command)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, DataFormatError, weights.WeightFileError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

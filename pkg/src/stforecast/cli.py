"""Command-line entry point: ``stforecast <command> [options]``.

Options may also come from ``--config FILE`` holding ``key = value`` lines
(keys are long option names); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import __version__
from .attention import VARIANTS
from .data import (
    DEFAULT_RATIOS,
    SynthParams,
    load_dataset,
    load_series,
    prepare_dataset,
    save_dataset,
    save_series,
    synth_generate,
)
from .embedding import save_embeddings
from .errors import DataError, ForecastError, UsageError
from .graph import DEFAULT_EPSILON, load_graph, random_road_graph, save_graph
from .io import atomic_write_text, write_csv
from .model import Forecaster, load_checkpoint, save_checkpoint
from .trainer import (
    EmbedConfig,
    TrainConfig,
    evaluate,
    model_config_for,
    model_gradient_check,
    run_ablation,
    run_fault_experiment,
    train,
    vertex_vectors,
)

OUTPUT_ENV = "STFORECAST_OUTPUT_DIR"
DEFAULT_SEED = 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# value parsers


def parse_etas(text: str) -> list[float]:
    """``0.1,0.5`` or ``0.1..0.9`` (step 0.1) or ``0..1:0.25``."""
    text = text.strip()
    try:
        if ".." in text:
            span, _, step = text.partition(":")
            lo, hi = (float(x) for x in span.split(".."))
            step = float(step) if step else 0.1
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(round((hi - lo) / step))
            return [round(lo + i * step, 10) for i in range(n + 1)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad eta list {text!r}") from None


def parse_ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
        raise argparse.ArgumentTypeError("ratios must be three non-negative numbers summing to 1")
    return parts


def parse_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None


def parse_variants(text: str) -> list[str]:
    out = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in out if v not in VARIANTS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"variants must come from {','.join(VARIANTS)}")
    return out


def parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key = value")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="key = value file; flags take precedence")
    p.add_argument("--output-dir", help=f"where artifacts go (default ${OUTPUT_ENV} or .)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="seed for every random component")
    p.add_argument("--quiet", type=parse_bool, nargs="?", const=True, default=False)


def _model_opts(p):
    g = p.add_argument_group("model")
    g.add_argument("--L", dest="blocks", type=int, default=3, help="blocks per encoder and decoder")
    g.add_argument("--K", dest="heads", type=int, default=8, help="attention heads")
    g.add_argument("--d", dest="head_dim", type=int, default=8, help="width of each head")
    g.add_argument("--P", dest="history", type=int, help="history steps (checked against the dataset)")
    g.add_argument("--Q", dest="horizon", type=int, help="horizon steps (checked against the dataset)")
    g.add_argument("--group-mode", choices=("auto", "on", "off"), default="auto")
    g.add_argument("--groups", type=int, help="number of vertex groups when grouping")
    g.add_argument("--allow-padding", type=parse_bool, default=True)
    g.add_argument("--encoder-causal", type=parse_bool, default=True)
    g.add_argument("--decoder-causal", type=parse_bool, default=True)
    g.add_argument("--include-self", type=parse_bool, default=True)
    g.add_argument("--bridge", choices=("aligned", "last"), default="aligned")


def _embed_opts(p):
    g = p.add_argument_group("vertex embedding")
    g.add_argument("--embeddings", help="precomputed vertex vectors CSV (skips random walks)")
    g.add_argument("--walk-dim", type=int, default=64)
    g.add_argument("--walk-length", type=int, default=80)
    g.add_argument("--walks-per-vertex", type=int, default=10)
    g.add_argument("--window", type=int, default=10)
    g.add_argument("--negatives", type=int, default=5)
    g.add_argument("--walk-epochs", type=int, default=5)
    g.add_argument("--return-param", type=float, default=1.0, help="walk return parameter p")
    g.add_argument("--inout-param", type=float, default=1.0, help="walk in-out parameter q")


def _train_opts(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=100)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--patience", type=int, default=10)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--clip", type=float, help="clip gradients to this global norm")
    g.add_argument("--max-batches", type=int, help="cap on batches per epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stforecast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="window a series on a graph into a dataset artifact")
    _common(p)
    p.add_argument("--graph", required=True, help="CSV from,to,distance")
    p.add_argument("--series", required=True, nargs="+", help="one CSV per channel")
    p.add_argument("--P", dest="history", type=int, default=12)
    p.add_argument("--Q", dest="horizon", type=int, default=12)
    p.add_argument("--ratios", type=parse_ratios, default=DEFAULT_RATIOS)
    p.add_argument("--step-minutes", type=int, default=5)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--out", help="dataset path (default <output-dir>/dataset.stz)")

    p = sub.add_parser("synth", help="simulate traffic on a graph")
    _common(p)
    p.add_argument("--graph", help="CSV from,to,distance; random graph when omitted")
    p.add_argument("--vertices", type=int, default=20)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--steps-per-day", type=int, default=288)

    p = sub.add_parser("train", help="fit a model and write checkpoint and history")
    _common(p)
    p.add_argument("--data", required=True, help="dataset artifact from prepare")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    _model_opts(p)
    _embed_opts(p)
    _train_opts(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("predict", help="forecast one window in original units")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--index", type=int, default=-1, help="window within the split (default last)")

    p = sub.add_parser("ablate", help="train every variant under one budget")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variants", type=parse_variants, default=list(VARIANTS))
    p.add_argument("--seeds", type=parse_ints, help="overrides --seed; comma separated")
    _model_opts(p)
    _embed_opts(p)
    _train_opts(p)

    p = sub.add_parser("fault", help="error as a growing share of inputs is zeroed")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--etas", type=parse_etas, default=parse_etas("0.1..0.9"))

    p = sub.add_parser("gradcheck", help="finite-difference check of a small model")
    _common(p)
    p.add_argument("--coords", type=int, default=200, help="minimum coordinates to check")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _known_dests(parser: argparse.ArgumentParser) -> set[str]:
    return {a.dest for a in parser._actions}


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        values = read_config_file(args.config)
        unknown = sorted(set(values) - _known_dests(sub))
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {', '.join(unknown)}")
        # string defaults are run through each option's type by argparse
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# commands


def _output_dir(args) -> Path:
    out = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise DataError(f"input file not found: {p}")


def _say(args, text: str):
    if not args.quiet:
        print(text)


def _fmt(x) -> str:
    return format(float(x), ".6g")


def _embed_config(args) -> EmbedConfig:
    return EmbedConfig(
        p=args.return_param,
        q=args.inout_param,
        walk_length=args.walk_length,
        walks_per_vertex=args.walks_per_vertex,
        window=args.window,
        dim=args.walk_dim,
        negatives=args.negatives,
        epochs=args.walk_epochs,
    )


def _train_config(args, seed) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        patience=args.patience,
        lr=args.lr,
        seed=seed,
        clip=args.clip,
        max_batches_per_epoch=args.max_batches,
    )


def _model_overrides(args, ds) -> dict:
    for name, have in (("history", ds.history), ("horizon", ds.horizon)):
        want = getattr(args, name)
        if want is not None and want != have:
            raise UsageError(f"--{'P' if name == 'history' else 'Q'} {want} differs from the dataset's {have}")
    return dict(
        blocks=args.blocks,
        heads=args.heads,
        head_dim=args.head_dim,
        group_mode=args.group_mode,
        groups=args.groups,
        allow_padding=args.allow_padding,
        encoder_causal=args.encoder_causal,
        decoder_causal=args.decoder_causal,
        include_self=args.include_self,
        bridge=args.bridge,
    )


def _metric_rows(report):
    return [(step, mae, rmse, mape) for step, mae, rmse, mape in report.rows()]


def cmd_prepare(args) -> int:
    _require(args.graph, *args.series)
    graph = load_graph(args.graph, args.epsilon)
    series = load_series(args.series, args.step_minutes)
    ds = prepare_dataset(graph, series, args.history, args.horizon, args.ratios)
    out = _output_dir(args)
    path = Path(args.out) if args.out else out / "dataset.stz"
    save_dataset(ds, path)
    stats = {"vertex_ids": list(ds.vertex_ids), **ds.stats.to_dict()}
    atomic_write_text(path.with_name(path.stem + "_norm.json"), json.dumps(stats, indent=1, sort_keys=True) + "\n")
    counts = {k: len(v) for k, v in ds.starts.items()}
    _say(args, f"wrote {path} windows train={counts['train']} val={counts['val']} test={counts['test']}")
    return 0


def cmd_synth(args) -> int:
    out = _output_dir(args)
    if args.graph:
        _require(args.graph)
        graph = load_graph(args.graph)
    else:
        graph = random_road_graph(args.vertices, args.seed)
        save_graph(graph, out / "graph.csv")
    series, truth = synth_generate(graph, args.days, args.steps_per_day, args.seed, SynthParams())
    save_series(series, out / "series.csv")
    atomic_write_text(out / "synth_truth.json", json.dumps(truth, indent=1, sort_keys=True) + "\n")
    _say(args, f"wrote {out / 'series.csv'} ({series.n_steps} steps, {graph.n_vertices} vertices)")
    return 0


def cmd_train(args) -> int:
    _require(args.data, args.embeddings)
    ds = load_dataset(args.data)
    emb = _embed_config(args)
    vectors = vertex_vectors(ds, emb, args.seed, args.embeddings)
    cfg = model_config_for(ds, vectors.shape[1], seed=args.seed, variant=args.variant, **_model_overrides(args, ds))
    model = Forecaster(cfg, vectors)
    out = _output_dir(args)

    def log(row):
        if not args.quiet:
            print(" ".join(f"{k}={_fmt(v) if k != 'epoch' else v}" for k, v in row.items() if k != "seconds"))

    result = train(model, ds.windows("train"), ds.windows("val"), ds.stats, _train_config(args, args.seed), log)
    save_checkpoint(model, out / "checkpoint.stz", {"best_epoch": result.best_epoch, "best_val_mae": result.best_val_mae})
    if args.embeddings is None:
        save_embeddings(out / "vertex_vectors.csv", ds.vertex_ids, vectors)
    cols = ["epoch", "train_mae", "val_mae", "val_rmse", "val_mape"]
    write_csv(out / "history.csv", cols, [[r[c] for c in cols] for r in result.history])
    _say(args, f"best epoch {result.best_epoch} val_mae={_fmt(result.best_val_mae)}; wrote {out / 'checkpoint.stz'}")
    return 0


def _load_pair(args):
    _require(args.checkpoint, args.data)
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.n_vertices != model.config.n_vertices:
        raise DataError("checkpoint and dataset have different vertex counts")
    if (ds.history, ds.horizon, ds.channels) != (model.config.history, model.config.horizon, model.config.channels):
        raise DataError("checkpoint and dataset disagree on history, horizon or channels")
    return model, ds


def cmd_evaluate(args) -> int:
    model, ds = _load_pair(args)
    report = evaluate(model, ds.windows(args.split), ds.stats)
    out = _output_dir(args)
    write_csv(out / "metrics.csv", ["step", "mae", "rmse", "mape"], _metric_rows(report))
    _say(args, f"{args.split} mae={_fmt(report.mae)} rmse={_fmt(report.rmse)} mape={_fmt(report.mape)}")
    return 0


def cmd_predict(args) -> int:
    model, ds = _load_pair(args)
    windows = ds.windows(args.split)
    if not -len(windows) <= args.index < len(windows):
        raise UsageError(f"--index {args.index} outside the {len(windows)} {args.split} windows")
    X, _, dow, tod = windows.batch([args.index])
    pred = ds.stats.inverse(model.predict(X, dow, tod).data[0])
    rows = [
        (q + 1, vid, c, pred[q, n, c])
        for q in range(pred.shape[0])
        for n, vid in enumerate(ds.vertex_ids)
        for c in range(pred.shape[2])
    ]
    out = _output_dir(args)
    write_csv(out / "predictions.csv", ["step", "vertex_id", "channel", "value"], rows)
    _say(args, f"wrote {len(rows)} predictions to {out / 'predictions.csv'}")
    return 0


def cmd_ablate(args) -> int:
    _require(args.data)
    ds = load_dataset(args.data)
    seeds = args.seeds or [args.seed]
    result = run_ablation(
        ds, _model_overrides(args, ds), _train_config(args, seeds[0]), seeds, args.variants, _embed_config(args)
    )
    out = _output_dir(args)
    write_csv(out / "ablation.csv", ["variant", "step", "mae"], result.rows())
    for v in result.variants:
        _say(args, f"{v} mean_mae={_fmt(result.mean_step_mae(v).mean())}")
    return 0


def cmd_fault(args) -> int:
    model, ds = _load_pair(args)
    bad = [e for e in args.etas if not 0.0 <= e <= 1.0]
    if bad:
        raise UsageError(f"eta values must lie in [0, 1], got {bad}")
    curve = run_fault_experiment(model, ds.windows(args.split), ds.stats, args.etas, args.seed)
    out = _output_dir(args)
    write_csv(out / "fault.csv", ["eta", "mae", "rmse", "mape"], [(e, r.mae, r.rmse, r.mape) for e, r in curve])
    for e, r in curve:
        _say(args, f"eta={_fmt(e)} mae={_fmt(r.mae)}")
    return 0


def cmd_gradcheck(args) -> int:
    report = model_gradient_check(min_coords=args.coords, seed=args.seed)
    err = report["max_rel_error"]
    n = len(report["checked"])
    _say(args, f"checked={n} skipped={report['skipped']} max_rel_error={_fmt(err)}")
    if n < args.coords or not err < args.tolerance:
        print(f"stforecast: error: NumericError: gradient check failed (max relative error {_fmt(err)})", file=sys.stderr)
        return 3
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "fault": cmd_fault,
    "gradcheck": cmd_gradcheck,
}


def _diagnostic(kind: str, message) -> str:
    return f"stforecast: error: {kind}: " + " ".join(str(message).split())


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(argv)
        with warnings.catch_warnings():
            if args.quiet:
                warnings.simplefilter("ignore")
            return COMMANDS[args.command](args)
    except ForecastError as exc:
        print(_diagnostic(type(exc).__name__, exc), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(_diagnostic("DataError", exc), file=sys.stderr)
        return DataError.exit_code
    except (FloatingPointError, OverflowError) as exc:
        print(_diagnostic("NumericError", exc), file=sys.stderr)
        return 3
    except ValueError as exc:
        print(_diagnostic("UsageError", exc), file=sys.stderr)
        return UsageError.exit_code

"""Command-line entry point.

Every command shares ``--config FILE``, repeatable ``--set key=value``,
``--threads K`` and ``--out DIR``. Artifacts land in ``DIR/graphs``,
``DIR/checkpoints``, ``DIR/logs`` and ``DIR/reports``; each run also writes
``DIR/manifest_<command>.json``.

Exit codes: 0 success, 1 failed check or other library error, 2 missing
file, 3 invalid configuration, 4 numerical failure. Errors are reported on
stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RunConfig, load_run_config
from .errors import (
    ArgumentError,
    BaselineError,
    CheckpointError,
    ConfigError,
    NumericsError,
    ParseError,
    PvcgnError,
)
from .evaluation import evaluate, format_table, ha_predictions, write_report_csv
from .graphs import GraphTriple
from .ingest import RidershipTensor, split_by_dates, zscore_invert
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .od import OdSchema, build_complete, build_incomplete, build_od_dataset, od_evaluate, od_model_config
from .pipeline import (
    build_graphs,
    load_data,
    model_config,
    samples_for,
    slice_spec,
    span_strings,
    spans_from_strings,
    split_spans,
    station_data,
    stats_dict,
    stats_from,
    train_config,
)
from .synthetic import SynthProfile, gen_synthetic
from .train import blas_threads, grad_check, normalized_arrays, predict_normalized, train

log = logging.getLogger("pvcgn")

EXIT_FAILED = 1
EXIT_MISSING = 2
EXIT_CONFIG = 3
EXIT_NUMERICS = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors are configuration errors
        raise ConfigError(message)


def code_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


class Run:
    """Resolved configuration plus the fixed output layout of one command."""

    def __init__(self, command: str, args: argparse.Namespace, argv: Sequence[str]) -> None:
        self.command = command
        self.args = args
        self.argv = list(argv)
        overrides = list(args.set)
        # command-specific shorthands for config keys
        if getattr(args, "select", None):
            overrides += [f"sim_select={args.select}", f"corr_select={args.select}"]
        if getattr(args, "topology", None):
            overrides.append(f"topology={args.topology}")
        self.cfg: RunConfig = load_run_config(args.config, overrides)
        self.out = Path(args.out)
        self.graph_hash: str | None = None
        self.extra: dict = {}

    def dir(self, name: str) -> Path:
        path = self.out / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    def load_graphs(self) -> GraphTriple:
        graphs = GraphTriple.load(self.out / "graphs")
        self.graph_hash = graphs.hash
        return graphs

    def write_manifest(self) -> None:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "graph_hash": self.graph_hash,
            "code_version": {"package": __version__, "source_sha256": code_digest()},
            "environment": {"python": platform.python_version(), "numpy": np.__version__},
            **self.extra,
        }
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / f"manifest_{self.command}.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)


def cmd_gen_synth(run: Run) -> int:
    a = run.args
    profile = SynthProfile.read(a.profile) if a.profile else SynthProfile()
    seed = run.cfg.seed if a.seed is None else a.seed
    data = gen_synthetic(a.stations, a.days, seed, profile)
    data.save(run.dir("data"))
    run.extra = {"synthetic": {"stations": a.stations, "days": a.days, "seed": seed}}
    print(f"wrote {len(data.trips)} trips for {a.stations} stations over {a.days} days to {run.out / 'data'}")
    return 0


def cmd_build_graphs(run: Run) -> int:
    bundle = load_data(run.cfg)
    if run.args.tensor:
        tensor = RidershipTensor.load(run.args.tensor)
        if tensor.N != bundle.tensor.N:
            raise ConfigError(f"tensor has {tensor.N} stations, station index has {bundle.tensor.N}")
        bundle.tensor = tensor
    gdir = run.dir("graphs")
    graphs = build_graphs(bundle, run.cfg, cache_dir=gdir / "dtw_cache")
    graphs.save(gdir)
    run.graph_hash = graphs.hash
    edges = {k: len(graphs.by_code(k).edges) for k in "psc"}
    print(f"graphs written to {gdir}: edges p={edges['p']} s={edges['s']} c={edges['c']} hash={graphs.hash[:12]}")
    return 0


def _print_epoch(rec) -> None:
    print(f"epoch {rec.epoch:4d}  lr {rec.lr:.1e}  train_mae {rec.train_mae:.4f}  val_mae {rec.val_mae:.4f}", flush=True)


def cmd_train(run: Run) -> int:
    cfg = run.cfg
    bundle = load_data(cfg)
    graphs = run.load_graphs()
    data = station_data(bundle, cfg)
    mcfg = model_config(cfg, bundle.tensor.N)
    result = train(data.split, graphs, mcfg, train_config(cfg), data.stats, progress=None if run.args.quiet else _print_epoch)
    result.write_log(run.dir("logs") / "train.csv")
    meta = {
        "kind": "station",
        "stats": stats_dict(data.stats),
        "spans": span_strings(data.spans),
        "n": cfg.n,
        "m": cfg.m,
        "best_epoch": result.best_epoch,
        "run_config": cfg.to_dict(),
    }
    path = run.dir("checkpoints") / "model.pvc"
    save_checkpoint(path, result.params, mcfg, graphs.hash, meta, cfg.precision)
    print(f"best epoch {result.best_epoch} val_mae {result.log[result.best_epoch].val_mae:.4f}; checkpoint {path}")
    return 0


def _checkpoint(run: Run, default: str, kind: str):
    graphs = run.load_graphs()
    ckpt = load_checkpoint(run.args.checkpoint or run.out / "checkpoints" / default, graphs)
    if ckpt.meta.get("kind") != kind:
        raise CheckpointError(f"checkpoint holds a {ckpt.meta.get('kind')!r} model, expected {kind!r}")
    return graphs, ckpt


def _station_eval_inputs(run: Run):
    graphs, ckpt = _checkpoint(run, "model.pvc", "station")
    cfg = run.cfg
    bundle = load_data(cfg)
    spans = spans_from_strings(ckpt.meta["spans"])
    split = split_by_dates(bundle.tensor, *spans, n=ckpt.meta["n"], m=ckpt.meta["m"])
    samples = samples_for(split, run.args.split)
    stats = stats_from(ckpt.meta["stats"])
    x, _ = normalized_arrays(samples, stats)
    pred = predict_normalized(ckpt.params, graphs, ckpt.config, x)
    return bundle, spans, samples, stats, pred, ckpt


def cmd_eval(run: Run) -> int:
    bundle, spans, samples, stats, pred, ckpt = _station_eval_inputs(run)
    cfg = run.cfg
    spec = slice_spec(cfg, run.args.slice)
    train_tensor = bundle.tensor.select_dates(*spans[0])
    common = dict(spec=spec, tensor=bundle.tensor, train_tensor=train_tensor, mape_floor=cfg.mape_floor)
    reports = [evaluate(pred, samples, stats, method="pvcgn", **common)]
    try:
        ha = ha_predictions(bundle.tensor, samples, ckpt.meta["m"], cfg.ha_k)
        reports.append(evaluate(ha, samples, None, method=f"ha{cfg.ha_k}", **common))
    except BaselineError as exc:
        log.warning("historical average skipped: %s", exc)
    stem = f"eval_{run.args.split}_{spec.label}"
    rdir = run.dir("reports")
    write_report_csv(rdir / f"{stem}.csv", reports)
    table = format_table(reports, bin_minutes=bundle.tensor.bin_minutes)
    (rdir / f"{stem}.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_predict(run: Run) -> int:
    bundle, _, samples, stats, pred, _ = _station_eval_inputs(run)
    counts = zscore_invert(pred, stats)
    path = run.dir("reports") / f"predict_{run.args.split}.csv"
    names = bundle.index.names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "station", "horizon", "inflow_pred", "outflow_pred"])
        for s, sample in enumerate(samples):
            for h in range(counts.shape[1]):
                t = sample.t_anchor + 1 + h
                for i, name in enumerate(names):
                    w.writerow([t, name, h + 1, repr(float(counts[s, h, i, 0])), repr(float(counts[s, h, i, 1]))])
    print(f"wrote {len(samples) * counts.shape[1] * len(names)} predictions to {path}")
    return 0


GRAD_TOLERANCES = {"mse": 1e-6, "mae": 1e-4}


def cmd_grad_check(run: Run) -> int:
    a = run.args
    seed = run.cfg.seed if a.seed is None else a.seed
    losses = ("mse", "mae") if a.loss == "both" else (a.loss,)
    mcfg = ModelConfig(n_stations=a.stations, d=a.d, layers=run.cfg.layers, horizon=2)
    lines, ok = [], True
    for loss in losses:
        tol = GRAD_TOLERANCES[loss] if a.tol is None else a.tol
        rep = grad_check(mcfg, seed=seed, h=a.h, tol=tol, loss=loss, n_coords=a.coords, n=2)
        lines.append(rep.line())
        ok &= rep.passed
    text = "\n".join(lines) + "\n"
    (run.dir("reports") / "grad_check.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0 if ok else EXIT_FAILED


def cmd_od_train(run: Run) -> int:
    cfg = run.cfg
    bundle = load_data(cfg)
    graphs = run.load_graphs()
    spans = split_spans(bundle.tensor, cfg)
    od = build_od_dataset(bundle.trips, bundle.tensor, spans[0])
    split = od.split(*spans, n=cfg.n, m=cfg.m)
    in_stats, out_stats = od.fit_stats(spans[0])
    mcfg = od_model_config(
        bundle.tensor.N, d=cfg.d, layers=cfg.layers, horizon=cfg.m, graphs=cfg.graphs,
        use_global=cfg.use_global, global_recurrence=cfg.global_recurrence,
    )
    result = train(split, graphs, mcfg, train_config(cfg), in_stats, out_stats, progress=None if run.args.quiet else _print_epoch)
    cdir = run.dir("checkpoints")
    od.schema.save(cdir / "od_schema.json")
    result.write_log(run.dir("logs") / "od_train.csv")
    meta = {
        "kind": "od",
        "input_stats": stats_dict(in_stats),
        "target_stats": stats_dict(out_stats),
        "spans": span_strings(spans),
        "n": cfg.n,
        "m": cfg.m,
        "best_epoch": result.best_epoch,
        "schema": od.schema.to_json(),
        "run_config": cfg.to_dict(),
    }
    save_checkpoint(cdir / "od_model.pvc", result.params, mcfg, graphs.hash, meta, cfg.precision)
    print(f"best epoch {result.best_epoch}; checkpoint {cdir / 'od_model.pvc'}")
    return 0


def cmd_od_eval(run: Run) -> int:
    graphs, ckpt = _checkpoint(run, "od_model.pvc", "od")
    bundle = load_data(run.cfg)
    spans = spans_from_strings(ckpt.meta["spans"])
    schema = OdSchema.from_json(ckpt.meta["schema"])
    inputs = build_incomplete(bundle.trips, schema, bundle.tensor)
    targets = build_complete(bundle.trips, schema, bundle.tensor)
    split = split_by_dates(bundle.tensor, *spans, n=ckpt.meta["n"], m=ckpt.meta["m"], inputs=inputs, targets=targets)
    samples = samples_for(split, run.args.split)
    in_stats, out_stats = stats_from(ckpt.meta["input_stats"]), stats_from(ckpt.meta["target_stats"])
    x, _ = normalized_arrays(samples, in_stats, out_stats)
    pred = predict_normalized(ckpt.params, graphs, ckpt.config, x)
    report = od_evaluate(pred, samples, out_stats, method="pvcgn-od")
    stem = f"od_eval_{run.args.split}"
    rdir = run.dir("reports")
    write_report_csv(rdir / f"{stem}.csv", [report])
    table = format_table([report], bin_minutes=bundle.tensor.bin_minutes)
    (rdir / f"{stem}.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "grad-check": cmd_grad_check,
    "od-train": cmd_od_train,
    "od-eval": cmd_od_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--threads", type=int, default=None, help="BLAS worker threads (results do not depend on it)")
    common.add_argument("--out", default="run", help="output directory (default: ./run)")
    common.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")

    parser = _Parser(prog="pvcgn", description="Metro ridership forecasting with physical and virtual station graphs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic AFC dataset")
    p.add_argument("--stations", type=int, default=10)
    p.add_argument("--days", type=int, default=14)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--profile", help="key=value file with generator settings")

    p = sub.add_parser("build-graphs", parents=[common], help="build physical, similarity and correlation graphs")
    p.add_argument("--topology", help="CSV of undirected src,dst station pairs (overrides config)")
    p.add_argument("--tensor", help="RGT1 ridership tensor for the similarity graph (default: bin the records)")
    p.add_argument("--select", help="edge rule for both virtual graphs, topk:K or thresh:T")
    sub.add_parser("train", parents=[common], help="train the station-level model")

    for name, helptext in (("eval", "score a checkpoint"), ("predict", "write forecasts in counts")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", help="default: OUT/checkpoints/model.pvc")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name == "eval":
            p.add_argument("--slice", default="whole", choices=("whole", "rush", "top25"))

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the gradients")
    p.add_argument("--stations", type=int, default=6)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--loss", default="both", choices=("mse", "mae", "both"))
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=None)

    sub.add_parser("od-train", parents=[common], help="train the origin-destination model")
    p = sub.add_parser("od-eval", parents=[common], help="score an origin-destination checkpoint")
    p.add_argument("--checkpoint", help="default: OUT/checkpoints/od_model.pvc")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    return parser


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run = Run(args.command, args, argv)
        with blas_threads(args.threads):
            code = COMMANDS[args.command](run)
        run.write_manifest()
        return code
    except FileNotFoundError as exc:
        return _fail(exc, EXIT_MISSING)
    except (ConfigError, ArgumentError, ParseError, CheckpointError) as exc:
        return _fail(exc, EXIT_CONFIG)
    except (NumericsError, FloatingPointError) as exc:
        return _fail(exc, EXIT_NUMERICS)
    except PvcgnError as exc:
        return _fail(exc, EXIT_FAILED)


if __name__ == "__main__":
    sys.exit(main())

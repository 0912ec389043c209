"""Command-line entry point.

Every failure ends with one JSON line on stderr, e.g.
``{"error": "schema", "pointer": "/train/lr", "message": "..."}``.

Exit codes: 0 success, 1 run failure (non-finite loss, failed gradient
check), 2 usage error, 3 invalid configuration or missing prerequisite,
4 output directory locked, 5 unreadable checkpoint.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from .config import SEED_ENV, ConfigError, RunConfig, fullscale_preset, schema
from .corpus import generate_corpus
from .probe import grad_check_all, linear_probe
from .training import MissingPrerequisite, ModelState, TrainingError, run_stage, slice_embeddings, volume_embeddings

log = logging.getLogger("vcsl")

CHECKPOINT = "checkpoint.vcsl"
METRICS = "metrics.jsonl"
LOCK = ".vcsl.lock"
METRIC_FIELDS = ("stage", "epoch", "loss", "wall_ms", "seed")

FULLSCALE_PRESET_ROWS = [
    ("prototypes H", "3000", "12"),
    ("attention blocks N", "4", "4"),
    ("heads Nh", "6", "2"),
    ("offset groups", "6", "1"),
    ("sequence length D", "640", "32"),
    ("feature width F", "64", "32"),
    ("batch (slices / volumes)", "1024 / 12", "64 / 12"),
    ("epochs per stage", "100", "50"),
]


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.message = message
        self.extra = extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        sys.exit(2)


def _emit_error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


@contextlib.contextmanager
def _lock(directory: str):
    """Exclusive claim on an output directory for the lifetime of one run."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, LOCK)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        owner = ""
        with contextlib.suppress(OSError):
            owner = open(path, encoding="utf-8").read().strip()
        raise CliError(4, "locked", f"{directory} is locked by another run (pid {owner or 'unknown'}); "
                                    f"remove {path} if that run is gone") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(path)


def _resolve(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config).apply_env()
        if getattr(args, "seed", None) is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as err:
        raise CliError(3, "schema", err.message, pointer=err.pointer) from err
    except OSError as err:
        raise CliError(3, "config", f"cannot read config: {err}") from err
    return cfg


def _log_resolved(command: str, cfg: RunConfig) -> None:
    seeds = {"train": cfg.seed, "corpus": cfg.doc["corpus"]["seed"], "probe": cfg.doc["probe"]["seed"],
             "env_override": os.environ.get(SEED_ENV)}
    log.info(json.dumps({"event": "resolved", "command": command, "seeds": seeds, "config": cfg.doc},
                        sort_keys=True))


def _new_state(cfg: RunConfig) -> ModelState:
    return ModelState.create(cfg.encoder(), cfg.attention(), cfg.clusters, cfg.seed,
                             separate_3d_prototypes=cfg.doc["losses"]["separate_3d_prototypes"])


def _load_state(cfg: RunConfig, directory: str) -> tuple[ModelState, dict]:
    path = os.path.join(directory, CHECKPOINT)
    try:
        header, arrays = ckpt.load(path)
        state = _new_state(cfg)
        ckpt.restore(state, header, arrays)
    except FileNotFoundError:
        raise
    except (ckpt.CheckpointError, OSError, KeyError) as err:
        raise CliError(5, "checkpoint", f"{path}: {err}") from err
    return state, header


def _read_metrics(directory: str) -> list[dict]:
    path = os.path.join(directory, METRICS)
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _metric_line(record: dict) -> str:
    return json.dumps({k: record[k] for k in METRIC_FIELDS}, sort_keys=True)


# commands -------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = _resolve(args)
    _log_resolved("gen-corpus", cfg)
    with _lock(args.out):
        corpus = generate_corpus(cfg.corpus())
        path = os.path.join(args.out, "corpus.npz")
        np.savez(path, volumes=corpus.volumes, dataset=corpus.dataset, labels=corpus.labels)
    print(json.dumps({"path": path, "volumes": len(corpus), "shape": list(corpus.volumes.shape),
                      "datasets": np.bincount(corpus.dataset).tolist()}, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    _log_resolved("pretrain", cfg)
    stage = args.stage
    with _lock(args.out):
        path = os.path.join(args.out, CHECKPOINT)
        if stage == 1 or (args.cold_start and not os.path.exists(path)):
            state = _new_state(cfg)
        else:
            try:
                state, header = _load_state(cfg, args.out)
            except FileNotFoundError:
                needed = [1] if stage == 2 else [1, 2]
                raise CliError(3, "missing-prerequisite",
                               f"stage {stage} requires completed stage(s) {needed}: no checkpoint at {path}",
                               stage=stage, missing=needed) from None
            if header["corpus_seed"] != cfg.doc["corpus"]["seed"]:
                raise CliError(3, "config", "corpus seed differs from the checkpoint's "
                                            f"({cfg.doc['corpus']['seed']} vs {header['corpus_seed']})")
        corpus = generate_corpus(cfg.corpus())
        # keep only the lineage that leads to this stage
        kept = [r for r in _read_metrics(args.out) if r["stage"] < stage]
        metrics_path = os.path.join(args.out, METRICS)
        with open(metrics_path, "w", encoding="utf-8") as fh:
            for r in kept:
                fh.write(_metric_line(r) + "\n")
            fh.flush()

            def on_epoch(record):
                fh.write(_metric_line(record) + "\n")
                fh.flush()

            try:
                records = run_stage(stage, state, corpus.unlabeled(), cfg.train(), cfg.losses(),
                                    cold_start=args.cold_start, on_epoch=on_epoch)
            except MissingPrerequisite as err:
                missing = sorted({1: set(), 2: {1}, 3: {1, 2}}[stage] - state.completed)
                raise CliError(3, "missing-prerequisite", str(err), stage=stage, missing=missing) from err
            except TrainingError as err:
                raise CliError(1, "training", str(err)) from err
        ckpt.save(path, state, cfg.to_dict(), cfg.doc["corpus"]["seed"])
    summary = {"stage": stage, "epochs": len(records), "checkpoint": path, "metrics": metrics_path}
    if records:
        summary.update(first_loss=records[0]["loss"], final_loss=records[-1]["loss"])
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_probe(args) -> int:
    cfg = _resolve(args)
    _log_resolved("probe", cfg)
    try:
        state, _ = _load_state(cfg, args.out)
    except FileNotFoundError:
        raise CliError(3, "missing-prerequisite", f"probe needs a checkpoint at {os.path.join(args.out, CHECKPOINT)}",
                       missing=[1]) from None
    corpus = generate_corpus(cfg.corpus())
    p = cfg.doc["probe"]
    reports = []
    for source in (["volume", "slice"] if args.source == "both" else [args.source]):
        if source == "volume":
            emb, labels = volume_embeddings(state, corpus.volumes), corpus.labels
        else:
            emb = slice_embeddings(state, corpus.volumes)
            labels = np.repeat(corpus.labels, corpus.volumes.shape[1])
        reports.append(linear_probe(emb, labels, seed=p["seed"], source=source, epochs=p["epochs"], lr=p["lr"],
                                    weight_decay=p["weight_decay"]))
    with open(os.path.join(args.out, "probe.json"), "w", encoding="utf-8") as fh:
        json.dump([json.loads(r.to_json()) for r in reports], fh, indent=2, sort_keys=True)
    for r in reports:
        print(r.to_json())
    return 0


def cmd_grad_check(args) -> int:
    cfg = _resolve(args)
    _log_resolved("grad-check", cfg)
    report = grad_check_all(seed=cfg.seed, tol=args.tol, max_coords=args.max_coords)
    for line in report.lines():
        print(line)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    if not report.passed:
        names = ", ".join(f"{e.loss}/{e.group}" for e in report.failures())
        raise CliError(1, "grad-check", f"gradient check failed for {names}")
    return 0


def cmd_export_metrics(args) -> int:
    records = _read_metrics(args.out)
    if not records:
        raise CliError(3, "missing-prerequisite", f"no metrics in {os.path.join(args.out, METRICS)}")
    buf = io.StringIO()
    if args.format == "csv":
        writer = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow({k: r[k] for k in METRIC_FIELDS})
    else:
        for r in records:
            buf.write(_metric_line(r) + "\n")
    if args.dest:
        with open(args.dest, "w", encoding="utf-8") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_info(args) -> int:
    if args.json:
        print(json.dumps({"version": __version__, "schema": schema(), "fullscale_preset": fullscale_preset()},
                         indent=2, sort_keys=True))
        return 0
    print(f"vcsl {__version__}")
    print()
    print("config schema (section.key = default  [constraint]):")
    for section, keys in schema().items():
        for key, entry in keys.items():
            rule = f"  [{entry['constraint']}]" if "constraint" in entry else ""
            print(f"  {section}.{key} = {json.dumps(entry['default'])}{rule}")
    print()
    print("full-scale preset (reference only, not exercised by tests):")
    print(f"  {'setting':<26}{'full scale':>12}{'desk default':>15}")
    for name, full, desk in FULLSCALE_PRESET_ROWS:
        print(f"  {name:<26}{full:>12}{desk:>15}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vcsl", description="Joint slice/volume self-supervised pre-training on synthetic volumes.")
    parser.add_argument("--version", action="version", version=f"vcsl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out=True, seed=True):
        p.add_argument("--config", help="JSON run configuration (defaults apply to missing keys)")
        if out:
            p.add_argument("--out", default="run", help="run directory (default: ./run)")
        if seed:
            p.add_argument("--seed", type=int, help=f"override the training seed (after {SEED_ENV})")

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="run one training stage")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--cold-start", action="store_true", help="allow a stage without its prerequisites")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on frozen embeddings")
    common(p)
    p.add_argument("--source", choices=("volume", "slice", "both"), default="volume")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("grad-check", help="finite-difference check of every loss on a toy model")
    common(p, out=False)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=None, help="cap checked coordinates per tensor")
    p.add_argument("--json", help="also write the report here")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-metrics", help="export the metric stream of a run")
    p.add_argument("--out", default="run", help="run directory (default: ./run)")
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--dest", help="output file (default: stdout)")
    p.set_defaults(func=cmd_export_metrics)

    p = sub.add_parser("info", help="version, config schema and full-scale preset")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s", force=True)
    # the resolved-config line is always shown
    log.setLevel(logging.INFO)
    logging.getLogger("vcsl.training").setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except CliError as err:
        _emit_error(err.kind, err.message, **err.extra)
        return err.code
    except (ValueError, RuntimeError, OSError) as err:
        _emit_error("failure", f"{type(err).__name__}: {err}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

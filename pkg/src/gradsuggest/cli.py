"""Command-line entry point: ``gradsuggest <subcommand> [flags]``.

Exit codes: 0 success, 1 domain error (bad data, exhausted pool, corrupt
file, ...), 2 usage error. Diagnostics go to stderr; data goes to files or
stdout.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .data import generate_phantom_dataset, io as data_io, read_dataset, write_dataset
from .exceptions import ConfigError, ContractViolation, GradSuggestError, PoolExhaustedError
from .harness import ExperimentConfig, emit_report, load_config, read_csv, run_experiment, summarize
from .harness.config import parse_value
from .harness.report import CSV_NAME
from .models import checkpoint, init_unet, init_vae, load_model, save_model, train_segmenter, train_vae
from .models.unet import SegModel
from .models.vae import VaeModel
from .sampling import (
    METHODS,
    STRATEGIES,
    build_latent_index,
    suggest_gradient_guided,
    suggest_oracle,
    suggest_random,
    write_suggestions,
)

log = logging.getLogger("gradsuggest")

class UsageError(Exception):
    pass

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")

def _print_resolved(args, skip=("func", "command", "verbose")):
    for key, value in sorted(vars(args).items()):
        if key not in skip:
            print(f"# {key} = {value}", file=sys.stderr)

# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    ds = generate_phantom_dataset(
        args.seed, args.patients, args.slices, args.site, args.size, args.size, n_test=args.test_patients
    )
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} slices for {len(ds.patients())} patients to {args.out}", file=sys.stderr)

def _read_ids(path) -> list:
    ids = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            ids.append(line)
    return ids

def _slice_ids_for(ds, ids):
    out = []
    for i in ids:
        if i in ds:
            out.append(i)
        else:
            out.extend(s.sample_id for s in ds.slices(i))
    return out

def cmd_train_vae(args):
    ds = read_dataset(args.data)
    ids = ds.sample_ids(ds.patients(args.split))
    model = init_vae(ds.image_shape, args.latent_dim, seed=args.seed)
    model, hist = train_vae(model, ds.images(ids), args.epochs, args.lr, seed=args.seed)
    save_model(model, args.out)
    for epoch, loss in enumerate(hist, 1):
        print(f"{epoch}\t{loss!r}")

def cmd_train_seg(args):
    ds = read_dataset(args.data)
    ids = _slice_ids_for(ds, _read_ids(args.ids)) if args.ids else ds.sample_ids(ds.patients(args.split))
    if args.init:
        model = load_model(args.init)
        if not isinstance(model, SegModel):
            raise ContractViolation(f"{args.init} is not a segmenter checkpoint")
    else:
        model = init_unet(args.base_channels, args.depth, seed=args.seed)
    model, hist = train_segmenter(model, ds.images(ids), ds.masks(ids), args.epochs, args.lr, seed=args.seed)
    save_model(model, args.out)
    for epoch, loss in enumerate(hist, 1):
        print(f"{epoch}\t{loss!r}")

def cmd_suggest(args):
    ds = read_dataset(args.data)
    annotated = _read_ids(args.annotated) if args.annotated else []
    annotated_slices = set(_slice_ids_for(ds, annotated))
    train = ds.patients("train")
    if args.strategy == "patient":
        annotated_units = sorted({ds[s].patient_id for s in annotated_slices})
        pool_units = [p for p in train if p not in annotated_units]
        pool_samples = [s for p in pool_units for s in ds.slices(p)]
    else:
        annotated_units = sorted(annotated_slices)
        pool_units = [s for s in ds.sample_ids(train) if s not in annotated_slices]
        pool_samples = [ds[s] for s in pool_units]
    if args.m > len(pool_units):
        raise PoolExhaustedError(
            f"pool holds {len(pool_units)} {args.strategy} units but --m {args.m} were requested "
            f"(short by {args.m - len(pool_units)})",
            shortfall=args.m - len(pool_units),
        )
    if args.method == "random":
        result = suggest_random(pool_units, args.m, args.seed, args.strategy)
    else:
        if not args.seg:
            raise ContractViolation(f"--seg is required for method {args.method}")
        seg = load_model(args.seg)
        if not isinstance(seg, SegModel):
            raise ContractViolation(f"{args.seg} is not a segmenter checkpoint")
        if args.method == "oracle":
            result = suggest_oracle(seg, pool_samples, args.m, args.strategy)
        else:
            if not args.vae:
                raise ContractViolation("--vae is required for method gradient")
            vae = load_model(args.vae)
            if not isinstance(vae, VaeModel):
                raise ContractViolation(f"{args.vae} is not a VAE checkpoint")
            index = build_latent_index(vae, pool_samples, args.strategy)
            sources = [ds[s] for s in sorted(annotated_slices)]
            result = suggest_gradient_guided(
                seg, vae, sources, index, args.m, args.alpha, args.theta_max, args.strategy
            )
    if args.out:
        write_suggestions(result, args.out)
    else:
        print(f"# method={result.method} strategy={result.strategy} fallbacks={result.fallback_count}")
        for sid in result.selected_ids:
            print(sid)

_CONFIG_FIELDS = [f.name for f in fields(ExperimentConfig)]

def cmd_run(args):
    overrides = {}
    for name in _CONFIG_FIELDS:
        raw = getattr(args, name)
        if raw is not None:
            overrides[name] = parse_value(name, raw)
    config = load_config(args.config, **overrides)
    print("# resolved config", file=sys.stderr)
    for line in config.to_text().splitlines():
        print(f"#   {line}", file=sys.stderr)
    print(f"#   jobs = {args.jobs}", file=sys.stderr)
    reports = run_experiment(config, jobs=args.jobs)
    paths = emit_report(reports, args.out, timings=config.record_timing)
    for row in summarize(reports):
        print(f"{row['scenario']}\t{row['strategy']}\t{row['method']}\t{row['budget']}\t{row['mean']:.4f}\t{row['std']:.4f}")
    for p in paths:
        print(f"wrote {p}", file=sys.stderr)

def cmd_report(args):
    reports = read_csv(args.csv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if Path(args.csv).resolve() == (out / CSV_NAME).resolve():
        raise ConfigError("--out must differ from the directory holding the input CSV")
    for p in emit_report(reports, out, timings=True):
        print(f"wrote {p}", file=sys.stderr)
    for row in summarize(reports):
        print(f"{row['scenario']}\t{row['strategy']}\t{row['method']}\t{row['budget']}\t{row['mean']:.4f}\t{row['std']:.4f}")

# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradsuggest", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--version", action="version",
        version=f"gradsuggest {__version__} (dataset format GGAS v{data_io.VERSION}, checkpoint format GGMD v{checkpoint.VERSION})",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a phantom dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=10)
    p.add_argument("--slices", type=int, default=8)
    p.add_argument("--site", choices=("A", "B"), default="A")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--test-patients", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vae", help="learn the image manifold")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--latent-dim", type=int, default=5)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-seg", help="train the segmenter on annotated slices")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", help="file of sample or patient ids to train on (default: whole split)")
    p.add_argument("--init", help="segmenter checkpoint to fine-tune")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("suggest", help="suggest unannotated units for annotation")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default="image")
    p.add_argument("--annotated", help="file of already-annotated sample or patient ids")
    p.add_argument("--seg", help="segmenter checkpoint")
    p.add_argument("--vae", help="VAE checkpoint")
    p.add_argument("--alpha", type=float, default=1e-4)
    p.add_argument("--theta-max", type=float, default=45.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="suggestion list file (default: stdout)")
    p.set_defaults(func=cmd_suggest)

    p = sub.add_parser("run", help="run an annotation-budget experiment")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", default="results")
    p.add_argument("--jobs", type=int, default=1)
    for name in _CONFIG_FIELDS:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None, metavar=name.upper())
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-render charts from a results CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser

def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "run":
        _print_resolved(args)
    try:
        args.func(args)
    except GradSuggestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0

if __name__ == "__main__":
    sys.exit(main())

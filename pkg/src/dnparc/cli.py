"""Command-line entry point: ``dnparc <subcommand> ...``.

Exit codes: 0 success, 1 invalid input (including bad flags), 2 runtime or
training failure. Every run writes a ``*.manifest.json`` next to its output.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__, io
from .annotation import annotate
from .baselines import flat_nmf_parcellate
from .cae import pretrain
from .dnmfc import TrainConfig, parcellate
from .errors import (DegenerateClusterError, InvalidInputError, TrainingFailureError,
                     UndefinedMetricError)
from .metrics import evaluate
from .pipeline import METHODS, compare, fit, load_cae, load_cohort, load_model, sweep_k
from .synth import CohortSpec, write_cohort

log = logging.getLogger("dnparc")

DEFAULT_SEED = 0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_training_flags(p, with_method=True):
    if with_method:
        p.add_argument("--method", choices=("dnmfc", "dcec"), default="dnmfc")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.001)
    p.add_argument("--update-interval", type=int, default=140)
    p.add_argument("--max-steps", type=int, default=20000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)


def _config(args, epochs=200):
    return TrainConfig(K=args.k, gamma=args.gamma, delta=args.delta,
                       pretrain_epochs=getattr(args, "epochs", epochs),
                       update_interval=args.update_interval, max_steps=args.max_steps,
                       batch_size=args.batch_size, seed=args.seed, lr=args.lr)


def build_parser():
    parser = _Parser(prog="dnparc", description="Connectivity-based voxel parcellation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic cohort directory")
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--dims", type=int, nargs=3, default=[24, 24, 24])
    p.add_argument("--parcels", type=int, default=3)
    p.add_argument("--jitter", type=float, default=1.0)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--out", required=True)

    p = sub.add_parser("annotate", help="streamlines + mask -> feature table")
    p.add_argument("--streamlines", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="pretrain the autoencoder on reconstruction loss")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="joint clustering training from a pretrained CAE")
    p.add_argument("--cae", required=True)
    p.add_argument("--features", nargs="+", required=True)
    _add_training_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("parcellate", help="label one subject")
    p.add_argument("--model")
    p.add_argument("--features", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--no-median-filter", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="silhouette, Dice and (optionally) ARI report")
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--truth", nargs="+")
    p.add_argument("--method", default="unknown")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)

    for name, helptext in (("select-k", "sweep K and keep the best mean Dice"),
                           ("compare", "DNMFC vs DCEC vs NMF on one cohort")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--cohort", required=True)
        p.add_argument("--n-train", type=int)
        p.add_argument("--epochs", type=int, default=200)
        _add_training_flags(p, with_method=False)
        if name == "select-k":
            p.add_argument("--kmin", type=int, default=3)
            p.add_argument("--kmax", type=int, default=6)
        p.add_argument("--out", required=True)
    return parser


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args):
    spec = CohortSpec(dims=tuple(args.dims), true_parcel_count=args.parcels, jitter=args.jitter,
                      dropout=args.dropout, point_noise=args.noise, subjects=args.subjects,
                      seed=args.seed)
    manifest = write_cohort(spec, args.out)
    outputs = [str(Path(args.out) / "manifest.json")]
    return {"config": spec.to_dict(), "inputs": [], "outputs": outputs,
            "n_subjects": len(manifest["subjects"])}


def cmd_annotate(args):
    grid = io.read_mask(args.mask)
    table = annotate(io.read_streamlines(args.streamlines), grid)
    io.write_feature_table(args.out, table)
    return {"config": {}, "inputs": [args.streamlines, args.mask], "outputs": [args.out]}


def cmd_pretrain(args):
    tables = [io.read_feature_table(p) for p in args.features]
    model = pretrain(tables, epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
                     lr=args.lr)
    io.write_json(args.out, model.to_dict())
    return {"config": {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr},
            "inputs": args.features, "outputs": [args.out]}


def cmd_train(args):
    cae = load_cae(args.cae)
    tables = [io.read_feature_table(p) for p in args.features]
    config = _config(args, epochs=cae.epochs)
    model = fit(args.method, cae, tables, config)
    io.write_json(args.out, model.to_dict())
    return {"config": {"method": args.method, **config.to_dict()},
            "inputs": [args.cae] + args.features, "outputs": [args.out],
            "subjects": [Path(p).stem for p in args.features],
            "converged": model.converged, "steps": model.steps}


def cmd_parcellate(args):
    table = io.read_feature_table(args.features)
    grid = io.read_mask(args.mask)
    method = args.method
    if method == "nmf":
        labels = flat_nmf_parcellate(table, args.k, args.seed)
        if not args.no_median_filter:
            from .dnmfc import median_filter
            labels = median_filter(labels, grid)
        config = {"method": "nmf", "K": args.k}
    else:
        if not args.model:
            raise InvalidInputError("--model is required unless --method nmf")
        model = load_model(args.model)
        if method and method != model.method:
            raise InvalidInputError(f"--method {method} does not match model ({model.method})")
        labels = parcellate(model, table, grid, apply_filter=not args.no_median_filter)
        config = {"method": model.method, "K": labels.n_labels}
    io.write_label_map(args.out, labels)
    config["median_filter"] = not args.no_median_filter
    inputs = [p for p in (args.model, args.features, args.mask) if p]
    return {"config": config, "inputs": inputs, "outputs": [args.out]}


def cmd_evaluate(args):
    if len(args.labels) != len(args.features):
        raise InvalidInputError("--labels and --features need the same number of files")
    if args.truth and len(args.truth) != len(args.labels):
        raise InvalidInputError("--truth needs one file per label map")
    maps = [io.read_label_map(p) for p in args.labels]
    K = args.k or max(int(m.labels.max()) for m in maps)
    for m in maps:
        m.n_labels = K
    tables = [io.read_feature_table(p) for p in args.features]
    truths = [io.read_label_map(p) for p in args.truth] if args.truth else None
    rep = evaluate(args.method, maps, tables, K, truths=truths,
                   subjects=[Path(p).stem for p in args.labels], seed=args.seed,
                   config={"K": K})
    io.write_json(args.out, rep.to_dict())
    return {"config": {"K": K, "method": args.method},
            "inputs": args.labels + args.features + (args.truth or []), "outputs": [args.out]}


def _table_rows(rows, K):
    header = ["method", "S"] + [f"Dice_{k}" for k in range(1, K + 1)] + ["Dice_mean", "ARI"]
    lines = ["\t".join(header)]
    for method, rep in rows.items():
        vals = [method, _fmt(rep.S)] + [_fmt(d) for d in rep.dice_per_parcel]
        vals += [_fmt(rep.dice_mean), _fmt(rep.adjusted_rand)]
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def _fmt(x):
    return "NA" if x is None else f"{x:.4f}"


def cmd_compare(args):
    subjects = load_cohort(args.cohort)
    config = _config(args)
    rows, _ = compare(subjects, config, n_train=args.n_train)
    out = {"K": config.K, "config": config.to_dict(), "cohort": str(args.cohort),
           "methods": {m: r.to_dict() for m, r in rows.items()}}
    io.write_json(args.out, out)
    table_path = str(Path(args.out).with_suffix(".tsv"))
    Path(table_path).write_text(_table_rows(rows, config.K))
    sys.stdout.write(_table_rows(rows, config.K))
    return {"config": config.to_dict(), "inputs": [args.cohort],
            "outputs": [args.out, table_path]}


def cmd_select_k(args):
    subjects = load_cohort(args.cohort)
    config = _config(args)
    best, means, rows = sweep_k(subjects, config, args.kmin, args.kmax, n_train=args.n_train)
    out = {"best_K": best, "dice_mean": {str(k): v for k, v in means.items()},
           "reports": {str(k): r.to_dict() for k, r in rows.items()},
           "config": config.to_dict(), "cohort": str(args.cohort)}
    io.write_json(args.out, out)
    sys.stdout.write(f"best K = {best}\n")
    return {"config": {**config.to_dict(), "kmin": args.kmin, "kmax": args.kmax},
            "inputs": [args.cohort], "outputs": [args.out]}


COMMANDS = {
    "synth": cmd_synth, "annotate": cmd_annotate, "pretrain": cmd_pretrain,
    "train": cmd_train, "parcellate": cmd_parcellate, "evaluate": cmd_evaluate,
    "select-k": cmd_select_k, "compare": cmd_compare,
}


def _manifest_path(args, result):
    if args.command == "synth":
        return Path(args.out) / "run_manifest.json"
    return Path(str(result["outputs"][0]) + ".manifest.json")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"dnparc: {exc}\n")
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        result = COMMANDS[args.command](args)
    except (InvalidInputError, UndefinedMetricError, FileNotFoundError, KeyError) as exc:
        sys.stderr.write(f"dnparc {args.command}: invalid input: {exc}\n")
        return 1
    except (TrainingFailureError, DegenerateClusterError, ArithmeticError, RuntimeError) as exc:
        sys.stderr.write(f"dnparc {args.command}: failed: {exc}\n")
        return 2
    manifest = {
        "subcommand": args.command,
        "config": result.pop("config"),
        "inputs": [str(p) for p in result.pop("inputs")],
        "outputs": [str(p) for p in result.pop("outputs")],
        "seed": getattr(args, "seed", DEFAULT_SEED),
        "version": __version__,
        "duration_s": round(time.perf_counter() - start, 3),
    }
    manifest.update(result)
    io.write_json(_manifest_path(args, {"outputs": manifest["outputs"]}), manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())

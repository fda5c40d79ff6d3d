"""Command-line entry point: ``prepare``, ``train``, ``evaluate``, ``ablate`` and ``sweep``.

Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.
``HMFGCL_DATA_DIR`` sets the default data directory (``./data`` otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from ._blob import sha256_file
from .config import parse_assignments, resolve
from .data import InteractionMatrix, build_matrix, parse_csv, parse_ml100k, subsample_users
from .errors import ConfigError, InputError, NumericalError, SamplingError
from .evaluation import ablate, evaluate, sweep, write_runs_csv
from .model import Checkpoint
from .runs import MANIFEST, now, run_point, write_manifest
from .training import TrainingDiverged

log = logging.getLogger("hmfgcl")


def data_dir() -> Path:
    return Path(os.environ.get("HMFGCL_DATA_DIR", "data"))


def default_matrix() -> Path:
    return data_dir() / "ml-100k.matrix"


def parse_ints(text: str, what: str) -> list:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{what} is empty")
    return values


def require_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    return path


def load_data(path):
    """Matrix plus the dataset description recorded in manifests and metrics."""
    path = require_file(path)
    matrix = InteractionMatrix.load(path)
    digest = sha256_file(path)
    dataset = {"path": str(path), "sha256": digest, "split_hash": matrix.split_hash(),
               "num_users": matrix.num_users, "num_items": matrix.num_items}
    return matrix, dataset, f"{path.stem}@{digest[:12]}"


# -- commands -----------------------------------------------------------------

def cmd_prepare(args) -> int:
    started = now()
    if args.input is not None:
        source = Path(args.input)
    elif args.format == "ml100k":
        source = data_dir() / "ml-100k" / "u.data"
    else:
        raise ConfigError("--input is required for --format csv")
    source = require_file(source)
    if args.format == "ml100k":
        rows = parse_ml100k(source)
    else:
        rows = parse_csv(source, columns=tuple(args.columns.split(",")), delimiter=args.delimiter)
    raw_users = len({r.user_key for r in rows})
    raw_items = len({r.item_key for r in rows})
    if args.users is not None:
        rows = subsample_users(rows, args.users, args.seed)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    matrix = build_matrix(rows, rating_threshold=args.threshold, split_ratios=ratios, seed=args.seed)

    out = Path(args.out) if args.out else (
        default_matrix() if args.format == "ml100k" else data_dir() / f"{source.stem}.matrix")
    out.parent.mkdir(parents=True, exist_ok=True)
    matrix.save(out)
    counts = {name: int(len(matrix.pairs(name)[0])) for name in ("train", "valid", "test")}
    summary = {"raw_users": raw_users, "raw_items": raw_items, "raw_interactions": len(rows),
               "num_users": matrix.num_users, "num_items": matrix.num_items, "split_sizes": counts,
               "split_hash": matrix.split_hash()}
    write_manifest(out.with_name(out.name + "." + MANIFEST), "prepare", outputs=[out], started=started,
                   input={"path": str(source), "sha256": sha256_file(source), "format": args.format},
                   options={"users": args.users, "seed": args.seed, "threshold": args.threshold,
                            "ratios": list(ratios)},
                   **summary)
    print(json.dumps({"out": str(out), **summary}, indent=2))
    return 0


def cmd_train(args) -> int:
    config, sources = resolve(args.config, args.set, args.seed)
    matrix, dataset, dataset_id = load_data(args.data or default_matrix())
    out_dir = Path(args.out_dir) if args.out_dir else Path("runs") / f"train-{config.hash()}"
    try:
        result = run_point(matrix, config, dataset_id, out_dir, sources, dataset, "train")
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}; last finite epoch {exc.last_finite_epoch}; "
              f"partial loss log kept in {out_dir}", file=sys.stderr)
        return 3
    print(result.report.to_json(), end="")
    log.info("best epoch %d; outputs in %s", result.best_epoch, out_dir)
    return 0


def cmd_evaluate(args) -> int:
    started = now()
    matrix, dataset, dataset_id = load_data(args.data or default_matrix())
    ckpt_path = require_file(args.checkpoint)
    checkpoint = Checkpoint.load(ckpt_path)
    report = evaluate(checkpoint, matrix, args.split, parse_ints(args.ks, "--ks"), dataset_id, args.per_user)
    out = Path(args.out) if args.out else ckpt_path.with_name(f"eval_{args.split}.json")
    body = report.to_dict()
    if report.per_user is not None:
        body["per_user"] = report.per_user
    text = json.dumps(body, indent=2, sort_keys=True) + "\n"
    out.write_text(text, encoding="utf-8")
    write_manifest(out.with_name(out.stem + "." + MANIFEST), "evaluate", outputs=[out], started=started,
                   dataset=dataset, checkpoint={"path": str(ckpt_path), "sha256": sha256_file(ckpt_path)},
                   runtime_s=report.runtime_s)
    print(text, end="")
    return 0


def load_grid(items) -> dict:
    grid = {}
    for item in items:
        if Path(item).is_file():
            data = json.loads(Path(item).read_text(encoding="utf-8"))
            if not isinstance(data, dict):
                raise ConfigError(f"{item}: grid file must be a JSON object of lists")
            grid.update({k: v if isinstance(v, list) else [v] for k, v in data.items()})
        else:
            for key, values in parse_assignments([item]).items():
                grid[key] = [v for v in values.split(",") if v.strip()]
    return grid


def _grid_command(args, name, runner) -> int:
    started = now()
    config, sources = resolve(args.config, args.set, args.seed)
    matrix, dataset, dataset_id = load_data(args.data or default_matrix())
    out = Path(args.out) if args.out else Path(f"{name}.csv")
    runs_dir = Path(args.runs_dir) if args.runs_dir else out.with_name(out.stem + "_runs")
    try:
        rows = runner(matrix, config, dataset_id=dataset_id, jobs=args.jobs, run_dir=runs_dir,
                      sources=sources, dataset=dataset)
    except TrainingDiverged as exc:
        print(f"error: a {name} run diverged: {exc}; per-run logs kept in {runs_dir}", file=sys.stderr)
        return 3
    out.parent.mkdir(parents=True, exist_ok=True)
    write_runs_csv(rows, out)
    write_manifest(out.with_name(out.stem + "." + MANIFEST), name, config=config, sources=sources,
                   outputs=[out], started=started, dataset=dataset, runs_dir=str(runs_dir),
                   runs=[{"label": r.label, "config_hash": r.config.hash()} for r in rows])
    print(out.read_text(encoding="utf-8"), end="")
    return 0


def cmd_ablate(args) -> int:
    seeds = parse_ints(args.seeds, "--seeds") if args.seeds else None

    def runner(matrix, config, **kw):
        return ablate(matrix, config, seeds=seeds, **kw)

    return _grid_command(args, "ablate", runner)


def cmd_sweep(args) -> int:
    grid = load_grid(args.grid)

    def runner(matrix, config, **kw):
        return sweep(matrix, config, grid, args.mode, **kw)

    return _grid_command(args, "sweep", runner)


# -- parser ---------------------------------------------------------------------

def _add_config_flags(p) -> None:
    p.add_argument("--data", help="prepared matrix (default: $HMFGCL_DATA_DIR/ml-100k.matrix)")
    p.add_argument("--config", help="JSON file of TrainConfig keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable, wins over --config")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmfgcl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="parse raw interactions into a split matrix")
    p.add_argument("--input", help="raw file (default: $HMFGCL_DATA_DIR/ml-100k/u.data)")
    p.add_argument("--format", choices=("ml100k", "csv"), default="ml100k")
    p.add_argument("--columns", default="user_id,item_id,rating", help="CSV user,item,rating column names")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--users", type=int, help="keep a random subset of this many users")
    p.add_argument("--threshold", type=float, default=0.0, help="minimum rating kept as an interaction")
    p.add_argument("--ratios", default="0.8,0.1,0.1", help="train,valid,test fractions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common],
                       help="train one model and write checkpoint, loss log, metrics, manifest")
    _add_config_flags(p)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="full-ranking metrics for a checkpoint")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--ks", default="10,20")
    p.add_argument("--per-user", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("ablate", cmd_ablate, "train the four factor variants"),
                                 ("sweep", cmd_sweep, "train one run per hyperparameter grid point")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        _add_config_flags(p)
        p.add_argument("--out", help=f"comparison CSV (default: {name}.csv)")
        p.add_argument("--runs-dir", help="per-run outputs (default: <out>_runs)")
        p.add_argument("--jobs", type=int, default=1, help="runs trained concurrently")
        if name == "ablate":
            p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
        else:
            p.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2|FILE",
                           help="axis values or a JSON grid file; repeatable")
            p.add_argument("--mode", choices=("per-axis", "cartesian"), default="per-axis")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (InputError, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())

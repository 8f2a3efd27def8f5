"""``mfgat`` command line: inspect, train, evaluate, ablate, gradcheck.

Exit codes::

    0  success
    2  usage error (bad flags or config file)
    3  dataset missing or malformed
    4  validation error (feature width, checkpoint/dataset mismatch)
    5  training diverged
    6  gradient check failed

Options may also come from ``--config FILE``: flat ``key=value`` lines whose
keys are flag names without the leading dashes (``views=3``).  Flags given
on the command line override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .datasets import (Dataset, DatasetError, FormatError, MissingInputError, SplitSpec,
                       ValidationError, dataset_stats, parse_tudataset, split_dataset, stats_csv)
from .gradcheck import run_suite
from .model import ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .training import (DivergenceError, TrainConfig, ablate_views, evaluate_accuracy, map_jobs,
                       results_csv, run_seed)

log = logging.getLogger("mfgat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 2, 3, 4, 5, 6

DATA_ENV = "MFGAT_DATA_DIR"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rerun an experiment; echoed into every output."""

    dataset_dir: str
    datasets: tuple[str, ...]
    model: str = "mfgat"
    views: int = 3
    hidden: int = 64
    layers: int = 2
    dropout: float = 0.1
    leaky_slope: float = 0.2
    heads: int = 1
    unified_path: bool = True
    view_weighting: str = "scalar"
    lr: float = 0.01
    epochs: int = 200
    patience: int = 20
    batch: int = 32
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "runs"
    jobs: int = 1

    def model_config(self, dataset: Dataset, views: int | None = None) -> ModelConfig:
        m = views if views is not None else self.views
        return ModelConfig(
            kind=self.model, in_dim=dataset.feature_dim, num_classes=dataset.num_classes,
            num_views=m if self.model == "mfgat" else 1, hidden_dim=self.hidden,
            num_layers=self.layers, dropout=self.dropout, leaky_slope=self.leaky_slope,
            heads=self.heads, unified_path=self.unified_path, view_weighting=self.view_weighting)

    def train_config(self) -> TrainConfig:
        return TrainConfig(max_epochs=self.epochs, lr=self.lr, batch_size=self.batch,
                           patience=self.patience, split=SplitSpec(*self.split))

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# argument handling


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _split(text: str) -> tuple[float, float, float]:
    try:
        s = SplitSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return (s.train, s.val, s.test)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_data_args(p: argparse.ArgumentParser, many: bool = False) -> None:
    p.add_argument("--dataset-dir", default=os.environ.get(DATA_ENV),
                   help=f"root holding TUDataset folders (default: ${DATA_ENV})")
    p.add_argument("--dataset", required=True,
                   help="dataset name" + (", or a comma-separated list" if many else ""))


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    _add_data_args(p, many=True)
    p.add_argument("--model", choices=["mfgat", "fgat", "gat", "gcn", "sage"], default="mfgat")
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--leaky-slope", type=float, default=0.2)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--unified-path", type=_bool, default=True)
    p.add_argument("--view-weighting", choices=["scalar", "vector"], default="scalar")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--split", type=_split, default=(0.7, 0.1, 0.2))
    p.add_argument("--seed", type=int, help="single seed (overrides --seeds)")
    p.add_argument("--seeds", type=_int_list, default=(0, 1, 2, 3, 4))
    p.add_argument("--out", default="runs")
    p.add_argument("--jobs", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfgat", description="Multi-view graph attention classifiers for TUDataset graphs")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--config", help="key=value file with default option values")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", help="dataset statistics")
    _add_data_args(p, many=True)
    p.add_argument("--csv", help="also write the table as CSV to this path")

    p = sub.add_parser("train", help="train one model per seed")
    _add_experiment_args(p)

    p = sub.add_parser("evaluate", help="test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset-dir", default=os.environ.get(DATA_ENV))
    p.add_argument("--dataset", help="defaults to the dataset recorded in the checkpoint")
    p.add_argument("--split-seed", type=int, help="defaults to the checkpoint's seed")

    p = sub.add_parser("ablate", help="test accuracy against the number of views")
    _add_experiment_args(p)
    p.set_defaults(views_list=(1, 3, 5, 10))
    p.add_argument("--view-counts", dest="views_list", type=_int_list)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nodes", type=int, default=6)
    p.add_argument("--edges", type=int, default=8)
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--step", type=float, default=1e-5)
    return parser


def read_config_file(path: str | os.PathLike) -> list[str]:
    """Turn ``key=value`` lines into ``--key=value`` tokens (``#`` starts a comment)."""
    tokens = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for k, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{k}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        tokens.append(f"--{key.replace('_', '-')}={value}")
    return tokens


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        # file values go right after the subcommand so explicit flags win
        argv = list(argv)
        idx = argv.index(args.command)
        args = parser.parse_args(argv[:idx + 1] + read_config_file(args.config) + argv[idx + 1:])
    return args


def experiment_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if not args.dataset_dir:
        raise UsageError(f"no dataset directory: pass --dataset-dir or set ${DATA_ENV}")
    seeds = (args.seed,) if args.seed is not None else tuple(args.seeds)
    if not seeds:
        raise UsageError("no seeds given")
    return ExperimentConfig(
        dataset_dir=str(args.dataset_dir), datasets=tuple(s.strip() for s in args.dataset.split(",")),
        model=args.model, views=args.views, hidden=args.hidden, layers=args.layers,
        dropout=args.dropout, leaky_slope=args.leaky_slope, heads=args.heads,
        unified_path=args.unified_path, view_weighting=args.view_weighting, lr=args.lr,
        epochs=args.epochs, patience=args.patience, batch=args.batch, split=tuple(args.split),
        seeds=seeds, out=args.out, jobs=args.jobs)


def locate_dataset(root: str | os.PathLike, name: str) -> Path:
    """Folder holding ``name_A.txt``: ``root/name``, ``root/name/raw`` or ``root`` itself."""
    root = Path(root)
    if not root.is_dir():
        raise MissingInputError(root, "dataset directory")
    for cand in (root / name, root / name / "raw", root):
        if (cand / f"{name}_A.txt").is_file():
            return cand
    raise MissingInputError(root / name / f"{name}_A.txt")


def load_dataset(root: str | os.PathLike, name: str) -> Dataset:
    return parse_tudataset(locate_dataset(root, name), name)


def _commented(text: str, header: dict) -> str:
    return f"# {json.dumps(header, sort_keys=True)}\n{text}"


# ---------------------------------------------------------------------------
# commands


def cmd_inspect(args) -> int:
    if not args.dataset_dir:
        raise UsageError(f"no dataset directory: pass --dataset-dir or set ${DATA_ENV}")
    rows = []
    for name in args.dataset.split(","):
        start = time.perf_counter()
        ds = load_dataset(args.dataset_dir, name.strip())
        rows.append(dataset_stats(ds))
        log.info("parsed %s in %.2fs", ds.name, time.perf_counter() - start)
    text = stats_csv(rows)
    widths = [14, 11, 12, 10, 10, 12]
    for line in text.splitlines():
        print("".join(f"{cell:<{w}}" for cell, w in zip(line.split(","), widths)).rstrip())
    if args.csv:
        Path(args.csv).write_text(text, encoding="utf-8")
    return EXIT_OK


def _train_job(job):
    ds, cfg, tc, seed = job
    return run_seed(ds, cfg, tc, seed)


def cmd_train(args) -> int:
    exp = experiment_from_args(args)
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    header = {"experiment": exp.to_dict()}
    all_reports = []
    for name in exp.datasets:
        ds = load_dataset(exp.dataset_dir, name)
        cfg = exp.model_config(ds)
        tc = exp.train_config()
        results = map_jobs(_train_job, [(ds, cfg, tc, s) for s in exp.seeds], exp.jobs)
        for seed, (params, report) in zip(exp.seeds, results):
            stem = f"{ds.name}_{cfg.kind}_v{cfg.num_views}_seed{seed}"
            (out / f"report_{stem}.json").write_text(report.to_json(), encoding="utf-8")
            save_checkpoint(out / f"checkpoint_{stem}.npz", cfg, params, {
                "dataset": ds.name, "seed": seed, "split": list(exp.split),
                "test_accuracy": report.test_accuracy, "experiment": exp.to_dict()})
            all_reports.append(report)
        accs = [r.test_accuracy for _, r in results]
        print(f"{ds.name} {cfg.kind} views={cfg.num_views} median_test_accuracy="
              f"{statistics.median(accs):.4f} seeds={','.join(map(str, exp.seeds))}")
    (out / "results.csv").write_text(_commented(results_csv(all_reports), header), encoding="utf-8")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config, params, meta = load_checkpoint(args.checkpoint)
    name = args.dataset or meta.get("dataset")
    if not name:
        raise UsageError("checkpoint names no dataset; pass --dataset")
    root = args.dataset_dir or meta.get("experiment", {}).get("dataset_dir")
    if not root:
        raise UsageError(f"no dataset directory: pass --dataset-dir or set ${DATA_ENV}")
    ds = load_dataset(root, name)
    if ds.feature_dim != config.in_dim or ds.num_classes != config.num_classes:
        raise ValidationError(
            f"checkpoint expects {config.in_dim} features / {config.num_classes} classes, "
            f"dataset {ds.name} has {ds.feature_dim} / {ds.num_classes}")
    seed = args.split_seed if args.split_seed is not None else int(meta.get("seed", 0))
    split = SplitSpec(*meta.get("split", (0.7, 0.1, 0.2)), seed=seed)
    _, _, test = split_dataset(ds, split)
    print(f"{evaluate_accuracy(params, config, ds.subset(test)):.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    exp = experiment_from_args(args)
    if exp.model != "mfgat":
        raise UsageError("view ablation needs --model mfgat")
    counts = sorted(set(args.views_list))
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    header = {"experiment": exp.to_dict(), "view_counts": counts}
    reports, summary, plot = [], ["dataset,views,median_test_accuracy,seeds"], []
    for name in exp.datasets:
        ds = load_dataset(exp.dataset_dir, name)
        rows, reps = ablate_views(ds, exp.model_config(ds), counts, exp.seeds, exp.train_config(), exp.jobs)
        reports.extend(reps)
        plot.append(f"# dataset={ds.name}\n# views median_test_accuracy")
        for row in rows:
            summary.append(f"{ds.name},{row.views},{row.median:.4f},{len(row.accuracies)}")
            plot.append(f"{row.views} {row.median:.4f}")
            print(f"{ds.name} views={row.views} median_test_accuracy={row.median:.4f}")
        plot.append("")
    (out / "ablation.csv").write_text(_commented(results_csv(reports), header), encoding="utf-8")
    (out / "ablation_summary.csv").write_text(_commented("\n".join(summary) + "\n", header),
                                              encoding="utf-8")
    (out / "ablation_plot.dat").write_text(_commented("\n".join(plot), header), encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed, args.nodes, args.edges, args.hidden, args.step)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<26} max_rel_err={r.error:.3e} tol={r.tolerance:.0e}")
    if failed:
        print("gradcheck failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


COMMANDS = {"inspect": cmd_inspect, "train": cmd_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingInputError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        # split too small, malformed checkpoint and similar input problems
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

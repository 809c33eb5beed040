"""Command-line entry point: train, analyze and sweep runs.

Run settings come from an ini-style config file (``[section]`` headers,
``key = value`` lines) with every key overridable by a CLI flag of the
same name. All reports are CSV so they feed any plotting tool directly.

Exit codes: 0 success, 1 usage/config error, 2 data or IO error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io as ckpt_io
from .engine import ModelGraph, PruneConfig, RatioBase, conv_param_count
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    SsmPruneError,
)
from .ranking import RankMethod, area_rank, greedy_rank
from .similarity import Metric, build_ssm
from .tensor_core import flatten_filters
from .trainer import EpochRecord, TrainConfig, train_prune, vgg_mini

SCHEMA = {
    "train": {
        "epochs",
        "batch_size",
        "learning_rate",
        "momentum",
        "weight_decay",
        "seed",
        "lr_decay_epochs",
        "lr_decay_factor",
        "hflip",
    },
    "prune": {
        "enabled",
        "ratio",
        "method",
        "metric",
        "min_filters",
        "pair_dedup",
        "ratio_base",
        "prune_epochs",
    },
    "data": {"path", "subset", "test_subset", "seed"},
    "output": {"dir"},
}


@dataclass
class RunConfig:
    """Fully resolved settings for one training run."""

    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    lr_decay_epochs: str = "auto"  # "auto", "none" or comma list of epochs
    lr_decay_factor: float = 0.1
    hflip: bool = False

    prune_enabled: bool = True
    ratio: float = 0.10
    method: str = "area"
    metric: str = "l2"
    min_filters: int = 4
    pair_dedup: bool = True
    ratio_base: str = "current"
    prune_epochs: int = 5

    data_path: str = ""
    subset: Optional[int] = None
    test_subset: Optional[int] = None
    data_seed: int = 0

    out_dir: str = "runs/latest"

    def resolved_milestones(self) -> tuple[int, ...]:
        text = self.lr_decay_epochs.strip().lower()
        if text == "none" or not text:
            return ()
        if text == "auto":
            if self.epochs < 10:
                return ()
            return (max(1, int(0.6 * self.epochs)), max(1, int(0.8 * self.epochs)))
        try:
            return tuple(int(t) for t in text.split(",") if t.strip())
        except ValueError:
            raise ConfigError(f"bad lr_decay_epochs value {self.lr_decay_epochs!r}") from None

    def train_config(self) -> TrainConfig:
        prune = None
        if self.prune_enabled:
            prune = PruneConfig(
                ratio=self.ratio,
                method=RankMethod.parse(self.method),
                metric=Metric.parse(self.metric),
                min_filters=self.min_filters,
                pair_dedup=self.pair_dedup,
                ratio_base=RatioBase.parse(self.ratio_base),
                prune_epochs=self.prune_epochs,
                seed=self.seed,
            )
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
            lr_decay_epochs=self.resolved_milestones(),
            lr_decay_factor=self.lr_decay_factor,
            hflip=self.hflip,
            prune=prune,
        )

    def dataset_spec(self) -> ckpt_io.DatasetSpec:
        if not self.data_path:
            raise ConfigError("no dataset path configured (set [data] path or --data)")
        return ckpt_io.DatasetSpec(
            root=Path(self.data_path),
            subset_size=self.subset,
            test_subset_size=self.test_subset,
            seed=self.data_seed,
        )

    def summary_lines(self) -> list[str]:
        return [
            "[train]",
            f"epochs = {self.epochs}",
            f"batch_size = {self.batch_size}",
            f"learning_rate = {self.learning_rate!r}",
            f"momentum = {self.momentum!r}",
            f"weight_decay = {self.weight_decay!r}",
            f"seed = {self.seed}",
            f"lr_decay_epochs = {self.lr_decay_epochs}",
            f"lr_decay_factor = {self.lr_decay_factor!r}",
            f"hflip = {str(self.hflip).lower()}",
            "[prune]",
            f"enabled = {str(self.prune_enabled).lower()}",
            f"ratio = {self.ratio!r}",
            f"method = {self.method}",
            f"metric = {self.metric}",
            f"min_filters = {self.min_filters}",
            f"pair_dedup = {str(self.pair_dedup).lower()}",
            f"ratio_base = {self.ratio_base}",
            f"prune_epochs = {self.prune_epochs}",
            "[data]",
            f"path = {self.data_path}",
            f"subset = {self.subset if self.subset is not None else 'all'}",
            f"test_subset = {self.test_subset if self.test_subset is not None else 'all'}",
            f"seed = {self.data_seed}",
            "[output]",
            f"dir = {self.out_dir}",
        ]


# ---------------------------------------------------------------------------
# Config file parsing


def _parse_bool(raw: str, where: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {raw!r}")


def _parse_subset(raw: str, where: str) -> Optional[int]:
    low = raw.strip().lower()
    if low in ("all", "none", ""):
        return None
    try:
        return int(low)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer or 'all', got {raw!r}") from None


def parse_config_file(path) -> dict[tuple[str, str], tuple[str, int]]:
    """Read ``[section]`` / ``key = value`` lines, rejecting unknown keys
    with their line number."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    values: dict[tuple[str, str], tuple[str, int]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#") or s.startswith(";"):
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip().lower()
            if section not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in s:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{path}:{lineno}: key appears before any [section]")
        key, _, val = s.partition("=")
        key = key.strip().lower()
        if key not in SCHEMA[section]:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in [{section}]")
        values[(section, key)] = (val.strip(), lineno)
    return values


def _typed(path, values, section, key, conv, current):
    if (section, key) not in values:
        return current
    raw, lineno = values[(section, key)]
    where = f"{path}:{lineno}"
    try:
        if conv is bool:
            return _parse_bool(raw, where)
        if conv == "subset":
            return _parse_subset(raw, where)
        return conv(raw)
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"{where}: bad value {raw!r} for {key}") from None


def load_run_config(config_path: Optional[str]) -> RunConfig:
    rc = RunConfig()
    if not config_path:
        return rc
    values = parse_config_file(config_path)
    p = config_path
    rc.epochs = _typed(p, values, "train", "epochs", int, rc.epochs)
    rc.batch_size = _typed(p, values, "train", "batch_size", int, rc.batch_size)
    rc.learning_rate = _typed(p, values, "train", "learning_rate", float, rc.learning_rate)
    rc.momentum = _typed(p, values, "train", "momentum", float, rc.momentum)
    rc.weight_decay = _typed(p, values, "train", "weight_decay", float, rc.weight_decay)
    rc.seed = _typed(p, values, "train", "seed", int, rc.seed)
    rc.lr_decay_epochs = _typed(p, values, "train", "lr_decay_epochs", str, rc.lr_decay_epochs)
    rc.lr_decay_factor = _typed(p, values, "train", "lr_decay_factor", float, rc.lr_decay_factor)
    rc.hflip = _typed(p, values, "train", "hflip", bool, rc.hflip)
    rc.prune_enabled = _typed(p, values, "prune", "enabled", bool, rc.prune_enabled)
    rc.ratio = _typed(p, values, "prune", "ratio", float, rc.ratio)
    rc.method = _typed(p, values, "prune", "method", str, rc.method)
    rc.metric = _typed(p, values, "prune", "metric", str, rc.metric)
    rc.min_filters = _typed(p, values, "prune", "min_filters", int, rc.min_filters)
    rc.pair_dedup = _typed(p, values, "prune", "pair_dedup", bool, rc.pair_dedup)
    rc.ratio_base = _typed(p, values, "prune", "ratio_base", str, rc.ratio_base)
    rc.prune_epochs = _typed(p, values, "prune", "prune_epochs", int, rc.prune_epochs)
    rc.data_path = _typed(p, values, "data", "path", str, rc.data_path)
    rc.subset = _typed(p, values, "data", "subset", "subset", rc.subset)
    rc.test_subset = _typed(p, values, "data", "test_subset", "subset", rc.test_subset)
    rc.data_seed = _typed(p, values, "data", "seed", int, rc.data_seed)
    rc.out_dir = _typed(p, values, "output", "dir", str, rc.out_dir)
    return rc


def apply_flags(rc: RunConfig, args: argparse.Namespace) -> RunConfig:
    direct = {
        "epochs": "epochs",
        "batch_size": "batch_size",
        "learning_rate": "learning_rate",
        "momentum": "momentum",
        "weight_decay": "weight_decay",
        "seed": "seed",
        "lr_decay_epochs": "lr_decay_epochs",
        "lr_decay_factor": "lr_decay_factor",
        "ratio": "ratio",
        "method": "method",
        "metric": "metric",
        "min_filters": "min_filters",
        "ratio_base": "ratio_base",
        "prune_epochs": "prune_epochs",
        "data": "data_path",
        "subset": "subset",
        "test_subset": "test_subset",
        "data_seed": "data_seed",
        "out": "out_dir",
    }
    for flag, attr in direct.items():
        val = getattr(args, flag, None)
        if val is not None:
            setattr(rc, attr, val)
    if getattr(args, "hflip", False):
        rc.hflip = True
    if getattr(args, "pair_dedup", None) is not None:
        rc.pair_dedup = args.pair_dedup == "on"
    if getattr(args, "no_prune", False):
        rc.prune_enabled = False
    return rc


# ---------------------------------------------------------------------------
# CSV helpers (fields never contain commas; floats use repr round-tripping)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: str, rows) -> None:
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _metrics_rows(records: Sequence[EpochRecord]):
    for r in records:
        yield (
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.test_acc,
            r.conv_params,
            r.cumulative_reduction_percent,
        )


def _prune_rows(reports):
    for rep in reports:
        for layer in rep.layers:
            yield (
                rep.epoch,
                layer.layer_id,
                ";".join(str(i) for i in layer.pruned_indices),
                layer.params_before,
                layer.params_after,
            )


# ---------------------------------------------------------------------------
# Commands


def run_training(rc: RunConfig, quiet: bool = False):
    """Load data, build the model, train (and prune), write all outputs."""
    spec = rc.dataset_spec()
    train_ds, test_ds = ckpt_io.load_cifar10(spec)
    graph = vgg_mini(seed=rc.seed, input_shape=(3, 32, 32))
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec: EpochRecord) -> None:
        if not quiet:
            print(
                f"epoch {rec.epoch:3d}  loss {rec.train_loss:.4f}  "
                f"train {rec.train_acc:5.2f}%  test {rec.test_acc:5.2f}%  "
                f"conv params {rec.conv_params}  (-{rec.cumulative_reduction_percent:.2f}%)",
                flush=True,
            )

    graph, records, reports = train_prune(
        graph,
        train_ds.images,
        train_ds.labels,
        test_ds.images,
        test_ds.labels,
        rc.train_config(),
        progress=progress,
    )

    _write_csv(
        out / "metrics.csv",
        "epoch,train_loss,train_acc,test_acc,conv_params,reduction_pct",
        _metrics_rows(records),
    )
    _write_csv(
        out / "prune_log.csv",
        "epoch,layer,indices,params_before,params_after",
        _prune_rows(reports),
    )
    ckpt_io.save_checkpoint(graph, out / "model.ckpt")
    final = records[-1]
    summary = rc.summary_lines() + [
        "[result]",
        f"final_test_acc = {final.test_acc!r}",
        f"final_conv_params = {final.conv_params}",
        f"final_reduction_pct = {final.cumulative_reduction_percent!r}",
    ]
    (out / "run_summary.txt").write_text("\n".join(summary) + "\n")
    return graph, records, reports


def cmd_train(args: argparse.Namespace) -> int:
    rc = apply_flags(load_run_config(args.config), args)
    run_training(rc, quiet=args.quiet)
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    graph = ckpt_io.load_checkpoint(args.checkpoint)
    metric = Metric.parse(args.metric)
    method = RankMethod.parse(args.method)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for layer in graph.conv_layers():
        ssm = build_ssm(flatten_filters(layer.weights), metric)
        vals = ssm.as_array()
        _write_csv(
            out / f"ssm_{layer.name}.csv",
            ",".join(f"f{j}" for j in range(ssm.n)),
            ([float(v) for v in row] for row in vals),
        )
        ranking = (
            greedy_rank(ssm) if method is RankMethod.GREEDY else area_rank(ssm)
        )
        _write_csv(
            out / f"ranking_{layer.name}.csv",
            "rank,filter_index,score",
            (
                (rank, int(f), float(ranking.scores[f]))
                for rank, f in enumerate(ranking.order)
            ),
        )
    if not args.quiet:
        print(f"wrote SSM and ranking CSVs for {len(graph.conv_layers())} layers to {out}")
    return 0


def _parse_ratios(text: str) -> list[float]:
    try:
        ratios = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"bad --ratios value {text!r}") from None
    if not ratios:
        raise ConfigError("--ratios needs at least one value")
    for r in ratios:
        if not 0.0 <= r < 1.0:
            raise ConfigError(f"sweep ratio {r} outside [0, 1) (0 means no pruning)")
    return ratios


def cmd_sweep(args: argparse.Namespace) -> int:
    base = apply_flags(load_run_config(args.config), args)
    ratios = _parse_ratios(args.ratios)
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sweep_rows = []
    for ratio in ratios:
        rc = dataclasses.replace(base)
        rc.out_dir = str(out / f"ratio_{ratio:g}")
        if ratio == 0.0:
            rc.prune_enabled = False
        else:
            rc.ratio = ratio
        try:
            _, records, _ = run_training(rc, quiet=args.quiet)
        except SsmPruneError as e:
            raise type(e)(f"sweep failed at ratio {ratio:g}: {e}") from e
        for rec in records:
            sweep_rows.append(
                (ratio, rec.epoch, rec.test_acc, rec.cumulative_reduction_percent)
            )
    _write_csv(out / "sweep.csv", "ratio,epoch,test_acc,reduction_pct", sweep_rows)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors must exit 1, not argparse's 2
        raise ConfigError(message)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="ini-style run config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr-decay-epochs", dest="lr_decay_epochs")
    p.add_argument("--lr-decay-factor", type=float, dest="lr_decay_factor")
    p.add_argument("--hflip", action="store_true", default=False)
    p.add_argument("--no-prune", action="store_true", dest="no_prune")
    p.add_argument("--ratio", type=float)
    p.add_argument("--method", choices=["greedy", "area"])
    p.add_argument("--metric", choices=["l2", "cosine", "cityblock", "kl"])
    p.add_argument("--min-filters", type=int, dest="min_filters")
    p.add_argument("--pair-dedup", choices=["on", "off"], dest="pair_dedup")
    p.add_argument("--ratio-base", choices=["current", "original"], dest="ratio_base")
    p.add_argument("--prune-epochs", type=int, dest="prune_epochs")
    p.add_argument("--data", help="directory with CIFAR-10 binary batches")
    p.add_argument("--subset", type=int, help="train on this many examples")
    p.add_argument("--test-subset", type=int, dest="test_subset")
    p.add_argument("--data-seed", type=int, dest="data_seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssmprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train (and prune) a model, writing CSV reports")
    _add_train_flags(train)
    train.set_defaults(fn=cmd_train)

    analyze = sub.add_parser("analyze", help="dump SSM and ranking CSVs for a checkpoint")
    analyze.add_argument("checkpoint")
    analyze.add_argument("--metric", default="l2", choices=["l2", "cosine", "cityblock", "kl"])
    analyze.add_argument("--method", default="area", choices=["greedy", "area"])
    analyze.add_argument("--out", default="analysis")
    analyze.add_argument("--quiet", action="store_true")
    analyze.set_defaults(fn=cmd_analyze)

    sweep = sub.add_parser("sweep", help="run one training per pruning ratio, collecting a sweep CSV")
    _add_train_flags(sweep)
    sweep.add_argument("--ratios", required=True, help="comma list, e.g. 0.05,0.1,0.2 (0 = no pruning)")
    sweep.set_defaults(fn=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SsmPruneError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

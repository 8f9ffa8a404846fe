"""Command line entry point: ``htp prepare|train|eval|ablate|sweep``.

Exit codes are 0 on success, 1 for user errors (bad config, unreadable
data, missing checkpoint) and 2 for anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import config as cfgmod
from . import plotting
from .atm import profiles_csv
from .dataset import (
    InteractionLog,
    ItemHistograms,
    kcore_filter,
    parse_interactions,
    split_leave_one_out,
)
from .errors import CheckpointError, HTPError
from .evaluator import REPORT_SCHEMA, evaluate, summarize_runs
from .model import ABLATIONS, AblationConfig
from .trainer import Trainer, build_model, load_checkpoint

log = logging.getLogger("htp")

FORMAT_FOR_DATASET = {"tafeng": "tafeng", "cloth": "amazon", "sports": "amazon"}
SWEEP_AXES = ("K", "H")
METRIC_COLUMNS = ("HR10", "NDCG10", "AUC")
PROFILE_PLOT_ITEMS = 6


class UserError(HTPError):
    """Bad invocation; reported without a traceback."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ cache io


def write_cache(log_: InteractionLog, out: Path, tz_offset: int = 0, source: str = "") -> dict:
    """Write the preprocessed dataset; every file is a pure function of ``log_``."""
    out.mkdir(parents=True, exist_ok=True)
    split = split_leave_one_out(log_)
    hist = ItemHistograms.from_split(split, tz_offset)

    with open(out / "interactions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "timestamp"])
        w.writerows(zip(log_.users.tolist(), log_.items.tolist(), log_.times.tolist()))
    (out / "users.tsv").write_text("".join(f"{k}\t{lab}\n" for k, lab in enumerate(log_.user_labels)))
    (out / "items.tsv").write_text("".join(f"{k + 1}\t{lab}\n" for k, lab in enumerate(log_.item_labels)))
    with open(out / "histograms.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item", "day", "count"])
        w.writerows(hist.to_rows())
    with open(out / "split.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "train_count", "valid_item", "valid_time", "test_item", "test_time"])
        for u in range(split.user_count):
            w.writerow([u, len(split.train[u].items), *split.valid[u], *split.test[u]])
    (out / "profiles.csv").write_text(profiles_csv(hist))

    summary = {**log_.summary(), "tz_offset": tz_offset, "source": source}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    popular = sorted(hist.buckets, key=lambda i: (-sum(hist.buckets[i].values()), i))[:PROFILE_PLOT_ITEMS]
    plotting.plot_seasonal_profiles({i: hist.monthly_shares(i) for i in popular}, out / "seasonal_profiles.png",
                                    {i: log_.item_labels[i - 1] for i in popular})
    return summary


def read_cache(path) -> InteractionLog:
    path = Path(path)
    inter = path / "interactions.csv"
    if not inter.is_file():
        raise UserError(f"no prepared cache at {path} (run `htp prepare` first)")
    data = np.loadtxt(inter, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    users = [line.split("\t", 1)[1] for line in (path / "users.tsv").read_text().splitlines()]
    items = [line.split("\t", 1)[1] for line in (path / "items.tsv").read_text().splitlines()]
    return InteractionLog(data[:, 0], data[:, 1], data[:, 2], users, items)


# ----------------------------------------------------------------- helpers


def _resolve(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "ablate", None):
        cfg = replace(cfg, ablation=_ablation(args.ablate))
    if getattr(args, "out", None):
        cfg = replace(cfg, out=args.out)
    if getattr(args, "cache", None):
        cfg = replace(cfg, cache=args.cache)
    return cfg


def _ablation(name: str) -> AblationConfig:
    try:
        return AblationConfig.from_name(name)
    except ValueError as exc:
        raise UserError(str(exc)) from None


def _load_split(cfg: cfgmod.RunConfig):
    if not cfg.cache:
        raise UserError("no cache directory: set `cache` in the config or pass --cache")
    return split_leave_one_out(read_cache(cfg.cache))


def _metric_row(metrics: dict) -> dict:
    return {"HR10": metrics["HR"], "NDCG10": metrics["NDCG"], "AUC": metrics["AUC"]}


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{r[h]:.6f}" if isinstance(r[h], float) else r[h] for h in header])
    path.write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())


def _train_and_test(cfg: cfgmod.RunConfig, split, out: Path | None = None) -> dict:
    """Fit one model and return its test metrics (evaluation run 0)."""
    model = build_model(split, cfg.train, cfg.ablation)
    trainer = Trainer(model, split, cfg.train, cfg.eval, cfg.hash())
    log_path = ckpt_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.toml").write_text(cfgmod.dumps(cfg))
        log_path, ckpt_path = out / "train_log.jsonl", out / "checkpoint.npz"
        header = {"event": "start", "config_hash": cfg.hash(), "config": cfg.to_dict()}
        log_path.write_text(json.dumps(header) + "\n")
    result = trainer.fit(log_path=log_path, checkpoint_path=ckpt_path)
    if ckpt_path is not None:
        trainer.save(ckpt_path)  # best weights are now in the model
    metrics = evaluate(model.score_candidates_batch, split, "test", cfg.eval, L=cfg.train.L, run=0,
                       tz_offset=cfg.train.tz_offset).metrics
    if out is not None:
        final = {"best_epoch": result.best_epoch, "epochs_run": result.epochs_run,
                 "validation": result.best_metrics, "test": metrics}
        (out / "metrics.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")
        if result.history:
            plotting.plot_training_curve(result.history, out / "training_curve.png")
    return metrics


# ---------------------------------------------------------------- commands


def cmd_prepare(args) -> int:
    cfg = _resolve(args)
    fmt = args.format or (FORMAT_FOR_DATASET.get(cfg.dataset, "csv") if args.config else "csv")
    out = Path(args.out or cfg.cache or "cache")
    raw = parse_interactions(args.raw, fmt)
    filtered = kcore_filter(raw, args.k, iterate=args.iterate)
    summary = write_cache(filtered, out, cfg.train.tz_offset, source=Path(args.raw).name)
    print("users\titems\tinteractions\tavg_items_per_user")
    print(f"{summary['users']}\t{summary['items']}\t{summary['interactions']}\t{summary['avg_items_per_user']:.2f}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    split = _load_split(cfg)
    out = Path(cfg.out)
    metrics = _train_and_test(cfg, split, out)
    print("metric\tvalue")
    for k, v in _metric_row(metrics).items():
        print(f"{k}\t{v:.6f}")
    return 0


def _checkpoint_scorer(path, cfg: cfgmod.RunConfig, split):
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("scorer") == "oracle":
        # Diagnostic stub: ranks the held-out item first, for pipeline checks.
        return lambda batch, cands: np.where(cands == batch.target_items[:, None], 1.0, 0.0)
    if ckpt.meta.get("config_hash") != cfg.hash():
        raise CheckpointError(f"config hash mismatch: checkpoint {ckpt.meta.get('config_hash')}, "
                              f"config {cfg.hash()}")
    model = build_model(split, cfg.train, cfg.ablation)
    model.load_state_dict(ckpt.params)
    return model.score_candidates_batch


def cmd_eval(args) -> int:
    resolved = Path(args.checkpoint).with_name("resolved_config.toml")
    if args.config is None and resolved.is_file():
        args.config = resolved  # the config the checkpoint was trained with
    cfg = _resolve(args)
    if args.runs is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, runs=args.runs))
    split = _load_split(cfg)
    scorer = _checkpoint_scorer(args.checkpoint, cfg, split)
    records = []
    for run in range(cfg.eval.runs):
        m = evaluate(scorer, split, args.split, cfg.eval, L=cfg.train.L, run=run,
                     tz_offset=cfg.train.tz_offset).metrics
        records.append({"seed": cfg.eval.seed + run, "metrics": m})
    mean, std = summarize_runs([r["metrics"] for r in records])
    report = {"dataset": cfg.dataset, "config_hash": cfg.hash(), "split": args.split, "M": cfg.eval.M,
              "runs": records, "mean": mean, "std": std}
    jsonschema.validate(report, REPORT_SCHEMA)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    rows = [{"seed": r["seed"], **_metric_row(r["metrics"])} for r in records]
    rows.append({"seed": "mean", **_metric_row(mean)})
    rows.append({"seed": "std", **_metric_row(std)})
    _write_csv(out / "report.csv", ("seed", *METRIC_COLUMNS), rows)
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    split = _load_split(cfg)
    variants = args.variants.split(",") if args.variants else ["full", *ABLATIONS]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in variants:
        run_cfg = replace(cfg, ablation=_ablation(name))
        log.info("ablation %s", name)
        metrics = _train_and_test(run_cfg, split, out / name)
        rows.append({"variant": name, **_metric_row(metrics)})
    _write_csv(out / "ablation.csv", ("variant", *METRIC_COLUMNS), rows)
    plotting.plot_ablation(rows, out / "ablation.png")
    return 0


def sweep_values(axis: str, L: int) -> list[int]:
    if axis == "K":
        return [1, 2, 3, 4, 5, L]
    if axis == "H":
        return [1, 2, 3]
    raise UserError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    split = _load_split(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in sweep_values(args.axis, cfg.train.L):
        run_cfg = replace(cfg, train=replace(cfg.train, **{args.axis: value}))
        log.info("sweep %s=%d", args.axis, value)
        metrics = _train_and_test(run_cfg, split, out / f"{args.axis}={value}")
        rows.append({"value": value, **_metric_row(metrics)})
    _write_csv(out / f"sweep_{args.axis}.csv", ("value", *METRIC_COLUMNS), rows)
    plotting.plot_sweep(rows, args.axis, out / f"sweep_{args.axis}.png")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="htp", description="Time-aware sequential recommendation (HTP).")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True, ablate=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--out", help="output directory (overrides `out` in the config)")
        sp.add_argument("--cache", help="prepared dataset directory (overrides `cache` in the config)")
        if seed:
            sp.add_argument("--seed", type=int, help="seed for initialization, sampling and evaluation")
        if ablate:
            sp.add_argument("--ablate", choices=ABLATIONS, help="disable one component")

    sp = sub.add_parser("prepare", help="parse, 5-core filter and cache a raw log")
    sp.add_argument("raw", help="raw interaction file")
    sp.add_argument("--format", choices=("csv", "tafeng", "amazon"), help="raw file layout")
    sp.add_argument("--k", type=int, default=5, help="k-core threshold (default 5)")
    sp.add_argument("--iterate", action="store_true", help="repeat the k-core filter to a fixpoint")
    common(sp, seed=False, ablate=False)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="fit a model and write checkpoint, log and metrics")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("test", "valid"), default="test")
    sp.add_argument("--runs", type=int, help="independent negative samplings to average")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train every ablation variant and tabulate")
    sp.add_argument("--variants", help=f"comma list from full,{','.join(ABLATIONS)}")
    common(sp, ablate=False)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep", help="vary K or H and tabulate metrics")
    sp.add_argument("--axis", choices=SWEEP_AXES, required=True)
    common(sp)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (HTPError, OSError) as exc:
        print(f"htp: error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``relnet {prepare,train,eval,table,trace,synth}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import plotting, report
from .autodiff import Tape
from .babi import BabiFormatError, TaskData, encode_batch, load_task, save_cache, truncate
from .model import forward, leaves, load_checkpoint, save_checkpoint
from .train import RunRecord, TrainConfig, evaluate, lr_grid_search, select_best, train_task

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3

log = logging.getLogger("relnet")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_tasks(text: str) -> List[int]:
    if text.strip().lower() == "all":
        return list(range(1, 21))
    tasks = set()
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            tasks.update(range(int(lo), int(hi) + 1))
        elif part:
            tasks.add(int(part))
    if not tasks or not tasks <= set(range(1, 21)):
        raise UsageError(f"task ids must be within 1..20, got {text!r}")
    return sorted(tasks)


def _load(data_dir, task: int) -> TaskData:
    if data_dir is None:
        raise UsageError("--data-dir is required")
    if not Path(data_dir).is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    try:
        return load_task(data_dir, task)
    except (FileNotFoundError, BabiFormatError, KeyError) as exc:
        raise DataError(str(exc)) from exc


def cmd_prepare(args) -> int:
    out = Path(args.out_dir) if args.out_dir else None
    for task in parse_tasks(args.tasks):
        data = _load(args.data_dir, task)
        print(f"task {task}: train {len(data.train)}  valid {len(data.valid)}  "
              f"test {len(data.test)}  vocab {len(data.vocab)}  sentence length {data.sentence_len}")
        if out:
            out.mkdir(parents=True, exist_ok=True)
            for split in ("train", "valid", "test"):
                save_cache(out / f"qa{task}_{split}.json", data.vocab, data.split(split))
    return EXIT_OK


def _config_for(task: int, args) -> TrainConfig:
    overrides = dict(lr=args.lr, max_epochs=args.epochs, batch_size=args.batch, dim=args.dim,
                     slots=args.slots, truncation=args.truncation, dtype=args.dtype)
    if args.normalize_relations:
        overrides["normalize_relations"] = True
    if args.strict:
        overrides["early_stop"] = False
    cfg = TrainConfig.for_task(task, **overrides)
    if args.seeds is not None:
        cfg.seeds = args.seeds
    return cfg


def cmd_train(args) -> int:
    out = Path(args.out_dir)
    results = out / "results.jsonl"
    status = EXIT_OK
    tasks = parse_tasks(args.tasks)
    configs = {task: _config_for(task, args) for task in tasks}
    for task in tasks:
        cfg = configs[task]
        data = _load(args.data_dir, task)
        task_dir = out / f"task{task:02d}"
        task_dir.mkdir(parents=True, exist_ok=True)
        lr = cfg.lr
        if args.lr_search:
            lr, grid_records = lr_grid_search(data, cfg)
            with open(task_dir / "lr_search.jsonl", "w") as fh:
                for r in grid_records:
                    fh.write(json.dumps(r.to_dict()) + "\n")
        effective = {"task": task, "data_dir": str(args.data_dir), "lr": lr,
                     "seeds": list(range(cfg.seeds)), "train": cfg.to_dict()}
        (task_dir / "effective_config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")

        records: List[RunRecord] = []
        for seed in range(cfg.seeds):
            run_dir = task_dir / f"seed{seed}"
            run_dir.mkdir(exist_ok=True)
            with open(run_dir / "metrics.jsonl", "w") as metrics:
                record, best, hyper = train_task(data, cfg, seed, metrics=metrics, lr=lr)
            records.append(record)
            (run_dir / "record.json").write_text(json.dumps(record.to_dict(), indent=2) + "\n")
            if not record.failed:
                save_checkpoint(run_dir / "checkpoint.npz", hyper, best, data.vocab.tokens,
                                meta={"task": task, "seed": seed, "truncation": cfg.truncation})
                if record.train_loss:
                    epochs = list(range(1, len(record.train_loss) + 1))
                    plotting.learning_curves(epochs, record.train_loss, record.valid_err,
                                             run_dir / "curves.png", title=f"task {task}, seed {seed}")
            report.append_result(results, {
                "task": task, "seed": seed, "lr": lr, "valid_err": record.best_valid_err,
                "test_err": record.test_err, "best_epoch": record.best_epoch,
                "epochs": len(record.train_loss), "failed": record.failed, "error": record.error,
            })
            msg = "FAILED " + record.error if record.failed else (
                f"valid {record.best_valid_err:.1f}%  test {record.test_err:.1f}%")
            print(f"task {task} seed {seed}: {msg}")
        try:
            idx, chosen = select_best(records)
        except RuntimeError:
            print(f"task {task}: all runs failed", file=sys.stderr)
            status = EXIT_TRAIN
            continue
        shutil.copyfile(task_dir / f"seed{idx}" / "checkpoint.npz", task_dir / "best.npz")
        print(f"task {task}: selected seed {idx}, test error {chosen.test_err:.1f}%")
    return status


def _checked(args):
    try:
        hyper, params, vocab_tokens, meta = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    task = args.task or meta.get("task")
    if task is None:
        raise UsageError("--task is required for this checkpoint")
    data = _load(args.data_dir, int(task))
    if vocab_tokens is not None and vocab_tokens != data.vocab.tokens:
        raise DataError("checkpoint vocabulary does not match the task data")
    if hyper.vocab_size != len(data.vocab) or hyper.sentence_len < data.sentence_len:
        raise DataError(f"checkpoint shapes (V={hyper.vocab_size}, L={hyper.sentence_len}) do not fit "
                        f"the task data (V={len(data.vocab)}, L={data.sentence_len})")
    limit = int(meta.get("truncation") or TrainConfig.for_task(int(task)).truncation)
    return hyper, params, data, int(task), limit


def cmd_eval(args) -> int:
    hyper, params, data, task, limit = _checked(args)
    examples = [truncate(x, limit) for x in data.split(args.split)]
    if not examples:
        raise DataError(f"split {args.split} is empty")
    err = evaluate(params, hyper, examples, data.vocab)
    print(f"task {task}  {args.split}  {err:.1f}")
    if args.results:
        report.append_result(args.results, {"kind": "eval", "task": task, "split": args.split,
                                            "error": err, "checkpoint": str(args.checkpoint)})
    return EXIT_OK


def cmd_table(args) -> int:
    records = report.read_results(args.results)
    errors = report.per_task_errors(records)
    if not errors:
        print(f"no results in {args.results}", file=sys.stderr)
        return EXIT_DATA
    tasks = parse_tasks(args.tasks) if args.tasks else None
    table = report.build_table(errors, tasks)
    print(report.format_table(table, label=args.label))
    out = Path(args.out_dir) if args.out_dir else Path(args.results).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.json").write_text(json.dumps(table, indent=2) + "\n")
    if not args.no_figure:
        plotting.task_errors(table["rows"], out / "table.png", label=args.label)
    return EXIT_OK


def cmd_trace(args) -> int:
    hyper, params, data, task, limit = _checked(args)
    split = data.split(args.split)
    if not 0 <= args.index < len(split):
        raise DataError(f"index {args.index} out of range for {len(split)} {args.split} examples")
    example = truncate(split[args.index], limit)
    batch = encode_batch([example], data.vocab, hyper.sentence_len)
    tape = Tape(record=False)
    logits, trace = forward(tape, batch, leaves(params, trainable=False), hyper)
    doc = trace.example(0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc) + "\n")
    predicted = data.vocab.tokens[int(np.argmax(logits.value[0]))]
    print(f"task {task} {args.split}[{args.index}]: answer {example.answer!r}, predicted {predicted!r}")
    if args.dot:
        Path(args.dot).write_text(report.attention_dot(np.array(doc["attention"]), top_k=args.top_k))
    if args.figure:
        plotting.attention_map(np.array(doc["attention"]), args.figure, title=" ".join(example.question))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import write_task_dir
    out = write_task_dir(args.out_dir, args.train, args.test, seed=args.seed,
                         valid_questions=args.valid or None)
    print(f"wrote generated single-supporting-fact files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="parse task files, report counts, optionally write JSON caches")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--tasks", default="all")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="seeded training runs with best-of-seeds selection")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--tasks", default="1")
    p.add_argument("--seeds", type=int, help="runs per task (default 5)")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--slots", type=int)
    p.add_argument("--truncation", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--strict", action="store_true", help="disable early stopping at 0%% validation error")
    p.add_argument("--normalize-relations", action="store_true")
    p.add_argument("--lr-search", action="store_true", help="pick the rate from the grid first")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="percentage error of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--task", type=int)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--results", help="results store to append to")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("table", help="per-task error table from a results store")
    p.add_argument("--results", required=True)
    p.add_argument("--tasks")
    p.add_argument("--out-dir")
    p.add_argument("--label", default="RelNet")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("trace", help="export gates and attention for one example")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--task", type=int)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dot")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--figure")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("synth", help="write generated task-1-style files (not the official data)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train", type=int, default=10000)
    p.add_argument("--valid", type=int, default=0)
    p.add_argument("--test", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"relnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"relnet: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"relnet: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Results store and the per-task error table."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np

from .babi import TASK_NAMES

MISSING = "—"


def append_result(path, record: dict) -> None:
    """Append one JSON line; a single write per record keeps appends atomic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(record, sort_keys=True) + "\n"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()
        os.fsync(fh.fileno())


def read_results(path) -> List[dict]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out


def per_task_errors(records: Iterable[dict]) -> Dict[int, float]:
    """Test error of the selected run for each task.

    Records without a ``test_err`` are ignored.  Repeated ``(task, seed)``
    entries keep the latest.  Among the remaining runs of a task the one with
    the lowest ``valid_err`` wins (records without it rank last); earlier
    seeds win ties.
    """
    latest: Dict[tuple, dict] = {}
    for r in records:
        if r.get("test_err") is None or r.get("failed"):
            continue
        latest[(int(r["task"]), r.get("seed"))] = r
    chosen: Dict[int, tuple] = {}
    for (task, _), r in latest.items():
        valid = r.get("valid_err")
        key = (np.inf if valid is None else float(valid),)
        if task not in chosen or key < chosen[task][0]:
            chosen[task] = (key, float(r["test_err"]))
    return {task: err for task, (_, err) in sorted(chosen.items())}


def build_table(errors: Dict[int, float], tasks: Optional[Iterable[int]] = None) -> dict:
    """Rows for tasks 1..20 plus the mean and the count of zero-error tasks.

    The mean is taken over the tasks present, unrounded.
    """
    tasks = list(range(1, 21)) if tasks is None else list(tasks)
    rows = [{"task": t, "name": TASK_NAMES.get(t, f"task {t}"), "error": errors.get(t)} for t in tasks]
    present = [r["error"] for r in rows if r["error"] is not None]
    return {
        "rows": rows,
        "mean_error": float(np.mean(present)) if present else None,
        "zero_error_tasks": sum(1 for e in present if e == 0.0),
        "tasks_present": len(present),
    }


def format_table(table: dict, label: str = "RelNet") -> str:
    width = max(len(f"{r['task']}: {r['name']}") for r in table["rows"])
    width = max(width, len("Tasks with 0 % error"))
    rule = "-" * (width + 10)
    lines = [f"{'Task':<{width}}  {label:>7}", rule]
    for r in table["rows"]:
        cell = MISSING if r["error"] is None else f"{r['error']:.1f}"
        lines.append(f"{r['task']}: {r['name']:<{width - len(str(r['task'])) - 2}}  {cell:>7}")
    lines.append(rule)
    lines.append(f"{'Tasks with 0 % error':<{width}}  {table['zero_error_tasks']:>7}")
    mean = MISSING if table["mean_error"] is None else f"{table['mean_error']:.1f}"
    lines.append(f"{'Mean % Error':<{width}}  {mean:>7}")
    return "\n".join(lines)


def attention_dot(attention: np.ndarray, top_k: int = 5, name: str = "relations") -> str:
    """Directed graph over the D slots with edges for the ``top_k`` attended pairs."""
    attention = np.asarray(attention)
    D = attention.shape[0]
    flat = np.argsort(-attention.reshape(-1), kind="stable")[:top_k]
    lines = [f"digraph {name} {{", "  node [shape=circle];"]
    lines += [f'  n{i} [label="{i}"];' for i in range(D)]
    for idx in flat:
        i, j = divmod(int(idx), D)
        w = float(attention[i, j])
        lines.append(f'  n{i} -> n{j} [label="{w:.3f}", penwidth={1 + 4 * w:.3f}];')
    lines.append("}")
    return "\n".join(lines) + "\n"

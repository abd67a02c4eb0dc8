"""Generate bAbI-format "single supporting fact" stories.

The official task files are not bundled.  This generator writes files in the
same layout and grammar as task 1 (people moving between rooms, "Where is X?"
questions) so the pipeline can be exercised end to end without them.  Results
on generated data are not comparable with published numbers.
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Optional

import numpy as np

PEOPLE = ("Mary", "John", "Daniel", "Sandra")
PLACES = ("bathroom", "bedroom", "garden", "hallway", "kitchen", "office")
VERBS = ("moved to", "went to", "journeyed to", "travelled to", "went back to")


def single_fact_stories(n_questions: int, seed: int = 0, questions_per_story: int = 5) -> str:
    rng = np.random.default_rng(seed)
    lines: List[str] = []
    asked = 0
    while asked < n_questions:
        where = {}
        told = {}
        line_id = 0
        for _ in range(questions_per_story):
            if asked >= n_questions:
                break
            for _ in range(2):
                line_id += 1
                who = PEOPLE[rng.integers(len(PEOPLE))]
                place = PLACES[rng.integers(len(PLACES))]
                verb = VERBS[rng.integers(len(VERBS))]
                where[who], told[who] = place, line_id
                lines.append(f"{line_id} {who} {verb} the {place}.")
            line_id += 1
            known = sorted(where)
            who = known[rng.integers(len(known))]
            lines.append(f"{line_id} Where is {who}? \t{where[who]}\t{told[who]}")
            asked += 1
    return "\n".join(lines) + "\n"


def write_task_dir(out_dir, train_questions: int = 10000, test_questions: int = 1000,
                   seed: int = 0, valid_questions: Optional[int] = None) -> Path:
    """Write qa1 files in the ``en-10k`` naming (or ``en-valid-10k`` with a valid split)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if valid_questions:
        (out / "qa1_train.txt").write_text(single_fact_stories(train_questions, seed))
        (out / "qa1_valid.txt").write_text(single_fact_stories(valid_questions, seed + 1))
        (out / "qa1_test.txt").write_text(single_fact_stories(test_questions, seed + 2))
    else:
        stem = "qa1_single-supporting-fact"
        (out / f"{stem}_train.txt").write_text(single_fact_stories(train_questions, seed))
        (out / f"{stem}_test.txt").write_text(single_fact_stories(test_questions, seed + 2))
    return out

"""bAbI task files: parsing, vocabulary, truncation and batching."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

PAD = 0
PAD_TOKEN = "<pad>"
CACHE_VERSION = 1

TASK_NAMES = {
    1: "1 supporting fact",
    2: "2 supporting facts",
    3: "3 supporting facts",
    4: "2 argument relations",
    5: "3 argument relations",
    6: "yes/no questions",
    7: "counting",
    8: "lists/sets",
    9: "simple negation",
    10: "indefinite knowledge",
    11: "basic coreference",
    12: "conjunction",
    13: "compound coreference",
    14: "time reasoning",
    15: "basic deduction",
    16: "basic induction",
    17: "positional reasoning",
    18: "size reasoning",
    19: "path finding",
    20: "agents motivation",
}


class BabiFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Example:
    """One question with the story sentences that precede it.

    ``lines`` holds the original bAbI line number of every sentence and
    ``support`` the annotated supporting lines, which are kept for analysis
    only and never used as a training signal.
    """

    sentences: Tuple[Tuple[str, ...], ...]
    lines: Tuple[int, ...]
    question: Tuple[str, ...]
    answer: str
    support: Tuple[int, ...] = ()
    qline: int = 0

    @property
    def num_sentences(self) -> int:
        return len(self.sentences)


def tokenize(text: str) -> Tuple[str, ...]:
    text = text.strip().lower()
    text = re.sub(r"[.?]+$", "", text).strip()
    return tuple(text.split())


def parse_task_file(text: str) -> List[Example]:
    """Parse the contents of one bAbI task file.

    A story restarts whenever a line number does not increase (in the
    official files, whenever it drops back to 1).
    """
    examples: List[Example] = []
    story: List[Tuple[int, Tuple[str, ...]]] = []
    last_id = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        head, _, rest = line.lstrip().partition(" ")
        if not head.isdigit():
            raise BabiFormatError(lineno, f"missing line id in {line!r}")
        line_id = int(head)
        if line_id <= last_id:
            story = []
        last_id = line_id

        tabs = rest.count("\t")
        if tabs == 0:
            if rest.rstrip().endswith("?"):
                raise BabiFormatError(lineno, "question line without answer fields")
            story.append((line_id, tokenize(rest)))
            continue
        if tabs != 2:
            raise BabiFormatError(lineno, f"question line has {tabs} tabs, expected 2")
        question, answer, support = rest.split("\t")
        answer = answer.strip().lower()
        if not answer:
            raise BabiFormatError(lineno, "empty answer")
        try:
            support_ids = tuple(int(s) for s in support.split())
        except ValueError:
            raise BabiFormatError(lineno, f"bad supporting ids {support!r}") from None
        examples.append(Example(
            sentences=tuple(s for _, s in story),
            lines=tuple(i for i, _ in story),
            question=tokenize(question),
            answer=answer,
            support=support_ids,
            qline=line_id,
        ))
    return examples


def to_babi_text(examples: Iterable[Example]) -> str:
    """Write examples back out, one story per example, in canonical spacing."""
    out = []
    for ex in examples:
        for line_id, sent in zip(ex.lines, ex.sentences):
            out.append(f"{line_id} {' '.join(sent)}.")
        qline = ex.qline or (ex.lines[-1] + 1 if ex.lines else 1)
        support = " ".join(str(s) for s in ex.support)
        out.append(f"{qline} {' '.join(ex.question)}?\t{ex.answer}\t{support}")
    return "\n".join(out) + ("\n" if out else "")


def truncate(example: Example, limit: int) -> Example:
    """Keep only the most recent ``limit`` sentences."""
    if limit <= 0:
        raise ValueError("limit must be positive")
    if example.num_sentences <= limit:
        return example
    return Example(
        sentences=example.sentences[-limit:],
        lines=example.lines[-limit:],
        question=example.question,
        answer=example.answer,
        support=example.support,
        qline=example.qline,
    )


class Vocabulary:
    """Sorted token inventory with ``PAD`` reserved at id 0."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != PAD_TOKEN:
            raise ValueError("vocabulary must start with the pad token")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def ids(self, tokens: Iterable[str]) -> List[int]:
        return [self.id(t) for t in tokens]


def build_vocab(examples: Iterable[Example]) -> Vocabulary:
    words = set()
    for ex in examples:
        for sent in ex.sentences:
            words.update(sent)
        words.update(ex.question)
        words.add(ex.answer)
    words.discard(PAD_TOKEN)
    return Vocabulary([PAD_TOKEN] + sorted(words))


def max_sentence_length(examples: Iterable[Example]) -> int:
    longest = 1
    for ex in examples:
        longest = max(longest, len(ex.question), *(len(s) for s in ex.sentences))
    return longest


@dataclass
class Batch:
    """Examples padded with ``PAD`` to a common story and sentence length."""

    stories: np.ndarray      # (B, T, L) token ids
    lengths: np.ndarray      # (B,) sentence counts before padding
    questions: np.ndarray    # (B, L)
    answers: np.ndarray      # (B,)

    def __len__(self):
        return len(self.answers)


def encode_batch(examples: Sequence[Example], vocab: Vocabulary, sentence_len: int) -> Batch:
    longest_story = max((ex.num_sentences for ex in examples), default=0)
    n = len(examples)
    stories = np.zeros((n, longest_story, sentence_len), dtype=np.int64)
    questions = np.zeros((n, sentence_len), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    answers = np.zeros(n, dtype=np.int64)
    for b, ex in enumerate(examples):
        lengths[b] = ex.num_sentences
        for t, sent in enumerate(ex.sentences):
            if len(sent) > sentence_len:
                raise ValueError(f"sentence of {len(sent)} tokens exceeds length {sentence_len}")
            stories[b, t, :len(sent)] = vocab.ids(sent)
        if len(ex.question) > sentence_len:
            raise ValueError(f"question of {len(ex.question)} tokens exceeds length {sentence_len}")
        questions[b, :len(ex.question)] = vocab.ids(ex.question)
        answers[b] = vocab.id(ex.answer)
    return Batch(stories, lengths, questions, answers)


def batchify(examples: Sequence[Example], vocab: Vocabulary, batch_size: int,
             sentence_len: int, seed: Optional[int] = None) -> List[Batch]:
    """Split into padded batches, shuffled deterministically when ``seed`` is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(examples))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(examples))
    return [encode_batch([examples[i] for i in order[k:k + batch_size]], vocab, sentence_len)
            for k in range(0, len(examples), batch_size)]


@dataclass
class TaskData:
    task: int
    train: List[Example]
    valid: List[Example]
    test: List[Example]
    vocab: Vocabulary = field(init=False)
    sentence_len: int = field(init=False)

    def __post_init__(self):
        everything = self.train + self.valid + self.test
        if not everything:
            raise ValueError(f"task {self.task}: no examples")
        self.vocab = build_vocab(everything)
        self.sentence_len = max_sentence_length(everything)

    def split(self, name: str) -> List[Example]:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def find_task_files(data_dir, task: int) -> Dict[str, Path]:
    """Locate the files of one task under a bAbI v1.2 tree.

    Prefers the ``en-valid-10k`` layout (explicit validation file), then
    ``en-10k``, then files sitting directly in ``data_dir``.
    """
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    candidates = [root / "en-valid-10k", root / "tasks_1-20_v1-2" / "en-valid-10k",
                  root / "en-10k", root / "tasks_1-20_v1-2" / "en-10k", root]
    for d in candidates:
        if not d.is_dir():
            continue
        files = {}
        for split in ("train", "valid", "test"):
            hits = sorted(d.glob(f"qa{task}_{split}.txt")) or sorted(d.glob(f"qa{task}_*_{split}.txt"))
            if hits:
                files[split] = hits[0]
        if "train" in files and "test" in files:
            return files
    raise FileNotFoundError(f"no files for task {task} under {root}")


def load_task(data_dir, task: int, valid_fraction: float = 0.1) -> TaskData:
    files = find_task_files(data_dir, task)
    read = lambda p: parse_task_file(Path(p).read_text(encoding="utf-8"))
    train = read(files["train"])
    test = read(files["test"])
    if "valid" in files:
        valid = read(files["valid"])
    else:
        cut = len(train) - int(round(valid_fraction * len(train)))
        train, valid = train[:cut], train[cut:]
    return TaskData(task, train, valid, test)


def save_cache(path, vocab: Vocabulary, examples: Sequence[Example]) -> None:
    """Write the id-level JSON dataset cache."""
    doc = {
        "version": CACHE_VERSION,
        "vocab": vocab.tokens,
        "examples": [{
            "sentences": [vocab.ids(s) for s in ex.sentences],
            "lines": list(ex.lines),
            "question": vocab.ids(ex.question),
            "qline": ex.qline,
            "answer": vocab.id(ex.answer),
            "support": list(ex.support),
        } for ex in examples],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_cache(path) -> Tuple[Vocabulary, List[Example]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CACHE_VERSION:
        raise ValueError(f"unsupported cache version {doc.get('version')!r}")
    vocab = Vocabulary(doc["vocab"])
    tok = vocab.tokens
    examples = []
    for e in doc["examples"]:
        sentences = tuple(tuple(tok[i] for i in s) for s in e["sentences"])
        lines = tuple(e.get("lines") or range(1, len(sentences) + 1))
        examples.append(Example(sentences, lines, tuple(tok[i] for i in e["question"]),
                                tok[e["answer"]], tuple(e["support"]), e.get("qline", 0)))
    return vocab, examples

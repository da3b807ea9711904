"""Synthetic reasoning tasks and the character tokenizer.

Three families: letter concatenation ("Take the second last letters of
the words in ..."), next-day date questions, and two-operand integer
arithmetic. All generators are pure functions of their seed.
"""

from __future__ import annotations

import json
import random
import string
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

TASKS = ("letter_concat", "date", "arithmetic")

# letter selector phrase -> index into the word
LETTER_POSITIONS = {
    "first": 0,
    "second": 1,
    "third": 2,
    "last": -1,
    "second last": -2,
    "third last": -3,
}


@dataclass(frozen=True)
class Example:
    prompt: str
    answer: str
    task: str

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------
class Tokenizer:
    """Fixed character vocabulary: four specials then printable ASCII."""

    PAD, BOS, EOS, SEP = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")

    def __init__(self):
        self.chars = [chr(c) for c in range(32, 127)]
        self._index = {ch: i + len(self.SPECIALS) for i, ch in enumerate(self.chars)}

    @property
    def vocab_size(self) -> int:
        return len(self.SPECIALS) + len(self.chars)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[ch] for ch in text]
        except KeyError as exc:
            raise DataError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        n = len(self.SPECIALS)
        return "".join(self.chars[i - n] for i in ids if i >= n)

    def label(self, token: int) -> str:
        n = len(self.SPECIALS)
        return self.SPECIALS[token] if token < n else self.chars[token - n]


# ---------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------
def _pseudo_word(rng: random.Random, lo: int, hi: int) -> str:
    return "".join(rng.choice(string.ascii_uppercase) for _ in range(rng.randint(lo, hi)))


def letter_prompt(words: Sequence[str], position: str = "second last") -> str:
    return f'Take the {position} letters of the words in "{" ".join(words)}" and concatenate them'


def letter_answer(words: Sequence[str], position: str = "second last") -> str:
    idx = LETTER_POSITIONS[position]
    return "".join(w[idx] for w in words)


def gen_letter_concat(seed: int, n: int, word_len: tuple[int, int] = (3, 6), n_words: int = 2,
                      position: str = "second last") -> list[Example]:
    if position not in LETTER_POSITIONS:
        raise ConfigError(f"unknown letter position {position!r}; choose from {sorted(LETTER_POSITIONS)}")
    idx = LETTER_POSITIONS[position]
    need = idx + 1 if idx >= 0 else -idx
    lo, hi = word_len
    if lo < max(2, need) or hi < lo:
        raise ConfigError(f"word_len {word_len} too short for the {position!r} letter (need >= {max(2, need)})")
    if n_words < 1:
        raise ConfigError("n_words must be >= 1")
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        words = [_pseudo_word(rng, lo, hi) for _ in range(n_words)]
        out.append(Example(letter_prompt(words, position), letter_answer(words, position), "letter_concat"))
    return out


def gen_arithmetic(seed: int, n: int, operand_range: tuple[int, int] = (0, 99),
                   ops: str = "+-") -> list[Example]:
    lo, hi = operand_range
    if lo > hi or lo < -(2**31) or hi > 2**31 - 1:
        raise ConfigError(f"operand_range {operand_range} must be ordered and fit signed 32-bit")
    if not ops or set(ops) - set("+-"):
        raise ConfigError(f"ops must be a nonempty subset of '+-', got {ops!r}")
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        a, b, op = rng.randint(lo, hi), rng.randint(lo, hi), rng.choice(ops)
        value = a + b if op == "+" else a - b
        out.append(Example(f"{a}{op}{b}=?", str(value), "arithmetic"))
    return out


def is_leap(year: int) -> bool:
    return year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)


def days_in_month(year: int, month: int) -> int:
    if month == 2:
        return 29 if is_leap(year) else 28
    return 30 if month in (4, 6, 9, 11) else 31


def next_day(year: int, month: int, day: int) -> tuple[int, int, int]:
    if day < days_in_month(year, month):
        return year, month, day + 1
    if month < 12:
        return year, month + 1, 1
    return year + 1, 1, 1


def format_date(year: int, month: int, day: int) -> str:
    return f"{month:02d}/{day:02d}/{year:04d}"


def date_prompt(today: str) -> str:
    return f"If today is {today}, what is tomorrow in MM/DD/YYYY?"


def gen_date(seed: int, n: int, year_range: tuple[int, int] = (1900, 2099),
             month_end_fraction: float = 0.3) -> list[Example]:
    """Next-day questions; ``month_end_fraction`` of samples sit on a month's last day."""
    lo, hi = year_range
    if lo < 1 or hi > 9998 or lo > hi:
        raise ConfigError(f"year_range {year_range} must be ordered within 1..9998")
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        year, month = rng.randint(lo, hi), rng.randint(1, 12)
        last = days_in_month(year, month)
        day = last if rng.random() < month_end_fraction else rng.randint(1, last)
        today = format_date(year, month, day)
        out.append(Example(date_prompt(today), format_date(*next_day(year, month, day)), "date"))
    return out


def generate(task: str, seed: int, n: int, **kwargs) -> list[Example]:
    if task == "letter_concat":
        return gen_letter_concat(seed, n, **kwargs)
    if task == "date":
        return gen_date(seed, n, **kwargs)
    if task == "arithmetic":
        return gen_arithmetic(seed, n, **kwargs)
    raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")


def make_splits(task: str, seed: int, n_train: int, n_test: int, **kwargs) -> tuple[list[Example], list[Example]]:
    """Train/test sets with no prompt string shared between (or within) them."""
    seen: set[str] = set()
    pool: list[Example] = []
    chunk = 0
    while len(pool) < n_train + n_test:
        fresh = generate(task, seed * 1000 + chunk, 2 * (n_train + n_test), **kwargs)
        for ex in fresh:
            if ex.prompt not in seen:
                seen.add(ex.prompt)
                pool.append(ex)
        chunk += 1
        if chunk > 50:
            raise DataError(f"could not draw {n_train + n_test} distinct {task} prompts")
    return pool[:n_train], pool[n_train:n_train + n_test]


# ---------------------------------------------------------------------
# files
# ---------------------------------------------------------------------
def write_jsonl(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps({"prompt": ex.prompt, "answer": ex.answer, "task": ex.task},
                                ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ex = Example(str(rec["prompt"]), str(rec["answer"]), str(rec["task"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed example ({exc})") from None
            if ex.task not in TASKS or not ex.answer:
                raise DataError(f"{path}:{lineno}: bad task or empty answer")
            out.append(ex)
    return out


# ---------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------
@dataclass
class Batch:
    """Right-padded ``<bos> prompt <sep> answer <eos> <pad>...`` rows."""

    tokens: np.ndarray       # [B, T] int
    answer_mask: np.ndarray  # [B, T] bool: answer chars and <eos>
    pad_mask: np.ndarray     # [B, T] bool

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.tokens[:, 1:]

    @property
    def loss_mask(self) -> np.ndarray:
        """Positions of ``inputs`` whose next token is part of the answer."""
        return self.answer_mask[:, 1:]

    @property
    def valid_mask(self) -> np.ndarray:
        return ~self.pad_mask[:, :-1]


def encode_prompt(tok: Tokenizer, prompt: str) -> list[int]:
    return [tok.BOS] + tok.encode(prompt) + [tok.SEP]


def encode_batch(tok: Tokenizer, examples: Sequence[Example], max_seq: int) -> Batch:
    rows, answer_spans = [], []
    for ex in examples:
        head = encode_prompt(tok, ex.prompt)
        tail = tok.encode(ex.answer) + [tok.EOS]
        row = head + tail
        if len(row) > max_seq:
            raise DataError(f"example needs {len(row)} tokens > max_seq {max_seq}: {ex.prompt!r} -> {ex.answer!r}")
        rows.append(row)
        answer_spans.append((len(head), len(row)))
    if not rows:
        raise DataError("empty batch")
    width = max(len(r) for r in rows)
    tokens = np.full((len(rows), width), tok.PAD, dtype=np.int64)
    answer = np.zeros_like(tokens, dtype=bool)
    pad = np.ones_like(tokens, dtype=bool)
    for i, (row, (a, b)) in enumerate(zip(rows, answer_spans)):
        tokens[i, :len(row)] = row
        answer[i, a:b] = True
        pad[i, :len(row)] = False
    return Batch(tokens, answer, pad)

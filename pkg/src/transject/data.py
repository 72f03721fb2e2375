"""Deterministic desk-scale datasets: ListOps, character TSV classification, LM windows."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, UNK = 0, 1
RESERVED = ("<pad>", "<unk>")


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass
class Example:
    tokens: list[int]
    label: int | None = None
    targets: list[int] | None = None


@dataclass
class Vocabulary:
    symbols: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.itos = list(RESERVED) + list(self.symbols)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate symbols in vocabulary")

    @classmethod
    def build(cls, texts: Iterable[Iterable[str]]) -> "Vocabulary":
        """Sorted-symbol assignment: identical corpora give identical ids."""
        seen = set()
        for t in texts:
            seen.update(t)
        return cls(sorted(seen - set(RESERVED)))

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, symbols: Iterable[str]) -> list[int]:
        return [self.stoi.get(s, UNK) for s in symbols]

    def decode(self, ids: Iterable[int], sep: str = "") -> str:
        return sep.join(self.itos[i] for i in ids)


# -- ListOps -----------------------------------------------------------------------

OPERATORS = ("MIN", "MAX", "MED", "SM")
LISTOPS_VOCAB = Vocabulary(["[", "]", *OPERATORS, *map(str, range(10))])


@dataclass
class ListOpsGrammar:
    min_args: int = 2
    max_args: int = 4
    leaf_prob: float = 0.6


def apply_op(op: str, values: Sequence[int]) -> int:
    if op == "MIN":
        return min(values)
    if op == "MAX":
        return max(values)
    if op == "MED":
        # lower median for even counts keeps labels integral
        return sorted(values)[(len(values) - 1) // 2]
    if op == "SM":
        return sum(values) % 10
    raise DataError(f"unknown operator {op!r}")


def listops_tokens(expr: str) -> list[str]:
    return expr.replace("[", " [ ").replace("]", " ] ").split()


def evaluate_listops(expr: str | Sequence[str]) -> int:
    """Evaluate a bracketed prefix expression such as ``[MAX 2 [MIN 3 4]]``."""
    toks = listops_tokens(expr) if isinstance(expr, str) else list(expr)
    stack: list[list] = []
    result = None
    for i, tok in enumerate(toks):
        if tok == "[":
            if i + 1 >= len(toks) or toks[i + 1] not in OPERATORS:
                raise DataError(f"expected operator after '[' at token {i}")
            stack.append([])
        elif tok in OPERATORS:
            stack[-1].append(tok)
        elif tok == "]":
            frame = stack.pop()
            val = apply_op(frame[0], frame[1:])
            if stack:
                stack[-1].append(val)
            else:
                result = val
        elif tok.isdigit() and len(tok) == 1:
            if not stack:
                return int(tok)
            stack[-1].append(int(tok))
        else:
            raise DataError(f"bad token {tok!r}")
    if stack or result is None:
        raise DataError("unbalanced expression")
    return result


def _gen_expr(rng: random.Random, depth: int, max_depth: int, g: ListOpsGrammar) -> list[str]:
    op = rng.choice(OPERATORS)
    n_args = rng.randint(g.min_args, g.max_args)
    out = ["[", op]
    for _ in range(n_args):
        if depth >= max_depth or rng.random() < g.leaf_prob:
            out.append(str(rng.randrange(10)))
        else:
            out.extend(_gen_expr(rng, depth + 1, max_depth, g))
    out.append("]")
    return out


def format_listops(tokens: Sequence[str]) -> str:
    return " ".join(tokens).replace("[ ", "[").replace(" ]", "]")


def gen_listops(count: int, max_depth: int, max_len: int, seed: int,
                grammar: ListOpsGrammar | None = None) -> list[tuple[str, int]]:
    """``count`` (expression, label) pairs; expressions longer than ``max_len``
    tokens are redrawn from the same stream."""
    if max_depth < 1:
        raise DataError("max_depth must be >= 1")
    g = grammar or ListOpsGrammar()
    if max_len < g.min_args + 3:
        raise DataError(f"max_len {max_len} cannot hold any expression")
    rng = random.Random(seed)
    out = []
    while len(out) < count:
        toks = _gen_expr(rng, 1, max_depth, g)
        if len(toks) > max_len:
            continue
        expr = format_listops(toks)
        out.append((expr, evaluate_listops(toks)))
    return out


def listops_examples(pairs: Iterable[tuple[str, int]]) -> list[Example]:
    return [Example(LISTOPS_VOCAB.encode(listops_tokens(e)), label=y) for e, y in pairs]


def write_listops_tsv(pairs: Iterable[tuple[str, int]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for expr, label in pairs:
            fh.write(f"{label}\t{expr}\n")


def read_listops_tsv(path) -> list[tuple[str, int]]:
    return [(text, label) for label, text in read_tsv(path)]


# -- TSV text classification -------------------------------------------------------

def read_tsv(path) -> list[tuple[int, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep:
                raise ParseError(path, lineno, "missing tab separator")
            if not text:
                raise ParseError(path, lineno, "empty text")
            try:
                y = int(label)
            except ValueError:
                raise ParseError(path, lineno, f"label {label!r} is not an integer") from None
            if y < 0:
                raise ParseError(path, lineno, "negative label")
            rows.append((y, text))
    return rows


def load_char_classification(path, vocab: Vocabulary | None = None,
                             max_len: int | None = None) -> tuple[list[Example], Vocabulary]:
    """Character-level examples from ``<label>\\t<text>`` lines.

    Pass the training split's vocabulary when loading validation/test files;
    unseen characters map to ``<unk>``. Texts longer than ``max_len`` are
    truncated.
    """
    rows = read_tsv(path)
    if vocab is None:
        vocab = Vocabulary.build(text for _, text in rows)
    examples = []
    for y, text in rows:
        ids = vocab.encode(text)
        if max_len is not None:
            ids = ids[:max_len]
        examples.append(Example(ids, label=y))
    return examples, vocab


# -- language modelling --------------------------------------------------------------

def build_lm_windows(stream: Sequence[int], window: int = 35) -> list[Example]:
    """Non-overlapping windows: inputs [t, t+w), targets [t+1, t+w+1)."""
    if len(stream) < window + 1:
        raise DataError(f"stream of {len(stream)} tokens is shorter than window + 1")
    stream = list(stream)
    n = (len(stream) - 1) // window
    return [Example(stream[t:t + window], targets=stream[t + 1:t + window + 1])
            for t in range(0, n * window, window)]


def load_lm_text(path, vocab: Vocabulary | None = None) -> tuple[list[int], Vocabulary]:
    """Whitespace-tokenized UTF-8 document as an id stream."""
    words = Path(path).read_text(encoding="utf-8").split()
    if vocab is None:
        vocab = Vocabulary.build([words])
    return vocab.encode(words), vocab


# -- batching ---------------------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None


def batchify(examples: Sequence[Example], batch_size: int, pad_id: int = PAD,
             order: Sequence[int] | None = None) -> Iterator[Batch]:
    """Right-pad each batch to its own max length and emit a 0/1 mask."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    idx = list(range(len(examples))) if order is None else list(order)
    for start in range(0, len(idx), batch_size):
        chunk = [examples[i] for i in idx[start:start + batch_size]]
        width = max(len(e.tokens) for e in chunk)
        tokens = np.full((len(chunk), width), pad_id, dtype=np.int64)
        mask = np.zeros((len(chunk), width))
        targets = None
        if chunk[0].targets is not None:
            targets = np.full((len(chunk), width), pad_id, dtype=np.int64)
        for r, e in enumerate(chunk):
            tokens[r, :len(e.tokens)] = e.tokens
            mask[r, :len(e.tokens)] = 1.0
            if targets is not None:
                targets[r, :len(e.targets)] = e.targets
        labels = None
        if chunk[0].label is not None:
            labels = np.array([e.label for e in chunk], dtype=np.int64)
        yield Batch(tokens, mask, labels, targets)


def majority_baseline(labels: Sequence[int]) -> float:
    """Accuracy of always predicting the most frequent label."""
    counts = np.bincount(np.asarray(labels))
    return float(counts.max() / counts.sum())

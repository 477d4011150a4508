"""Vocabulary construction, encoding and stateful LM batching."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError

UNK = "<unk>"
EOS = "<eos>"


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise IngestionError("vocabulary tokens must be unique")
        for tok in (UNK, EOS):
            if tok not in self.index:
                raise IngestionError(f"vocabulary lacks reserved token {tok}")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


def build_vocab(corpus: str, max_size: int = 10000) -> Vocabulary:
    """Keep the ``max_size`` most frequent tokens, reserved tokens included.

    ``<unk>`` and ``<eos>`` take ids 0 and 1; the rest follow by descending
    frequency with ties broken lexicographically.
    """
    lines = [line.split() for line in corpus.splitlines()]
    lines = [toks for toks in lines if toks]
    if not lines:
        raise IngestionError("corpus is empty")
    if max_size < 2:
        raise IngestionError("max_size must leave room for <unk> and <eos>")
    counts = Counter(tok for toks in lines for tok in toks)
    counts.pop(UNK, None)
    counts.pop(EOS, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - 2]]
    return Vocabulary([UNK, EOS] + kept)


def encode(vocab: Vocabulary, text: str) -> np.ndarray:
    """Whitespace-tokenise ``text``; every non-blank line ends with ``<eos>``."""
    ids = []
    for line in text.splitlines():
        toks = line.split()
        if not toks:
            continue
        ids.extend(vocab.id(t) for t in toks)
        ids.append(vocab.eos_id)
    return np.asarray(ids, dtype=np.int64)


def decode(vocab: Vocabulary, ids) -> str:
    out, line = [], []
    for i in ids:
        if int(i) == vocab.eos_id:
            out.append(" ".join(line) + "\n")
            line = []
        else:
            line.append(vocab.tokens[int(i)])
    if line:
        out.append(" ".join(line))
    return "".join(out)


def read_corpus(path) -> str:
    path = Path(path)
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise IngestionError(f"corpus file not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot read corpus {path}: {exc}") from None


@dataclass
class BatchPlan:
    """Contiguous stripes of a token stream cut into ``(inputs, targets)`` blocks.

    ``stripes`` has shape ``(B, stripe_len)``. Batch ``i`` reads columns
    ``i*N .. i*N+N`` as inputs and the same window shifted by one as targets.
    With ``keep_tail`` a final shorter batch covers the leftover columns so
    that every stripe position after the first is predicted exactly once.
    """

    stripes: np.ndarray
    batch_size: int
    unroll: int
    keep_tail: bool = False

    @property
    def num_batches(self) -> int:
        usable = self.stripes.shape[1] - 1
        full = usable // self.unroll
        if self.keep_tail and usable % self.unroll:
            return full + 1
        return full

    @property
    def consumed(self) -> int:
        n = sum(inp.size for inp, _ in self)
        return n + self.batch_size if n else 0

    def __len__(self):
        return self.num_batches

    def __getitem__(self, i):
        if not 0 <= i < self.num_batches:
            raise IndexError(i)
        start = i * self.unroll
        stop = min(start + self.unroll, self.stripes.shape[1] - 1)
        return self.stripes[:, start:stop], self.stripes[:, start + 1 : stop + 1]

    def __iter__(self):
        for i in range(self.num_batches):
            yield self[i]


def batchify(stream, batch_size: int, unroll: int, keep_tail: bool = False) -> BatchPlan:
    stream = np.asarray(stream, dtype=np.int64)
    if batch_size < 1 or unroll < 1:
        raise IngestionError("batch size and unroll length must be positive")
    need = batch_size * (unroll + 1)
    if len(stream) < need:
        raise IngestionError(
            f"stream of {len(stream)} tokens too short: need at least {need} "
            f"for batch size {batch_size} and unroll {unroll}"
        )
    stripe_len = len(stream) // batch_size
    stripes = stream[: batch_size * stripe_len].reshape(batch_size, stripe_len)
    return BatchPlan(stripes=stripes, batch_size=batch_size, unroll=unroll, keep_tail=keep_tail)

"""Synthetic tasks and CoNLL column-format ingestion.

Both synthetic tasks are rule-based so any accuracy gap between funnel
configurations comes from the architecture, not the data:

* sentence task: label 1 iff more than half the tokens are in the lower
  half of the vocabulary;
* token task: tag 1 iff a token equals its left neighbour.  A window-2 max
  over a duplicate pair cannot tell which member was the repeat, so a
  funneled model without recovery has to fail on it.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError

SENTENCE = "sentence"
TOKEN = "token"


@dataclass
class Batch:
    """Token ids, validity mask and labels for ``n`` sequences.

    ``labels`` is (n,) for sentence tasks and (n, seq) for token tasks.
    ``negative_tag`` is the tag that does not count towards token F1 (-1 if
    every tag counts).
    """

    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    kind: str
    negative_tag: int = 0
    tag_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in (SENTENCE, TOKEN):
            raise ValueError(f"unknown task kind {self.kind!r}")
        want = self.tokens.shape[:1] if self.kind == SENTENCE else self.tokens.shape
        if self.labels.shape != want:
            raise ValueError(f"labels shape {self.labels.shape} does not fit a {self.kind} task of {self.tokens.shape}")
        if self.mask.shape != self.tokens.shape:
            raise ValueError("mask and tokens differ in shape")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def take(self, idx) -> Batch:
        return Batch(self.tokens[idx], self.mask[idx], self.labels[idx], self.kind, self.negative_tag, self.tag_names)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sentence_rule(tokens: np.ndarray, vocab: int) -> np.ndarray:
    seq = tokens.shape[-1]
    return ((tokens < vocab / 2).sum(axis=-1) > seq / 2).astype(np.int64)


def gen_sentence_task(seed, n: int, seq: int, vocab: int) -> Batch:
    """Uniform random tokens, labels balanced exactly (n//2 positives).

    Balance comes from rejection: candidate rows are drawn uniformly and
    kept until each class has its quota, so every kept row is a uniform
    draw conditioned on its label.
    """
    if vocab < 4:
        raise ValueError("vocab must be >= 4")
    rng = _rng(seed)
    want = {1: n // 2, 0: n - n // 2}
    kept = {0: [], 1: []}
    while any(len(kept[c]) < want[c] for c in (0, 1)):
        cand = rng.integers(0, vocab, size=(max(n, 16), seq))
        for row, lab in zip(cand, sentence_rule(cand, vocab)):
            if len(kept[lab]) < want[lab]:
                kept[lab].append(row)
    tokens = np.array(kept[0] + kept[1], dtype=np.int64).reshape(n, seq)
    order = rng.permutation(n)
    tokens = tokens[order]
    return Batch(tokens, np.ones((n, seq), dtype=bool), sentence_rule(tokens, vocab), SENTENCE)


def token_rule(tokens: np.ndarray) -> np.ndarray:
    tags = np.zeros(tokens.shape, dtype=np.int64)
    tags[:, 1:] = tokens[:, 1:] == tokens[:, :-1]
    return tags


def gen_token_task(seed, n: int, seq: int, vocab: int, repeat_prob: float = 0.3) -> Batch:
    """Tag a position 1 iff its token repeats the previous one.

    Each token copies its left neighbour with probability ``repeat_prob`` and
    is otherwise uniform, so positives are common enough for F1 to be stable.
    """
    if seq < 2:
        raise ValueError("seq must be >= 2")
    rng = _rng(seed)
    tokens = rng.integers(0, vocab, size=(n, seq))
    copy = rng.random((n, seq)) < repeat_prob
    for i in range(1, seq):
        tokens[:, i] = np.where(copy[:, i], tokens[:, i - 1], tokens[:, i])
    return Batch(tokens.astype(np.int64), np.ones((n, seq), dtype=bool), token_rule(tokens), TOKEN)


# ---------------------------------------------------------------------------
# CoNLL

@dataclass
class ConllCorpus:
    sentences: list[list[tuple[str, str]]]
    tags: list[str]  # first-seen order

    def encode(self, n_buckets: int, max_len: int | None = None) -> Batch:
        """Hash tokens into ``n_buckets`` ids and pad to a common length.

        Longer sentences are cut at ``max_len``.  Padding uses id 0 and is
        masked out.
        """
        if not self.sentences:
            raise InputError("no sentences to encode")
        longest = max(len(s) for s in self.sentences)
        n = longest if max_len is None else min(longest, max_len)
        tokens = np.zeros((len(self.sentences), n), dtype=np.int64)
        labels = np.zeros((len(self.sentences), n), dtype=np.int64)
        mask = np.zeros((len(self.sentences), n), dtype=bool)
        tag_id = {t: i for i, t in enumerate(self.tags)}
        for r, sent in enumerate(self.sentences):
            for c, (tok, tag) in enumerate(sent[:n]):
                tokens[r, c] = token_bucket(tok, n_buckets)
                labels[r, c] = tag_id[tag]
                mask[r, c] = True
        negative = tag_id.get("O", -1)
        return Batch(tokens, mask, labels, TOKEN, negative, list(self.tags))


def token_bucket(token: str, n_buckets: int) -> int:
    """Stable hash bucket (CRC32; unlike ``hash`` it does not change per process)."""
    return zlib.crc32(token.encode("utf-8")) % n_buckets


def parse_conll(path: str | Path) -> ConllCorpus:
    """Read whitespace-separated columns: token first, tag last.

    Blank lines end sentences, ``-DOCSTART-`` lines are skipped, and a line
    with a single column raises :class:`ParseError` naming the line.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    sentences: list[list[tuple[str, str]]] = []
    tags: dict[str, None] = {}
    current: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            cols = line.split()
            if not cols:
                if current:
                    sentences.append(current)
                    current = []
                continue
            if cols[0].startswith("-DOCSTART-"):
                continue
            if len(cols) < 2:
                raise ParseError(f"expected at least 2 columns, got {line.strip()!r}", lineno)
            current.append((cols[0], cols[-1]))
            tags.setdefault(cols[-1], None)
    if current:
        sentences.append(current)
    return ConllCorpus(sentences, list(tags))


# ---------------------------------------------------------------------------
# plain-text dataset files

DATA_HEADER = "# funnelkit-data"


def save_batch(batch: Batch, path: str | Path, meta: dict | None = None) -> Path:
    """One sequence per line: ``tok tok ...<TAB>label`` (or per-token tags).

    Padding is written as ``_`` in both columns.
    """
    path = Path(path)
    items = dict(kind=batch.kind, **(meta or {}))
    lines = [DATA_HEADER + " " + " ".join(f"{k}={v}" for k, v in items.items())]
    for i in range(len(batch)):
        valid = batch.mask[i]
        toks = " ".join(str(t) if v else "_" for t, v in zip(batch.tokens[i], valid))
        if batch.kind == SENTENCE:
            labs = str(int(batch.labels[i]))
        else:
            labs = " ".join(str(t) if v else "_" for t, v in zip(batch.labels[i], valid))
        lines.append(f"{toks}\t{labs}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_batch(path: str | Path) -> Batch:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(DATA_HEADER):
        raise ParseError("missing funnelkit-data header", 1)
    meta = dict(kv.split("=", 1) for kv in lines[0][len(DATA_HEADER):].split())
    kind = meta.get("kind", "")
    rows_t, rows_l = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            toks, labs = line.split("\t")
        except ValueError:
            raise ParseError("expected tokens<TAB>labels", lineno) from None
        rows_t.append(toks.split())
        rows_l.append(labs.split())
    if not rows_t:
        raise InputError(f"{path}: no rows")
    n = max(len(r) for r in rows_t)
    tokens = np.zeros((len(rows_t), n), dtype=np.int64)
    mask = np.zeros((len(rows_t), n), dtype=bool)
    for i, row in enumerate(rows_t):
        for j, t in enumerate(row):
            if t != "_":
                tokens[i, j] = int(t)
                mask[i, j] = True
    if kind == SENTENCE:
        labels = np.array([int(r[0]) for r in rows_l], dtype=np.int64)
    elif kind == TOKEN:
        labels = np.zeros((len(rows_l), n), dtype=np.int64)
        for i, row in enumerate(rows_l):
            for j, t in enumerate(row):
                if t != "_":
                    labels[i, j] = int(t)
    else:
        raise ParseError(f"unknown kind {kind!r}", 1)
    return Batch(tokens, mask, labels, kind)

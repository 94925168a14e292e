"""Dataset ingestion, tokenization, batching, and attribute scoring.

File formats (chosen to be diff-friendly):

* language modeling: plain text, one document per blank-line-separated block;
* dialogue: one record per line, ``history<TAB>response``, turns inside the
  history joined by " __eou__ "; records whose history or response exceeds a
  token cap are dropped (default cap 100);
* summarization: one record per line, ``article<TAB>summary``.

Attribute scoring covers the four degenerative attributes: average corpus
frequency of an example's tokens, within-sequence repetition, n-gram overlap
between a response and its context, and the entropy of context clusters
paired with a response's cluster. Scores serialize to CSV with header
``example_id,metric,value``.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from degenlab.clustering import ClusterAssignment, mean_shift, trigram_embed
from degenlab.errors import (
    ContractViolation,
    DataFormatError,
    EmptyInput,
    MissingCount,
    TooShort,
)

__all__ = [
    "AttributeScore",
    "Example",
    "Vocab",
    "avg_frequency",
    "build_examples_dialogue",
    "build_examples_lm",
    "build_examples_summarization",
    "context_overlap",
    "corpus_token_counts",
    "iter_batches",
    "read_dialogue_records",
    "read_lm_documents",
    "read_scores_csv",
    "read_summarization_records",
    "repetition_attr",
    "score_dialogue_attributes",
    "score_lm_attributes",
    "source_entropy",
    "split_by_attribute",
    "tokenize",
    "write_scores_csv",
]

EOU_SEPARATOR = " __eou__ "


def tokenize(text: str, level: str = "word") -> list[str]:
    """Pluggable desk-scale tokenizer: whitespace words or single characters."""
    if level == "word":
        return text.split()
    if level == "char":
        return [c for c in text if not c.isspace()]
    raise ContractViolation(f"unknown tokenizer level {level!r}")


class Vocab:
    """Token <-> id table with reserved ``<unk>`` (0) and ``<eos>`` (1)."""

    UNK = 0
    EOS = 1

    def __init__(self, tokens: list[str]):
        self.tokens = ["<unk>", "<eos>"] + list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractViolation("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_sequences(cls, sequences, max_size: int | None = None) -> "Vocab":
        counts = Counter()
        for seq in sequences:
            counts.update(seq)
        # Deterministic order: most frequent first, lexicographic tie-break.
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ordered = ordered[: max(0, max_size - 2)]
        return cls(ordered)

    def encode(self, tokens: list[str]) -> np.ndarray:
        return np.array([self.index.get(t, self.UNK) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass
class Example:
    """One (condition, target) pair; x may be empty for pure LM training."""

    id: str
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.y) == 0:
            raise ContractViolation(f"example {self.id}: target must be nonempty")


@dataclass
class AttributeScore:
    example_id: str
    metric: str
    value: float


# ----------------------------------------------------------------------
# File readers (token-level, before any vocabulary is fixed)
# ----------------------------------------------------------------------


def read_lm_documents(path, level: str = "word") -> list[list[str]]:
    """Blank-line-separated blocks, each tokenized into one document."""
    docs: list[list[str]] = []
    current: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                current.extend(tokenize(line, level))
            elif current:
                docs.append(current)
                current = []
    if current:
        docs.append(current)
    return docs


def _read_tsv_pairs(path, what: str, level: str) -> list[tuple[list[str], list[str]]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 2:
                raise DataFormatError(
                    f"{path}: line {lineno}: expected 2 TAB-separated fields, got {len(fields)}"
                )
            records.append((tokenize(fields[0], level), tokenize(fields[1], level)))
    return records


def read_dialogue_records(
    path, max_len: int = 100, level: str = "word"
) -> list[tuple[list[str], list[str]]]:
    """``history<TAB>response`` lines; overlong histories/responses dropped."""
    records = _read_tsv_pairs(path, "dialogue", level)
    return [
        (h, r)
        for h, r in records
        if len(h) <= max_len and 0 < len(r) <= max_len
    ]


def read_summarization_records(path, level: str = "word"):
    """``article<TAB>summary`` lines."""
    return _read_tsv_pairs(path, "summarization", level)


# ----------------------------------------------------------------------
# Example construction and batching
# ----------------------------------------------------------------------


def build_examples_lm(
    docs: list[list[str]], vocab: Vocab, max_tokens: int = 512
) -> list[Example]:
    return [
        Example(id=f"doc{idx:05d}", x=np.array([], dtype=np.int64), y=vocab.encode(doc[:max_tokens]))
        for idx, doc in enumerate(docs)
        if doc
    ]


def build_examples_dialogue(records, vocab: Vocab) -> list[Example]:
    out = []
    for idx, (hist, resp) in enumerate(records):
        y = np.concatenate([vocab.encode(resp), [Vocab.EOS]])
        out.append(Example(id=f"dlg{idx:05d}", x=vocab.encode(hist), y=y))
    return out


def build_examples_summarization(records, vocab: Vocab, max_tokens: int = 512) -> list[Example]:
    out = []
    for idx, (article, summary) in enumerate(records):
        y = np.concatenate([vocab.encode(summary[:max_tokens]), [Vocab.EOS]])
        out.append(Example(id=f"sum{idx:05d}", x=vocab.encode(article[:max_tokens]), y=y))
    return out


def iter_batches(examples: list[Example], batch_size: int, rng: np.random.Generator):
    """Yield shuffled batches; order is a pure function of the rng state."""
    order = rng.permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


# ----------------------------------------------------------------------
# Degenerative attribute metrics
# ----------------------------------------------------------------------


def corpus_token_counts(sequences) -> Counter:
    """Token occurrence counts over the training split's target sequences."""
    counts: Counter = Counter()
    for seq in sequences:
        counts.update(_as_token_list(seq))
    return counts


def _as_token_list(seq) -> list:
    if isinstance(seq, np.ndarray):
        return [int(t) for t in seq]
    return list(seq)


def avg_frequency(y, corpus_counts) -> float:
    """Arithmetic mean of the corpus-wide counts of y's tokens."""
    toks = _as_token_list(y)
    if not toks:
        raise EmptyInput("avg_frequency: empty sequence")
    total = 0.0
    for t in toks:
        if t not in corpus_counts:
            raise MissingCount(f"avg_frequency: token {t!r} has no corpus count")
        total += corpus_counts[t]
    return total / len(toks)


def repetition_attr(seq) -> float:
    """Fraction of positions whose token already occurred earlier in seq."""
    toks = _as_token_list(seq)
    if not toks:
        raise EmptyInput("repetition_attr: empty sequence")
    seen: set = set()
    repeats = 0
    for t in toks:
        if t in seen:
            repeats += 1
        seen.add(t)
    return repeats / len(toks)


def _ngram_set(tokens: list, n: int) -> set[tuple]:
    return {tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)}


def context_overlap(x, y, n: int = 2) -> float:
    """|ngrams(x) & ngrams(y)| / |ngrams(y)| over n-gram *sets*."""
    xt, yt = _as_token_list(x), _as_token_list(y)
    if len(yt) < n:
        raise TooShort(f"context_overlap: response shorter than n={n}")
    ny = _ngram_set(yt, n)
    nx = _ngram_set(xt, n)
    return len(nx & ny) / len(ny)


def source_entropy(
    responses,
    clusters_ctx: ClusterAssignment,
    clusters_resp: ClusterAssignment,
) -> dict[str, float]:
    """Entropy (bits) of the context-cluster distribution per response cluster.

    ``responses`` is a list of Examples (or bare ids); every example receives
    the entropy of its response's cluster. Low values mean the response
    pattern co-occurs with essentially one kind of context, the signature of
    a generic reply.
    """
    if not responses:
        raise EmptyInput("source_entropy: no examples")
    ids = [r.id if hasattr(r, "id") else str(r) for r in responses]
    by_resp_cluster: dict[int, list[int]] = {}
    for ex_id in ids:
        if ex_id not in clusters_ctx.members or ex_id not in clusters_resp.members:
            raise ContractViolation(f"source_entropy: example {ex_id} missing a cluster")
        by_resp_cluster.setdefault(clusters_resp.members[ex_id], []).append(
            clusters_ctx.members[ex_id]
        )
    entropy_of_cluster: dict[int, float] = {}
    for cy, ctx_clusters in by_resp_cluster.items():
        counts = Counter(ctx_clusters)
        total = sum(counts.values())
        h = 0.0
        for c in counts.values():
            p = c / total
            h -= p * math.log2(p)
        entropy_of_cluster[cy] = h
    return {ex_id: entropy_of_cluster[clusters_resp.members[ex_id]] for ex_id in ids}


def split_by_attribute(
    scores: list[AttributeScore], n: int
) -> tuple[set[str], set[str]]:
    """n highest-scoring ids and n lowest; ties resolved by id order."""
    if 2 * n > len(scores):
        raise ContractViolation(
            f"split_by_attribute: n={n} too large for {len(scores)} scores"
        )
    ordered = sorted(scores, key=lambda s: (s.value, s.example_id))
    bottom = {s.example_id for s in ordered[:n]}
    top = {s.example_id for s in ordered[len(ordered) - n:]}
    return top, bottom


# ----------------------------------------------------------------------
# Scoring orchestration and CSV round trip
# ----------------------------------------------------------------------


def score_lm_attributes(docs: list[tuple[str, list[str]]]) -> list[AttributeScore]:
    """Average-frequency and repetition scores; counts come from this split."""
    counts = corpus_token_counts(tokens for _, tokens in docs)
    out = []
    for doc_id, tokens in docs:
        out.append(AttributeScore(doc_id, "avg_frequency", avg_frequency(tokens, counts)))
        out.append(AttributeScore(doc_id, "repetition", repetition_attr(tokens)))
    return out


def score_dialogue_attributes(
    records: list[tuple[str, list[str], list[str]]],
    bandwidth: float,
    embed_dim: int = 64,
    ngram: int = 2,
) -> list[AttributeScore]:
    """Context-overlap and source-entropy scores for (id, history, response)."""
    out = []
    for rec_id, hist, resp in records:
        if len(resp) >= ngram:
            out.append(
                AttributeScore(rec_id, "context_overlap", context_overlap(hist, resp, ngram))
            )
    ids = [rec_id for rec_id, _, _ in records]
    ctx_vecs = trigram_embed([" ".join(h) for _, h, _ in records], dim=embed_dim)
    resp_vecs = trigram_embed([" ".join(r) for _, _, r in records], dim=embed_dim)
    clusters_ctx = mean_shift(ctx_vecs, bandwidth, ids=ids)
    clusters_resp = mean_shift(resp_vecs, bandwidth, ids=ids)
    entropies = source_entropy(ids, clusters_ctx, clusters_resp)
    out.extend(
        AttributeScore(rec_id, "source_entropy", entropies[rec_id]) for rec_id in ids
    )
    return out


def write_scores_csv(path, scores: list[AttributeScore]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_id", "metric", "value"])
        for s in scores:
            writer.writerow([s.example_id, s.metric, repr(s.value)])


def read_scores_csv(path) -> list[AttributeScore]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["example_id", "metric", "value"]:
            raise DataFormatError(f"{path}: line 1: expected attribute-score header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataFormatError(f"{path}: line {lineno}: expected 3 columns")
            out.append(AttributeScore(row[0], row[1], float(row[2])))
    return out

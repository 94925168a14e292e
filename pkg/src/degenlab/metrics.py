"""Evaluation metrics over generated corpora.

Sequence-level inputs are plain token lists (any hashable token type);
corpus-level inputs are lists of such sequences. Everything here is a pure
function; the report layer records which generation and reference files a
value came from.

Two perplexity variants are always reported together: ``ppl_paper`` is the
arithmetic mean of per-token reciprocal probabilities, ``ppl_standard`` the
usual exponentiated mean NLL. The arithmetic-mean variant dominates the
geometric one (Jensen), with equality exactly when every target probability
is the same.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from degenlab.errors import (
    ContractViolation,
    EmptyInput,
    TooFew,
    TooShort,
    Undefined,
)

__all__ = [
    "MetricReport",
    "bleu",
    "distinct_n",
    "kld_unigram",
    "novel_n",
    "ppl_from_logprobs",
    "repetition_gen",
    "rouge",
    "self_bleu",
    "unique_tokens",
    "write_reports_csv",
    "write_reports_jsonl",
    "zipf_coefficient",
]


@dataclass
class MetricReport:
    """One named scalar plus the provenance needed to recompute it."""

    metric: str
    value: float
    n: int | None = None
    counts: dict = field(default_factory=dict)
    generations_file: str = ""
    reference_file: str = ""


# ----------------------------------------------------------------------
# Perplexity
# ----------------------------------------------------------------------


def ppl_from_logprobs(unit_logprobs: list[np.ndarray]) -> dict[str, float]:
    """Both perplexity variants over the pooled target positions.

    ``unit_logprobs`` holds, per test unit, the log probability the model
    assigned to each ground-truth target token. Positions whose probability
    underflowed to zero make the reciprocal-mean variant infinite; that is
    reported rather than masked, with a flag.
    """
    pooled = [lp for unit in unit_logprobs for lp in np.asarray(unit, dtype=float)]
    if not pooled:
        raise EmptyInput("ppl_from_logprobs: no target positions")
    nll = -np.asarray(pooled)
    with np.errstate(over="ignore"):
        recip = np.exp(nll)
    paper = float(np.mean(recip))
    standard = float(np.exp(np.mean(nll)))
    return {
        "ppl_paper": paper,
        "ppl_standard": standard,
        "had_zero_probability": bool(np.isinf(recip).any()),
    }


# ----------------------------------------------------------------------
# Corpus statistics
# ----------------------------------------------------------------------


def zipf_coefficient(corpus: list[list]) -> float:
    """Negated least-squares slope of log frequency against log rank."""
    counts = Counter(t for seq in corpus for t in seq)
    if len(counts) < 2:
        raise Undefined("zipf_coefficient: need at least two distinct tokens")
    freqs = np.sort(np.array(list(counts.values()), dtype=float))[::-1]
    ranks = np.arange(1, len(freqs) + 1, dtype=float)
    x, y = np.log(ranks), np.log(freqs)
    slope = np.sum((x - x.mean()) * (y - y.mean())) / np.sum((x - x.mean()) ** 2)
    return float(-slope)


def repetition_gen(seq: list, window: int | None = None) -> float:
    """Fraction of positions whose token occurs in the preceding window.

    window=None means an unbounded window (the ground-truth repetition
    formula); a finite window catches loops of bounded period.
    """
    if not len(seq):
        raise EmptyInput("repetition_gen: empty sequence")
    toks = list(seq)
    repeats = 0
    for t, tok in enumerate(toks):
        lo = 0 if window is None else max(0, t - window)
        if tok in toks[lo:t]:
            repeats += 1
    return repeats / len(toks)


def unique_tokens(corpus: list[list]) -> int:
    """Number of distinct token types across all generations."""
    return len({t for seq in corpus for t in seq})


def kld_unigram(generated: list[list], reference: list[list], epsilon: float = 1e-9) -> float:
    """KL(reference || generated) over the union unigram vocabulary.

    Both distributions get additive-epsilon smoothing and renormalization;
    reference-first direction punishes generations that miss human modes.
    """
    gen_counts = Counter(t for seq in generated for t in seq)
    ref_counts = Counter(t for seq in reference for t in seq)
    if not gen_counts or not ref_counts:
        raise EmptyInput("kld_unigram: empty corpus")
    vocab = sorted(set(gen_counts) | set(ref_counts), key=repr)
    p = np.array([ref_counts[t] + epsilon for t in vocab])
    q = np.array([gen_counts[t] + epsilon for t in vocab])
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


# ----------------------------------------------------------------------
# n-gram overlap metrics
# ----------------------------------------------------------------------


def _ngram_counts(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: list, references: list[list], max_n: int = 4) -> float:
    """Geometric mean of clipped n-gram precisions with brevity penalty.

    Zero-count precisions are add-one smoothed ((matches+1)/(total+1)); some
    smoothing is mandatory at small scale or every metric hits hard zero.
    """
    if not len(candidate):
        raise EmptyInput("bleu: empty candidate")
    if not references:
        raise ContractViolation("bleu: need at least one reference")
    cand = list(candidate)
    log_precisions = []
    for n in range(1, max_n + 1):
        cand_counts = _ngram_counts(cand, n)
        total = sum(cand_counts.values())
        max_ref = Counter()
        for ref in references:
            for g, c in _ngram_counts(list(ref), n).items():
                if c > max_ref[g]:
                    max_ref[g] = c
        matches = sum(min(c, max_ref[g]) for g, c in cand_counts.items())
        if matches == 0:
            matches, total = matches + 1, total + 1
        log_precisions.append(math.log(matches / total))
    c_len = len(cand)
    # Closest reference length; shorter wins ties.
    r_len = min((abs(len(r) - c_len), len(r)) for r in references)[1]
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(sum(log_precisions) / max_n)


def self_bleu(corpus: list[list], n: int = 4) -> float:
    """Mean BLEU of each sequence against all the others; high means samey."""
    if len(corpus) < 2:
        raise TooFew("self_bleu: need at least two generations")
    scores = []
    for i, seq in enumerate(corpus):
        refs = [s for j, s in enumerate(corpus) if j != i]
        scores.append(bleu(seq, refs, max_n=n))
    return float(np.mean(scores))


def distinct_n(corpus: list[list], n: int) -> float:
    """Distinct n-grams divided by total n-gram occurrences, corpus-pooled."""
    seen: set = set()
    total = 0
    for seq in corpus:
        toks = list(seq)
        for i in range(len(toks) - n + 1):
            seen.add(tuple(toks[i:i + n]))
            total += 1
    if total == 0:
        raise Undefined(f"distinct_n: no {n}-grams in corpus")
    return len(seen) / total


def novel_n(summary: list, article: list, n: int) -> float:
    """Fraction of summary n-gram occurrences absent from the article."""
    summ = list(summary)
    if len(summ) < n:
        raise TooShort(f"novel_n: summary shorter than n={n}")
    article_grams = set(_ngram_counts(list(article), n))
    grams = [tuple(summ[i:i + n]) for i in range(len(summ) - n + 1)]
    novel = sum(1 for g in grams if g not in article_grams)
    return novel / len(grams)


def _lcs_length(a: list, b: list) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(cur[-1], prev[j]))
        prev = cur
    return prev[-1]


def rouge(candidate: list, reference: list, variant: str) -> float:
    """F1 of unigram overlap (r1), bigram overlap (r2), or LCS (rL)."""
    cand, ref = list(candidate), list(reference)
    if not cand or not ref:
        raise EmptyInput("rouge: empty input")
    if variant in ("r1", "r2"):
        n = 1 if variant == "r1" else 2
        cc, rc = _ngram_counts(cand, n), _ngram_counts(ref, n)
        if not cc or not rc:
            return 0.0
        matches = sum(min(c, rc[g]) for g, c in cc.items())
        precision = matches / sum(cc.values())
        recall = matches / sum(rc.values())
    elif variant == "rL":
        lcs = _lcs_length(cand, ref)
        precision = lcs / len(cand)
        recall = lcs / len(ref)
    else:
        raise ContractViolation(f"rouge: unknown variant {variant!r}")
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ----------------------------------------------------------------------
# Report serialization
# ----------------------------------------------------------------------


def write_reports_jsonl(path, reports: list[MetricReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps({
                "metric": r.metric,
                "value": r.value,
                "n": r.n,
                "counts": r.counts,
                "generations_file": r.generations_file,
                "reference_file": r.reference_file,
            }, sort_keys=True) + "\n")


def write_reports_csv(path, reports: list[MetricReport]) -> None:
    """Flat one-row summary: one column per metric (n-suffixed when set)."""
    cols = []
    values = []
    for r in reports:
        name = r.metric if r.n is None else f"{r.metric}_{r.n}"
        cols.append(name)
        values.append(repr(r.value))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        writer.writerow(values)

"""Deterministic toy corpora with controllable degeneration.

The language-modeling fixture mixes two document populations: "degenerate"
documents are short token templates looped several times (head-heavy token
frequencies, high within-document repetition), while "diverse" documents are
uniform draws from a larger tail vocabulary. The dialogue fixture mixes
generic responses that appear under every topic with responses that reuse
words from their own history. Everything is a pure function of the seed.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "make_dialogue_corpus",
    "make_lm_corpus",
    "make_summarization_corpus",
]


def _word(i: int) -> str:
    return f"w{i:02d}"


def make_lm_corpus(
    out_dir,
    n_docs: int = 120,
    degenerate_frac: float = 0.5,
    head_vocab: int = 8,
    tail_vocab: int = 48,
    template_count: int = 4,
    template_len: int = 6,
    segments: int = 4,
    degen_template_rate: float = 0.85,
    diverse_template_rate: float = 0.2,
    seed: int = 0,
    splits: tuple = (("train", 1.0), ("valid", 0.2), ("test", 0.2)),
) -> dict[str, str]:
    """Write blank-line-separated LM splits; returns split name -> path.

    Documents are built segment by segment from a shared vocabulary, so the
    two populations overlap: a degenerate document mostly repeats one
    head-vocabulary template (an attractor any model can fall into from any
    context), while a diverse document is mostly uniform tail noise with the
    occasional template. Split sizes are fractions of n_docs; each split
    redraws from the same populations with its own substream.
    """
    os.makedirs(out_dir, exist_ok=True)
    head = [_word(i) for i in range(head_vocab)]
    tail = [_word(head_vocab + i) for i in range(tail_vocab)]
    rng = np.random.default_rng([seed, 23])
    templates = [
        list(rng.choice(head, size=template_len, replace=False))
        for _ in range(template_count)
    ]
    paths = {}
    for split_idx, (name, frac) in enumerate(splits):
        sub = np.random.default_rng([seed, 29, split_idx])
        count = max(1, int(round(n_docs * frac)))
        docs = []
        for _ in range(count):
            degenerate = sub.random() < degenerate_frac
            rate = degen_template_rate if degenerate else diverse_template_rate
            own_template = templates[sub.integers(len(templates))]
            doc: list[str] = []
            for _ in range(segments):
                if sub.random() < rate:
                    # Degenerate docs loop their own template; diverse docs
                    # occasionally quote a random one.
                    doc.extend(own_template if degenerate
                               else templates[sub.integers(len(templates))])
                else:
                    doc.extend(sub.choice(tail, size=template_len, replace=True))
            docs.append(doc)
        path = os.path.join(out_dir, f"{name}.txt")
        with open(path, "w", encoding="utf-8") as fh:
            for doc in docs:
                fh.write(" ".join(doc) + "\n\n")
        paths[name] = path
    return paths


_TOPICS = {
    "food": ["pizza", "pasta", "soup", "salad", "bread", "cheese"],
    "sport": ["tennis", "soccer", "running", "swimming", "chess", "golf"],
    "travel": ["paris", "tokyo", "rome", "cairo", "oslo", "lima"],
    "music": ["piano", "guitar", "drums", "violin", "flute", "cello"],
    "work": ["meeting", "report", "deadline", "office", "email", "project"],
}

_GENERIC_RESPONSES = [
    "i do not know",
    "that is good",
    "i see",
]

# Histories are deliberately topic-word heavy so that any reasonable text
# embedding clusters them by topic rather than by phrasing.
_HISTORY_TEMPLATES = [
    "{a} {b} or {c}",
    "what about {a} {b} {c}",
    "{a} and {b} near {c} __eou__ {a} again",
    "{a} {b} today",
]

_SPECIFIC_TEMPLATES = [
    "{a} {b} sounds nice",
    "i prefer {a} over {b}",
    "{a} {b} again please",
]


def make_dialogue_corpus(
    out_dir,
    n_dialogues: int = 200,
    generic_frac: float = 0.35,
    seed: int = 0,
    splits: tuple = (("train", 0.8), ("valid", 0.1), ("test", 0.1)),
) -> dict[str, str]:
    """Write TAB-separated history/response splits; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    topic_names = sorted(_TOPICS)
    paths = {}
    for split_idx, (name, frac) in enumerate(splits):
        sub = np.random.default_rng([seed, 31, split_idx])
        count = max(1, int(round(n_dialogues * frac)))
        lines = []
        for _ in range(count):
            topic = topic_names[sub.integers(len(topic_names))]
            words = _TOPICS[topic]
            a, b, c = sub.choice(words, size=3, replace=False)
            history = _HISTORY_TEMPLATES[sub.integers(len(_HISTORY_TEMPLATES))].format(
                a=a, b=b, c=c)
            if sub.random() < generic_frac:
                response = _GENERIC_RESPONSES[sub.integers(len(_GENERIC_RESPONSES))]
            else:
                # Half the specific responses echo the history's word pair,
                # giving the context-overlap metric a real distribution.
                if sub.random() < 0.5:
                    d, e = a, b
                else:
                    d, e = sub.choice(words, size=2, replace=False)
                response = _SPECIFIC_TEMPLATES[sub.integers(len(_SPECIFIC_TEMPLATES))].format(
                    a=d, b=e)
            lines.append(f"{history}\t{response}")
        path = os.path.join(out_dir, f"{name}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        paths[name] = path
    return paths


def make_summarization_corpus(
    out_dir,
    n_records: int = 60,
    seed: int = 0,
    splits: tuple = (("train", 0.8), ("valid", 0.1), ("test", 0.1)),
) -> dict[str, str]:
    """Write TAB-separated article/summary splits; mostly extractive summaries."""
    os.makedirs(out_dir, exist_ok=True)
    vocab = [_word(i) for i in range(40)]
    paths = {}
    for split_idx, (name, frac) in enumerate(splits):
        sub = np.random.default_rng([seed, 37, split_idx])
        count = max(1, int(round(n_records * frac)))
        lines = []
        for _ in range(count):
            article = list(sub.choice(vocab, size=18, replace=True))
            summary = article[:5]
            if sub.random() < 0.5:
                summary = summary + [vocab[sub.integers(len(vocab))]]
            lines.append(" ".join(article) + "\t" + " ".join(summary))
        path = os.path.join(out_dir, f"{name}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        paths[name] = path
    return paths

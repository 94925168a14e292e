"""Sequence generation: greedy decoding and seeded top-k sampling.

Reproducibility contract: the sampler is a PCG64 generator (numpy's named,
documented bit generator) seeded from the decode config, and generation
consumes exactly one uniform double per sampled token - greedy consumes
none. Ties anywhere break toward the smaller token index, making greedy
decoding bit-reproducible.

Generated sequences serialize as line-delimited JSON records
``{"id": ..., "condition": ..., "output": ...}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from degenlab import model as M
from degenlab.errors import ContractViolation, DataFormatError, LengthExceeded

__all__ = [
    "DecodeConfig",
    "GenerationRecord",
    "generate",
    "greedy_step",
    "read_generations",
    "top_k_step",
    "write_generations",
]

STRATEGY_GREEDY = "greedy"
STRATEGY_TOP_K = "top_k"


@dataclass
class DecodeConfig:
    strategy: str = STRATEGY_TOP_K
    k: int = 20
    max_new_tokens: int = 100
    prefix_len: int = 50
    seed: int = 0
    stop_tokens: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.strategy not in (STRATEGY_GREEDY, STRATEGY_TOP_K):
            raise ContractViolation(f"unknown decode strategy {self.strategy!r}")
        if self.k < 1:
            raise ContractViolation("k must be >= 1")
        if self.max_new_tokens < 1:
            raise ContractViolation("max_new_tokens must be >= 1")
        self.stop_tokens = frozenset(int(t) for t in self.stop_tokens)


@dataclass
class GenerationRecord:
    id: str
    condition: str
    output: str


def greedy_step(row: np.ndarray) -> int:
    """Argmax token of one log-prob row; smallest index wins exact ties."""
    return int(np.argmax(row))


def top_k_step(row: np.ndarray, k: int, rng: np.random.Generator) -> int:
    """Sample from the k most probable tokens after renormalization.

    k=1 reduces to greedy, k >= vocab to sampling from the full row. The
    candidate set and the inverse-CDF walk are both ordered by (probability
    descending, token index ascending), and exactly one rng draw is used.
    """
    if k < 1:
        raise ContractViolation("top_k_step: k must be >= 1")
    v = len(row)
    k = min(k, v)
    probs = np.exp(row)
    # Stable candidate order: descending probability, index breaks ties.
    order = np.lexsort((np.arange(v), -probs))[:k]
    chosen = probs[order]
    chosen = chosen / chosen.sum()
    u = rng.random()
    cum = 0.0
    for idx, p in zip(order, chosen):
        cum += p
        if u < cum:
            return int(idx)
    return int(order[-1])  # u landed on accumulated rounding slack


def generate(
    params: M.ParameterSet,
    model_cfg: M.ModelConfig,
    cfg: DecodeConfig,
    condition: np.ndarray,
    next_fn=None,
) -> np.ndarray:
    """Autoregressive continuation of ``condition``.

    Stops after max_new_tokens or right after emitting a stop token (the
    stop token stays in the output). ``next_fn`` defaults to the model's
    next-token distribution and exists so tests can rig the distribution.
    """
    condition = np.asarray(condition, dtype=np.int64)
    if next_fn is None:
        if model_cfg.arch == M.ARCH_DECODER_ONLY:
            needed = len(condition) + cfg.max_new_tokens
        else:
            needed = max(1 + len(condition), cfg.max_new_tokens)
        if needed > model_cfg.max_positions:
            raise LengthExceeded(
                f"condition of {len(condition)} tokens plus {cfg.max_new_tokens} new "
                f"tokens does not fit in {model_cfg.max_positions} positions"
            )
    if next_fn is None:
        next_fn = lambda prefix: M.next_logprobs(params, model_cfg, condition, prefix)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    out: list[int] = []
    for _ in range(cfg.max_new_tokens):
        row = next_fn(np.array(out, dtype=np.int64))
        if cfg.strategy == STRATEGY_GREEDY:
            token = greedy_step(row)
        else:
            token = top_k_step(row, cfg.k, rng)
        out.append(token)
        if token in cfg.stop_tokens:
            break
    return np.array(out, dtype=np.int64)


def write_generations(path, records: list[GenerationRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(
                {"id": rec.id, "condition": rec.condition, "output": rec.output},
                sort_keys=True,
            ) + "\n")


def read_generations(path) -> list[GenerationRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(GenerationRecord(rec["id"], rec["condition"], rec["output"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: bad generation record") from exc
    return out

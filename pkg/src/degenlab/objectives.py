"""Training losses: maximum likelihood, its baselines, small-loss truncation,
and the product-of-experts combination against a frozen degenerative expert.

All losses take a log-probability matrix (rows = target positions, columns =
vocabulary) and integer targets, and return scalar tensors that participate
in the autodiff tape. Reductions are sums over valid positions, matching the
written objectives; the trainer may rescale by valid-token count for
optimizer stability and records that choice in its log.

Natural logarithms throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from degenlab import autodiff as ad
from degenlab.autodiff import Tensor
from degenlab.errors import ContractViolation, EmptyInput, Unimplemented

__all__ = [
    "ObjectiveConfig",
    "TokenLossVector",
    "batch_objective",
    "combined_poe_loss",
    "cp_loss",
    "focal_loss",
    "mle_loss",
    "poe_loss",
    "poe_sigma",
    "small_loss_select",
    "token_nll",
    "truncated_ce_loss",
    "ul_repeat_loss",
]

OBJECTIVE_KINDS = ("mle", "focal", "cp", "ul_repeat", "truncated_ce", "poe_combined")
# Named in configs for completeness; their mechanics live in other work and
# are deliberately not reimplemented here.
STUB_KINDS = ("face", "dialogue_ul")


@dataclass
class TokenLossVector:
    """Per-position negative log-likelihoods with a validity mask."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ContractViolation("TokenLossVector: values/mask shape mismatch")

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())


@dataclass
class ObjectiveConfig:
    """Loss selection plus the knobs each kind consumes.

    Fields irrelevant to ``kind`` are ignored when the objective runs but are
    still validated whenever present.
    """

    kind: str = "mle"
    gamma: float = 2.0
    cp_weight: float = 2.5
    ul_weight: float = 1.0
    r: float = 0.7
    lam: float = 0.5

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS + STUB_KINDS:
            raise ContractViolation(f"unknown objective kind {self.kind!r}")
        if self.gamma < 0:
            raise ContractViolation("gamma must be >= 0")
        if self.cp_weight < 0:
            raise ContractViolation("cp_weight must be >= 0")
        if self.ul_weight < 0:
            raise ContractViolation("ul_weight must be >= 0")
        if not 0.0 < self.r <= 1.0:
            raise ContractViolation("r must lie in (0, 1]")
        if self.lam < 0:
            raise ContractViolation("lam must be >= 0")


def _check_pair(logp: Tensor, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if logp.data.ndim != 2:
        raise ContractViolation("expected a 2-D log-probability matrix")
    if logp.data.shape[0] != len(y):
        raise ContractViolation(
            f"log-prob rows ({logp.data.shape[0]}) must equal target length ({len(y)})"
        )
    return y


def token_nll(logp: Tensor, y: np.ndarray) -> Tensor:
    """Differentiable per-position negative log-likelihood vector."""
    y = _check_pair(logp, y)
    return ad.neg(ad.take_per_row(logp, y))


def mle_loss(logp: Tensor, y: np.ndarray) -> tuple[Tensor, TokenLossVector]:
    """Summed negative log-likelihood plus the per-token terms."""
    nll = token_nll(logp, y)
    vec = TokenLossVector(nll.data.copy(), np.ones(len(nll.data), dtype=bool))
    return ad.tensor_sum(nll), vec


def focal_loss(logp: Tensor, y: np.ndarray, gamma: float) -> Tensor:
    """Down-weight confidently predicted tokens: sum (1 - p_t)^gamma * nll_t."""
    if gamma < 0:
        raise ContractViolation("focal_loss: gamma must be >= 0")
    nll = token_nll(logp, y)
    p = ad.exp(ad.take_per_row(logp, _check_pair(logp, y)))
    weight = ad.pow_const(1.0 - p, gamma)
    return ad.tensor_sum(weight * nll)


def cp_loss(logp: Tensor, y: np.ndarray, cp_weight: float) -> Tensor:
    """Confidence penalty: NLL minus cp_weight times summed row entropies."""
    if cp_weight < 0:
        raise ContractViolation("cp_loss: cp_weight must be >= 0")
    loss, _ = mle_loss(logp, y)
    probs = ad.exp(logp)
    entropy = ad.neg(ad.tensor_sum(probs * logp))
    return loss - cp_weight * entropy


def ul_repeat_loss(logp: Tensor, y: np.ndarray, ul_weight: float) -> Tensor:
    """NLL plus an unlikelihood penalty on previously seen target tokens.

    Candidates at position t are the distinct tokens of y_<t minus y_t; each
    contributes -log(1 - p(candidate at t)).
    """
    if ul_weight < 0:
        raise ContractViolation("ul_repeat_loss: ul_weight must be >= 0")
    y = _check_pair(logp, y)
    loss, _ = mle_loss(logp, y)
    rows, cols = [], []
    seen: set[int] = set()
    for t, target in enumerate(y):
        for c in seen:
            if c != target:
                rows.append(t)
                cols.append(c)
        seen.add(int(target))
    if rows:
        p_cand = ad.exp(ad.take_at(logp, np.array(rows), np.array(cols)))
        penalty = ad.neg(ad.tensor_sum(ad.log(1.0 - p_cand)))
        loss = loss + ul_weight * penalty
    return loss


def small_loss_select(batch: list[TokenLossVector], r: float) -> list[np.ndarray]:
    """Boolean keep-masks for the max(1, floor(r * N_valid)) smallest losses.

    Selection pools tokens across the whole batch; ties break by (sequence
    index, position), so the result is deterministic.
    """
    if not 0.0 < r <= 1.0:
        raise ContractViolation("small_loss_select: r must lie in (0, 1]")
    entries = []  # (loss, seq_idx, pos)
    for si, vec in enumerate(batch):
        for pos in range(len(vec.values)):
            if vec.mask[pos]:
                entries.append((float(vec.values[pos]), si, pos))
    if not entries:
        raise EmptyInput("small_loss_select: no valid tokens in batch")
    keep = max(1, int(np.floor(r * len(entries))))
    entries.sort()
    masks = [np.zeros(len(vec.values), dtype=bool) for vec in batch]
    for _, si, pos in entries[:keep]:
        masks[si][pos] = True
    return masks


def truncated_ce_loss(
    logps: list[Tensor], ys: list[np.ndarray], r: float
) -> tuple[Tensor, int]:
    """Cross entropy over only the selected small-loss tokens of the batch.

    Gradients flow through selected positions exclusively; everything else is
    multiplied by a constant zero. Returns (loss, number of selected tokens).
    """
    if len(logps) != len(ys):
        raise ContractViolation("truncated_ce_loss: batch length mismatch")
    nlls = [token_nll(lp, y) for lp, y in zip(logps, ys)]
    vectors = [
        TokenLossVector(nll.data.copy(), np.ones(len(nll.data), dtype=bool))
        for nll in nlls
    ]
    masks = small_loss_select(vectors, r)
    total: Tensor | None = None
    selected = 0
    for nll, mask in zip(nlls, masks):
        selected += int(mask.sum())
        term = ad.tensor_sum(nll * Tensor(mask.astype(np.float64)))
        total = term if total is None else total + term
    return total, selected


def poe_sigma(logp_d: Tensor, logp_m: Tensor) -> Tensor:
    """Combine expert and main log probabilities by elementwise addition."""
    if logp_d.data.shape != logp_m.data.shape:
        raise ContractViolation("poe_sigma: shape mismatch")
    return logp_d + logp_m


def poe_loss(logp_d: Tensor, logp_m: Tensor, y: np.ndarray) -> Tensor:
    """NLL of the renormalized product distribution at the targets.

    The expert side is detached: its parameters stay frozen, so no gradient
    may reach them through this loss.
    """
    sigma = poe_sigma(ad.detach(logp_d), logp_m)
    combined = ad.log_softmax(sigma)
    return ad.tensor_sum(token_nll(combined, y))


def combined_poe_loss(
    logp_d: Tensor, logp_m: Tensor, y: np.ndarray, lam: float
) -> Tensor:
    """Main-model NLL plus lam times the product-of-experts NLL."""
    if lam < 0:
        raise ContractViolation("combined_poe_loss: lam must be >= 0")
    loss, _ = mle_loss(logp_m, y)
    if lam == 0.0:
        return loss
    return loss + lam * poe_loss(logp_d, logp_m, y)


def batch_objective(cfg: ObjectiveConfig):
    """Per-sequence loss callable for the standard (non-schedule) objectives.

    Kinds with externally defined mechanics exist as named stubs only.
    """
    if cfg.kind in STUB_KINDS:
        raise Unimplemented(
            f"objective {cfg.kind!r} is a named configuration without an implementation"
        )
    if cfg.kind == "mle":
        return lambda logp, y: mle_loss(logp, y)[0]
    if cfg.kind == "focal":
        return lambda logp, y: focal_loss(logp, y, cfg.gamma)
    if cfg.kind == "cp":
        return lambda logp, y: cp_loss(logp, y, cfg.cp_weight)
    if cfg.kind == "ul_repeat":
        return lambda logp, y: ul_repeat_loss(logp, y, cfg.ul_weight)
    raise ContractViolation(
        f"objective {cfg.kind!r} is schedule-driven; use the dedicated trainer entry point"
    )

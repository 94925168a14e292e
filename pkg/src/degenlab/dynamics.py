"""Training-dynamics analysis: group-wise log perplexity across checkpoints.

Score every training example for a degenerative attribute, split off the n
highest and n lowest scorers, then evaluate each epoch checkpoint's mean
log perplexity on both groups. When the high-attribute curve sits below the
low-attribute curve, the model is learning the degenerate patterns first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from degenlab import model as M
from degenlab.corpus import AttributeScore, Example, split_by_attribute
from degenlab.errors import ContractViolation, EmptyInput

__all__ = ["DynamicsCurve", "group_log_ppl", "run_dynamics", "write_curves_csv"]


@dataclass
class DynamicsCurve:
    metric: str
    group: str  # "high" or "low"
    points: list  # [(epoch, mean log perplexity)]


def _unit_means(nll: np.ndarray, y: np.ndarray, sentence_level: bool,
                terminators: set[int]) -> list[float]:
    if not sentence_level:
        return [float(nll.mean())]
    units: list[float] = []
    start = 0
    for t, tok in enumerate(y):
        if int(tok) in terminators:
            units.append(float(nll[start:t + 1].mean()))
            start = t + 1
    if start < len(y):
        units.append(float(nll[start:].mean()))
    return units


def group_log_ppl(
    params: M.ParameterSet,
    model_cfg: M.ModelConfig,
    group: list[Example],
    sentence_level: bool = False,
    terminators: set[int] | None = None,
    logp_fn=None,
) -> float:
    """Mean over units of per-token NLL; units are sentences when requested.

    Sentences end at any terminator token (terminator included); a trailing
    fragment without a terminator counts as its own unit. ``logp_fn``
    defaults to a model forward pass and exists so tests can rig the
    distribution.
    """
    if not group:
        raise EmptyInput("group_log_ppl: empty group")
    if sentence_level and not terminators:
        raise ContractViolation("group_log_ppl: sentence_level needs terminator tokens")
    if logp_fn is None:
        logp_fn = lambda ex: M.forward(params, model_cfg, ex.x, ex.y).data
    units: list[float] = []
    for ex in group:
        logp = logp_fn(ex)
        nll = -logp[np.arange(len(ex.y)), ex.y]
        units.extend(_unit_means(nll, ex.y, sentence_level, terminators or set()))
    return float(np.mean(units))


def run_dynamics(
    checkpoints: list[tuple[int, str]],
    examples: list[Example],
    scores: list[AttributeScore],
    metric: str,
    n: int,
    sentence_level: bool = False,
    terminators: set[int] | None = None,
) -> tuple[DynamicsCurve, DynamicsCurve]:
    """High/low-attribute log-perplexity curves over ordered checkpoints.

    ``checkpoints`` is an ordered list of (epoch, checkpoint path).
    """
    if len(checkpoints) < 2:
        raise ContractViolation("run_dynamics: need at least two checkpoints")
    relevant = [s for s in scores if s.metric == metric]
    if not relevant:
        raise EmptyInput(f"run_dynamics: no scores for metric {metric!r}")
    top_ids, bottom_ids = split_by_attribute(relevant, n)
    by_id = {ex.id: ex for ex in examples}
    missing = (top_ids | bottom_ids) - set(by_id)
    if missing:
        raise ContractViolation(f"run_dynamics: scored ids missing from examples: {sorted(missing)[:3]}")
    high_group = [by_id[i] for i in sorted(top_ids)]
    low_group = [by_id[i] for i in sorted(bottom_ids)]

    high = DynamicsCurve(metric, "high", [])
    low = DynamicsCurve(metric, "low", [])
    last_epoch = None
    for epoch, path in checkpoints:
        if last_epoch is not None and epoch <= last_epoch:
            raise ContractViolation("run_dynamics: checkpoint epochs must increase")
        last_epoch = epoch
        params, cfg = M.load_checkpoint(path)
        high.points.append(
            (epoch, group_log_ppl(params, cfg, high_group, sentence_level, terminators))
        )
        low.points.append(
            (epoch, group_log_ppl(params, cfg, low_group, sentence_level, terminators))
        )
    return high, low


def write_curves_csv(path, curves: list[DynamicsCurve]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "group", "epoch", "log_ppl"])
        for curve in curves:
            for epoch, value in curve.points:
                writer.writerow([curve.metric, curve.group, epoch, repr(value)])

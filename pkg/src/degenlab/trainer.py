"""Optimization loops for the degeneration lab.

Three entry points share one epoch engine so that reductions hold bitwise:

* :func:`train_standard` - plain objective training with per-epoch
  checkpoints and validation-loss model selection;
* :func:`train_degenerative` - the two-phase schedule that first runs K
  ordinary steps and then H steps of small-loss truncated cross entropy,
  returning a frozen parameter set;
* :func:`train_main_poe` - trains the main model with NLL plus a weighted
  product-of-experts term against the frozen degenerative expert. With
  weight 0 the expert is never consulted, which makes the run bit-identical
  to standard MLE training on the same seed (the reduction check).

Determinism contract: (seed, data, config) fully determine every checkpoint
byte. Batch order comes from a per-epoch PCG64 stream, dropout from a second
run-long stream; evaluation forwards never consume randomness.

Per-step losses are normalized by the number of contributing tokens for
optimizer stability; the written objectives are sums, and the normalization
is recorded in the TrainLog meta.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from degenlab import autodiff as ad
from degenlab import model as M
from degenlab import objectives as obj
from degenlab.corpus import Example, iter_batches
from degenlab.errors import ContractViolation, DivergenceDetected
from degenlab.model import ModelConfig, ParameterSet

__all__ = [
    "Adam",
    "TrainConfig",
    "TrainLog",
    "resolve_phase_steps",
    "schedule_lr",
    "train_degenerative",
    "train_main_poe",
    "train_standard",
    "validation_loss",
]

PHASE_STANDARD = "standard"
PHASE_TRUNCATED = "truncated"


@dataclass
class TrainConfig:
    """Optimization knobs, including the two-phase schedule and PoE weight.

    K and H may be given directly in steps (``k_steps``/``h_steps``) or as
    epoch multiples (``k_epochs``/``h_epochs``) resolved against the dataset
    at run time; explicit steps win.
    """

    learning_rate: float = 1e-4
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    r: float = 0.7
    lam: float = 0.5
    k_steps: int | None = None
    h_steps: int | None = None
    k_epochs: float = 1.0
    h_epochs: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    eval_every_steps: int | None = None
    init_from: str | None = None
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        if self.epochs < 0:
            raise ContractViolation("epochs must be >= 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if not 0.0 < self.r <= 1.0:
            raise ContractViolation("r must lie in (0, 1]")
        if self.lam < 0:
            raise ContractViolation("lam must be >= 0")
        if self.k_steps is not None and self.k_steps < 0:
            raise ContractViolation("k_steps must be >= 0")
        if self.h_steps is not None and self.h_steps < 1:
            raise ContractViolation("h_steps must be >= 1")
        if self.warmup_steps < 0:
            raise ContractViolation("warmup_steps must be >= 0")


@dataclass
class StepRecord:
    step: int
    phase: str
    loss: float
    selected_token_count: int
    learning_rate: float


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    validation_loss: float | None
    checkpoint: str


@dataclass
class TrainLog:
    """Structured per-step and per-epoch training record."""

    meta: dict = field(default_factory=dict)
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def add_step(self, rec: StepRecord) -> None:
        if self.steps:
            if rec.step <= self.steps[-1].step:
                raise ContractViolation("TrainLog: steps must be strictly increasing")
            if self.steps[-1].phase == PHASE_TRUNCATED and rec.phase == PHASE_STANDARD:
                raise ContractViolation("TrainLog: standard phase after truncated phase")
        self.steps.append(rec)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "meta", **self.meta}, sort_keys=True) + "\n")
            for s in self.steps:
                fh.write(json.dumps({"type": "step", **asdict(s)}, sort_keys=True) + "\n")
            for e in self.epochs:
                fh.write(json.dumps({"type": "epoch", **asdict(e)}, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrainLog":
        log = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("type")
                if kind == "meta":
                    log.meta = rec
                elif kind == "step":
                    log.add_step(StepRecord(**rec))
                elif kind == "epoch":
                    log.epochs.append(EpochRecord(**rec))
        return log

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.meta, sort_keys=True).encode())
        for s in self.steps:
            h.update(json.dumps(asdict(s), sort_keys=True).encode())
        for e in self.epochs:
            h.update(json.dumps(asdict(e), sort_keys=True).encode())
        return h.hexdigest()


def schedule_lr(step: int, total_steps: int, warmup: int, base_lr: float) -> float:
    """Linear warmup from 0 to base_lr, then linear decay to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ContractViolation("schedule_lr: step outside [0, total_steps]")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup)


class Adam:
    """Adam with bias correction; the sole writer to parameter data."""

    def __init__(self, params: ParameterSet, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if params.frozen:
            raise ContractViolation("Adam: cannot optimize a frozen parameter set")
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            g = tensor.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            tensor.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        self.params.zero_grads()


def resolve_phase_steps(cfg: TrainConfig, steps_per_epoch: int) -> tuple[int, int]:
    """Turn (k_epochs, h_epochs) into concrete step counts unless overridden."""
    k = cfg.k_steps if cfg.k_steps is not None else int(round(cfg.k_epochs * steps_per_epoch))
    h = cfg.h_steps if cfg.h_steps is not None else int(round(cfg.h_epochs * steps_per_epoch))
    if h < 1:
        raise ContractViolation("degenerative schedule needs at least one truncated step")
    return k, h


def validation_loss(params: ParameterSet, model_cfg: ModelConfig,
                    examples: list[Example], per_seq_loss) -> float | None:
    """Mean per-token loss over a held-out set; eval mode, no randomness.

    Returns None when there is nothing to validate on, in which case model
    selection falls back to the final epoch.
    """
    if not examples:
        return None
    total = 0.0
    tokens = 0
    for ex in examples:
        logp = M.forward(params, model_cfg, ex.x, ex.y)
        total += per_seq_loss(logp, ex).item()
        tokens += len(ex.y)
    return total / tokens


def _dropout_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7])


def _shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 11, epoch])


def _guard(loss_value: float, epoch_first: float, factor: float) -> None:
    if not math.isfinite(loss_value):
        raise DivergenceDetected(f"non-finite training loss {loss_value}")
    if epoch_first > 0 and loss_value > factor * epoch_first:
        raise DivergenceDetected(
            f"loss {loss_value:.4f} exceeded {factor:g}x its epoch-start value {epoch_first:.4f}"
        )


def _epoch_driven(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    params: ParameterSet,
    train_examples: list[Example],
    val_examples: list[Example],
    batch_loss,      # (params, batch, rng) -> (Tensor, token_count)
    val_per_seq,     # (logp, example) -> Tensor
    run_dir,
    meta: dict,
) -> tuple[ParameterSet, TrainLog]:
    os.makedirs(run_dir, exist_ok=True)
    if not train_examples:
        raise ContractViolation("training data must be nonempty")
    log = TrainLog(meta=dict(meta, loss_scale="per_token", seed=train_cfg.seed))
    adam = Adam(params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    steps_per_epoch = math.ceil(len(train_examples) / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs
    drop_rng = _dropout_rng(train_cfg.seed)

    M.save_checkpoint(os.path.join(run_dir, "epoch_000.ckpt"), params, model_cfg)
    step = 0
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            rng = _shuffle_rng(train_cfg.seed, epoch)
            epoch_first = None
            epoch_total, epoch_tokens = 0.0, 0
            for batch in iter_batches(train_examples, train_cfg.batch_size, rng):
                lr = schedule_lr(step, total_steps, train_cfg.warmup_steps, train_cfg.learning_rate)
                loss, n_tokens = batch_loss(params, batch, drop_rng)
                norm = loss * (1.0 / n_tokens)
                value = norm.item()
                if epoch_first is None:
                    epoch_first = value
                _guard(value, epoch_first, train_cfg.divergence_factor)
                adam.zero_grad()
                ad.backward(norm)
                adam.step(lr)
                adam.zero_grad()
                step += 1
                log.add_step(StepRecord(step, PHASE_STANDARD, value, n_tokens, lr))
                epoch_total += value * n_tokens
                epoch_tokens += n_tokens
                if train_cfg.eval_every_steps and step % train_cfg.eval_every_steps == 0:
                    log.meta.setdefault("step_evals", []).append(
                        [step, validation_loss(params, model_cfg, val_examples, val_per_seq)]
                    )
            ckpt = f"epoch_{epoch:03d}.ckpt"
            M.save_checkpoint(os.path.join(run_dir, ckpt), params, model_cfg)
            val = validation_loss(params, model_cfg, val_examples, val_per_seq)
            log.epochs.append(EpochRecord(epoch, epoch_total / max(1, epoch_tokens), val, ckpt))
    except DivergenceDetected:
        log.to_jsonl(os.path.join(run_dir, "trainlog.jsonl"))
        raise

    if log.epochs:
        if any(e.validation_loss is None for e in log.epochs):
            best = log.epochs[-1]
        else:
            best = min(log.epochs, key=lambda e: (e.validation_loss, e.epoch))
        log.meta["best_checkpoint"] = best.checkpoint
        best_params, _ = M.load_checkpoint(os.path.join(run_dir, best.checkpoint))
    else:
        log.meta["best_checkpoint"] = "epoch_000.ckpt"
        best_params = params
    log.to_jsonl(os.path.join(run_dir, "trainlog.jsonl"))
    return best_params, log


def _sum_batch_loss(model_cfg: ModelConfig, per_seq):
    def fn(params: ParameterSet, batch: list[Example], rng):
        total = None
        tokens = 0
        for ex in batch:
            logp = M.forward(params, model_cfg, ex.x, ex.y, train=True, rng=rng)
            term = per_seq(logp, ex)
            total = term if total is None else total + term
            tokens += len(ex.y)
        return total, tokens
    return fn


def train_standard(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_examples: list[Example],
    val_examples: list[Example],
    objective_cfg: obj.ObjectiveConfig,
    run_dir,
) -> tuple[ParameterSet, TrainLog]:
    """Ordinary training with the configured objective.

    Writes epoch_000 (initialization) plus one checkpoint per epoch and
    returns the parameters whose validation loss is lowest (earliest epoch
    on ties).
    """
    loss_fn = obj.batch_objective(objective_cfg)
    per_seq = lambda logp, ex: loss_fn(logp, ex.y)
    params = _initial_params(train_cfg, model_cfg)
    meta = {"mode": "standard", "objective": objective_cfg.kind}
    return _epoch_driven(
        train_cfg, model_cfg, params, train_examples, val_examples,
        _sum_batch_loss(model_cfg, per_seq), per_seq, run_dir, meta,
    )


def _initial_params(train_cfg: TrainConfig, model_cfg: ModelConfig) -> ParameterSet:
    if train_cfg.init_from:
        params, ckpt_cfg = M.load_checkpoint(train_cfg.init_from)
        if ckpt_cfg.vocab_size != model_cfg.vocab_size:
            raise ContractViolation("init_from checkpoint has a different vocabulary")
        if params.frozen:
            params = params.copy()
            params.frozen = False
        for t in params.tensors():
            t.requires_grad = True
        return params
    return M.init_parameters(model_cfg)


def train_degenerative(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_examples: list[Example],
    val_examples: list[Example],
    run_dir,
) -> tuple[ParameterSet, TrainLog]:
    """Two-phase schedule: K standard steps, then H truncated-CE steps.

    Phase (b) keeps only the fraction ``r`` of batch tokens with the smallest
    loss, which makes the model overfit exactly the patterns it finds easiest.
    The returned parameter set is frozen; optimizer state carries across the
    phase boundary.
    """
    os.makedirs(run_dir, exist_ok=True)
    if not train_examples:
        raise ContractViolation("training data must be nonempty")
    params = _initial_params(train_cfg, model_cfg)
    steps_per_epoch = math.ceil(len(train_examples) / train_cfg.batch_size)
    k, h = resolve_phase_steps(train_cfg, steps_per_epoch)
    total = k + h
    log = TrainLog(meta={
        "mode": "degenerative", "k_steps": k, "h_steps": h, "r": train_cfg.r,
        "loss_scale": "per_token", "seed": train_cfg.seed,
    })
    adam = Adam(params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    drop_rng = _dropout_rng(train_cfg.seed)

    step = 0
    epoch = 0
    try:
        while step < total:
            epoch += 1
            rng = _shuffle_rng(train_cfg.seed, epoch)
            epoch_first = None
            for batch in iter_batches(train_examples, train_cfg.batch_size, rng):
                if step >= total:
                    break
                lr = schedule_lr(step, total, train_cfg.warmup_steps, train_cfg.learning_rate)
                logps = [
                    M.forward(params, model_cfg, ex.x, ex.y, train=True, rng=drop_rng)
                    for ex in batch
                ]
                ys = [ex.y for ex in batch]
                if step < k:
                    phase = PHASE_STANDARD
                    loss = None
                    for lp, y in zip(logps, ys):
                        term = obj.mle_loss(lp, y)[0]
                        loss = term if loss is None else loss + term
                    selected = sum(len(y) for y in ys)
                else:
                    phase = PHASE_TRUNCATED
                    loss, selected = obj.truncated_ce_loss(logps, ys, train_cfg.r)
                norm = loss * (1.0 / selected)
                value = norm.item()
                if epoch_first is None:
                    epoch_first = value
                _guard(value, epoch_first, train_cfg.divergence_factor)
                adam.zero_grad()
                ad.backward(norm)
                adam.step(lr)
                adam.zero_grad()
                step += 1
                log.add_step(StepRecord(step, phase, value, selected, lr))
    except DivergenceDetected:
        log.to_jsonl(os.path.join(run_dir, "trainlog.jsonl"))
        raise

    params.freeze()
    ckpt = "degenerative.ckpt"
    M.save_checkpoint(os.path.join(run_dir, ckpt), params, model_cfg)
    log.meta["final_checkpoint"] = ckpt
    log.meta["final_validation_loss"] = validation_loss(
        params, model_cfg, val_examples, lambda lp, ex: obj.mle_loss(lp, ex.y)[0]
    )
    log.to_jsonl(os.path.join(run_dir, "trainlog.jsonl"))
    return params, log


def train_main_poe(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    expert: ParameterSet,
    expert_cfg: ModelConfig,
    train_examples: list[Example],
    val_examples: list[Example],
    run_dir,
) -> tuple[ParameterSet, TrainLog]:
    """Train the main model against a frozen expert via product of experts.

    Each step minimizes NLL + lam * PoE-NLL. Only the main model's parameters
    move; the expert's checksum is asserted identical before and after. With
    lam == 0 the expert is never even evaluated, so the run reduces exactly
    to standard MLE training.
    """
    if not expert.frozen:
        raise ContractViolation("train_main_poe: expert parameter set must be frozen")
    if expert_cfg.vocab_size != model_cfg.vocab_size:
        raise ContractViolation("train_main_poe: expert vocabulary differs from main model")
    checksum_before = expert.checksum()
    lam = train_cfg.lam

    def per_seq(logp, ex):
        if lam == 0.0:
            return obj.mle_loss(logp, ex.y)[0]
        logp_d = M.forward(expert, expert_cfg, ex.x, ex.y)
        return obj.combined_poe_loss(logp_d, logp, ex.y, lam)

    params = _initial_params(train_cfg, model_cfg)
    meta = {"mode": "poe_main", "lam": lam}
    best, log = _epoch_driven(
        train_cfg, model_cfg, params, train_examples, val_examples,
        _sum_batch_loss(model_cfg, per_seq), per_seq, run_dir, meta,
    )
    if expert.checksum() != checksum_before:
        raise ContractViolation("train_main_poe: expert parameters changed during training")
    return best, log

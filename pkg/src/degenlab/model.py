"""Small transformer in two flavours: decoder-only and encoder-decoder.

Both variants are pre-LN transformers built on :mod:`degenlab.autodiff` and
produce a log-probability matrix with one row per target position (each row
exponentiates and sums to one). Sequence position 0 is a learned
start-of-sequence embedding parameter rather than a vocabulary token, so the
vocabulary stays exactly what the data defines.

Conventions, fixed here because nothing upstream pins them:

* learned absolute positional embeddings;
* init: N(0, 0.02) weights, zero biases, unit layer-norm gains;
* decoder-only ties the output projection to the token embedding;
  encoder-decoder uses a separate output matrix;
* dropout (default 0.1) applies after the embedding sum and after each
  attention / feed-forward block, and only when ``train=True``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from degenlab import autodiff as ad
from degenlab.autodiff import Tensor
from degenlab.errors import (
    ContractViolation,
    InvalidToken,
    LengthExceeded,
)

__all__ = [
    "LogProbMatrix",
    "ModelConfig",
    "ParameterSet",
    "forward",
    "init_parameters",
    "load_checkpoint",
    "next_logprobs",
    "save_checkpoint",
]

# A LogProbMatrix is a Tensor of shape [targets, vocab] whose rows are
# normalized log probabilities; the alias documents intent at call sites.
LogProbMatrix = Tensor

ARCH_DECODER_ONLY = "decoder_only"
ARCH_ENCODER_DECODER = "encoder_decoder"

_CKPT_MAGIC = "DEGENLAB-CKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    layers: int
    model_dim: int
    heads: int
    ffn_dim: int
    vocab_size: int
    max_positions: int
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.arch not in (ARCH_DECODER_ONLY, ARCH_ENCODER_DECODER):
            raise ContractViolation(f"unknown arch {self.arch!r}")
        if self.layers < 1:
            raise ContractViolation("layers must be >= 1")
        if self.vocab_size < 2:
            raise ContractViolation("vocab_size must be >= 2")
        if self.model_dim % self.heads != 0:
            raise ContractViolation("model_dim must be divisible by heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractViolation("dropout_rate must lie in [0, 1)")
        if self.max_positions < 1:
            raise ContractViolation("max_positions must be >= 1")


class ParameterSet:
    """Ordered name -> Tensor map; the thing every loss differentiates.

    Freezing flips every tensor to requires_grad=False and is asserted
    stable via :meth:`checksum` (no optimizer may touch a frozen set).
    """

    def __init__(self, params: dict[str, Tensor], frozen: bool = False):
        self._params = dict(params)
        self.frozen = bool(frozen)
        if self.frozen:
            for t in self._params.values():
                t.requires_grad = False

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def freeze(self) -> "ParameterSet":
        self.frozen = True
        for t in self._params.values():
            t.requires_grad = False
        return self

    def copy(self) -> "ParameterSet":
        fresh = {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in self._params.items()
        }
        return ParameterSet(fresh, frozen=self.frozen)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def init_parameters(cfg: ModelConfig) -> ParameterSet:
    """Deterministic initialization: N(0, 0.02) weights, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    d, f, v = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size
    p: dict[str, np.ndarray] = {}

    def block(prefix: str, cross: bool = False) -> None:
        p[f"{prefix}.ln1.g"] = np.ones(d)
        p[f"{prefix}.ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.attn.{w}"] = _normal(rng, (d, d))
        p[f"{prefix}.attn.bo"] = np.zeros(d)
        if cross:
            p[f"{prefix}.lnx.g"] = np.ones(d)
            p[f"{prefix}.lnx.b"] = np.zeros(d)
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{prefix}.xattn.{w}"] = _normal(rng, (d, d))
            p[f"{prefix}.xattn.bo"] = np.zeros(d)
        p[f"{prefix}.ln2.g"] = np.ones(d)
        p[f"{prefix}.ln2.b"] = np.zeros(d)
        p[f"{prefix}.ffn.w1"] = _normal(rng, (d, f))
        p[f"{prefix}.ffn.b1"] = np.zeros(f)
        p[f"{prefix}.ffn.w2"] = _normal(rng, (f, d))
        p[f"{prefix}.ffn.b2"] = np.zeros(d)

    p["tok_emb"] = _normal(rng, (v, d))
    if cfg.arch == ARCH_DECODER_ONLY:
        p["start"] = _normal(rng, (1, d))
        p["pos_emb"] = _normal(rng, (cfg.max_positions, d))
        for i in range(cfg.layers):
            block(f"dec.{i}")
        p["final_ln.g"] = np.ones(d)
        p["final_ln.b"] = np.zeros(d)
    else:
        p["enc_start"] = _normal(rng, (1, d))
        p["dec_start"] = _normal(rng, (1, d))
        p["enc_pos_emb"] = _normal(rng, (cfg.max_positions, d))
        p["dec_pos_emb"] = _normal(rng, (cfg.max_positions, d))
        for i in range(cfg.layers):
            block(f"enc.{i}")
        p["enc_final_ln.g"] = np.ones(d)
        p["enc_final_ln.b"] = np.zeros(d)
        for i in range(cfg.layers):
            block(f"dec.{i}", cross=True)
        p["dec_final_ln.g"] = np.ones(d)
        p["dec_final_ln.b"] = np.zeros(d)
        p["out_proj"] = _normal(rng, (d, v))

    return ParameterSet({k: Tensor(a, requires_grad=True) for k, a in p.items()})


def _validate_tokens(ids: np.ndarray, vocab_size: int, what: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise InvalidToken(f"{what}: token id outside [0, {vocab_size})")
    return ids


def _attention(
    params: ParameterSet,
    prefix: str,
    q_in: Tensor,
    kv_in: Tensor,
    heads: int,
    mask: np.ndarray | None,
) -> Tensor:
    """Multi-head attention; mask (bool [Tq, Tk]) marks allowed positions."""
    d = q_in.shape[-1]
    dh = d // heads
    tq, tk = q_in.shape[0], kv_in.shape[0]

    def split(x: Tensor, t: int) -> Tensor:
        # [T, D] -> [heads, T, dh]
        return ad.transpose(ad.reshape(x, (t, heads, dh)), (1, 0, 2))

    q = split(ad.matmul(q_in, params[f"{prefix}.wq"]), tq)
    k = split(ad.matmul(kv_in, params[f"{prefix}.wk"]), tk)
    v = split(ad.matmul(kv_in, params[f"{prefix}.wv"]), tk)
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    if mask is None:
        weights = ad.softmax(scores)
    else:
        weights = ad.masked_softmax(scores, mask[None, :, :])
    ctx = ad.matmul(weights, v)  # [heads, Tq, dh]
    merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (tq, d))
    return ad.matmul(merged, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def _ffn(params: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return ad.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def _maybe_dropout(x: Tensor, cfg: ModelConfig, train: bool, rng) -> Tensor:
    if not train or cfg.dropout_rate == 0.0:
        return x
    if rng is None:
        raise ContractViolation("training forward with dropout needs an rng")
    return ad.dropout(x, cfg.dropout_rate, rng)


def _embed(
    params: ParameterSet,
    cfg: ModelConfig,
    start_name: str,
    pos_name: str,
    ids: np.ndarray,
    train: bool,
    rng,
) -> Tensor:
    length = 1 + len(ids)
    if length > cfg.max_positions:
        raise LengthExceeded(
            f"sequence needs {length} positions, model allows {cfg.max_positions}"
        )
    rows = params[start_name]
    if len(ids):
        rows = ad.concat_rows(rows, ad.embedding(params["tok_emb"], ids))
    pos = ad.slice_rows(params[pos_name], 0, length)
    return _maybe_dropout(rows + pos, cfg, train, rng)


def _decoder_stack(
    params: ParameterSet,
    cfg: ModelConfig,
    h: Tensor,
    enc_out: Tensor | None,
    train: bool,
    rng,
) -> Tensor:
    t = h.shape[0]
    causal = np.tril(np.ones((t, t), dtype=bool))
    for i in range(cfg.layers):
        pre = f"dec.{i}"
        a = ad.layer_norm(h, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        h = h + _maybe_dropout(
            _attention(params, f"{pre}.attn", a, a, cfg.heads, causal),
            cfg, train, rng,
        )
        if enc_out is not None:
            c = ad.layer_norm(h, params[f"{pre}.lnx.g"], params[f"{pre}.lnx.b"])
            h = h + _maybe_dropout(
                _attention(params, f"{pre}.xattn", c, enc_out, cfg.heads, None),
                cfg, train, rng,
            )
        b = ad.layer_norm(h, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        h = h + _maybe_dropout(_ffn(params, f"{pre}.ffn", b), cfg, train, rng)
    return h


def _encode(params: ParameterSet, cfg: ModelConfig, x: np.ndarray, train: bool, rng) -> Tensor:
    h = _embed(params, cfg, "enc_start", "enc_pos_emb", x, train, rng)
    for i in range(cfg.layers):
        pre = f"enc.{i}"
        a = ad.layer_norm(h, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        h = h + _maybe_dropout(
            _attention(params, f"{pre}.attn", a, a, cfg.heads, None),
            cfg, train, rng,
        )
        b = ad.layer_norm(h, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        h = h + _maybe_dropout(_ffn(params, f"{pre}.ffn", b), cfg, train, rng)
    return ad.layer_norm(h, params["enc_final_ln.g"], params["enc_final_ln.b"])


def _all_position_logprobs(
    params: ParameterSet,
    cfg: ModelConfig,
    x: np.ndarray,
    y_in: np.ndarray,
    train: bool,
    rng,
) -> Tensor:
    """Log-prob rows for every decoder input position (next-token heads)."""
    if cfg.arch == ARCH_DECODER_ONLY:
        ids = np.concatenate([x, y_in]) if len(x) else y_in
        h = _embed(params, cfg, "start", "pos_emb", ids, train, rng)
        h = _decoder_stack(params, cfg, h, None, train, rng)
        h = ad.layer_norm(h, params["final_ln.g"], params["final_ln.b"])
        logits = ad.matmul(h, ad.transpose(params["tok_emb"], (1, 0)))
    else:
        enc_out = _encode(params, cfg, x, train, rng)
        h = _embed(params, cfg, "dec_start", "dec_pos_emb", y_in, train, rng)
        h = _decoder_stack(params, cfg, h, enc_out, train, rng)
        h = ad.layer_norm(h, params["dec_final_ln.g"], params["dec_final_ln.b"])
        logits = ad.matmul(h, params["out_proj"])
    return ad.log_softmax(logits)


def forward(
    params: ParameterSet,
    cfg: ModelConfig,
    x: np.ndarray,
    y: np.ndarray,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> LogProbMatrix:
    """Log p(y_t | y_<t, x) for every target position t; shape [len(y), vocab].

    Row t is computed causally: it sees the condition x (fully, for the
    encoder-decoder) and targets strictly before t, never t itself or later.
    """
    x = _validate_tokens(x, cfg.vocab_size, "condition")
    y = _validate_tokens(y, cfg.vocab_size, "target")
    if len(y) == 0:
        raise ContractViolation("forward: target must be nonempty")
    rows = _all_position_logprobs(params, cfg, x, y[:-1], train, rng)
    if cfg.arch == ARCH_DECODER_ONLY:
        return ad.slice_rows(rows, len(x), len(x) + len(y))
    return rows


def next_logprobs(
    params: ParameterSet,
    cfg: ModelConfig,
    x: np.ndarray,
    y_prefix: np.ndarray,
) -> np.ndarray:
    """Distribution over the next token after y_prefix; plain [vocab] array."""
    x = _validate_tokens(x, cfg.vocab_size, "condition")
    y_prefix = _validate_tokens(y_prefix, cfg.vocab_size, "prefix")
    rows = _all_position_logprobs(params, cfg, x, y_prefix, False, None)
    return rows.data[-1].copy()


# ----------------------------------------------------------------------
# Checkpoint format: one ASCII prefix line "DEGENLAB-CKPT <version>
# <header_bytes>\n", a JSON manifest of exactly that many bytes (model
# config, parameter names, shapes, offsets), then the raw little-endian
# float64 arrays back to back. Round-trips must be bit-exact.
# ----------------------------------------------------------------------


def save_checkpoint(path, params: ParameterSet, cfg: ModelConfig) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(t.data.shape), "offset": offset, "size": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "format_version": _CKPT_VERSION,
            "model_config": asdict(cfg),
            "frozen": params.frozen,
            "params": entries,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(f"{_CKPT_MAGIC} {_CKPT_VERSION} {len(header)}\n".encode())
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[ParameterSet, ModelConfig]:
    with open(path, "rb") as fh:
        prefix = fh.readline().decode()
        parts = prefix.split()
        if len(parts) != 3 or parts[0] != _CKPT_MAGIC:
            raise ContractViolation(f"{path}: not a checkpoint file")
        if int(parts[1]) != _CKPT_VERSION:
            raise ContractViolation(f"{path}: unsupported checkpoint version {parts[1]}")
        header = json.loads(fh.read(int(parts[2])).decode())
        data = fh.read()
    cfg = ModelConfig(**header["model_config"])
    frozen = bool(header["frozen"])
    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        start, size = entry["offset"], entry["size"]
        arr = np.frombuffer(data[start:start + size], dtype="<f8").reshape(entry["shape"])
        params[entry["name"]] = Tensor(arr.copy(), requires_grad=not frozen)
    return ParameterSet(params, frozen=frozen), cfg

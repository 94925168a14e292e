"""Run configuration: one JSON file drives every CLI workflow.

Parsing is strict - unknown keys anywhere are rejected with a field-path
message - and lossless: ``parse(to_dict(parse(d)))`` equals ``parse(d)``.
The CLI echoes the original config file verbatim into each run directory so
experiments can be reconstructed from the directory alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from degenlab.errors import ConfigError

__all__ = ["RunConfig"]

TASKS = ("lm", "dialogue", "summarization")

# (field name, accepted types, default) per section.
_SECTION_FIELDS = {
    "data": [
        ("train", str, ""),
        ("valid", str, ""),
        ("test", str, ""),
        ("tokenizer_level", str, "word"),
        ("max_example_tokens", int, 512),
        ("dialogue_length_cap", int, 100),
        ("vocab_max_size", (int, type(None)), None),
    ],
    "model": [
        ("arch", str, ""),  # empty string derives from task
        ("layers", int, 2),
        ("model_dim", int, 32),
        ("heads", int, 2),
        ("ffn_dim", int, 64),
        ("vocab_size", (int, type(None)), None),
        ("max_positions", int, 128),
        ("dropout_rate", float, 0.1),
        ("seed", int, 0),
    ],
    "train": [
        ("learning_rate", float, 1e-4),
        ("epochs", int, 1),
        ("batch_size", int, 8),
        ("seed", int, 0),
        ("r", float, 0.7),
        ("lam", float, 0.5),
        ("k_steps", (int, type(None)), None),
        ("h_steps", (int, type(None)), None),
        ("k_epochs", float, 1.0),
        ("h_epochs", float, 1.0),
        ("beta1", float, 0.9),
        ("beta2", float, 0.999),
        ("adam_eps", float, 1e-8),
        ("warmup_steps", int, 0),
        ("eval_every_steps", (int, type(None)), None),
        ("init_from", (str, type(None)), None),
        ("divergence_factor", float, 10.0),
    ],
    "objective": [
        ("kind", str, "mle"),
        ("gamma", float, 2.0),
        ("cp_weight", float, 2.5),
        ("ul_weight", float, 1.0),
        ("r", float, 0.7),
        ("lam", float, 0.5),
    ],
    "decode": [
        ("strategy", str, ""),  # empty string derives from task
        ("k", int, 20),
        ("max_new_tokens", int, 100),
        ("prefix_len", int, 50),
        ("seed", int, 0),
        ("stop_tokens", list, []),
    ],
    "attributes": [
        ("metric", (str, list), ["repetition"]),
        ("split_n", int, 50),
        ("bandwidth", float, 0.8),
        ("embed_dim", int, 64),
        ("ngram", int, 2),
        ("sentence_level", bool, False),
        ("terminator_tokens", list, ["."]),
    ],
}

_TOP_LEVEL = ("task", "data", "model", "train", "objective", "decode",
              "metrics", "attributes", "checkpoint", "generations", "out_dir")


def _parse_section(name: str, raw: dict) -> dict:
    spec = _SECTION_FIELDS[name]
    known = {f[0] for f in spec}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
    out = {}
    for fname, ftype, default in spec:
        if fname in raw:
            value = raw[fname]
            if ftype is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, ftype) or isinstance(value, bool) and ftype is not bool:
                raise ConfigError(f"{name}.{fname}: expected {ftype}, got {type(value).__name__}")
            out[fname] = value
        else:
            out[fname] = default
    return out


@dataclass
class RunConfig:
    task: str = "lm"
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    objective: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    attributes: dict = field(default_factory=dict)
    checkpoint: str | None = None
    generations: str | None = None
    out_dir: str | None = None

    @classmethod
    def parse(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        for key in raw:
            if key not in _TOP_LEVEL:
                raise ConfigError(f"{key}: unknown key")
        task = raw.get("task", "lm")
        if task not in TASKS:
            raise ConfigError(f"task: must be one of {TASKS}, got {task!r}")
        sections = {}
        for name in ("data", "model", "train", "objective", "decode", "attributes"):
            section_raw = raw.get(name, {})
            if not isinstance(section_raw, dict):
                raise ConfigError(f"{name}: expected an object")
            sections[name] = _parse_section(name, section_raw)
        metrics = raw.get("metrics", [])
        if not isinstance(metrics, list):
            raise ConfigError("metrics: expected a list")
        for opt in ("checkpoint", "generations", "out_dir"):
            if raw.get(opt) is not None and not isinstance(raw[opt], str):
                raise ConfigError(f"{opt}: expected a string path")
        cfg = cls(
            task=task,
            metrics=list(metrics),
            checkpoint=raw.get("checkpoint"),
            generations=raw.get("generations"),
            out_dir=raw.get("out_dir"),
            **sections,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.train["r"] <= 0 or self.train["r"] > 1:
            raise ConfigError("train.r: must lie in (0, 1]")
        if self.objective["r"] <= 0 or self.objective["r"] > 1:
            raise ConfigError("objective.r: must lie in (0, 1]")
        if self.train["lam"] < 0 or self.objective["lam"] < 0:
            raise ConfigError("lam: must be >= 0")
        if self.train["epochs"] < 0:
            raise ConfigError("train.epochs: must be >= 0")
        if self.train["learning_rate"] <= 0:
            raise ConfigError("train.learning_rate: must be positive")
        if self.decode["k"] < 1:
            raise ConfigError("decode.k: must be >= 1")
        if self.model["dropout_rate"] < 0 or self.model["dropout_rate"] >= 1:
            raise ConfigError("model.dropout_rate: must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

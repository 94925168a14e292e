"""Command-line entry point: train, generate, evaluate, dynamics, score-attrs.

Every command takes ``--config PATH`` (a JSON run config), an output
directory (``--out``, falling back to the config's ``out_dir``, then to
``$DEGENLAB_OUT/<config-stem>-<command>``), ``--seed`` to override the
relevant seed, and ``--overwrite`` to reuse a nonempty output directory.
The config file is echoed verbatim into the run directory.

Exit codes: 0 success, 2 usage or validation failure, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import replace

import numpy as np

from degenlab import corpus as C
from degenlab import decode as D
from degenlab import dynamics as dyn
from degenlab import metrics as X
from degenlab import model as M
from degenlab import trainer as T
from degenlab.clustering import mean_shift, trigram_embed
from degenlab.config import RunConfig
from degenlab.corpus import Vocab
from degenlab.errors import (
    ConfigError,
    ContractViolation,
    DataFormatError,
    DegenLabError,
    EmptyInput,
    Unimplemented,
)
from degenlab.objectives import ObjectiveConfig
from degenlab import fixtures

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _validated(builder, *args, **kwargs):
    """Constructor contract failures on config-derived objects are usage errors."""
    try:
        return builder(*args, **kwargs)
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc


# ----------------------------------------------------------------------
# Data plumbing
# ----------------------------------------------------------------------


def _load_raw_units(cfg: RunConfig, split_path: str):
    """Task-specific raw token units for one split."""
    level = cfg.data["tokenizer_level"]
    if cfg.task == "lm":
        return C.read_lm_documents(split_path, level)
    if cfg.task == "dialogue":
        return C.read_dialogue_records(split_path, cfg.data["dialogue_length_cap"], level)
    return C.read_summarization_records(split_path, level)


def _build_vocab(cfg: RunConfig, units) -> Vocab:
    if cfg.task == "lm":
        seqs = units
    else:
        seqs = [h + r for h, r in units]
    return Vocab.from_sequences(seqs, max_size=cfg.data["vocab_max_size"])


def _units_to_examples(cfg: RunConfig, units, vocab: Vocab):
    cap = cfg.data["max_example_tokens"]
    if cfg.task == "lm":
        return C.build_examples_lm(units, vocab, cap)
    if cfg.task == "dialogue":
        return C.build_examples_dialogue(units, vocab)
    return C.build_examples_summarization(units, vocab, cap)


def _require_path(path: str, what: str) -> str:
    if not path:
        raise ConfigError(f"{what}: no path configured")
    if not os.path.exists(path):
        raise ConfigError(f"{what}: {path} does not exist")
    return path


def _model_config(cfg: RunConfig, vocab_size: int) -> M.ModelConfig:
    fields = dict(cfg.model)
    if fields.get("vocab_size") is None:
        fields["vocab_size"] = vocab_size
    if not fields["arch"]:
        fields["arch"] = "decoder_only" if cfg.task == "lm" else "encoder_decoder"
    return _validated(M.ModelConfig, **fields)


def _train_config(cfg: RunConfig, seed_override: int | None) -> T.TrainConfig:
    fields = dict(cfg.train)
    if seed_override is not None:
        fields["seed"] = seed_override
    return _validated(T.TrainConfig, **fields)


def _save_vocab(path, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(vocab.tokens[2:], fh)


def _load_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        return Vocab(json.load(fh))


def _find_vocab(checkpoint_path: str) -> Vocab:
    ckpt_dir = os.path.dirname(os.path.abspath(checkpoint_path))
    for candidate in (ckpt_dir, os.path.dirname(ckpt_dir)):
        vocab_path = os.path.join(candidate, "vocab.json")
        if os.path.exists(vocab_path):
            return _load_vocab(vocab_path)
    raise ConfigError(f"no vocab.json found next to checkpoint {checkpoint_path}")


def _prepare_out_dir(args, cfg: RunConfig, command: str) -> str:
    out = args.out or cfg.out_dir
    if not out:
        root = os.environ.get("DEGENLAB_OUT", "runs")
        stem = os.path.splitext(os.path.basename(args.config))[0]
        out = os.path.join(root, f"{stem}-{command}")
    if os.path.isdir(out) and os.listdir(out):
        if not args.overwrite:
            raise ConfigError(f"output directory {out} is not empty (use --overwrite)")
        shutil.rmtree(out)
    os.makedirs(out, exist_ok=True)
    return out


def _echo_config(args, out_dir: str) -> None:
    shutil.copyfile(args.config, os.path.join(out_dir, "config.json"))


def _read_config(args) -> RunConfig:
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: invalid JSON ({exc})")
    return RunConfig.parse(raw)


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _read_config(args)
    out_dir = _prepare_out_dir(args, cfg, "train")
    _echo_config(args, out_dir)

    train_units = _load_raw_units(cfg, _require_path(cfg.data["train"], "data.train"))
    valid_units = _load_raw_units(cfg, _require_path(cfg.data["valid"], "data.valid"))
    vocab = _build_vocab(cfg, train_units)
    _save_vocab(os.path.join(out_dir, "vocab.json"), vocab)
    train_ex = _units_to_examples(cfg, train_units, vocab)
    valid_ex = _units_to_examples(cfg, valid_units, vocab)

    model_cfg = _model_config(cfg, len(vocab))
    train_cfg = _train_config(cfg, args.seed)
    objective = _validated(ObjectiveConfig, **cfg.objective)

    if objective.kind == "poe_combined":
        expert_dir = os.path.join(out_dir, "expert")
        expert, _ = T.train_degenerative(train_cfg, model_cfg, train_ex, valid_ex, expert_dir)
        main_dir = os.path.join(out_dir, "main")
        T.train_main_poe(train_cfg, model_cfg, expert, model_cfg, train_ex, valid_ex, main_dir)
    elif objective.kind == "truncated_ce":
        T.train_degenerative(train_cfg, model_cfg, train_ex, valid_ex, out_dir)
    else:
        T.train_standard(train_cfg, model_cfg, train_ex, valid_ex, objective, out_dir)
    print(out_dir)
    return EXIT_OK


# ----------------------------------------------------------------------
# generate
# ----------------------------------------------------------------------


def _decode_config(cfg: RunConfig, vocab: Vocab, seed_override: int | None) -> D.DecodeConfig:
    fields = dict(cfg.decode)
    if seed_override is not None:
        fields["seed"] = seed_override
    if not fields["strategy"]:
        fields["strategy"] = D.STRATEGY_TOP_K if cfg.task == "lm" else D.STRATEGY_GREEDY
    stop_names = list(fields.pop("stop_tokens", []))
    if cfg.task in ("dialogue", "summarization") and "<eos>" not in stop_names:
        stop_names.append("<eos>")
    stops = frozenset(vocab.index[s] for s in stop_names if s in vocab.index)
    return _validated(D.DecodeConfig, stop_tokens=stops, **fields)


def _conditions_for_generation(cfg: RunConfig, test_units, dcfg: D.DecodeConfig):
    """(id, condition token list) pairs following the prefix protocol."""
    out = []
    for i, unit in enumerate(test_units):
        if cfg.task == "lm":
            out.append((f"unit{i:05d}", unit[:dcfg.prefix_len]))
        else:
            out.append((f"unit{i:05d}", unit[0]))
    return out


def cmd_generate(args) -> int:
    cfg = _read_config(args)
    ckpt_path = _require_path(cfg.checkpoint or "", "checkpoint")
    out_dir = _prepare_out_dir(args, cfg, "generate")
    _echo_config(args, out_dir)

    params, model_cfg = M.load_checkpoint(ckpt_path)
    vocab = _find_vocab(ckpt_path)
    test_units = _load_raw_units(cfg, _require_path(cfg.data["test"], "data.test"))
    dcfg = _decode_config(cfg, vocab, args.seed)

    records = []
    for idx, (unit_id, cond_tokens) in enumerate(_conditions_for_generation(cfg, test_units, dcfg)):
        unit_cfg = replace(dcfg, seed=dcfg.seed * 1_000_003 + idx)
        condition = vocab.encode(cond_tokens)
        generated = D.generate(params, model_cfg, unit_cfg, condition)
        out_tokens = vocab.decode(generated)
        if out_tokens and generated[-1] in dcfg.stop_tokens:
            out_tokens = out_tokens[:-1]
        records.append(D.GenerationRecord(unit_id, " ".join(cond_tokens), " ".join(out_tokens)))
    D.write_generations(os.path.join(out_dir, "generations.jsonl"), records)
    print(out_dir)
    return EXIT_OK


# ----------------------------------------------------------------------
# evaluate
# ----------------------------------------------------------------------

_DEFAULT_METRICS = {
    "lm": ["ppl", "kld", "zipf", "repetition", "unique"],
    "dialogue": ["bleu_2", "bleu_3", "distinct_2", "distinct_3",
                 "self_bleu_3", "self_bleu_4", "kld", "context_overlap",
                 "source_entropy"],
    "summarization": ["novel_1", "novel_2", "novel_3",
                      "rouge_1", "rouge_2", "rouge_l"],
}


def _references_for_eval(cfg: RunConfig, test_units, dcfg: D.DecodeConfig):
    """Per-unit (condition, reference) token lists matching generation order."""
    conds, refs = [], []
    for unit in test_units:
        if cfg.task == "lm":
            conds.append(unit[:dcfg.prefix_len])
            refs.append(unit[dcfg.prefix_len:dcfg.prefix_len + dcfg.max_new_tokens])
        else:
            conds.append(unit[0])
            refs.append(unit[1])
    return conds, refs


def _ppl_reports(cfg: RunConfig, test_units, dcfg, gen_file: str) -> list[X.MetricReport]:
    ckpt_path = _require_path(cfg.checkpoint or "", "checkpoint (needed for ppl)")
    params, model_cfg = M.load_checkpoint(ckpt_path)
    vocab = _find_vocab(ckpt_path)
    unit_logps = []
    for unit in test_units:
        if cfg.task == "lm":
            x_toks = unit[:dcfg.prefix_len]
            y_toks = unit[dcfg.prefix_len:dcfg.prefix_len + dcfg.max_new_tokens]
        else:
            x_toks, y_toks = unit[0], unit[1]
        if not y_toks:
            continue
        x, y = vocab.encode(x_toks), vocab.encode(y_toks)
        logp = M.forward(params, model_cfg, x, y)
        unit_logps.append(logp.data[np.arange(len(y)), y])
    values = X.ppl_from_logprobs(unit_logps)
    counts = {"units": len(unit_logps),
              "had_zero_probability": values["had_zero_probability"]}
    return [
        X.MetricReport("ppl_paper", values["ppl_paper"], counts=counts,
                       generations_file=gen_file, reference_file=cfg.data["test"]),
        X.MetricReport("ppl_standard", values["ppl_standard"], counts=counts,
                       generations_file=gen_file, reference_file=cfg.data["test"]),
    ]


def _mean_over(vals: list, what: str) -> float:
    if not vals:
        raise EmptyInput(f"{what}: no usable units")
    return float(np.mean(vals))


def _evaluate_metric(name: str, gens, conds, refs, cfg: RunConfig):
    """One metric name -> (base name, value, n, counts)."""
    base, _, suffix = name.partition("_")
    pairs = [(g, r) for g, r in zip(gens, refs) if g and r]
    if name.startswith("bleu_"):
        n = int(suffix)
        vals = [X.bleu(g, [r], max_n=n) for g, r in pairs]
        return "bleu", _mean_over(vals, name), n, {"pairs": len(pairs)}
    if name.startswith("self_bleu_"):
        n = int(name.rsplit("_", 1)[1])
        nonempty = [g for g in gens if g]
        return "self_bleu", X.self_bleu(nonempty, n), n, {"sequences": len(nonempty)}
    if name.startswith("distinct_"):
        n = int(suffix)
        return "distinct", X.distinct_n([g for g in gens if g], n), n, {}
    if name.startswith("novel_"):
        n = int(suffix)
        usable = [(g, c) for g, c in zip(gens, conds) if len(g) >= n]
        vals = [X.novel_n(g, c, n) for g, c in usable]
        return "novel", _mean_over(vals, name), n, {"pairs": len(usable)}
    if name in ("rouge_1", "rouge_2", "rouge_l"):
        variant = {"rouge_1": "r1", "rouge_2": "r2", "rouge_l": "rL"}[name]
        vals = [X.rouge(g, r, variant) for g, r in pairs]
        return name, _mean_over(vals, name), None, {"pairs": len(pairs)}
    if name == "kld":
        return name, X.kld_unigram([g for g in gens if g], [r for r in refs if r]), None, {}
    if name == "zipf":
        return name, X.zipf_coefficient([g for g in gens if g]), None, {}
    if name == "repetition":
        vals = [X.repetition_gen(g) for g in gens if g]
        return name, _mean_over(vals, name), None, {"sequences": len(vals)}
    if name == "unique":
        return name, float(X.unique_tokens(gens)), None, {}
    if name == "context_overlap":
        ngram = cfg.attributes["ngram"]
        usable = [(c, g) for c, g in zip(conds, gens) if len(g) >= ngram]
        vals = [C.context_overlap(c, g, ngram) for c, g in usable]
        return name, _mean_over(vals, name), None, {"pairs": len(usable)}
    if name == "source_entropy":
        ids = [str(i) for i in range(len(gens))]
        ctx_vecs = trigram_embed([" ".join(c) for c in conds], cfg.attributes["embed_dim"])
        gen_vecs = trigram_embed([" ".join(g) for g in gens], cfg.attributes["embed_dim"])
        bw = cfg.attributes["bandwidth"]
        ent = C.source_entropy(ids, mean_shift(ctx_vecs, bw, ids=ids),
                               mean_shift(gen_vecs, bw, ids=ids))
        return name, float(np.mean([ent[i] for i in ids])), None, {}
    raise ConfigError(f"metrics: unknown metric {name!r}")


def cmd_evaluate(args) -> int:
    cfg = _read_config(args)
    gen_file = _require_path(cfg.generations or "", "generations")
    out_dir = _prepare_out_dir(args, cfg, "evaluate")
    _echo_config(args, out_dir)

    records = D.read_generations(gen_file)
    level = cfg.data["tokenizer_level"]
    gens = [C.tokenize(r.output, level) for r in records]
    test_units = _load_raw_units(cfg, _require_path(cfg.data["test"], "data.test"))
    dcfg = _decode_config(cfg, Vocab([]), None)
    conds, refs = _references_for_eval(cfg, test_units, dcfg)
    if len(refs) < len(gens):
        raise DataFormatError(
            f"{gen_file}: {len(gens)} generations but only {len(refs)} test units"
        )
    conds, refs = conds[:len(gens)], refs[:len(gens)]

    metric_names = cfg.metrics or _DEFAULT_METRICS[cfg.task]
    reports: list[X.MetricReport] = []
    for name in metric_names:
        if name == "ppl":
            reports.extend(_ppl_reports(cfg, test_units, dcfg, gen_file))
            continue
        try:
            base, value, n, counts = _evaluate_metric(name, gens, conds, refs, cfg)
        except ConfigError:
            raise
        except DegenLabError as exc:
            # A single undefined metric (e.g. no bigrams in a degenerate
            # generation set) should not kill the whole report.
            base, value, n, counts = name, float("nan"), None, {"error": str(exc)}
        reports.append(X.MetricReport(base, value, n=n, counts=counts,
                                      generations_file=gen_file,
                                      reference_file=cfg.data["test"]))
    X.write_reports_jsonl(os.path.join(out_dir, "reports.jsonl"), reports)
    X.write_reports_csv(os.path.join(out_dir, "summary.csv"), reports)
    print(out_dir)
    return EXIT_OK


# ----------------------------------------------------------------------
# score-attrs and dynamics
# ----------------------------------------------------------------------


def _scored_units(cfg: RunConfig):
    """(id, tokens...) units of the training split, ids matching Examples."""
    units = _load_raw_units(cfg, _require_path(cfg.data["train"], "data.train"))
    if cfg.task == "lm":
        return [(f"doc{i:05d}", toks) for i, toks in enumerate(units)]
    if cfg.task == "dialogue":
        return [(f"dlg{i:05d}", h, r) for i, (h, r) in enumerate(units)]
    raise ConfigError("score-attrs supports lm and dialogue tasks")


def _compute_scores(cfg: RunConfig):
    units = _scored_units(cfg)
    if cfg.task == "lm":
        return C.score_lm_attributes(units)
    return C.score_dialogue_attributes(
        units, cfg.attributes["bandwidth"], cfg.attributes["embed_dim"],
        cfg.attributes["ngram"],
    )


def cmd_score_attrs(args) -> int:
    cfg = _read_config(args)
    out_dir = _prepare_out_dir(args, cfg, "score-attrs")
    _echo_config(args, out_dir)
    scores = _compute_scores(cfg)
    C.write_scores_csv(os.path.join(out_dir, "attrs.csv"), scores)
    print(out_dir)
    return EXIT_OK


def _epoch_checkpoints(run_dir: str) -> list[tuple[int, str]]:
    entries = []
    for name in sorted(os.listdir(run_dir)):
        if name.startswith("epoch_") and name.endswith(".ckpt"):
            entries.append((int(name[6:9]), os.path.join(run_dir, name)))
    if len(entries) < 2:
        raise ConfigError(f"{run_dir}: need at least two epoch checkpoints")
    return sorted(entries)


def cmd_dynamics(args) -> int:
    cfg = _read_config(args)
    run_dir = _require_path(cfg.checkpoint or "", "checkpoint (training run directory)")
    out_dir = _prepare_out_dir(args, cfg, "dynamics")
    _echo_config(args, out_dir)

    checkpoints = _epoch_checkpoints(run_dir)
    train_units = _load_raw_units(cfg, _require_path(cfg.data["train"], "data.train"))
    vocab = _find_vocab(checkpoints[0][1])
    examples = _units_to_examples(cfg, train_units, vocab)
    scores = _compute_scores(cfg)

    metric_cfg = cfg.attributes["metric"]
    metric_names = [metric_cfg] if isinstance(metric_cfg, str) else list(metric_cfg)
    terminators = {vocab.index[t] for t in cfg.attributes["terminator_tokens"]
                   if t in vocab.index}
    curves = []
    for metric in metric_names:
        high, low = dyn.run_dynamics(
            checkpoints, examples, scores, metric, cfg.attributes["split_n"],
            sentence_level=cfg.attributes["sentence_level"], terminators=terminators,
        )
        curves.extend([high, low])
    dyn.write_curves_csv(os.path.join(out_dir, "dynamics.csv"), curves)
    print(out_dir)
    return EXIT_OK


# ----------------------------------------------------------------------
# make-fixtures
# ----------------------------------------------------------------------


def cmd_make_fixtures(args) -> int:
    out = args.out or "fixtures"
    os.makedirs(out, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    kinds = ("lm", "dialogue", "summarization") if args.kind == "all" else (args.kind,)
    if "lm" in kinds:
        fixtures.make_lm_corpus(os.path.join(out, "lm"), seed=seed)
    if "dialogue" in kinds:
        fixtures.make_dialogue_corpus(os.path.join(out, "dialogue"), seed=seed)
    if "summarization" in kinds:
        fixtures.make_summarization_corpus(os.path.join(out, "summarization"), seed=seed)
    print(out)
    return EXIT_OK


# ----------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="path to the JSON run config")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--seed", type=int, default=None, help="override the run seed")
    sub.add_argument("--overwrite", action="store_true",
                     help="replace a nonempty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="degenlab",
        description="Desk-scale text-degeneration laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("train", cmd_train),
        ("generate", cmd_generate),
        ("evaluate", cmd_evaluate),
        ("dynamics", cmd_dynamics),
        ("score-attrs", cmd_score_attrs),
    ):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)
    p = sub.add_parser("make-fixtures")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--kind", choices=("lm", "dialogue", "summarization", "all"),
                   default="all")
    p.set_defaults(fn=cmd_make_fixtures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DataFormatError, FileNotFoundError, Unimplemented) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenLabError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

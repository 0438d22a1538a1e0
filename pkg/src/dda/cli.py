"""Command-line front end.

Every command reads ``key=value`` settings from ``--config`` files and
``--set`` overrides, writes the fully resolved settings to
``<out-dir>/config.resolved`` and puts its artifacts under ``checkpoints/``,
``decodes/``, ``reports/``, ``data/`` and ``logs/`` in the same run directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable, Sequence

from . import autograd as ag
from .checkpoint import CheckpointError, fusion_components, load_model, read_checkpoint, save_model
from .decode import FUSION_MODES, DecodeConfig, Hypothesis, beam_search, make_scorer, translate
from .evaluation import (EvalReport, FreqTable, MetricError, adaptation_accuracy, adaptation_extent, bleu,
                         domain_diff_correlation, domain_specific_counts, evaluation_vocab, paired_bootstrap,
                         subword_f1_table)
from .fusion import FUSION_POINTS, NONLINEARITIES, VARIANTS, FusionError, train_deep_fusion
from .gradcheck import run_suite
from .lm import LanguageModel, LmConfig, perplexity, train_lm
from .nmt import NmtConfig, TranslationModel, VocabMismatch, corpus_nll, fine_tune, train_nmt
from .nn import TrainConfig, TrainingDiverged
from .text import (BACK_TRANSLATED, COPIED, CorpusError, MergeTable, MonoCorpus, ParallelCorpus, Tokenizer,
                   Vocabulary, build_vocab, copy_augment, learn_bpe, read_lines, read_mono, read_parallel,
                   write_lines)

log = logging.getLogger("dda")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RUN_SUBDIRS = ("checkpoints", "decodes", "reports", "data", "logs")
REQUIRED = object()


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- settings

@dataclass(frozen=True)
class Key:
    kind: type
    default: Any = REQUIRED
    help: str = ""


TRAIN_KEYS = {
    "epochs": Key(int, 10, "passes over the training data"),
    "batch_size": Key(int, 32),
    "lr": Key(float, 1e-3),
    "optimizer": Key(str, "adam", "adam | sgd"),
    "clip_norm": Key(float, 5.0, "global gradient-norm clip; 0 disables"),
    "max_len": Key(int, 64, "drop training sentences longer than this (subwords)"),
}
VOCAB_KEYS = {
    "vocab": Key(str, "", "vocabulary file; built from the training text when empty"),
    "merges": Key(str, "", "BPE merge file; empty means whitespace tokens"),
    "bpe_merges": Key(int, 0, "learn this many merges when neither vocab nor merges is given"),
    "vocab_corpora": Key(str, "", "comma-separated extra text files to include when building the vocabulary"),
}
MODEL_KEYS = {
    "emb_dim": Key(int, 64),
    "hidden_dim": Key(int, 64),
    "num_layers": Key(int, 2),
}
DECODE_KEYS = {
    "beam_size": Key(int, 5),
    "max_decode_len": Key(int, 100),
    "fusion": Key(str, "none", "none | lm-shallow | dda-shallow | deep"),
    "beta": Key(float, 0.4, "shallow-fusion weight"),
    "coverage_beta": Key(float, 0.0, "coverage-penalty weight"),
    "length_alpha": Key(float, 0.0, "length-normalisation exponent; 0 disables"),
    "lm_in": Key(str, "", "in-domain LM checkpoint"),
    "lm_out": Key(str, "", "out-of-domain LM checkpoint"),
    "fusion_lms": Key(str, "", "comma-separated LM checkpoints for a deep-fusion checkpoint, in gate order"),
}

COMMAND_KEYS: dict[str, dict[str, Key]] = {
    "train-lm": {
        "train": Key(str, help="target-language monolingual text"),
        "dev": Key(str, "", "optional held-out text for perplexity"),
        "dropout": Key(float, 0.0),
        **MODEL_KEYS, **TRAIN_KEYS, **VOCAB_KEYS,
    },
    "train-nmt": {
        "train_src": Key(str), "train_tgt": Key(str),
        "dev_src": Key(str, ""), "dev_tgt": Key(str, ""),
        "bidirectional": Key(bool, False), "input_feed": Key(bool, False),
        **MODEL_KEYS, **TRAIN_KEYS, **VOCAB_KEYS,
    },
    "fine-tune": {
        "checkpoint": Key(str, help="NMT checkpoint to continue from"),
        "train_src": Key(str), "train_tgt": Key(str),
        "dev_src": Key(str, ""), "dev_tgt": Key(str, ""),
        **TRAIN_KEYS,
    },
    "train-fusion": {
        "nmt": Key(str, help="NMT checkpoint to start from"),
        "lm_in": Key(str, ""), "lm_out": Key(str, ""),
        "lm_in2": Key(str, ""), "lm_out2": Key(str, ""),
        "lm_general": Key(str, ""), "lm_general2": Key(str, ""),
        "variant": Key(str, "dda", " | ".join(VARIANTS)),
        "fusion_point": Key(str, "hidden", " | ".join(FUSION_POINTS)),
        "nonlinearity": Key(str, "sigmoid", " | ".join(NONLINEARITIES)),
        "resume": Key(str, "", "existing fusion checkpoint to continue training"),
        "train_src": Key(str), "train_tgt": Key(str),
        "copy_mono": Key(str, "", "in-domain target text appended as copied (y, y) pairs"),
        **TRAIN_KEYS,
    },
    "augment-copy": {
        "mono": Key(str, help="in-domain target-language text"),
        "train_src": Key(str), "train_tgt": Key(str),
    },
    "augment-backtranslate": {
        "reverse": Key(str, help="target-to-source NMT checkpoint"),
        "mono": Key(str),
        "train_src": Key(str, ""), "train_tgt": Key(str, ""),
        "beam_size": Key(int, 1), "max_decode_len": Key(int, 100),
    },
    "translate": {
        "checkpoint": Key(str, help="NMT or fusion checkpoint"),
        "input": Key(str, help="source text, one sentence per line"),
        "scores": Key(bool, False, "also write per-sentence scores"),
        "attention": Key(bool, False, "also write per-step attention weights"),
        **DECODE_KEYS,
    },
    "evaluate": {
        "hyp": Key(str), "ref": Key(str),
        "hyp_b": Key(str, "", "second system for the paired bootstrap"),
        "bootstrap_samples": Key(int, 1000),
        "freq_in": Key(str, "", "in-domain text for AE/AA frequencies"),
        "freq_out": Key(str, "", "out-of-domain text for AE/AA frequencies"),
        "checkpoint": Key(str, "", "model whose tokenizer segments text for subword metrics"),
        "in_domain_only": Key(bool, False, "restrict AE/AA vocabulary to tokens absent from freq_out"),
    },
    "analyze-correlation": {
        "lm_in": Key(str), "lm_out": Key(str), "nmt_in": Key(str), "nmt_out": Key(str),
        "src": Key(str), "tgt": Key(str),
        "freq_in": Key(str, ""), "freq_out": Key(str, ""),
        "top_n": Key(int, 100),
    },
    "sweep-beta": {
        "checkpoint": Key(str), "input": Key(str), "ref": Key(str),
        "grid": Key(str, "0.00,0.05,0.10,0.15,0.20,0.25,0.30", "coverage-penalty values"),
        **{k: v for k, v in DECODE_KEYS.items() if k != "coverage_beta"},
    },
    "grad-check": {
        "group": Key(str, "all", "all | primitives | models"),
        "max_coords": Key(int, 6, "coordinates sampled per model tensor"),
    },
}
GLOBAL_KEYS = {"seed": Key(int, 0)}


def _convert(name: str, key: Key, raw: str):
    try:
        if key.kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        value = key.kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {key.kind.__name__}") from None
    if key.kind is float and not math.isfinite(value):
        raise ConfigError(f"{name}: value must be finite")
    return value


def parse_config_lines(lines: Sequence[str], origin: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(command: str, files: Sequence[str], overrides: Sequence[str], seed: int | None) -> dict:
    keys = {**GLOBAL_KEYS, **COMMAND_KEYS[command]}
    raw: dict[str, str] = {}
    for path in files:
        try:
            raw.update(parse_config_lines(read_lines(path), path))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    raw.update(parse_config_lines(overrides, "--set"))
    if seed is not None:
        raw["seed"] = str(seed)
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        raise ConfigError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    cfg = {}
    for name, key in keys.items():
        if name in raw:
            cfg[name] = _convert(name, key, raw[name])
        elif key.default is REQUIRED:
            raise ConfigError(f"missing required key {name!r} for {command}")
        else:
            cfg[name] = key.default
    return cfg


def format_config(command: str, cfg: dict) -> list[str]:
    return [f"# command={command}"] + [f"{k}={_fmt(v)}" for k, v in cfg.items()]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def defaults_text(command: str) -> list[str]:
    lines = [f"# {command}"]
    for name, key in {**GLOBAL_KEYS, **COMMAND_KEYS[command]}.items():
        val = "<required>" if key.default is REQUIRED else _fmt(key.default)
        lines.append(f"{name}={val}" + (f"  # {key.help}" if key.help else ""))
    return lines


# ---------------------------------------------------------------- helpers

class Run:
    def __init__(self, out_dir: str, command: str, cfg: dict):
        self.dir = out_dir
        self.command = command
        self.cfg = cfg
        for sub in RUN_SUBDIRS:
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        write_lines(os.path.join(out_dir, "config.resolved"), format_config(command, cfg))

    def path(self, sub: str, name: str) -> str:
        return os.path.join(self.dir, sub, name)


def _require_file(path: str, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} path is empty")
    if not os.path.isfile(path):
        raise DataError(f"{what} not found: {path}")
    return path


def _train_config(cfg: dict) -> TrainConfig:
    if cfg["optimizer"] not in ("adam", "sgd"):
        raise ConfigError(f"optimizer must be adam or sgd, got {cfg['optimizer']!r}")
    for k in ("epochs", "batch_size", "max_len"):
        if cfg[k] < (0 if k == "epochs" else 1):
            raise ConfigError(f"{k} out of range: {cfg[k]}")
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       optimizer=cfg["optimizer"], clip_norm=cfg["clip_norm"] or None, seed=cfg["seed"],
                       max_len=cfg["max_len"])


def _tokenizer_from_config(cfg: dict, run: Run, texts: list[str]) -> Tokenizer:
    """Load the configured vocabulary/merges or build them from ``texts`` (plus any extra corpora)."""
    merges = MergeTable.load(_require_file(cfg["merges"], "merges")) if cfg["merges"] else None
    if cfg["vocab"]:
        vocab = Vocabulary.load(_require_file(cfg["vocab"], "vocab"))
    else:
        corpus = list(texts)
        for extra in filter(None, cfg["vocab_corpora"].split(",")):
            corpus += list(read_mono(_require_file(extra.strip(), "vocab corpus")).sentences)
        if merges is None and cfg["bpe_merges"] > 0:
            merges = learn_bpe(corpus, cfg["bpe_merges"])
        vocab = build_vocab(corpus, merges)
    vocab.save(run.path("checkpoints", "vocab.txt"))
    if merges is not None:
        merges.save(run.path("checkpoints", "merges.txt"))
    return Tokenizer(vocab, merges)


def _tokenizer_of(model) -> Tokenizer:
    if model.vocab is None:
        raise DataError("checkpoint carries no vocabulary")
    return Tokenizer(model.vocab, model.merges)


def _encode_pairs(tok: Tokenizer, corpus: ParallelCorpus) -> list[tuple[list[int], list[int]]]:
    return [(tok.encode(s), tok.encode(t)) for s, t in corpus.pairs()]


def _load(path: str, kind: str | None, what: str, lms=None):
    _require_file(path, what)
    return load_model(path, kind, lms=lms)


def _check_same_vocab(models: Sequence, names: Sequence[str]) -> None:
    digests = {m.vocab.digest if m.vocab is not None else None for m in models}
    if len(digests) > 1:
        raise VocabMismatch(f"vocabularies differ among {', '.join(names)}")


def _write_report(path: str, values: dict) -> None:
    write_lines(path, EvalReport(values).lines())


# ---------------------------------------------------------------- commands

def cmd_train_lm(run: Run, cfg: dict) -> None:
    mono = read_mono(_require_file(cfg["train"], "train"))
    tok = _tokenizer_from_config(cfg, run, list(mono.sentences))
    seqs = [tok.encode(s) for s in mono.sentences]
    model = LanguageModel(LmConfig(len(tok.vocab), cfg["emb_dim"], cfg["hidden_dim"], cfg["num_layers"],
                                   cfg["dropout"], cfg["seed"]), tok.vocab, tok.merges)
    result = train_lm(model, seqs, _train_config(cfg))
    digest = save_model(model, run.path("checkpoints", "lm.ckpt"))
    values = {"initial_loss": result.initial_loss, "final_loss": result.curve[-1] if result.curve else math.nan,
              "train_ppl": perplexity(model, seqs), "steps": result.steps, "checkpoint_sha256": digest}
    if cfg["dev"]:
        dev = read_mono(_require_file(cfg["dev"], "dev"))
        values["dev_ppl"] = perplexity(model, [tok.encode(s) for s in dev.sentences])
    if not result.curve:
        values.pop("final_loss")
    _write_report(run.path("reports", "train.txt"), values)


def _nmt_report(run, model, tok, result, cfg, digest):
    values = {"initial_loss": result.initial_loss, "steps": result.steps, "checkpoint_sha256": digest}
    if result.curve:
        values["final_loss"] = result.curve[-1]
    if cfg.get("dev_src") and cfg.get("dev_tgt"):
        dev = read_parallel(_require_file(cfg["dev_src"], "dev_src"), _require_file(cfg["dev_tgt"], "dev_tgt"))
        values["dev_nll"] = corpus_nll(model, _encode_pairs(tok, dev))
    _write_report(run.path("reports", "train.txt"), values)


def cmd_train_nmt(run: Run, cfg: dict) -> None:
    corpus = read_parallel(_require_file(cfg["train_src"], "train_src"), _require_file(cfg["train_tgt"], "train_tgt"))
    tok = _tokenizer_from_config(cfg, run, list(corpus.sources + corpus.targets))
    model = TranslationModel(NmtConfig(len(tok.vocab), cfg["emb_dim"], cfg["hidden_dim"], cfg["num_layers"],
                                       bidirectional=cfg["bidirectional"], input_feed=cfg["input_feed"],
                                       seed=cfg["seed"]), tok.vocab, tok.merges)
    result = train_nmt(model, _encode_pairs(tok, corpus), _train_config(cfg))
    digest = save_model(model, run.path("checkpoints", "nmt.ckpt"))
    _nmt_report(run, model, tok, result, cfg, digest)


def cmd_fine_tune(run: Run, cfg: dict) -> None:
    model = _load(cfg["checkpoint"], "nmt", "checkpoint")
    tok = _tokenizer_of(model)
    corpus = read_parallel(_require_file(cfg["train_src"], "train_src"), _require_file(cfg["train_tgt"], "train_tgt"))
    result = fine_tune(model, _encode_pairs(tok, corpus), _train_config(cfg))
    digest = save_model(model, run.path("checkpoints", "nmt.ckpt"))
    _nmt_report(run, model, tok, result, cfg, digest)


def _fusion_lm_paths(cfg: dict, variant: str) -> list[str]:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    seen: dict[str, int] = {}
    paths = []
    for role in VARIANTS[variant]:
        seen[role] = seen.get(role, 0) + 1
        key = role if seen[role] == 1 else f"{role}2"
        if not cfg[key]:
            raise ConfigError(f"variant {variant} needs {key}")
        paths.append(_require_file(cfg[key], key))
    return paths


def cmd_train_fusion(run: Run, cfg: dict) -> None:
    lm_paths = _fusion_lm_paths(cfg, cfg["variant"])
    lms = [_load(p, "lm", "language model") for p in lm_paths]
    for lm in lms:
        lm.freeze()
    if cfg["resume"]:
        model = _load(cfg["resume"], "fusion", "resume", lms=lms)
        nmt = model.nmt
    else:
        nmt = _load(cfg["nmt"], "nmt", "nmt")
        model = None
    _check_same_vocab([nmt, *lms], ["nmt", *lm_paths])
    tok = _tokenizer_of(nmt)
    corpus = read_parallel(_require_file(cfg["train_src"], "train_src"), _require_file(cfg["train_tgt"], "train_tgt"))
    if cfg["copy_mono"]:
        corpus = copy_augment(read_mono(_require_file(cfg["copy_mono"], "copy_mono"), COPIED), corpus)
    model, result = train_deep_fusion(nmt, lms, _encode_pairs(tok, corpus), _train_config(cfg), cfg["variant"],
                                      cfg["fusion_point"], cfg["nonlinearity"], model=model)
    comps = fusion_components(model, lm_paths, cfg["nmt"] if not cfg["resume"] else None)
    digest = save_model(model, run.path("checkpoints", "fusion.ckpt"), comps)
    values = {"initial_loss": result.initial_loss, "steps": result.steps, "checkpoint_sha256": digest,
              "lm_frozen": "true"}
    if result.curve:
        values["final_loss"] = result.curve[-1]
    _write_report(run.path("reports", "train.txt"), values)


def _write_corpus(run: Run, corpus: ParallelCorpus) -> None:
    write_lines(run.path("data", "train.src"), corpus.sources)
    write_lines(run.path("data", "train.tgt"), corpus.targets)
    write_lines(run.path("data", "train.provenance"), corpus.provenance)


def cmd_augment_copy(run: Run, cfg: dict) -> None:
    base = read_parallel(_require_file(cfg["train_src"], "train_src"), _require_file(cfg["train_tgt"], "train_tgt"))
    mono = read_mono(_require_file(cfg["mono"], "mono"), COPIED)
    out = copy_augment(mono, base)
    _write_corpus(run, out)
    _write_report(run.path("reports", "augment.txt"), {"original": len(base), "copied": len(mono), "total": len(out)})


def back_translate(reverse: TranslationModel, mono: MonoCorpus, cfg: DecodeConfig) -> ParallelCorpus:
    """Translate in-domain target text back into synthetic sources with a target-to-source model.

    Sentences whose decode fails or comes back empty are skipped and counted.
    """
    tok = _tokenizer_of(reverse)
    scorer = make_scorer(DecodeConfig(cfg.beam_size, cfg.max_len), reverse)
    sources, targets = [], []
    skipped = 0
    for sent in mono.sentences:
        ids = tok.encode(sent)
        try:
            hyp = beam_search(scorer, ids, cfg)[0] if ids else None
        except (ValueError, FloatingPointError) as exc:
            log.debug("back-translation failed on %r: %s", sent, exc)
            hyp = None
        text = tok.decode(hyp.output) if hyp is not None else ""
        if not text:
            skipped += 1
            continue
        sources.append(text)
        targets.append(sent)
    if skipped:
        log.warning("back-translation skipped %d of %d sentences", skipped, len(mono))
    return ParallelCorpus(tuple(sources), tuple(targets), (BACK_TRANSLATED,) * len(sources))


def cmd_augment_backtranslate(run: Run, cfg: dict) -> None:
    reverse = _load(cfg["reverse"], "nmt", "reverse")
    mono = read_mono(_require_file(cfg["mono"], "mono"))
    synthetic = back_translate(reverse, mono, DecodeConfig(cfg["beam_size"], cfg["max_decode_len"]))
    out = synthetic
    if cfg["train_src"] or cfg["train_tgt"]:
        base = read_parallel(_require_file(cfg["train_src"], "train_src"), _require_file(cfg["train_tgt"], "train_tgt"))
        out = base + synthetic
    _write_corpus(run, out)
    _write_report(run.path("reports", "augment.txt"), {"mono": len(mono), "synthetic": len(synthetic),
                                                        "skipped": len(mono) - len(synthetic), "total": len(out)})


def _decode_config(cfg: dict, coverage_beta: float | None = None) -> DecodeConfig:
    if cfg["fusion"] not in FUSION_MODES:
        raise ConfigError(f"fusion must be one of {', '.join(FUSION_MODES)}")
    try:
        return DecodeConfig(cfg["beam_size"], cfg["max_decode_len"], cfg["fusion"], cfg["beta"],
                            cfg["coverage_beta"] if coverage_beta is None else coverage_beta, cfg["length_alpha"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _build_scorer(cfg: dict, dcfg: DecodeConfig):
    """Load the checkpoint(s) named in ``cfg`` and return (scorer, tokenizer)."""
    ckpt = read_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
    if dcfg.fusion == "deep":
        if ckpt.kind != "fusion":
            raise CheckpointError(f"fusion=deep needs a fusion checkpoint, found {ckpt.kind}")
        paths = [p.strip() for p in cfg["fusion_lms"].split(",") if p.strip()]
        lms = [_load(p, "lm", "fusion LM") for p in paths]
        model = load_model(cfg["checkpoint"], "fusion", lms=lms)
        return make_scorer(dcfg, fusion_model=model), _tokenizer_of(model)
    if ckpt.kind != "nmt":
        raise CheckpointError(f"fusion={dcfg.fusion} needs an nmt checkpoint, found {ckpt.kind}")
    nmt = load_model(cfg["checkpoint"], "nmt")
    lm_in = lm_out = None
    if dcfg.fusion in ("lm-shallow", "dda-shallow"):
        lm_in = _load(cfg["lm_in"], "lm", "lm_in")
        if dcfg.fusion == "dda-shallow":
            lm_out = _load(cfg["lm_out"], "lm", "lm_out")
        _check_same_vocab([m for m in (nmt, lm_in, lm_out) if m is not None], ["nmt", "lm_in", "lm_out"])
    return make_scorer(dcfg, nmt, lm_in, lm_out), _tokenizer_of(nmt)


def _decode_file(scorer, tok: Tokenizer, path: str, dcfg: DecodeConfig) -> tuple[list[str], list[Hypothesis]]:
    lines = [s.strip() for s in read_lines(_require_file(path, "input"))]
    hyps = translate(scorer, [tok.encode(s) for s in lines], dcfg)
    return [tok.decode(h.output) for h in hyps], hyps


def cmd_translate(run: Run, cfg: dict) -> None:
    dcfg = _decode_config(cfg)
    scorer, tok = _build_scorer(cfg, dcfg)
    outputs, hyps = _decode_file(scorer, tok, cfg["input"], dcfg)
    write_lines(run.path("decodes", "output.txt"), outputs)
    if cfg["scores"]:
        write_lines(run.path("decodes", "scores.txt"),
                    [f"logprob={h.logprob:.10f} score={h.score:.10f} finished={str(h.finished).lower()} "
                     f"length={len(h.output)}" for h in hyps])
    if cfg["attention"]:
        write_lines(run.path("decodes", "attention.txt"),
                    [f"sent={i} step={t} " + " ".join(f"{a:.6f}" for a in row)
                     for i, h in enumerate(hyps) for t, row in enumerate(h.attention)])
    _write_report(run.path("reports", "translate.txt"),
                  {"sentences": len(hyps), "unfinished": sum(not h.finished for h in hyps)})


def cmd_evaluate(run: Run, cfg: dict) -> None:
    hyp = [s.strip() for s in read_lines(_require_file(cfg["hyp"], "hyp"))]
    ref = [s.strip() for s in read_lines(_require_file(cfg["ref"], "ref"))]
    if len(hyp) != len(ref):
        raise DataError(f"hyp has {len(hyp)} lines but ref has {len(ref)}")
    values: dict[str, object] = {"sentences": len(hyp), "bleu": bleu(hyp, ref)}
    if cfg["hyp_b"]:
        hyp_b = [s.strip() for s in read_lines(_require_file(cfg["hyp_b"], "hyp_b"))]
        if len(hyp_b) != len(ref):
            raise DataError("hyp_b and ref differ in length")
        values["bleu_b"] = bleu(hyp_b, ref)
        values["bootstrap_p"] = paired_bootstrap(hyp, hyp_b, ref, cfg["bootstrap_samples"], cfg["seed"])
    f1 = {}
    if cfg["freq_in"] and cfg["freq_out"]:
        if cfg["checkpoint"]:
            seg = _checkpoint_tokenizer(cfg["checkpoint"]).segment
        else:
            seg = str.split
        h_sub = [seg(s) for s in hyp]
        r_sub = [seg(s) for s in ref]
        fin = FreqTable.from_corpus(seg(s) for s in read_mono(_require_file(cfg["freq_in"], "freq_in")).sentences)
        fout = FreqTable.from_corpus(seg(s) for s in read_mono(_require_file(cfg["freq_out"], "freq_out")).sentences)
        vocab_tokens = fin.vocab() | fout.vocab() | {t for s in h_sub + r_sub for t in s}
        V = evaluation_vocab(vocab_tokens, cfg["in_domain_only"], fout)
        values["ae"] = adaptation_extent(h_sub, fin, fout, V)
        values["aa"] = adaptation_accuracy(h_sub, r_sub, fin, fout, V)
        values["domain_specific"] = domain_specific_counts(h_sub, fin.vocab(), fout.vocab())
        f1 = subword_f1_table(h_sub, r_sub)
    _write_report(run.path("reports", "eval.txt"), values)
    if f1:
        write_lines(run.path("reports", "f1.txt"), [f"{w} {v:.6f}" for w, v in sorted(f1.items())])


def _checkpoint_tokenizer(path: str) -> Tokenizer:
    ckpt = read_checkpoint(_require_file(path, "checkpoint"))
    if ckpt.vocab is None:
        raise DataError("checkpoint carries no vocabulary")
    return Tokenizer(ckpt.vocab, ckpt.merges)


def cmd_analyze_correlation(run: Run, cfg: dict) -> None:
    import collections

    models = {k: _load(cfg[k], "lm" if k.startswith("lm") else "nmt", k)
              for k in ("lm_in", "lm_out", "nmt_in", "nmt_out")}
    _check_same_vocab(list(models.values()), list(models))
    tok = _tokenizer_of(models["nmt_out"])
    corpus = read_parallel(_require_file(cfg["src"], "src"), _require_file(cfg["tgt"], "tgt"))
    pairs = _encode_pairs(tok, corpus)
    fin = fout = None
    if cfg["freq_in"] and cfg["freq_out"]:
        fin = collections.Counter(i for s in read_mono(_require_file(cfg["freq_in"], "freq_in")).sentences
                                  for i in tok.encode(s))
        fout = collections.Counter(i for s in read_mono(_require_file(cfg["freq_out"], "freq_out")).sentences
                                   for i in tok.encode(s))
    res = domain_diff_correlation(models["lm_in"], models["lm_out"], models["nmt_in"], models["nmt_out"],
                                  pairs, cfg["top_n"], fin, fout)
    values = {"words": len(res.words), "degenerate": str(res.degenerate).lower()}
    if not res.degenerate:
        values["pearson_r"] = res.pearson_r
    _write_report(run.path("reports", "correlation.txt"), values)
    write_lines(run.path("reports", "correlation.dat"), ["# delta_nmt delta_lm # word"] + res.table())
    write_lines(run.path("reports", "word_logprobs.txt"),
                ["# word lm_in lm_out nmt_in nmt_out delta_nmt delta_lm"]
                + [" ".join([r[0]] + [f"{x:.6f}" for x in r[1:]]) for r in res.rows])


def parse_grid(text: str) -> list[float]:
    try:
        grid = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"grid: cannot parse {text!r}") from None
    if not grid or any(g < 0 or not math.isfinite(g) for g in grid):
        raise ConfigError("grid needs one or more finite non-negative values")
    return grid


def cmd_sweep_beta(run: Run, cfg: dict) -> None:
    grid = parse_grid(cfg["grid"])
    ref = [s.strip() for s in read_lines(_require_file(cfg["ref"], "ref"))]
    base = _decode_config({**cfg, "coverage_beta": 0.0})
    scorer, tok = _build_scorer(cfg, base)
    rows = ["# coverage_beta bleu"]
    for g in grid:
        dcfg = _decode_config({**cfg, "coverage_beta": g})
        outputs, _ = _decode_file(scorer, tok, cfg["input"], dcfg)
        if len(outputs) != len(ref):
            raise DataError(f"input has {len(outputs)} lines but ref has {len(ref)}")
        write_lines(run.path("decodes", f"output.cov{g:.2f}.txt"), outputs)
        rows.append(f"{g:.2f} {bleu(outputs, ref):.4f}")
    write_lines(run.path("reports", "sweep.txt"), rows)


def cmd_grad_check(run: Run, cfg: dict) -> None:
    if cfg["group"] not in ("all", "primitives", "models"):
        raise ConfigError(f"group must be all, primitives or models, got {cfg['group']!r}")
    results = run_suite(cfg["group"], cfg["seed"], cfg["max_coords"])
    lines = [f"{r.name} error={r.error:.3e} ok={str(r.ok).lower()}" for r in results]
    write_lines(run.path("reports", "grad_check.txt"), lines)
    bad = [r.name for r in results if not r.ok]
    if bad:
        raise ag.NonFiniteError(f"gradient check failed for {', '.join(bad)}")


COMMANDS: dict[str, Callable[[Run, dict], None]] = {
    "train-lm": cmd_train_lm,
    "train-nmt": cmd_train_nmt,
    "train-fusion": cmd_train_fusion,
    "fine-tune": cmd_fine_tune,
    "augment-copy": cmd_augment_copy,
    "augment-backtranslate": cmd_augment_backtranslate,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "analyze-correlation": cmd_analyze_correlation,
    "sweep-beta": cmd_sweep_beta,
    "grad-check": cmd_grad_check,
}


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dda", description="Train, adapt, decode and evaluate small NMT models.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", action="append", default=[], help="key=value file (repeatable)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override (repeatable)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", default=None, help="run directory (default runs/<command>)")
    parser.add_argument("--show-defaults", action="store_true", help="print every key with its default and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _error(code: int, kind: str, message: str) -> int:
    msg = " ".join(str(message).split())
    print(f"error code={code} kind={kind} message={msg}", file=sys.stderr)
    return code


def _setup_logging(run_dir: str | None, verbose: bool) -> list[logging.Handler]:
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    handlers: list[logging.Handler] = []
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    handlers.append(console)
    if run_dir is not None:
        fh = logging.FileHandler(os.path.join(run_dir, "logs", "run.log"), mode="w", encoding="utf-8")
        fh.setFormatter(logging.Formatter("%(levelname)s %(name)s %(message)s"))
        handlers.append(fh)
    for h in handlers:
        root.addHandler(h)
    return handlers


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        return _error(EXIT_CONFIG, "config", exc)
    if args.show_defaults:
        print("\n".join(defaults_text(args.command)))
        return EXIT_OK
    handlers: list[logging.Handler] = []
    try:
        cfg = resolve_config(args.command, args.config, args.set, args.seed)
        run = Run(args.out_dir or os.path.join("runs", args.command), args.command, cfg)
        handlers = _setup_logging(run.dir, args.verbose)
        COMMANDS[args.command](run, cfg)
    except ConfigError as exc:
        return _error(EXIT_CONFIG, "config", exc)
    except (DataError, CorpusError, CheckpointError, VocabMismatch, MetricError, FusionError, OSError) as exc:
        return _error(EXIT_DATA, "data", exc)
    except (FloatingPointError, TrainingDiverged) as exc:
        return _error(EXIT_NUMERIC, "numeric", exc)
    except (ValueError, KeyError) as exc:
        return _error(EXIT_DATA, "data", exc)
    finally:
        root = logging.getLogger()
        for h in handlers:
            root.removeHandler(h)
            h.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

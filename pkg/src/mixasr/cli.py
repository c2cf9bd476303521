"""Command-line entry point orchestrating every pipeline stage.

Subcommands cover corpus preparation (`normalize`, `synthesize-data`),
language-model work (`lm-train`, `lm-prune`, `lm-score`, `lm-filter`),
long-audio alignment (`align`), acoustic training (`train`), decoding
(`decode`), and evaluation (`eval-wer`, `eval-rai`, `diagnose-codebook`,
`project-codes`).

Conventions shared by all subcommands:

- every run writes ``resolved_config.json`` (the fully resolved arguments)
  into the output directory;
- identical inputs, configuration, and seed produce byte-identical outputs;
- exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
  failure;
- the ``MIXASR_LOG`` environment variable (quiet|warning|info|debug) sets
  log verbosity on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import corpus, ngram, report
from .acoustic import AcousticModel, EncoderConfig
from .alignpipe import AudioChunk, chunk_audio, extract_segments, postprocess
from .decoder import DecodeConfig, Vocab, beam_decode
from .errors import ConfigError, DataError, NumericError
from .metrics import edit_counts, project_codes, rai, wer
from .objectives import LossWeights, codebook_stats
from .synthetic import (
    RECIPE_WEIGHTS,
    SPLITS,
    SyntheticConfig,
    build_alignment_case,
    build_task,
    recipe_encoder_config,
)
from .trainer import (
    Example,
    TrainConfig,
    collate,
    collect_code_indices,
    collect_code_vectors,
    export_model,
    fit,
    import_model,
    parse_train_config,
    psl_generate,
    transcribe_greedy,
)

log = logging.getLogger("mixasr")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

#: paper-recipe loss weights; dedicated flags override these
PAPER_ALPHA = 0.01
PAPER_BETA = 0.02
PAPER_DIVERSITY = 0.1


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _setup_logging() -> None:
    levels = {
        "quiet": logging.ERROR,
        "warning": logging.WARNING,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }
    name = os.environ.get("MIXASR_LOG", "warning").strip().lower()
    logging.basicConfig(
        level=levels.get(name, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    if name and name not in levels:
        log.warning("unknown MIXASR_LOG value %r; using 'warning'", name)


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def prepare_out(args: argparse.Namespace) -> Path:
    """Create the output directory and drop the resolved-argument snapshot."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        key: _jsonable(val)
        for key, val in vars(args).items()
        if key != "handler" and not key.startswith("_")
    }
    write_json(out / "resolved_config.json", resolved)
    return out


def write_json(path: Path, data) -> None:
    path.write_text(
        json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def write_lines(path: Path, lines: Sequence[str]) -> None:
    path.write_text("\n".join(lines) + "\n" if lines else "", encoding="utf-8")


def read_lines(path: str | Path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    return path.read_text(encoding="utf-8").splitlines()


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    for lineno, line in enumerate(read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid record: {exc}") from exc
    return records


def parse_overrides(pairs: Sequence[str] | None, cls) -> dict:
    """Cast ``key=value`` strings against a dataclass's field types."""
    types = {f.name: f.type for f in fields(cls)}
    casts = {"int": int, "float": float, "str": str}
    out: dict = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        key, _, value = item.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise ConfigError(f"unknown {cls.__name__} field {key!r}")
        if key in out:
            raise ConfigError(f"duplicate override for {key!r}")
        try:
            out[key] = casts[types[key]](value)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return out


def read_table(path: str | Path) -> tuple[list[str], dict[str, str]]:
    """Read a delimited (id, text) table; returns ids in file order plus a map."""
    lines = read_lines(path)
    if not lines:
        raise DataError(f"empty table: {path}")
    header = lines[0].split("\t")
    if len(header) < 2 or header[0] != "id" or header[1] != "text":
        raise DataError(f"{path}: expected a header starting with 'id\\ttext'")
    ids: list[str] = []
    table: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns")
        utt_id, text = parts[0], parts[1]
        if utt_id in table:
            raise DataError(f"{path}:{lineno}: duplicate id {utt_id!r}")
        ids.append(utt_id)
        table[utt_id] = text
    return ids, table


def read_texts(path: str | Path, split: str = "train") -> tuple[list[str], dict[str, str]]:
    """Id-to-text pairs from either a manifest (.jsonl) or an (id, text) table."""
    if str(path).endswith(".jsonl"):
        manifest = corpus.read_manifest(path, split=split)
        ids, table = [], {}
        for utt in manifest:
            if utt.text is None:
                raise DataError(f"{utt.id}: manifest entry has no transcript")
            ids.append(utt.id)
            table[utt.id] = utt.text
        return ids, table
    return read_table(path)


# ---------------------------------------------------------------------------
# data-directory access
# ---------------------------------------------------------------------------


def load_vocab(data: Path) -> Vocab:
    path = data / "vocab.json"
    if not path.exists():
        raise DataError(f"data directory lacks vocab.json: {data}")
    return Vocab.from_dict(json.loads(path.read_text(encoding="utf-8")))


def load_recipe(data: Path) -> dict:
    path = data / "recipe.json"
    if not path.exists():
        raise DataError(f"data directory lacks recipe.json: {data}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_manifest(data: Path, split: str) -> corpus.Manifest:
    path = data / "manifests" / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"no manifest for split {split!r}: {path}")
    kind = "dev" if split.endswith("_dev") else "test" if split.endswith("_test") else "train"
    return corpus.read_manifest(path, split=kind)


def manifest_examples(
    manifest: corpus.Manifest, data: Path, vocab: Vocab, labeled: bool
) -> list[Example]:
    examples = []
    for utt in manifest:
        inputs = corpus.load_audio(utt, root=data)
        labels = None
        if labeled:
            if utt.text is None:
                raise DataError(f"{utt.id}: labeled data required but transcript missing")
            labels = tuple(vocab.encode(utt.text))
        examples.append(Example(utt.id, inputs, labels))
    return examples


def load_examples(
    data: Path,
    split: str,
    vocab: Vocab,
    labeled: bool,
    fraction: float = 1.0,
    seed: int = 0,
) -> list[Example]:
    manifest = load_manifest(data, split)
    if fraction < 1.0:
        manifest = corpus.subset_fraction(manifest, fraction, seed)
        log.info("subset %s to %d utterances (fraction %.3g)", split, len(manifest), fraction)
    return manifest_examples(manifest, data, vocab, labeled)


def _frame_matrices(
    model: AcousticModel, examples: Sequence[Example], minibatch_size: int = 8
) -> list[np.ndarray]:
    """Per-utterance frame log-probability matrices, in input order."""
    mats: list[np.ndarray] = []
    for i in range(0, len(examples), minibatch_size):
        chunk = examples[i : i + minibatch_size]
        inputs, lengths = collate(chunk)
        with torch.no_grad():
            lp, frame_lengths = model.frame_log_probs(inputs, lengths)
        for j in range(len(chunk)):
            mats.append(lp[j, : frame_lengths[j]].cpu().numpy().astype(np.float64))
    return mats


# ---------------------------------------------------------------------------
# worker pool (ordered map keeps outputs deterministic)
# ---------------------------------------------------------------------------

_POOL_PAYLOAD: dict = {}


def _init_pool(payload) -> None:
    _POOL_PAYLOAD["value"] = payload


def _beam_task(mat: np.ndarray):
    cfg, lm = _POOL_PAYLOAD["value"]
    return beam_decode(mat, cfg, lm)


def _perplexity_task(line: str) -> float:
    return ngram.perplexity(_POOL_PAYLOAD["value"], line)


def pool_map(task: Callable, items: Sequence, workers: int, payload) -> list:
    """Map preserving input order, fanning out to workers when it pays off."""
    if workers <= 1 or len(items) < 2 * workers or "fork" not in multiprocessing.get_all_start_methods():
        _init_pool(payload)
        return [task(item) for item in items]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(processes=workers, initializer=_init_pool, initargs=(payload,)) as pool:
        return pool.map(task, items)


def _resolve_workers(requested: int | None) -> int:
    if requested is None:
        return os.cpu_count() or 1
    if requested < 1:
        raise ConfigError(f"--workers must be >= 1, got {requested}")
    return requested


# ---------------------------------------------------------------------------
# corpus subcommands
# ---------------------------------------------------------------------------


def cmd_normalize(args: argparse.Namespace) -> int:
    out = prepare_out(args)
    if args.manifest:
        manifest = corpus.read_manifest(args.manifest, split=args.split)
        entries = [
            replace(u, text=corpus.normalize_text(u.text)) if u.text is not None else u
            for u in manifest
        ]
        result = corpus.Manifest(entries, split=manifest.split)
        if args.max_seconds is not None:
            before = len(result)
            result = corpus.filter_by_duration(result, args.max_seconds)
            log.info("duration filter kept %d of %d utterances", len(result), before)
        corpus.write_manifest(result, out / "manifest.jsonl")
        print(f"wrote {len(result)} utterances to {out / 'manifest.jsonl'}")
    else:
        lines = [corpus.normalize_text(line) for line in read_lines(args.text)]
        write_lines(out / "normalized.txt", lines)
        print(f"wrote {len(lines)} lines to {out / 'normalized.txt'}")
    return EXIT_OK


def cmd_synthesize(args: argparse.Namespace) -> int:
    overrides = parse_overrides(args.set, SyntheticConfig)
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = replace(SyntheticConfig(), **overrides)
    task = build_task(cfg)
    vocab = task.vocab()
    out = prepare_out(args)

    write_lines(out / "lexicon.txt", list(task.lexicon))
    write_json(out / "vocab.json", vocab.to_dict())
    write_json(
        out / "recipe.json",
        {
            "encoder": recipe_encoder_config(vocab.size, cfg).to_dict(),
            "weights": asdict(RECIPE_WEIGHTS),
            "frame_rate": cfg.frame_rate,
            "synthetic": asdict(cfg),
        },
    )

    (out / "manifests").mkdir(exist_ok=True)
    (out / "texts").mkdir(exist_ok=True)
    for split in SPLITS:
        feature_dir = out / "features" / split
        feature_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for utt in task.splits[split]:
            rel = f"features/{split}/{utt.utt_id}.npy"
            np.save(out / rel, utt.features)
            entries.append(
                corpus.Utterance(
                    id=utt.utt_id,
                    audio_path=rel,
                    domain=utt.domain,
                    start=0.0,
                    end=utt.duration(cfg.frame_rate),
                    text=utt.text,
                )
            )
        kind = "dev" if split.endswith("_dev") else "test" if split.endswith("_test") else "train"
        corpus.write_manifest(corpus.Manifest(entries, split=kind), out / "manifests" / f"{split}.jsonl")
        write_lines(out / "texts" / f"{split}.txt", [u.text for u in task.splits[split]])
        log.info("split %s: %d utterances", split, len(entries))

    if args.align_docs > 0:
        case = build_alignment_case(
            task.lexicon,
            seed=args.align_seed,
            n_docs=args.align_docs,
            words_per_doc=args.align_words_per_doc,
            words_per_chunk=args.align_words_per_chunk,
            substitution_rate=args.align_noise,
        )
        align_dir = out / "align"
        align_dir.mkdir(exist_ok=True)
        write_lines(align_dir / "transcript.txt", list(case.documents))
        with (align_dir / "chunks.jsonl").open("w", encoding="utf-8") as fh:
            spans = chunk_audio(case.duration, case.chunk_seconds)
            for (start, end), hyp in zip(spans, case.chunk_hypotheses):
                fh.write(json.dumps(
                    {"recording_id": "rec0", "start": start, "end": end, "hypothesis": hyp},
                    sort_keys=True,
                ) + "\n")
        report.write_delimited(align_dir / "planted.tsv", ("start", "end", "text"), case.planted)
        speakers = ("anna", "nikos")
        rows = [
            (d * args.align_words_per_doc, (d + 1) * args.align_words_per_doc, speakers[d % 2])
            for d in range(args.align_docs)
        ]
        report.write_delimited(align_dir / "speakers.tsv", ("start", "end", "speaker"), rows)
        write_json(align_dir / "case.json", {"raw_duration": case.duration,
                                             "chunk_seconds": case.chunk_seconds})

    print(f"synthesized corpus in {out} ({sum(len(v) for v in task.splits.values())} utterances)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# language-model subcommands
# ---------------------------------------------------------------------------


def cmd_lm_train(args: argparse.Namespace) -> int:
    out = prepare_out(args)
    counts = ngram.count_ngrams(read_lines(args.text), order=args.order)
    model = ngram.estimate(counts)
    ngram.write_arpa(model, out / "model.arpa")
    sizes = model.counts_by_order()
    report.write_delimited(
        out / "stats.tsv",
        ("order", "raw_ngrams", "model_ngrams"),
        [(k + 1, len(counts.tables[k]), sizes[k]) for k in range(model.order)],
    )
    print(f"trained order-{model.order} model: " + " ".join(
        f"{k + 1}:{n}" for k, n in enumerate(sizes)))
    return EXIT_OK


def cmd_lm_prune(args: argparse.Namespace) -> int:
    out = prepare_out(args)
    thresholds = {2 + i: t for i, t in enumerate(args.thresholds)}
    counts = ngram.count_ngrams(read_lines(args.text), order=args.order)
    pruned = ngram.prune_counts(counts, thresholds)
    model = ngram.estimate(pruned)
    ngram.write_arpa(model, out / "model.arpa")
    sizes = model.counts_by_order()
    report.write_delimited(
        out / "stats.tsv",
        ("order", "raw_ngrams", "pruned_ngrams", "model_ngrams"),
        [(k + 1, len(counts.tables[k]), len(pruned.tables[k]), sizes[k])
         for k in range(model.order)],
    )
    print(f"pruned model with thresholds {thresholds}: " + " ".join(
        f"{k + 1}:{n}" for k, n in enumerate(sizes)))
    return EXIT_OK


def cmd_lm_score(args: argparse.Namespace) -> int:
    out = prepare_out(args)
    model = ngram.read_arpa(args.lm)
    lines = read_lines(args.text)
    workers = _resolve_workers(args.workers)
    values = pool_map(_perplexity_task, lines, workers, model)
    report.write_delimited(
        out / "scores.tsv",
        ("index", "perplexity", "text"),
        [(i, ppl, line) for i, (line, ppl) in enumerate(zip(lines, values))],
    )
    print(f"scored {len(lines)} lines with an order-{model.order} model")
    return EXIT_OK


def cmd_lm_filter(args: argparse.Namespace) -> int:
    out = prepare_out(args)
    if args.lm:
        model = ngram.read_arpa(args.lm)
    else:
        model = ngram.build_biased_lm(read_lines(args.bias_text), order=args.order)
    lines = read_lines(args.text)
    kept = ngram.perplexity_filter(lines, model, keep_ratio=args.keep)
    write_lines(out / "kept.txt", kept)
    print(f"kept {len(kept)} of {len(lines)} lines ({out / 'kept.txt'})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# alignment subcommand
# ---------------------------------------------------------------------------


def _parse_chunks(path: str | Path) -> list[AudioChunk]:
    chunks = []
    for lineno, rec in enumerate(read_jsonl(path), start=1):
        missing = [k for k in ("recording_id", "start", "end") if k not in rec]
        if missing:
            raise DataError(f"{path}:{lineno}: chunk record missing fields {missing}")
        chunks.append(AudioChunk(rec["recording_id"], rec["start"], rec["end"],
                                 rec.get("hypothesis")))
    return chunks


def _parse_speaker_map(path: str | Path) -> list[tuple[int, int, str]]:
    rows: list[tuple[int, int, str]] = []
    for lineno, line in enumerate(read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected start<TAB>end<TAB>speaker")
        try:
            rows.append((int(parts[0]), int(parts[1]), parts[2]))
        except ValueError as exc:
            if lineno == 1:  # header row
                continue
            raise DataError(f"{path}:{lineno}: bad word offsets {parts[:2]}") from exc
    if not rows:
        raise DataError(f"{path}: no speaker ranges")
    return rows


def cmd_align(args: argparse.Namespace) -> int:
    out = prepare_out(args)
    chunks = _parse_chunks(args.chunks)
    transcript_tokens = Path(args.transcript).read_text(encoding="utf-8").split()
    raw_tokens = None
    if args.raw_transcript:
        raw_tokens = Path(args.raw_transcript).read_text(encoding="utf-8").split()
    segments = extract_segments(
        chunks,
        transcript_tokens,
        words_per_doc=args.words_per_doc,
        match=args.match,
        mismatch=args.mismatch,
        gap=args.gap,
        score_floor=args.score_floor,
        extend_edges=not args.no_extend_edges,
        raw_transcript_tokens=raw_tokens,
    )
    report.write_delimited(
        out / "segments.tsv",
        ("recording_id", "start", "end", "score", "ref_start", "ref_end", "text"),
        [(s.recording_id, s.start, s.end, s.score, s.ref_start, s.ref_end, s.text)
         for s in segments],
    )
    print(f"aligned {len(segments)} of {len(chunks)} chunks")

    if args.speaker_map:
        if args.raw_duration is None:
            raise ConfigError("--raw-duration is required with --speaker-map")
        result = postprocess(
            segments,
            _parse_speaker_map(args.speaker_map),
            args.raw_duration,
            domain=args.domain,
            min_words=args.min_words,
        )
        corpus.write_manifest(result.manifest, out / "manifest.jsonl")
        corpus.emit_dataset_dir(result.manifest, out / "dataset")
        report.write_delimited(
            out / "stats.tsv",
            ("segments", "utterances", "yield_percent", "dropped_short", "dropped_unattributed"),
            [(len(segments), len(result.manifest), result.yield_percent,
              result.dropped_short, result.dropped_unattributed)],
        )
        print(f"kept {len(result.manifest)} utterances; yield {result.yield_percent:.1f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training subcommand
# ---------------------------------------------------------------------------


def _resolved_train_config(args: argparse.Namespace) -> TrainConfig:
    if args.config:
        cfg = parse_train_config(Path(args.config).read_text(encoding="utf-8"))
    else:
        cfg = TrainConfig()
    overrides = parse_overrides(args.set, TrainConfig)
    flags = {
        "peak_lr": args.peak_lr,
        "max_steps": args.max_steps,
        "eval_every": args.eval_every,
        "patience": args.patience,
        "source_per_cycle": args.batch_source,
        "target_per_cycle": args.batch_target,
        "minibatch_size": args.minibatch_size,
        "seed": args.seed,
    }
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return replace(cfg, **overrides) if overrides else cfg


def _train_weights(args: argparse.Namespace, recipe: dict) -> tuple[float, float, float]:
    base = {"alpha": PAPER_ALPHA, "beta": PAPER_BETA, "diversity_weight": PAPER_DIVERSITY}
    if args.recipe_weights:
        stored = recipe.get("weights")
        if not stored:
            raise ConfigError("--recipe-weights given but recipe.json stores no weights")
        base.update(stored)
    for key, flag in (("alpha", args.alpha), ("beta", args.beta),
                      ("diversity_weight", args.diversity_weight)):
        if flag is not None:
            base[key] = flag
    return base["alpha"], base["beta"], base["diversity_weight"]


def _write_train_config(path: Path, cfg: TrainConfig) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)!r}" for f in fields(TrainConfig)]
    write_lines(path, lines)


def cmd_train(args: argparse.Namespace) -> int:
    out = prepare_out(args)
    data = Path(args.data)
    vocab = load_vocab(data)
    recipe = load_recipe(data)
    cfg = _resolved_train_config(args)
    alpha, beta, diversity = _train_weights(args, recipe)

    encoder_data = dict(recipe.get("encoder") or {})
    if not encoder_data:
        raise DataError("recipe.json lacks an encoder section")
    encoder_data["vocab_size"] = vocab.size
    if args.mask_prob is not None:
        encoder_data["mask_prob"] = args.mask_prob
    if args.mask_span is not None:
        encoder_data["mask_span"] = args.mask_span
    encoder = EncoderConfig.from_dict(encoder_data)

    source = load_examples(data, "source_train", vocab, labeled=True)
    dev: Sequence[Example] = ()
    if args.dev_split != "none":
        dev = load_examples(data, args.dev_split, vocab, labeled=True)
    target: list[Example] = []
    if args.mode in ("m2ds2", "cpt", "psl"):
        target = load_examples(
            data, "target_train", vocab, labeled=False,
            fraction=args.target_fraction, seed=cfg.seed,
        )

    model = AcousticModel(encoder)
    model.init_parameters(cfg.seed)
    _write_train_config(out / "train_config.txt", cfg)

    pretrain_history = None
    if args.mode == "so":
        result = fit(model, "so", cfg, source=source, dev=dev,
                     weights=LossWeights(0.0, 0.0, diversity),
                     log_path=out / "log.jsonl", checkpoint_path=out / "checkpoint.bin")
    elif args.mode == "m2ds2":
        result = fit(model, "m2ds2", cfg, source=source, target=target, dev=dev,
                     weights=LossWeights(alpha, beta, diversity),
                     log_path=out / "log.jsonl", checkpoint_path=out / "checkpoint.bin")
    elif args.mode == "cpt":
        pre = fit(model, "cpt_pretrain", cfg, target=target,
                  weights=LossWeights(0.0, 1.0, diversity),
                  log_path=out / "log_pretrain.jsonl",
                  checkpoint_path=out / "checkpoint_pretrain.bin")
        pretrain_history = pre.history
        result = fit(model, "cpt_finetune", cfg, source=source, dev=dev,
                     weights=LossWeights(0.0, 0.0, diversity),
                     log_path=out / "log.jsonl", checkpoint_path=out / "checkpoint.bin")
    else:  # psl
        if not args.teacher:
            raise ConfigError("--teacher (an exported model) is required in psl mode")
        teacher, teacher_vocab = import_model(args.teacher)
        pseudo = psl_generate(teacher, target, teacher_vocab,
                              minibatch_size=cfg.minibatch_size)
        by_id = {ex.utt_id: ex for ex in target}
        pseudo_examples = [
            replace(by_id[utt_id], labels=tuple(vocab.encode(text)))
            for utt_id, text in pseudo
        ]
        log.info("teacher labeled %d of %d target utterances", len(pseudo_examples), len(target))
        result = fit(model, "psl", cfg, source=source + pseudo_examples, dev=dev,
                     weights=LossWeights(0.0, 0.0, diversity),
                     log_path=out / "log.jsonl", checkpoint_path=out / "checkpoint.bin")

    export_model(out / "model.ckpt", model, vocab)
    report.save_figure(report.training_figure(result.history), out / "training.png")
    if pretrain_history:
        report.save_figure(report.training_figure(pretrain_history), out / "training_pretrain.png")
    state = result.state
    print(f"trained {args.mode} for {state.step} steps; "
          f"best dev ctc {state.best_loss:.4f} at step {state.best_step}; "
          f"model at {out / 'model.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# decoding and evaluation subcommands
# ---------------------------------------------------------------------------


def cmd_decode(args: argparse.Namespace) -> int:
    out = prepare_out(args)
    model, vocab = import_model(args.model)
    data = Path(args.data)
    examples = load_examples(data, args.split, vocab, labeled=False)
    if args.method == "greedy":
        rows = transcribe_greedy(model, examples, vocab, minibatch_size=8)
        header: tuple[str, ...] = ("id", "text")
    else:
        dcfg = DecodeConfig(vocab, beam_width=args.beam_width,
                            lm_weight=args.lm_weight, word_bonus=args.word_bonus)
        lm = ngram.read_arpa(args.lm) if args.lm else None
        mats = _frame_matrices(model, examples)
        workers = _resolve_workers(args.workers)
        hyps = pool_map(_beam_task, mats, workers, (dcfg, lm))
        header = ("id", "text", "acoustic", "lm", "combined", "n_words")
        rows = [
            (ex.utt_id, h.text, h.acoustic, h.lm, h.combined, h.n_words)
            for ex, h in zip(examples, hyps)
        ]
    report.write_delimited(out / "hypotheses.tsv", header, rows)
    print(f"decoded {len(rows)} utterances ({args.method}) to {out / 'hypotheses.tsv'}")
    return EXIT_OK


def cmd_eval_wer(args: argparse.Namespace) -> int:
    out = prepare_out(args)
    _, refs = read_texts(args.refs, split=args.split)
    hyp_ids, hyps = read_texts(args.hyps, split=args.split)
    missing = sorted(set(hyps) - set(refs))
    extra = sorted(set(refs) - set(hyps))
    if missing or extra:
        raise DataError(
            f"id mismatch: {len(missing)} hypothesis ids lack references "
            f"(e.g. {missing[:3]}), {len(extra)} references lack hypotheses "
            f"(e.g. {extra[:3]})"
        )
    result = wer([refs[i] for i in hyp_ids], [hyps[i] for i in hyp_ids])
    per_utt = []
    for utt_id in hyp_ids:
        s, i, d, h = edit_counts(refs[utt_id].split(), hyps[utt_id].split())
        per_utt.append((utt_id, s, i, d, h, refs[utt_id], hyps[utt_id]))
    report.write_delimited(
        out / "per_utt.tsv",
        ("id", "substitutions", "insertions", "deletions", "hits", "ref", "hyp"),
        per_utt,
    )
    summary = report.wer_summary(result)
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    report.save_figure(report.wer_figure(result), out / "wer.png")
    print(summary, end="")
    return EXIT_OK


def cmd_eval_rai(args: argparse.Namespace) -> int:
    value = rai(args.adapted, args.unadapted)
    text = f"{value:.2f}"
    print(text)
    if args.out:
        out = prepare_out(args)
        (out / "rai.txt").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_diagnose_codebook(args: argparse.Namespace) -> int:
    out = prepare_out(args)
    model, vocab = import_model(args.model)
    data = Path(args.data)
    size = model.cfg.codebook_size
    usage_rows = []
    hist_rows = []
    collected = []
    for split in args.splits:
        examples = load_examples(data, split, vocab, labeled=False)
        indices = collect_code_indices(model, examples)
        collected.append(indices)
        stats = codebook_stats(indices, size)
        for g, (entropy, usage) in enumerate(zip(stats.entropies, stats.effective_usage)):
            usage_rows.append((split, g, entropy, usage))
            for code, count in enumerate(stats.histograms[g]):
                hist_rows.append((split, g, code, int(count)))
    combined = codebook_stats(np.concatenate(collected, axis=0), size)
    for g, (entropy, usage) in enumerate(zip(combined.entropies, combined.effective_usage)):
        usage_rows.append(("combined", g, entropy, usage))
        for code, count in enumerate(combined.histograms[g]):
            hist_rows.append(("combined", g, code, int(count)))
    report.write_delimited(out / "usage.tsv",
                           ("split", "group", "entropy", "effective_usage"), usage_rows)
    report.write_delimited(out / "histogram.tsv",
                           ("split", "group", "code", "count"), hist_rows)
    report.save_figure(report.usage_figure(combined), out / "usage.png")
    mean_usage = sum(combined.effective_usage) / len(combined.effective_usage)
    print(f"mean effective usage {mean_usage:.3f} of {size} "
          f"({', '.join(f'{u:.2f}' for u in combined.effective_usage)})")
    return EXIT_OK


def cmd_project_codes(args: argparse.Namespace) -> int:
    out = prepare_out(args)
    model, vocab = import_model(args.model)
    data = Path(args.data)
    blocks = []
    domains: list[str] = []
    for split in args.splits:
        manifest = load_manifest(data, split)
        examples = manifest_examples(manifest, data, vocab, labeled=False)
        vectors = collect_code_vectors(model, examples)
        blocks.append(vectors)
        counts = model.output_lengths([len(ex.inputs) for ex in examples])
        for utt, n in zip(manifest, counts):
            domains.extend([utt.domain] * n)
    stacked = np.concatenate(blocks, axis=0)
    points, _ = project_codes(stacked, n_components=2)
    report.write_delimited(
        out / "projection.csv",
        ("x", "y", "domain"),
        [(float(x), float(y), d) for (x, y), d in zip(points, domains)],
        delimiter=",",
    )
    report.save_figure(report.projection_figure(points, domains), out / "projection.png")
    print(f"projected {len(points)} frames to {out / 'projection.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_out(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--out", required=required,
                        help="output directory (created if missing)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixasr",
        description="Mixed-domain self-supervised finetuning toolkit for CTC recognition.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("normalize", help="normalize transcripts in a manifest or text file")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--manifest", help="manifest (.jsonl) whose transcripts to normalize")
    group.add_argument("--text", help="plain text file, one line per record")
    p.add_argument("--split", default="train", help="manifest split label (default train)")
    p.add_argument("--max-seconds", type=float, default=None,
                   help="drop utterances longer than this after normalizing (e.g. 12)")
    _add_out(p)
    p.set_defaults(handler=cmd_normalize)

    p = sub.add_parser("synthesize-data",
                       help="build the bundled synthetic two-domain corpus")
    p.add_argument("--seed", type=int, default=None, help="corpus seed (default 1234)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a synthesis field, e.g. --set target_train=60")
    p.add_argument("--align-docs", type=int, default=3,
                   help="documents in the bundled alignment case (0 disables)")
    p.add_argument("--align-words-per-doc", type=int, default=150)
    p.add_argument("--align-words-per-chunk", type=int, default=30)
    p.add_argument("--align-noise", type=float, default=0.0,
                   help="word-substitution rate in chunk hypotheses")
    p.add_argument("--align-seed", type=int, default=5)
    _add_out(p)
    p.set_defaults(handler=cmd_synthesize)

    p = sub.add_parser("lm-train", help="train an n-gram model and write it as ARPA")
    p.add_argument("--text", required=True, help="training corpus, one sentence per line")
    p.add_argument("--order", type=int, default=4, help="model order (default 4)")
    _add_out(p)
    p.set_defaults(handler=cmd_lm_train)

    p = sub.add_parser("lm-prune",
                       help="train with count pruning (thresholds per order, from order 2)")
    p.add_argument("--text", required=True)
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--thresholds", type=int, nargs="+", default=[3, 5, 7],
                   help="minimum counts for orders 2, 3, ... (default 3 5 7)")
    _add_out(p)
    p.set_defaults(handler=cmd_lm_prune)

    p = sub.add_parser("lm-score", help="per-line perplexities under an ARPA model")
    p.add_argument("--lm", required=True, help="ARPA model file")
    p.add_argument("--text", required=True)
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: all cores)")
    _add_out(p)
    p.set_defaults(handler=cmd_lm_score)

    p = sub.add_parser("lm-filter",
                       help="keep the lowest-perplexity fraction of a corpus")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--lm", help="ARPA model to score with")
    group.add_argument("--bias-text", help="in-domain text to build the scoring model from")
    p.add_argument("--text", required=True, help="corpus to filter")
    p.add_argument("--keep", type=float, default=0.10,
                   help="fraction of lines to keep (default 0.10)")
    p.add_argument("--order", type=int, default=4,
                   help="order of the model built from --bias-text")
    _add_out(p)
    p.set_defaults(handler=cmd_lm_filter)

    p = sub.add_parser("align",
                       help="recover training segments from chunk hypotheses and a transcript")
    p.add_argument("--chunks", required=True,
                   help="chunk hypotheses (.jsonl: recording_id, start, end, hypothesis)")
    p.add_argument("--transcript", required=True, help="reference transcript text file")
    p.add_argument("--raw-transcript", default=None,
                   help="unnormalized transcript for noise-tag reinsertion")
    p.add_argument("--words-per-doc", type=int, default=1000)
    p.add_argument("--match", type=float, default=2.0)
    p.add_argument("--mismatch", type=float, default=-1.0)
    p.add_argument("--gap", type=float, default=-1.0)
    p.add_argument("--score-floor", type=float, default=None,
                   help="minimum local-alignment score (default 2*match)")
    p.add_argument("--no-extend-edges", action="store_true",
                   help="do not widen reference spans by unaligned hypothesis edges")
    p.add_argument("--speaker-map", default=None,
                   help="TSV of word-offset ranges (start, end, speaker) to build a manifest")
    p.add_argument("--raw-duration", type=float, default=None,
                   help="total recording seconds (for the yield figure)")
    p.add_argument("--domain", default="source")
    p.add_argument("--min-words", type=int, default=2)
    _add_out(p)
    p.set_defaults(handler=cmd_align)

    p = sub.add_parser("train", help="train an acoustic model on a data directory")
    p.add_argument("--mode", required=True, choices=("so", "m2ds2", "cpt", "psl"),
                   help="so: source-only; m2ds2: mixed self-supervision; "
                        "cpt: continued pretraining then finetuning; psl: pseudo-labels")
    p.add_argument("--data", required=True, help="data directory (from synthesize-data)")
    p.add_argument("--config", default=None, help="key = value training-config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a training-config field")
    p.add_argument("--seed", type=int, default=None, help="training seed (default 0)")
    p.add_argument("--peak-lr", type=float, default=None, help="peak learning rate (default 3e-4)")
    p.add_argument("--max-steps", type=int, default=None, help="optimizer updates (default 10000)")
    p.add_argument("--eval-every", type=int, default=None, help="dev-eval period (default 500)")
    p.add_argument("--patience", type=int, default=None,
                   help="evaluations without improvement before stopping (default 5)")
    p.add_argument("--batch-source", type=int, default=None,
                   help="labeled source utterances per update (default 4)")
    p.add_argument("--batch-target", type=int, default=None,
                   help="unlabeled target utterances per update (default 8)")
    p.add_argument("--minibatch-size", type=int, default=None,
                   help="accumulation granularity (default 4)")
    p.add_argument("--alpha", type=float, default=None,
                   help="source self-supervision weight in m2ds2 mode (default 0.01)")
    p.add_argument("--beta", type=float, default=None,
                   help="target self-supervision weight in m2ds2 mode (default 0.02)")
    p.add_argument("--diversity-weight", type=float, default=None,
                   help="codebook diversity weight (default 0.1)")
    p.add_argument("--recipe-weights", action="store_true",
                   help="start from the loss weights stored in the data directory's recipe")
    p.add_argument("--mask-prob", type=float, default=None,
                   help="per-frame mask start probability (default from recipe; paper 0.4)")
    p.add_argument("--mask-span", type=int, default=None,
                   help="masked span length (default from recipe; paper 10)")
    p.add_argument("--dev-split", default="source_dev",
                   help="labeled split for early stopping, or 'none' (default source_dev)")
    p.add_argument("--target-fraction", type=float, default=1.0,
                   help="duration fraction of target audio to use (default 1.0)")
    p.add_argument("--teacher", default=None,
                   help="exported model that pseudo-labels target audio (psl mode)")
    _add_out(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("decode", help="transcribe a split with an exported model")
    p.add_argument("--model", required=True, help="exported model (model.ckpt)")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="target_test")
    p.add_argument("--method", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam-width", type=int, default=13, help="beam width (default 13)")
    p.add_argument("--lm", default=None, help="ARPA model for shallow fusion")
    p.add_argument("--lm-weight", type=float, default=0.5)
    p.add_argument("--word-bonus", type=float, default=0.0)
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes for beam search (default: all cores)")
    _add_out(p)
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser("eval-wer", help="word error rate of hypotheses against references")
    p.add_argument("--refs", required=True,
                   help="references: manifest (.jsonl) or TSV with id/text columns")
    p.add_argument("--hyps", required=True, help="hypotheses TSV (from decode)")
    p.add_argument("--split", default="test", help="manifest split label (default test)")
    _add_out(p)
    p.set_defaults(handler=cmd_eval_wer)

    p = sub.add_parser("eval-rai", help="relative adaptation improvement of two WERs")
    p.add_argument("--adapted", type=float, required=True, help="adapted-system WER")
    p.add_argument("--unadapted", type=float, required=True, help="unadapted-system WER")
    _add_out(p, required=False)
    p.set_defaults(handler=cmd_eval_rai)

    p = sub.add_parser("diagnose-codebook",
                       help="codebook usage histograms and effective-usage stats")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", nargs="+", default=["source_train", "target_train"])
    _add_out(p)
    p.set_defaults(handler=cmd_diagnose_codebook)

    p = sub.add_parser("project-codes",
                       help="2-D projection of quantized codes, labeled by domain")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", nargs="+", default=["source_train", "target_train"])
    _add_out(p)
    p.set_defaults(handler=cmd_project_codes)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (2)
        code = exc.code
        if code is None:
            return EXIT_OK
        return code if isinstance(code, int) else EXIT_CONFIG
    _setup_logging()
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Training orchestration: schedules, mixed batches, accumulation, regimes.

Runs are stateless with respect to hidden RNG state: every random draw comes
from a generator derived from (config seed, role, step, mini-batch index), so
a run is a pure function of its config and data, and resuming from a
checkpoint replays the uninterrupted trajectory bit for bit.

Supported regimes:

- ``so``: supervised CTC finetuning on labeled source audio.
- ``m2ds2``: mixed finetuning — CTC on source plus weighted self-supervision
  on both source and unlabeled target audio, gradient-accumulated over
  interleaved mini-batches.
- ``cpt_pretrain``: self-supervised continued pretraining on target audio
  (no CTC, fixed step budget of twice the configured maximum).
- ``cpt_finetune``: supervised finetuning that starts from a continued-
  pretraining checkpoint (same loop as ``so``).
- ``psl``: supervised finetuning on pseudo-labeled target audio.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from itertools import islice
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch

from .acoustic import (
    AcousticModel,
    EncoderConfig,
    load_model_arrays,
    model_arrays,
    read_checkpoint,
    write_checkpoint,
)
from .decoder import Vocab
from .errors import ConfigError, DataError, NumericError
from .objectives import LossWeights, ctc_loss, m2ds2_loss, self_supervised_loss
from .seeding import derive_rng

MODES = ("so", "m2ds2", "cpt_pretrain", "cpt_finetune", "psl")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and batch composition."""

    peak_lr: float = 3e-4
    max_steps: int = 10000
    warmup_fraction: float = 0.10
    eval_every: int = 500
    patience: int = 5
    source_per_cycle: int = 4  # labeled source utterances per optimizer update
    target_per_cycle: int = 8  # unlabeled target utterances per optimizer update
    minibatch_size: int = 4  # accumulation granularity
    weight_decay: float = 0.01
    seed: int = 0
    tau_start: float = 2.0  # quantizer temperature at step 0
    tau_floor: float = 0.5
    tau_decay: float = 0.9995  # multiplicative decay per step

    def __post_init__(self) -> None:
        positive = (
            "peak_lr", "max_steps", "eval_every", "patience",
            "source_per_cycle", "minibatch_size", "tau_start", "tau_floor",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}")
        if self.target_per_cycle < 0 or self.weight_decay < 0:
            raise ConfigError("target_per_cycle and weight_decay must be nonnegative")
        if self.source_per_cycle % self.minibatch_size:
            raise ConfigError("source_per_cycle must be a multiple of minibatch_size")
        if self.target_per_cycle % self.minibatch_size:
            raise ConfigError("target_per_cycle must be a multiple of minibatch_size")
        if not 0 < self.tau_decay <= 1:
            raise ConfigError(f"tau_decay must be in (0, 1], got {self.tau_decay}")
        if self.tau_floor > self.tau_start:
            raise ConfigError("tau_floor must not exceed tau_start")


def parse_train_config(text: str) -> TrainConfig:
    """Build a TrainConfig from ``key = value`` lines (# starts a comment)."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    casts = {"int": int, "float": float}
    seen: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        try:
            seen[key] = casts[types[key]](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return TrainConfig(**seen)


@dataclass(frozen=True)
class Example:
    """One utterance: raw input array plus optional label ids."""

    utt_id: str
    inputs: np.ndarray  # [T] waveform or [T, F] feature matrix
    labels: tuple[int, ...] | None = None


@dataclass(frozen=True)
class Minibatch:
    kind: str  # "source" (labeled) or "target" (unlabeled)
    ids: tuple[str, ...]
    inputs: torch.Tensor
    lengths: tuple[int, ...]
    targets: tuple[tuple[int, ...], ...] | None


@dataclass
class TrainState:
    step: int = 0  # completed optimizer updates
    best_loss: float = math.inf
    best_step: int = 0
    evals_since_improve: int = 0
    best_params: dict[str, np.ndarray] | None = None


@dataclass
class FitResult:
    params: dict[str, np.ndarray]  # best parameters (also loaded into the model)
    history: list[dict]
    state: TrainState


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then linear decay to zero at max_steps."""
    if not 0 <= step <= cfg.max_steps:
        raise ConfigError(f"step must be in [0, {cfg.max_steps}], got {step}")
    warmup = round(cfg.max_steps * cfg.warmup_fraction)
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    return cfg.peak_lr * (cfg.max_steps - step) / (cfg.max_steps - warmup)


def tau_at(step: int, cfg: TrainConfig) -> float:
    """Quantizer temperature: multiplicative decay with a floor."""
    return max(cfg.tau_floor, cfg.tau_start * cfg.tau_decay**step)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _id_stream(ids: tuple[str, ...], seed: int, role: str) -> Iterator[str]:
    """Endless stream over ids, reshuffled each pass with a derived seed."""
    epoch = 0
    while True:
        rng = derive_rng(seed, "batches", role, epoch)
        for i in rng.permutation(len(ids)):
            yield ids[int(i)]
        epoch += 1


def make_mixed_batches(
    source_ids: Sequence[str],
    target_ids: Sequence[str],
    cfg: TrainConfig,
    seed: int,
) -> Iterator[list[tuple[str, tuple[str, ...]]]]:
    """Endless accumulation cycles of (kind, utterance ids) mini-batches.

    Each cycle holds source_per_cycle labeled ids followed by target_per_cycle
    unlabeled ids, split into mini-batches of minibatch_size. Streams reshuffle
    per pass and the smaller side is resampled, so every cycle has full
    composition. Deterministic given (ids, cfg, seed).
    """
    n_src = cfg.source_per_cycle // cfg.minibatch_size
    n_tgt = cfg.target_per_cycle // cfg.minibatch_size
    if n_src and not source_ids:
        raise DataError("source manifest is empty")
    if n_tgt and not target_ids:
        raise DataError("target manifest is empty")
    src = _id_stream(tuple(source_ids), seed, "source") if n_src else None
    tgt = _id_stream(tuple(target_ids), seed, "target") if n_tgt else None
    while True:
        cycle = [("source", tuple(islice(src, cfg.minibatch_size))) for _ in range(n_src)]
        cycle += [("target", tuple(islice(tgt, cfg.minibatch_size))) for _ in range(n_tgt)]
        yield cycle


def _single_stream_cycles(
    ids: tuple[str, ...], seed: int, size: int
) -> Iterator[list[tuple[str, tuple[str, ...]]]]:
    """Continued-pretraining cycles: one unlabeled mini-batch per update."""
    stream = _id_stream(ids, seed, "target")
    while True:
        yield [("target", tuple(islice(stream, size)))]


def collate(examples: Sequence[Example]) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Zero-padded float32 batch plus true lengths."""
    if not examples:
        raise DataError("cannot collate an empty batch")
    ndims = {np.asarray(ex.inputs).ndim for ex in examples}
    if len(ndims) != 1 or ndims - {1, 2}:
        raise DataError(f"inconsistent or unsupported input ranks: {sorted(ndims)}")
    lengths = tuple(len(ex.inputs) for ex in examples)
    longest = max(lengths)
    first = np.asarray(examples[0].inputs)
    shape = (len(examples), longest) + first.shape[1:]
    batch = torch.zeros(shape, dtype=torch.float32)
    for row, ex in enumerate(examples):
        arr = torch.as_tensor(np.asarray(ex.inputs, dtype=np.float32))
        batch[row, : len(arr)] = arr
    return batch, lengths


def _build_minibatch(kind: str, ids: tuple[str, ...], by_id: Mapping[str, Example]) -> Minibatch:
    items = [by_id[i] for i in ids]
    inputs, lengths = collate(items)
    targets = None
    if kind == "source":
        targets = tuple(ex.labels for ex in items)
    return Minibatch(kind, ids, inputs, lengths, targets)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def make_optimizer(model: AcousticModel, cfg: TrainConfig) -> tuple[torch.optim.AdamW, tuple[str, ...]]:
    """AdamW over trainable parameters, with a stable name order for state I/O."""
    named = [(n, p) for n, p in sorted(model.named_parameters()) if p.requires_grad]
    if not named:
        raise ConfigError("model has no trainable parameters")
    names, params = zip(*named)
    return torch.optim.AdamW(params, lr=0.0, weight_decay=cfg.weight_decay), names


def train_step(
    model: AcousticModel,
    optimizer: torch.optim.Optimizer,
    minibatches: Sequence[Minibatch],
    weights: LossWeights,
    cfg: TrainConfig,
    step: int,
    kappa: float = 0.1,
    k_distractors: int = 10,
) -> dict:
    """One optimizer update from one accumulation cycle of mini-batches.

    Gradients of each mini-batch loss are accumulated (so the update equals a
    single step on the summed cycle loss), then applied with the scheduled
    learning rate for the completed step. Zero-weight self-supervision
    branches are skipped outright — they consume no randomness and touch no
    gradient — so target mini-batches are inert when beta is zero.
    Returns the loss-component log record.
    """
    torch.set_num_threads(1)
    tau = tau_at(step, cfg)
    record: dict = {"step": step + 1, "lr": lr_at(min(step + 1, cfg.max_steps), cfg),
                    "tau": tau, "alpha": weights.alpha, "beta": weights.beta, "total": 0.0}
    optimizer.zero_grad(set_to_none=True)
    for mb_index, mb in enumerate(minibatches):
        if mb.kind == "target" and weights.beta == 0:
            continue
        rng = derive_rng(cfg.seed, "step", step, mb_index)
        if mb.kind == "source":
            comps = m2ds2_loss(
                model, mb.inputs, mb.lengths, mb.targets, None, None,
                LossWeights(weights.alpha, 0.0, weights.diversity_weight),
                rng, tau=tau, kappa=kappa, k_distractors=k_distractors,
            )
            loss = comps["total"]
            for key in ("ctc", "ss_src", "contrastive_src", "diversity_src"):
                record[key] = record.get(key, 0.0) + float(comps[key])
        elif mb.kind == "target":
            out = self_supervised_loss(
                model, mb.inputs, mb.lengths, rng, tau=tau, kappa=kappa,
                k_distractors=k_distractors, diversity_weight=weights.diversity_weight,
            )
            loss = weights.beta * out["loss"]
            record["ss_tgt"] = record.get("ss_tgt", 0.0) + float(out["loss"])
            record["contrastive_tgt"] = record.get("contrastive_tgt", 0.0) + float(out["contrastive"])
            record["diversity_tgt"] = record.get("diversity_tgt", 0.0) + float(out["diversity"])
        else:
            raise DataError(f"unknown mini-batch kind {mb.kind!r}")
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite loss at step {step + 1}, mini-batch {mb_index} "
                f"({mb.kind}, ids {list(mb.ids)}): {float(loss)!r}; "
                f"components so far: { {k: v for k, v in record.items() if isinstance(v, float)} }"
            )
        loss.backward()
        record["total"] += float(loss)
    for group in optimizer.param_groups:
        group["lr"] = record["lr"]
    optimizer.step()
    return record


def eval_ctc(model: AcousticModel, examples: Sequence[Example], minibatch_size: int) -> float:
    """Mean per-utterance CTC loss over a labeled dev set."""
    if not examples:
        raise DataError("evaluation set is empty")
    if any(ex.labels is None for ex in examples):
        raise DataError("evaluation requires labeled examples")
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(examples), minibatch_size):
            chunk = examples[start : start + minibatch_size]
            inputs, lengths = collate(chunk)
            log_probs, frame_lengths = model.frame_log_probs(inputs, lengths)
            loss = ctc_loss(log_probs, frame_lengths, [ex.labels for ex in chunk])
            total += float(loss) * len(chunk)
    return total / len(examples)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def _train_arrays(
    model: AcousticModel,
    optimizer: torch.optim.Optimizer,
    names: tuple[str, ...],
    state: TrainState,
) -> dict[str, np.ndarray]:
    arrays = {f"param.{k}": v for k, v in model_arrays(model).items()}
    params = optimizer.param_groups[0]["params"]
    for name, p in zip(names, params):
        for key, value in optimizer.state.get(p, {}).items():
            arrays[f"opt.{name}.{key}"] = value.detach().cpu().numpy().copy()
    arrays["state.counters"] = np.array(
        [state.step, state.best_step, state.evals_since_improve], dtype=np.int64
    )
    arrays["state.best_loss"] = np.array(state.best_loss, dtype=np.float64)
    if state.best_params is not None:
        for k, v in state.best_params.items():
            arrays[f"best.{k}"] = v
    return arrays


def write_train_checkpoint(
    path: str | Path,
    model: AcousticModel,
    optimizer: torch.optim.Optimizer,
    names: tuple[str, ...],
    state: TrainState,
    cfg: TrainConfig,
    mode: str,
) -> None:
    metadata = {"kind": "train", "mode": mode, "config": asdict(cfg),
                "has_best": state.best_params is not None}
    write_checkpoint(path, _train_arrays(model, optimizer, names, state), metadata)


def load_train_checkpoint(
    path: str | Path,
    model: AcousticModel,
    optimizer: torch.optim.Optimizer,
    names: tuple[str, ...],
    cfg: TrainConfig,
    mode: str,
) -> TrainState:
    """Restore parameters, optimizer moments, and progress counters."""
    arrays, metadata = read_checkpoint(path)
    if metadata.get("kind") != "train":
        raise DataError(f"{path} is not a training checkpoint")
    if metadata.get("mode") != mode:
        raise ConfigError(f"checkpoint mode {metadata.get('mode')!r} does not match {mode!r}")
    if metadata.get("config") != asdict(cfg):
        raise ConfigError("checkpoint config does not match the requested config")
    load_model_arrays(model, {k[len("param."):]: v for k, v in arrays.items()
                              if k.startswith("param.")})
    opt_state: dict = {}
    params = optimizer.param_groups[0]["params"]
    for idx, name in enumerate(names):
        entries = {
            key.rsplit(".", 1)[1]: torch.from_numpy(value.copy())
            for key, value in arrays.items()
            if key.startswith(f"opt.{name}.")
        }
        if entries:
            opt_state[idx] = entries
    groups = [dict(g, params=list(range(len(params)))) for g in optimizer.state_dict()["param_groups"]]
    optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    counters = arrays["state.counters"]
    best = {k[len("best."):]: v for k, v in arrays.items() if k.startswith("best.")}
    return TrainState(
        step=int(counters[0]),
        best_loss=float(arrays["state.best_loss"]),
        best_step=int(counters[1]),
        evals_since_improve=int(counters[2]),
        best_params=best or None,
    )


def export_model(path: str | Path, model: AcousticModel, vocab: Vocab) -> None:
    """Write a portable inference artifact: parameters, encoder shape, vocabulary."""
    metadata = {"kind": "model", "encoder": model.cfg.to_dict(), "vocab": vocab.to_dict()}
    write_checkpoint(path, model_arrays(model), metadata)


def import_model(path: str | Path) -> tuple[AcousticModel, Vocab]:
    """Rebuild a model and its vocabulary from an exported artifact."""
    arrays, metadata = read_checkpoint(path)
    if metadata.get("kind") != "model":
        raise DataError(f"{path} is not an exported model")
    model = AcousticModel(EncoderConfig.from_dict(metadata["encoder"]))
    load_model_arrays(model, arrays)
    vocab = Vocab.from_dict(metadata["vocab"])
    if vocab.size != model.cfg.vocab_size:
        raise DataError(
            f"vocabulary size {vocab.size} does not match model output size {model.cfg.vocab_size}"
        )
    return model, vocab


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


def _mode_weights(mode: str, weights: LossWeights | None) -> LossWeights:
    if mode in ("so", "cpt_finetune", "psl"):
        if weights is not None and (weights.alpha or weights.beta):
            raise ConfigError(f"mode {mode!r} is purely supervised; loss weights must be zero")
        return weights or LossWeights(0.0, 0.0, 0.1)
    if mode == "cpt_pretrain":
        if weights is not None and (weights.alpha or weights.beta != 1.0):
            raise ConfigError("cpt_pretrain uses the self-supervised loss alone (alpha 0, beta 1)")
        return weights or LossWeights(0.0, 1.0, 0.1)
    return weights or LossWeights()


def _validate_split(name: str, examples: Sequence[Example], labeled: bool) -> dict[str, Example]:
    if not examples:
        raise DataError(f"{name} data is empty")
    by_id = {}
    for ex in examples:
        if ex.utt_id in by_id:
            raise DataError(f"duplicate utterance id {ex.utt_id!r} in {name} data")
        if labeled and ex.labels is None:
            raise DataError(f"{name} data must be labeled (utterance {ex.utt_id!r})")
        by_id[ex.utt_id] = ex
    return by_id


def fit(
    model: AcousticModel,
    mode: str,
    cfg: TrainConfig,
    *,
    source: Sequence[Example] = (),
    target: Sequence[Example] = (),
    dev: Sequence[Example] = (),
    weights: LossWeights | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    resume: bool = False,
    kappa: float = 0.1,
    k_distractors: int = 10,
) -> FitResult:
    """Train to completion; the model ends up holding the best parameters.

    Supervised modes evaluate dev CTC every eval_every updates and stop after
    `patience` evaluations without improvement; continued pretraining runs a
    fixed budget of twice max_steps with single-mini-batch updates and no
    early stopping. Checkpoints (written at every evaluation) capture
    parameters, optimizer moments, and counters; `resume` replays the exact
    uninterrupted trajectory because all per-step randomness is derived from
    (seed, step, mini-batch index).
    """
    torch.set_num_threads(1)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    w = _mode_weights(mode, weights)

    if mode == "cpt_pretrain":
        if source:
            raise DataError("cpt_pretrain is self-supervised; it takes no source data")
        by_target = _validate_split("target", target, labeled=False)
        by_source: dict[str, Example] = {}
        effective = replace(cfg, max_steps=2 * cfg.max_steps)
        cycles = _single_stream_cycles(tuple(by_target), cfg.seed, cfg.minibatch_size)
    else:
        by_source = _validate_split("source", source, labeled=True)
        if mode == "m2ds2":
            by_target = _validate_split("target", target, labeled=False)
            effective = cfg
            cycles = make_mixed_batches(tuple(by_source), tuple(by_target), cfg, cfg.seed)
        else:
            if target:
                raise DataError(f"mode {mode!r} takes no target data")
            by_target = {}
            effective = replace(cfg, target_per_cycle=0)
            cycles = make_mixed_batches(tuple(by_source), (), effective, cfg.seed)
    if dev:
        _validate_split("dev", dev, labeled=True)

    optimizer, names = make_optimizer(model, cfg)
    state = TrainState()
    if resume:
        if checkpoint_path is None:
            raise ConfigError("resume requires a checkpoint path")
        state = load_train_checkpoint(checkpoint_path, model, optimizer, names, cfg, mode)
        for _ in range(state.step):
            next(cycles)

    early_stopping = mode != "cpt_pretrain" and bool(dev)
    history: list[dict] = []
    log_file = open(log_path, "a" if resume else "w") if log_path is not None else None

    def emit(record: dict) -> None:
        history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()

    try:
        while state.step < effective.max_steps:
            cycle = next(cycles)
            lookup = {"source": by_source, "target": by_target}
            minibatches = [_build_minibatch(kind, ids, lookup[kind]) for kind, ids in cycle]
            try:
                record = train_step(
                    model, optimizer, minibatches, w, effective, state.step,
                    kappa=kappa, k_distractors=k_distractors,
                )
            except NumericError as exc:
                emit({"event": "abort", "step": state.step + 1, "error": str(exc)})
                raise
            state.step += 1
            emit(record)
            if early_stopping and state.step % effective.eval_every == 0:
                dev_loss = eval_ctc(model, dev, effective.minibatch_size)
                if not math.isfinite(dev_loss):
                    emit({"event": "abort", "step": state.step, "error": f"dev loss {dev_loss}"})
                    raise NumericError(f"non-finite dev loss {dev_loss} at step {state.step}")
                if dev_loss < state.best_loss:
                    state.best_loss = dev_loss
                    state.best_step = state.step
                    state.evals_since_improve = 0
                    state.best_params = model_arrays(model)
                else:
                    state.evals_since_improve += 1
                emit({"event": "eval", "step": state.step, "dev_ctc": dev_loss,
                      "best_step": state.best_step, "best_dev_ctc": state.best_loss,
                      "evals_since_improve": state.evals_since_improve})
                if checkpoint_path is not None:
                    write_train_checkpoint(
                        checkpoint_path, model, optimizer, names, state, cfg, mode
                    )
                if state.evals_since_improve >= effective.patience:
                    emit({"event": "early_stop", "step": state.step,
                          "best_step": state.best_step})
                    break
        if checkpoint_path is not None:
            write_train_checkpoint(checkpoint_path, model, optimizer, names, state, cfg, mode)
    finally:
        if log_file is not None:
            log_file.close()

    if state.best_params is None:
        state.best_params = model_arrays(model)
        state.best_step = state.step
    load_model_arrays(model, state.best_params)
    return FitResult(params=state.best_params, history=history, state=state)


# ---------------------------------------------------------------------------
# pseudo-labeling
# ---------------------------------------------------------------------------


def transcribe_greedy(
    model, examples: Sequence[Example], vocab, minibatch_size: int = 8
) -> list[tuple[str, str]]:
    """Best-path transcript for every utterance (empty decodes included).

    The model needs only a ``frame_log_probs(inputs, lengths)`` method.
    """
    from .decoder import greedy_decode  # local to keep stub models decoupled in tests

    out: list[tuple[str, str]] = []
    with torch.no_grad():
        for start in range(0, len(examples), minibatch_size):
            chunk = examples[start : start + minibatch_size]
            inputs, lengths = collate(chunk)
            log_probs, frame_lengths = model.frame_log_probs(inputs, lengths)
            for ex, row, n in zip(chunk, log_probs, frame_lengths):
                out.append((ex.utt_id, greedy_decode(row[:n].detach().cpu().numpy(), vocab)))
    return out


def psl_generate(model, examples: Sequence[Example], vocab, minibatch_size: int = 4) -> list[tuple[str, str]]:
    """Greedy silver transcripts for unlabeled audio; empty decodes are dropped."""
    return [
        (utt_id, text)
        for utt_id, text in transcribe_greedy(model, examples, vocab, minibatch_size)
        if text
    ]


def collect_code_indices(
    model: AcousticModel, examples: Sequence[Example], minibatch_size: int = 8
) -> np.ndarray:
    """Quantizer code choices over a dataset, one row per valid frame.

    Returns an int64 array of shape [n_frames_total, n_groups] suitable for
    codebook usage statistics.
    """
    if not examples:
        raise DataError("code index collection needs at least one example")
    rows: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(examples), minibatch_size):
            chunk = examples[start : start + minibatch_size]
            inputs, lengths = collate(chunk)
            indices, frame_lengths = model.quantizer_indices(inputs, lengths)
            for row, n in zip(indices, frame_lengths):
                rows.append(row[:n].detach().cpu().numpy().astype(np.int64))
    return np.concatenate(rows, axis=0)


def collect_code_vectors(
    model: AcousticModel, examples: Sequence[Example], minibatch_size: int = 8
) -> np.ndarray:
    """Quantized codeword vectors over a dataset, one row per valid frame.

    Group codewords selected for each frame are concatenated, giving a
    [n_frames_total, code_dim] float array for projection and export.
    """
    indices = torch.from_numpy(collect_code_indices(model, examples, minibatch_size))
    codebook = model.quantizer.codebook.detach()  # [G, V, group_dim]
    groups = [codebook[g][indices[:, g]] for g in range(codebook.shape[0])]
    return torch.cat(groups, dim=-1).cpu().numpy()

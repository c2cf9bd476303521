"""Synthetic two-domain recognition task for fast end-to-end validation.

Utterances are short word sequences over a small closed lexicon, rendered as
feature-frame sequences: every character (including the word delimiter) has a
fixed prototype vector, repeated for a few frames with additive noise. The
target domain renders the same kind of language through a fixed linear
distortion — per-dimension gains, a rotation, and an offset — so the two
domains form distinguishable signal families while sharing the label space.
A companion generator assembles long synthetic recordings with per-chunk
transcripts for exercising the alignment pipeline end to end.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .acoustic import EncoderConfig
from .decoder import Vocab
from .errors import ConfigError
from .objectives import LossWeights
from .seeding import derive_rng
from .trainer import Example, TrainConfig

SPLITS = ("source_train", "source_dev", "target_train", "target_dev", "target_test")


@dataclass(frozen=True)
class SyntheticConfig:
    """Shape and size of the generated two-domain corpus."""

    feature_dim: int = 12
    n_letters: int = 8
    n_words: int = 20
    min_word_len: int = 2
    max_word_len: int = 4
    min_words: int = 2
    max_words: int = 4
    min_char_frames: int = 2
    max_char_frames: int = 4
    noise_scale: float = 0.3
    rotation_strength: float = 0.3
    target_rank: int = 0  # 0 keeps full rank; r > 0 flattens target frames onto r dims
    target_lexicon_size: int = 0  # 0 uses the full lexicon; k > 0 narrows target texts to k words
    gain_low: float = 0.8
    gain_high: float = 1.25
    offset_scale: float = 0.5
    frame_rate: int = 50
    source_train: int = 200
    source_dev: int = 40
    target_train: int = 120
    target_dev: int = 100
    target_test: int = 40
    seed: int = 1234

    def __post_init__(self) -> None:
        if not 1 <= self.n_letters <= 26:
            raise ConfigError(f"n_letters must be in [1, 26], got {self.n_letters}")
        if self.min_word_len < 1 or self.max_word_len < self.min_word_len:
            raise ConfigError("word length bounds must satisfy 1 <= min <= max")
        if self.min_words < 1 or self.max_words < self.min_words:
            raise ConfigError("words-per-utterance bounds must satisfy 1 <= min <= max")
        if self.min_char_frames < 1 or self.max_char_frames < self.min_char_frames:
            raise ConfigError("frames-per-character bounds must satisfy 1 <= min <= max")
        if self.n_words < 2:
            raise ConfigError("need at least 2 lexicon words")
        if self.feature_dim < 2 or self.frame_rate <= 0:
            raise ConfigError("feature_dim must be >= 2 and frame_rate positive")
        if self.noise_scale < 0 or self.offset_scale < 0:
            raise ConfigError("noise and offset scales must be nonnegative")
        if not 0 <= self.rotation_strength <= 1:
            raise ConfigError(f"rotation_strength must be in [0, 1], got {self.rotation_strength}")
        if not 0 <= self.target_rank <= self.feature_dim:
            raise ConfigError(
                f"target_rank must be in [0, feature_dim], got {self.target_rank}"
            )
        if not 0 <= self.target_lexicon_size <= self.n_words:
            raise ConfigError(
                f"target_lexicon_size must be in [0, n_words], got {self.target_lexicon_size}"
            )
        if not 0 < self.gain_low <= self.gain_high:
            raise ConfigError("gains must satisfy 0 < low <= high")
        for name in SPLITS:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} count must be positive")


@dataclass(frozen=True)
class SynthUtterance:
    utt_id: str
    domain: str  # "source" or "target"
    text: str
    features: np.ndarray  # [T, feature_dim] float32

    def duration(self, frame_rate: int) -> float:
        return len(self.features) / frame_rate


@dataclass(frozen=True)
class SyntheticTask:
    cfg: SyntheticConfig
    lexicon: tuple[str, ...]
    splits: dict[str, tuple[SynthUtterance, ...]]

    def vocab(self) -> Vocab:
        return Vocab.from_texts([u.text for us in self.splits.values() for u in us])

    def examples(self, split: str, vocab: Vocab, labeled: bool = True) -> list[Example]:
        if split not in self.splits:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        out = []
        for u in self.splits[split]:
            labels = tuple(vocab.encode(u.text)) if labeled else None
            out.append(Example(u.utt_id, u.features, labels))
        return out


def _make_lexicon(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[str, ...]:
    letters = string.ascii_lowercase[: cfg.n_letters]
    words: list[str] = []
    seen = set()
    while len(words) < cfg.n_words:
        n = int(rng.integers(cfg.min_word_len, cfg.max_word_len + 1))
        word = "".join(letters[int(i)] for i in rng.integers(0, len(letters), size=n))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return tuple(words)


def _make_prototypes(cfg: SyntheticConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    chars = list(string.ascii_lowercase[: cfg.n_letters]) + ["|"]
    protos = {}
    for ch in chars:
        vec = rng.normal(size=cfg.feature_dim)
        protos[ch] = (vec / np.linalg.norm(vec) * math.sqrt(cfg.feature_dim)).astype(np.float64)
    return protos


@dataclass(frozen=True)
class _Distortion:
    rotation: np.ndarray  # [F, F] orthogonal
    gains: np.ndarray  # [F]
    offset: np.ndarray  # [F]
    projector: np.ndarray | None  # [F, F] rank-r orthogonal projector, or None

    def apply(self, feats: np.ndarray) -> np.ndarray:
        if self.projector is not None:
            feats = feats @ self.projector.T
        return feats @ self.rotation.T * self.gains + self.offset


def _make_distortion(cfg: SyntheticConfig, rng: np.random.Generator) -> _Distortion:
    square = rng.normal(size=(cfg.feature_dim, cfg.feature_dim))
    q, r = np.linalg.qr(square)
    q = q * np.sign(np.diag(r))  # unique orthogonal factor
    # blend toward the identity, then re-orthogonalize, so rotation_strength
    # moves the target domain smoothly from untouched to fully scrambled
    blend = (1.0 - cfg.rotation_strength) * np.eye(cfg.feature_dim) + cfg.rotation_strength * q
    q2, r2 = np.linalg.qr(blend)
    rotation = q2 * np.sign(np.diag(r2))
    gains = rng.uniform(cfg.gain_low, cfg.gain_high, size=cfg.feature_dim)
    offset = rng.normal(scale=cfg.offset_scale, size=cfg.feature_dim)
    projector = None
    if cfg.target_rank:
        # flattening every target frame onto a fixed low-dimensional subspace
        # makes the target family acoustically narrow relative to the source
        basis = np.linalg.qr(rng.normal(size=(cfg.feature_dim, cfg.target_rank)))[0]
        projector = basis @ basis.T
    return _Distortion(rotation, gains, offset, projector)


def sample_text(lexicon: Sequence[str], cfg: SyntheticConfig, rng: np.random.Generator) -> str:
    n = int(rng.integers(cfg.min_words, cfg.max_words + 1))
    return " ".join(lexicon[int(i)] for i in rng.integers(0, len(lexicon), size=n))


def render_features(
    text: str,
    prototypes: dict[str, np.ndarray],
    cfg: SyntheticConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Frame sequence for a transcript: per-character prototype runs plus noise."""
    frames: list[np.ndarray] = []
    for ch in text.replace(" ", "|"):
        proto = prototypes[ch]
        n = int(rng.integers(cfg.min_char_frames, cfg.max_char_frames + 1))
        block = proto[None, :] + rng.normal(scale=cfg.noise_scale, size=(n, cfg.feature_dim))
        frames.append(block)
    return np.concatenate(frames, axis=0).astype(np.float32)


def build_task(cfg: SyntheticConfig | None = None) -> SyntheticTask:
    """Generate the full two-domain corpus deterministically from cfg.seed."""
    cfg = cfg or SyntheticConfig()
    lexicon = _make_lexicon(cfg, derive_rng(cfg.seed, "synthetic", "lexicon"))
    prototypes = _make_prototypes(cfg, derive_rng(cfg.seed, "synthetic", "prototypes"))
    distortion = _make_distortion(cfg, derive_rng(cfg.seed, "synthetic", "distortion"))
    # a narrow target domain speaks only the first k lexicon words
    target_words = lexicon[: cfg.target_lexicon_size] if cfg.target_lexicon_size else lexicon
    splits: dict[str, tuple[SynthUtterance, ...]] = {}
    for split in SPLITS:
        domain = split.split("_")[0]
        rng = derive_rng(cfg.seed, "synthetic", split)
        utts = []
        for i in range(getattr(cfg, split)):
            text = sample_text(target_words if domain == "target" else lexicon, cfg, rng)
            feats = render_features(text, prototypes, cfg, rng)
            if domain == "target":
                feats = distortion.apply(feats.astype(np.float64)).astype(np.float32)
            utts.append(SynthUtterance(f"{split}-{i:04d}", domain, text, feats))
        splits[split] = tuple(utts)
    return SyntheticTask(cfg, lexicon, splits)


# ---------------------------------------------------------------------------
# reference training recipe for the bundled task
# ---------------------------------------------------------------------------


# mixing weights for the joint objective on this task: the contrastive term is
# a per-step mean while the recognition term sums over frames, so weights of
# this size bring the two terms to the same order of magnitude
RECIPE_WEIGHTS = LossWeights(alpha=1.0, beta=2.0, diversity_weight=0.1)


def recipe_encoder_config(vocab_size: int, cfg: SyntheticConfig | None = None) -> EncoderConfig:
    """Small encoder sized for the bundled task."""
    cfg = cfg or SyntheticConfig()
    return EncoderConfig(
        vocab_size=vocab_size,
        feature_mode="features",
        feature_dim=cfg.feature_dim,
        model_dim=32,
        n_layers=2,
        n_heads=2,
        ffn_dim=64,
        max_positions=128,
        n_groups=2,
        codebook_size=16,
        code_dim=16,
        mask_prob=0.5,
        mask_span=3,
    )


def recipe_train_config(seed: int, max_steps: int = 1500) -> TrainConfig:
    """Training schedule that reaches useful accuracy on the bundled task."""
    return TrainConfig(
        peak_lr=2e-3,
        max_steps=max_steps,
        warmup_fraction=0.1,
        eval_every=max_steps,
        patience=1000,
        source_per_cycle=4,
        target_per_cycle=8,
        minibatch_size=4,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# long recordings for the alignment pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentCase:
    """A scripted long recording with known per-chunk transcripts.

    documents: reference texts, one per topic; the recording reads them in
    order. chunk_hypotheses: decoder output for each fixed-length chunk
    (optionally corrupted by word substitutions). planted: the true
    (start, end, text) for every chunk, against which recovery is judged.
    """

    documents: tuple[str, ...]
    duration: float
    chunk_seconds: float
    chunk_hypotheses: tuple[str, ...]
    planted: tuple[tuple[float, float, str], ...]


def build_alignment_case(
    lexicon: Sequence[str],
    seed: int,
    n_docs: int = 3,
    words_per_doc: int = 750,
    words_per_chunk: int = 75,
    substitution_rate: float = 0.0,
    chunk_seconds: float = 30.0,
) -> AlignmentCase:
    """Assemble a synthetic recording read from topic-specific documents.

    Each document draws from its own slice of the lexicon so term weighting
    can identify it. Words are spoken at a constant rate chosen so that every
    chunk holds exactly words_per_chunk words and chunks align with document
    boundaries (words_per_doc must be a multiple of words_per_chunk).
    """
    if n_docs < 1 or words_per_doc < 1 or words_per_chunk < 1:
        raise ConfigError("document and chunk sizes must be positive")
    if words_per_doc % words_per_chunk:
        raise ConfigError("words_per_doc must be a multiple of words_per_chunk")
    if not 0 <= substitution_rate < 1:
        raise ConfigError(f"substitution_rate must be in [0, 1), got {substitution_rate}")
    if len(lexicon) < 2 * n_docs:
        raise ConfigError(f"need at least {2 * n_docs} lexicon words for {n_docs} documents")
    rng = derive_rng(seed, "alignment-case")
    share = len(lexicon) // n_docs
    documents = []
    spoken: list[str] = []
    for d in range(n_docs):
        pool = list(lexicon[d * share : (d + 1) * share])
        words = [pool[int(i)] for i in rng.integers(0, len(pool), size=words_per_doc)]
        documents.append(" ".join(words))
        spoken.extend(words)

    word_dur = chunk_seconds / words_per_chunk
    duration = len(spoken) * word_dur
    hypotheses = []
    planted = []
    others = list(lexicon)
    for start in range(0, len(spoken), words_per_chunk):
        chunk_words = spoken[start : start + words_per_chunk]
        noisy = list(chunk_words)
        for i in range(len(noisy)):
            if substitution_rate and rng.random() < substitution_rate:
                choices = [w for w in others if w != noisy[i]]
                noisy[i] = choices[int(rng.integers(0, len(choices)))]
        hypotheses.append(" ".join(noisy))
        planted.append(
            (start * word_dur, (start + len(chunk_words)) * word_dur, " ".join(chunk_words))
        )
    return AlignmentCase(
        documents=tuple(documents),
        duration=duration,
        chunk_seconds=chunk_seconds,
        chunk_hypotheses=tuple(hypotheses),
        planted=tuple(planted),
    )

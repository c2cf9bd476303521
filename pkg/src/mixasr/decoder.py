"""CTC decoding: greedy collapse and prefix beam search with n-gram fusion.

The beam decoder maintains per-prefix blank/non-blank probabilities in log
space, merging alignments that collapse to the same character prefix. A
word-level language model is fused into the beam: each completed word (on
emission of the word delimiter) adds lm_weight times its conditional log
probability, and sequence end adds the final partial word plus the
end-of-sentence event. A constant word bonus counters the LM's length
penalty. All scores combine as

    combined = acoustic + lm_weight * lm + word_bonus * n_words

with acoustic and lm in natural log units (the n-gram model's log10 scores
are converted).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import ngram
from .corpus import normalize_text
from .errors import ConfigError, DataError

LN10 = math.log(10.0)
NEG_INF = float("-inf")

BLANK_TOKEN = "<blank>"
DELIMITER = "|"
UNKNOWN_CHAR = "?"


@dataclass(frozen=True)
class Vocab:
    """Character inventory: blank at index 0, word delimiter, unknown, letters."""

    chars: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.chars) < 3:
            raise ConfigError("vocabulary needs blank, delimiter, and unknown entries")
        if self.chars[0] != BLANK_TOKEN:
            raise ConfigError(f"chars[0] must be {BLANK_TOKEN!r}")
        if DELIMITER not in self.chars or UNKNOWN_CHAR not in self.chars:
            raise ConfigError("vocabulary must contain the delimiter and unknown characters")
        if len(set(self.chars)) != len(self.chars):
            raise ConfigError("duplicate vocabulary entries")

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Vocab":
        letters: set[str] = set()
        for text in texts:
            for ch in normalize_text(text):
                if ch != " ":
                    letters.add(ch)
        letters.discard(UNKNOWN_CHAR)
        return cls((BLANK_TOKEN, DELIMITER, UNKNOWN_CHAR) + tuple(sorted(letters)))

    @property
    def size(self) -> int:
        return len(self.chars)

    @property
    def blank_id(self) -> int:
        return 0

    @property
    def delimiter_id(self) -> int:
        return self.chars.index(DELIMITER)

    @property
    def unknown_id(self) -> int:
        return self.chars.index(UNKNOWN_CHAR)

    def encode(self, text: str) -> list[int]:
        """Character ids for a transcript; spaces become the word delimiter."""
        lookup = {c: i for i, c in enumerate(self.chars)}
        ids = []
        for ch in " ".join(text.split()):
            if ch == " ":
                ids.append(self.delimiter_id)
            else:
                ids.append(lookup.get(ch, self.unknown_id))
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        """Text from character ids: blanks dropped, delimiters become spaces."""
        pieces = []
        for i in ids:
            if i == self.blank_id:
                continue
            if not 0 <= i < len(self.chars):
                raise DataError(f"character id {i} outside vocabulary of {len(self.chars)}")
            pieces.append(" " if i == self.delimiter_id else self.chars[i])
        return " ".join("".join(pieces).split())

    def to_dict(self) -> dict:
        return {"chars": list(self.chars)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Vocab":
        return cls(tuple(data["chars"]))


@dataclass(frozen=True)
class DecodeConfig:
    vocab: Vocab
    beam_width: int = 13
    lm_weight: float = 0.5
    word_bonus: float = 0.0

    def __post_init__(self) -> None:
        if self.beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")
        if not math.isfinite(self.lm_weight) or not math.isfinite(self.word_bonus):
            raise ConfigError("lm_weight and word_bonus must be finite")


@dataclass(frozen=True)
class Hypothesis:
    text: str
    acoustic: float  # natural-log marginal over all matching alignments
    lm: float  # natural-log LM score (0 without an LM)
    combined: float
    n_words: int
    underflow: bool = False


# ---------------------------------------------------------------------------
# greedy
# ---------------------------------------------------------------------------


def greedy_decode(log_probs: np.ndarray, vocab: Vocab) -> str:
    """Frame argmax, collapse repeats, drop blanks, map delimiters to spaces."""
    lp = np.asarray(log_probs)
    if lp.ndim != 2 or lp.shape[1] != vocab.size:
        raise DataError(f"expected [T, {vocab.size}] log probabilities, got {lp.shape}")
    best = lp.argmax(axis=1)
    collapsed = [int(c) for i, c in enumerate(best) if i == 0 or c != best[i - 1]]
    return vocab.decode(collapsed)


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------


@dataclass
class _LmState:
    """Incremental LM bookkeeping for one prefix."""

    logp10: float = 0.0  # completed-word LM mass, log10
    n_words: int = 0
    history: tuple[str, ...] = ()
    partial: str = ""


def _advance_lm(state: _LmState, char: str, delimiter: bool, lm: ngram.NGramModel | None) -> _LmState:
    if not delimiter:
        return replace(state, partial=state.partial + char)
    if not state.partial:
        return state  # delimiter with no pending word
    logp10, history = state.logp10, state.history
    if lm is not None:
        word_lp, history = ngram.advance(lm, history, state.partial)
        logp10 += word_lp
    return _LmState(logp10, state.n_words + 1, history, "")


def _final_lm(state: _LmState, lm: ngram.NGramModel | None) -> tuple[float, int]:
    """Total natural-log LM score and word count including the partial word."""
    logp10, history, n_words = state.logp10, state.history, state.n_words
    if state.partial:
        n_words += 1
        if lm is not None:
            word_lp, history = ngram.advance(lm, history, state.partial)
            logp10 += word_lp
    if lm is not None:
        logp10 += ngram.finish(lm, history)
    return logp10 * LN10, n_words


def _search(
    lp: np.ndarray,
    cfg: DecodeConfig,
    lm: ngram.NGramModel | None,
) -> tuple[dict[tuple[int, ...], list[float]], dict[tuple[int, ...], "_LmState"]]:
    """Run the pruned forward pass; return final per-prefix masses and LM states.

    Each surviving prefix carries four log quantities: summed blank/non-blank
    masses (exact merged probabilities, kept normalized) and the best single
    alignment ending in blank/non-blank. Pruning ranks prefixes by best
    alignment plus the fused LM score of completed words plus the word bonus —
    so the language model steers the search, and the degenerate width-1 beam
    follows exactly the frame-argmax path whenever argmaxes are unique.
    """
    vocab = cfg.vocab
    blank = vocab.blank_id
    delim = vocab.delimiter_id
    init_state = _LmState(history=ngram.start_state(lm) if lm is not None else ())
    # prefix -> [sum ending-blank, sum ending-char, best ending-blank, best ending-char]
    beams: dict[tuple[int, ...], list[float]] = {(): [0.0, NEG_INF, 0.0, NEG_INF]}
    lm_states: dict[tuple[int, ...], _LmState] = {(): init_state}

    for t in range(lp.shape[0]):
        frame = lp[t]
        new_beams: dict[tuple[int, ...], list[float]] = {}
        new_states: dict[tuple[int, ...], _LmState] = {}

        def bucket(prefix: tuple[int, ...], parent: tuple[int, ...]) -> list[float]:
            if prefix not in new_beams:
                new_beams[prefix] = [NEG_INF, NEG_INF, NEG_INF, NEG_INF]
                if prefix in lm_states:
                    new_states[prefix] = lm_states[prefix]
                elif prefix not in new_states:
                    char = prefix[-1]
                    new_states[prefix] = _advance_lm(
                        lm_states[parent], vocab.chars[char], char == delim, lm
                    )
            return new_beams[prefix]

        def add(
            prefix: tuple[int, ...], parent: tuple[int, ...], idx: int,
            mass: float, best: float,
        ) -> None:
            if mass == NEG_INF:
                return
            slot = bucket(prefix, parent)
            slot[idx] = np.logaddexp(slot[idx], mass)
            slot[idx + 2] = max(slot[idx + 2], best)

        for prefix, (p_blank, p_char, b_blank, b_char) in beams.items():
            p_total = np.logaddexp(p_blank, p_char)
            b_total = max(b_blank, b_char)
            for c in range(vocab.size):
                p = frame[c]
                if p == NEG_INF:
                    continue
                if c == blank:
                    add(prefix, prefix, 0, p_total + p, b_total + p)
                elif prefix and c == prefix[-1]:
                    # same char again: continuing the run keeps the prefix,
                    # re-emission after a blank starts a new symbol
                    add(prefix, prefix, 1, p_char + p, b_char + p)
                    add(prefix + (c,), prefix, 1, p_blank + p, b_blank + p)
                else:
                    add(prefix + (c,), prefix, 1, p_total + p, b_total + p)

        def running_score(prefix: tuple[int, ...]) -> float:
            slot = new_beams[prefix]
            state = new_states[prefix]
            return (
                max(slot[2], slot[3])
                + cfg.lm_weight * state.logp10 * LN10
                + cfg.word_bonus * state.n_words
            )

        kept = sorted(new_beams, key=running_score, reverse=True)[: cfg.beam_width]
        beams = {p: new_beams[p] for p in kept}
        lm_states = {p: new_states[p] for p in kept}
    return beams, lm_states


def beam_decode(
    log_probs: np.ndarray,
    cfg: DecodeConfig,
    lm: ngram.NGramModel | None = None,
) -> Hypothesis:
    """Prefix beam search over collapsed character sequences.

    Surviving prefixes are rescored with their exact alignment marginals
    (pruning only truncates the search, never the reported score), and the
    greedy transcript always competes as a candidate, so the returned
    hypothesis never scores below greedy under the same combination.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    vocab = cfg.vocab
    if lp.ndim != 2 or lp.shape[1] != vocab.size:
        raise DataError(f"expected [T, {vocab.size}] log probabilities, got {lp.shape}")
    beams, lm_states = _search(lp, cfg, lm)

    best: Hypothesis | None = None
    for prefix in beams:
        acoustic = _alignment_marginal(lp, list(prefix), vocab.blank_id)
        lm_ln, n_words = _final_lm(lm_states[prefix], lm)
        combined = acoustic + cfg.lm_weight * lm_ln + cfg.word_bonus * n_words
        hyp = Hypothesis(vocab.decode(prefix), acoustic, lm_ln, combined, n_words)
        if best is None or hyp.combined > best.combined:
            best = hyp
    fallback = score_hypothesis(lp, greedy_decode(lp, vocab), cfg, lm)
    if best is None or fallback.combined > best.combined:
        best = fallback
    if best.combined == NEG_INF:
        return Hypothesis("", NEG_INF, 0.0, NEG_INF, 0, underflow=True)
    return best


# ---------------------------------------------------------------------------
# exact rescoring of a fixed transcript
# ---------------------------------------------------------------------------


def score_hypothesis(
    log_probs: np.ndarray,
    text: str,
    cfg: DecodeConfig,
    lm: ngram.NGramModel | None = None,
) -> Hypothesis:
    """Combined score of a fixed transcript under the same model combination.

    The acoustic term is the exact marginal over all frame alignments that
    collapse to the transcript (forward recursion); infeasible transcripts
    get probability zero.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    vocab = cfg.vocab
    if lp.ndim != 2 or lp.shape[1] != vocab.size:
        raise DataError(f"expected [T, {vocab.size}] log probabilities, got {lp.shape}")
    labels = vocab.encode(text)
    acoustic = _alignment_marginal(lp, labels, vocab.blank_id)
    words = text.split()
    lm_ln = 0.0
    if lm is not None:
        lm_ln = ngram.score(lm, words) * LN10
    combined = acoustic + cfg.lm_weight * lm_ln + cfg.word_bonus * len(words)
    return Hypothesis(" ".join(words), acoustic, lm_ln, combined, len(words),
                      underflow=acoustic == NEG_INF)


def _alignment_marginal(lp: np.ndarray, labels: Sequence[int], blank: int) -> float:
    """log P(labels | frames): forward recursion over the blank-interleaved lattice."""
    t_len = lp.shape[0]
    if t_len == 0:
        return 0.0 if not labels else NEG_INF
    states = [blank] * (2 * len(labels) + 1)
    states[1::2] = list(labels)
    s = len(states)
    alpha = np.full(s, NEG_INF)
    alpha[0] = lp[0, states[0]]
    if s > 1:
        alpha[1] = lp[0, states[1]]
    for t in range(1, t_len):
        prev = alpha
        alpha = np.full(s, NEG_INF)
        for k in range(s):
            acc = prev[k]
            if k >= 1:
                acc = np.logaddexp(acc, prev[k - 1])
            if k >= 2 and states[k] != blank and states[k] != states[k - 2]:
                acc = np.logaddexp(acc, prev[k - 2])
            alpha[k] = acc + lp[t, states[k]]
    tail = alpha[-1] if s == 1 else np.logaddexp(alpha[-1], alpha[-2])
    return float(tail)

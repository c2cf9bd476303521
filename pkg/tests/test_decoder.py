"""Tests for CTC greedy decoding and prefix beam search with n-gram fusion."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from mixasr import ngram
from mixasr.decoder import (
    BLANK_TOKEN,
    DELIMITER,
    LN10,
    UNKNOWN_CHAR,
    DecodeConfig,
    Hypothesis,
    Vocab,
    beam_decode,
    greedy_decode,
    score_hypothesis,
)
from mixasr.errors import ConfigError, DataError

AB_VOCAB = Vocab((BLANK_TOKEN, DELIMITER, UNKNOWN_CHAR, "a", "b"))


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x - np.log(np.exp(x - x.max(axis=-1, keepdims=True)).sum(axis=-1, keepdims=True)) - x.max(
        axis=-1, keepdims=True
    )


def random_frames(rng: np.random.Generator, t: int, v: int, scale: float = 1.0) -> np.ndarray:
    return log_softmax(rng.normal(scale=scale, size=(t, v)))


def frames_for_ids(ids: list[int], vocab: Vocab, peak: float = 0.99) -> np.ndarray:
    """Near-one-hot frame distributions whose argmax path is `ids`."""
    rest = (1.0 - peak) / (vocab.size - 1)
    lp = np.full((len(ids), vocab.size), math.log(rest))
    for t, c in enumerate(ids):
        lp[t, c] = math.log(peak)
    return lp


def tiny_lm(order: int = 2) -> ngram.NGramModel:
    lines = ["a b a", "b a", "a a b", "b b a", "a", "b a b a"]
    return ngram.estimate(ngram.count_ngrams(lines, order=order))


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def test_vocab_from_texts_sorted_letters_after_reserved():
    v = Vocab.from_texts(["The cab!", "bad Ace?"])
    assert v.chars[:3] == (BLANK_TOKEN, DELIMITER, UNKNOWN_CHAR)
    assert v.chars[3:] == ("a", "b", "c", "d", "e", "h", "t")


def test_vocab_encode_decode_round_trip():
    v = Vocab.from_texts(["abc de"])
    ids = v.encode("ab  cd e")
    assert v.decode(ids) == "ab cd e"
    assert v.delimiter_id in ids


def test_vocab_encode_unknown_character():
    v = Vocab.from_texts(["ab"])
    ids = v.encode("axb")
    assert ids[1] == v.unknown_id
    assert v.decode(ids) == "a" + UNKNOWN_CHAR + "b"


def test_vocab_decode_skips_blanks_and_collapses_spaces():
    v = AB_VOCAB
    assert v.decode([0, 1, 3, 0, 1, 1, 4, 0]) == "a b"


def test_vocab_rejects_bad_layouts():
    with pytest.raises(ConfigError):
        Vocab(("x", DELIMITER, UNKNOWN_CHAR))
    with pytest.raises(ConfigError):
        Vocab((BLANK_TOKEN, DELIMITER, UNKNOWN_CHAR, "a", "a"))
    with pytest.raises(ConfigError):
        Vocab((BLANK_TOKEN, "a", "b"))


def test_vocab_dict_round_trip():
    v = Vocab.from_texts(["hello world"])
    assert Vocab.from_dict(v.to_dict()) == v


def test_decode_config_validation():
    with pytest.raises(ConfigError):
        DecodeConfig(AB_VOCAB, beam_width=0)
    with pytest.raises(ConfigError):
        DecodeConfig(AB_VOCAB, lm_weight=float("nan"))
    cfg = DecodeConfig(AB_VOCAB)
    assert cfg.beam_width == 13 and cfg.lm_weight == 0.5 and cfg.word_bonus == 0.0


# ---------------------------------------------------------------------------
# greedy decoding
# ---------------------------------------------------------------------------


def test_greedy_collapses_repeats_then_drops_blanks():
    v = AB_VOCAB
    a, b, blank = 3, 4, 0
    assert greedy_decode(frames_for_ids([a, a, blank, b], v), v) == "ab"


def test_greedy_all_blank_is_empty():
    v = AB_VOCAB
    assert greedy_decode(frames_for_ids([0, 0, 0], v), v) == ""


def test_greedy_blank_separates_repeats():
    v = AB_VOCAB
    a = 3
    assert greedy_decode(frames_for_ids([a, 0, a], v), v) == "aa"


def test_greedy_delimiter_becomes_space():
    v = AB_VOCAB
    assert greedy_decode(frames_for_ids([3, 1, 4], v), v) == "a b"


def test_greedy_rejects_wrong_width():
    with pytest.raises(DataError):
        greedy_decode(np.zeros((3, 2)), AB_VOCAB)


# ---------------------------------------------------------------------------
# enumeration oracle
# ---------------------------------------------------------------------------


def collapse(path: tuple[int, ...], blank: int) -> tuple[int, ...]:
    deduped = [c for i, c in enumerate(path) if i == 0 or c != path[i - 1]]
    return tuple(c for c in deduped if c != blank)


def enumerate_strings(lp: np.ndarray, vocab: Vocab) -> dict[tuple[int, ...], float]:
    """Exact acoustic marginal of every collapsed string, by brute force."""
    t, v = lp.shape
    masses: dict[tuple[int, ...], float] = {}
    for path in itertools.product(range(v), repeat=t):
        logp = sum(lp[i, c] for i, c in enumerate(path))
        key = collapse(path, vocab.blank_id)
        masses[key] = np.logaddexp(masses.get(key, -np.inf), logp)
    return masses


def oracle_best(
    lp: np.ndarray, cfg: DecodeConfig, lm: ngram.NGramModel | None
) -> tuple[str, float]:
    best_text, best_combined = "", -np.inf
    for key, acoustic in enumerate_strings(lp, cfg.vocab).items():
        text = cfg.vocab.decode(key)
        words = text.split()
        lm_ln = ngram.score(lm, words) * LN10 if lm is not None else 0.0
        combined = acoustic + cfg.lm_weight * lm_ln + cfg.word_bonus * len(words)
        if combined > best_combined:
            best_text, best_combined = text, combined
    return best_text, best_combined


@pytest.mark.parametrize("t", [1, 2, 3, 4])
def test_beam_matches_enumeration_without_lm(t):
    rng = np.random.default_rng(52 + t)
    cfg = DecodeConfig(AB_VOCAB, beam_width=4096, lm_weight=0.0, word_bonus=0.0)
    for _ in range(20):
        lp = random_frames(rng, t, AB_VOCAB.size, scale=1.5)
        want_text, want_score = oracle_best(lp, cfg, None)
        got = beam_decode(lp, cfg)
        assert got.text == want_text
        assert got.combined == pytest.approx(want_score, rel=1e-9)
        assert got.lm == 0.0


@pytest.mark.parametrize("t", [2, 3, 4])
def test_beam_matches_enumeration_with_lm_fusion(t):
    rng = np.random.default_rng(90 + t)
    lm = tiny_lm()
    cfg = DecodeConfig(AB_VOCAB, beam_width=4096, lm_weight=0.7, word_bonus=0.3)
    for _ in range(15):
        lp = random_frames(rng, t, AB_VOCAB.size, scale=1.5)
        want_text, want_score = oracle_best(lp, cfg, lm)
        got = beam_decode(lp, cfg, lm)
        assert got.text == want_text
        assert got.combined == pytest.approx(want_score, rel=1e-9)


def test_beam_width_four_equals_exhaustive_on_three_frames():
    rng = np.random.default_rng(6)
    lm = tiny_lm()
    cfg = DecodeConfig(AB_VOCAB, beam_width=4, lm_weight=0.5, word_bonus=0.1)
    lp = random_frames(rng, 3, AB_VOCAB.size, scale=1.0)
    want_text, want_score = oracle_best(lp, cfg, lm)
    got = beam_decode(lp, cfg, lm)
    assert got.text == want_text
    assert got.combined == pytest.approx(want_score, rel=1e-9)


def test_prefix_merging_reproduces_full_distribution():
    from mixasr.decoder import _search

    rng = np.random.default_rng(11)
    v = AB_VOCAB
    for t in (2, 3, 4):
        lp = random_frames(rng, t, v.size)
        masses = enumerate_strings(lp, v)
        total = np.logaddexp.reduce(sorted(masses.values()))
        assert total == pytest.approx(0.0, abs=1e-9)
        cfg = DecodeConfig(v, beam_width=100000, lm_weight=0.0)
        beams, _ = _search(lp, cfg, None)
        assert set(beams) == set(masses)
        for key, want in masses.items():
            p_blank, p_char, best_blank, best_char = beams[key]
            merged = np.logaddexp(p_blank, p_char)
            assert merged == pytest.approx(want, rel=1e-9)
            # a prefix's best single alignment can never exceed its total mass
            assert max(best_blank, best_char) <= merged + 1e-12


def test_hypothesis_combined_invariant():
    rng = np.random.default_rng(3)
    lm = tiny_lm()
    cfg = DecodeConfig(AB_VOCAB, beam_width=8, lm_weight=0.4, word_bonus=0.25)
    for _ in range(10):
        lp = random_frames(rng, 5, AB_VOCAB.size)
        hyp = beam_decode(lp, cfg, lm)
        assert hyp.combined == pytest.approx(
            hyp.acoustic + cfg.lm_weight * hyp.lm + cfg.word_bonus * hyp.n_words, rel=1e-12
        )
        assert hyp.n_words == len(hyp.text.split())


# ---------------------------------------------------------------------------
# relations between decoders
# ---------------------------------------------------------------------------


def test_width_one_equals_greedy_on_random_inputs():
    rng = np.random.default_rng(21)
    v = AB_VOCAB
    cfg = DecodeConfig(v, beam_width=1, lm_weight=0.0)
    for t in (1, 3, 6, 9):
        for _ in range(25):
            lp = random_frames(rng, t, v.size, scale=1.5)
            assert np.all(  # argmax uniqueness holds almost surely; verify anyway
                (lp.max(axis=1, keepdims=True) == lp).sum(axis=1) == 1
            )
            assert beam_decode(lp, cfg).text == greedy_decode(lp, v)


def test_width_one_equals_greedy_on_peaked_inputs():
    rng = np.random.default_rng(22)
    v = AB_VOCAB
    cfg = DecodeConfig(v, beam_width=1, lm_weight=0.0)
    for _ in range(30):
        ids = rng.integers(0, v.size, size=6).tolist()
        lp = frames_for_ids(ids, v, peak=0.97)
        assert beam_decode(lp, cfg).text == greedy_decode(lp, v)


def test_beam_dominates_greedy():
    rng = np.random.default_rng(33)
    lm = tiny_lm()
    cfg = DecodeConfig(AB_VOCAB, beam_width=13, lm_weight=0.5, word_bonus=0.1)
    for _ in range(20):
        lp = random_frames(rng, 7, AB_VOCAB.size, scale=1.2)
        greedy_text = greedy_decode(lp, AB_VOCAB)
        greedy_scored = score_hypothesis(lp, greedy_text, cfg, lm)
        assert beam_decode(lp, cfg, lm).combined >= greedy_scored.combined - 1e-9


def test_wider_beams_never_score_worse():
    rng = np.random.default_rng(44)
    lm = tiny_lm()
    for _ in range(10):
        lp = random_frames(rng, 6, AB_VOCAB.size, scale=1.2)
        scores = []
        for width in (1, 2, 4, 8, 32):
            cfg = DecodeConfig(AB_VOCAB, beam_width=width, lm_weight=0.5, word_bonus=0.1)
            scores.append(beam_decode(lp, cfg, lm).combined)
        assert all(a <= b + 1e-9 for a, b in zip(scores, scores[1:]))


def test_zero_lm_weight_matches_acoustic_only_ranking():
    rng = np.random.default_rng(55)
    lm = tiny_lm()
    cfg = DecodeConfig(AB_VOCAB, beam_width=8, lm_weight=0.0, word_bonus=0.0)
    for _ in range(10):
        lp = random_frames(rng, 5, AB_VOCAB.size)
        with_lm = beam_decode(lp, cfg, lm)
        without = beam_decode(lp, cfg)
        assert with_lm.text == without.text
        assert with_lm.acoustic == pytest.approx(without.acoustic, rel=1e-12)
        assert with_lm.combined == pytest.approx(without.combined, rel=1e-12)


# ---------------------------------------------------------------------------
# fixed-transcript scoring
# ---------------------------------------------------------------------------


def test_score_hypothesis_matches_enumeration():
    rng = np.random.default_rng(66)
    lm = tiny_lm()
    cfg = DecodeConfig(AB_VOCAB, beam_width=4, lm_weight=0.6, word_bonus=0.2)
    lp = random_frames(rng, 4, AB_VOCAB.size)
    masses = enumerate_strings(lp, AB_VOCAB)
    for text in ("", "a", "b a", "ab", "aa"):
        key = tuple(AB_VOCAB.encode(text))
        hyp = score_hypothesis(lp, text, cfg, lm)
        assert hyp.acoustic == pytest.approx(masses[key], rel=1e-9)
        words = text.split()
        assert hyp.lm == pytest.approx(ngram.score(lm, words) * LN10, rel=1e-12)
        assert hyp.n_words == len(words)


def test_score_hypothesis_infeasible_transcript_underflows():
    lp = np.log(np.full((2, AB_VOCAB.size), 1.0 / AB_VOCAB.size))
    hyp = score_hypothesis(lp, "aa", DecodeConfig(AB_VOCAB, lm_weight=0.0))
    assert hyp.acoustic == -np.inf and hyp.underflow


def test_score_hypothesis_empty_frames():
    lp = np.zeros((0, AB_VOCAB.size))
    cfg = DecodeConfig(AB_VOCAB, lm_weight=0.0)
    assert score_hypothesis(lp, "", cfg).acoustic == 0.0
    assert score_hypothesis(lp, "a", cfg).underflow


# ---------------------------------------------------------------------------
# edge cases
# ---------------------------------------------------------------------------


def test_beam_underflow_returns_flagged_empty_hypothesis():
    lp = np.full((3, AB_VOCAB.size), -np.inf)
    hyp = beam_decode(lp, DecodeConfig(AB_VOCAB))
    assert hyp == Hypothesis("", -np.inf, 0.0, -np.inf, 0, underflow=True)


def test_beam_rejects_wrong_width():
    with pytest.raises(DataError):
        beam_decode(np.zeros((3, 2)), DecodeConfig(AB_VOCAB))


def test_beam_handles_consecutive_delimiters():
    v = AB_VOCAB
    ids = [3, 1, 0, 1, 4]  # a | blank | b  → two delimiter emissions
    lp = frames_for_ids(ids, v, peak=0.995)
    lm = tiny_lm()
    cfg = DecodeConfig(v, beam_width=16, lm_weight=0.5)
    hyp = beam_decode(lp, cfg, lm)
    assert hyp.text == "a b"
    assert hyp.n_words == 2
    assert hyp.lm == pytest.approx(ngram.score(lm, ["a", "b"]) * LN10, rel=1e-9)


def test_beam_oov_words_score_through_unknown_class():
    v = Vocab((BLANK_TOKEN, DELIMITER, UNKNOWN_CHAR, "a", "b", "z"))
    lm = tiny_lm()  # trained on a/b words only
    lp = frames_for_ids([5, 5, 0, 5], v, peak=0.995)  # "zz z" style unseen words
    hyp = beam_decode(lp, DecodeConfig(v, beam_width=8, lm_weight=0.5), lm)
    assert math.isfinite(hyp.combined)
    assert hyp.lm == pytest.approx(ngram.score(lm, hyp.text.split()) * LN10, rel=1e-9)

"""Tests for WER pooling, edit-count canonicalization, RAI, and PCA projection."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import pytest

from mixasr.errors import DataError
from mixasr.metrics import EvalResult, edit_counts, project_codes, rai, wer

# ---------------------------------------------------------------- edit counts


def test_identical_sequences():
    assert edit_counts("a b c".split(), "a b c".split()) == (0, 0, 0, 3)


def test_single_substitution():
    assert edit_counts("a b c".split(), "a x c".split()) == (1, 0, 0, 2)


def test_single_insertion_and_deletion():
    assert edit_counts("a b".split(), "a x b".split()) == (0, 1, 0, 2)
    assert edit_counts("a x b".split(), "a b".split()) == (0, 0, 1, 2)


def test_empty_hypothesis_all_deletions():
    assert edit_counts("a b c".split(), []) == (0, 0, 3, 0)


def test_empty_reference_all_insertions():
    assert edit_counts([], "a b".split()) == (0, 2, 0, 0)


def test_fewest_substitutions_canonicalization():
    # "a b" vs "b a": either two substitutions or delete+match+insert; both
    # cost 2, and the canonical decomposition takes the fewer-substitution one.
    assert edit_counts("a b".split(), "b a".split()) == (0, 1, 1, 1)


def _oracle_counts(ref: tuple[str, ...], hyp: tuple[str, ...]) -> tuple[int, int, int, int]:
    """Exhaustive alignment search minimizing (cost, substitutions)."""

    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> tuple[int, int]:
        if i == len(ref) and j == len(hyp):
            return (0, 0)
        cands = []
        if i < len(ref) and j < len(hyp):
            c, s = go(i + 1, j + 1)
            bump = 0 if ref[i] == hyp[j] else 1
            cands.append((c + bump, s + bump))
        if i < len(ref):
            c, s = go(i + 1, j)
            cands.append((c + 1, s))
        if j < len(hyp):
            c, s = go(i, j + 1)
            cands.append((c + 1, s))
        return min(cands)

    cost, subs = go(0, 0)
    ins = (cost - subs + (len(hyp) - len(ref))) // 2
    dels = (cost - subs - (len(hyp) - len(ref))) // 2
    return subs, ins, dels, len(ref) - subs - dels


def test_edit_counts_match_exhaustive_oracle():
    rng = np.random.default_rng(77)
    alphabet = ["a", "b", "c"]
    for _ in range(200):
        ref = tuple(rng.choice(alphabet, size=int(rng.integers(0, 6))))
        hyp = tuple(rng.choice(alphabet, size=int(rng.integers(0, 6))))
        assert edit_counts(ref, hyp) == _oracle_counts(ref, hyp)


def test_edit_counts_transpose_symmetry():
    rng = np.random.default_rng(88)
    alphabet = [f"w{i}" for i in range(6)]
    for _ in range(300):
        ref = list(rng.choice(alphabet, size=int(rng.integers(0, 12))))
        hyp = list(rng.choice(alphabet, size=int(rng.integers(0, 12))))
        s, i, d, h = edit_counts(ref, hyp)
        s2, i2, d2, h2 = edit_counts(hyp, ref)
        assert (s, h) == (s2, h2)
        assert (i, d) == (d2, i2)


def test_edit_counts_internal_consistency():
    rng = np.random.default_rng(99)
    alphabet = ["x", "y", "z", "w"]
    for _ in range(100):
        ref = list(rng.choice(alphabet, size=int(rng.integers(0, 10))))
        hyp = list(rng.choice(alphabet, size=int(rng.integers(0, 10))))
        s, i, d, h = edit_counts(ref, hyp)
        assert s + d + h == len(ref)
        assert s + i + h == len(hyp)
        assert min(s, i, d, h) >= 0


# ---------------------------------------------------------------- pooled wer


def test_wer_zero_on_identical_corpus():
    result = wer(["hello world", "good day"], ["hello world", "good day"])
    assert result.wer == 0.0
    assert result.hits == 4
    assert result.num_utterances == 2


def test_wer_known_value():
    # 1 substitution + 1 deletion over 4 reference words = 50%
    result = wer(["the quick brown fox"], ["the quack fox"])
    assert result.wer == pytest.approx(50.0)
    assert result.substitutions == 1
    assert result.deletions == 1
    assert result.insertions == 0


def test_wer_can_exceed_100():
    result = wer(["a"], ["a b c"])
    assert result.wer == pytest.approx(200.0)
    assert result.insertions == 2


def test_wer_pools_counts_not_rates():
    # Pooling weights utterances by reference length: (1+0 errors)/(1+9 words)
    result = wer(["a", "b c d e f g h i j"], ["x", "b c d e f g h i j"])
    assert result.wer == pytest.approx(10.0)
    mean_of_rates = (100.0 + 0.0) / 2.0
    assert result.wer != pytest.approx(mean_of_rates)


def test_wer_empty_hypothesis_line():
    result = wer(["a b", "c d"], ["a b", ""])
    assert result.deletions == 2
    assert result.wer == pytest.approx(50.0)


def test_wer_rejects_mismatched_or_empty():
    with pytest.raises(DataError):
        wer(["a"], ["a", "b"])
    with pytest.raises(DataError):
        wer([], [])
    with pytest.raises(DataError):
        wer([""], ["a"])


def test_wer_result_fields():
    result = wer(["a b c"], ["a b x y"])
    assert isinstance(result, EvalResult)
    assert result.ref_words == 3
    assert result.hyp_words == 4
    assert result.substitutions + result.insertions + result.deletions == 2


# ---------------------------------------------------------------- rai


def test_rai_improvement_is_positive():
    assert rai(52.95, 55.9) == pytest.approx(5.28, abs=0.005)


def test_rai_regression_is_negative():
    assert rai(26.44, 25.26) == pytest.approx(-4.67, abs=0.005)


def test_rai_identity_and_perfect():
    assert rai(30.0, 30.0) == 0.0
    assert rai(0.0, 30.0) == pytest.approx(100.0)


def test_rai_rejects_nonpositive_baseline():
    with pytest.raises(DataError):
        rai(10.0, 0.0)
    with pytest.raises(DataError):
        rai(10.0, -1.0)


# ---------------------------------------------------------------- projection


def test_project_codes_shapes_and_centering():
    rng = np.random.default_rng(123)
    codes = rng.normal(size=(40, 8))
    proj, comps = project_codes(codes, n_components=2)
    assert proj.shape == (40, 2)
    assert comps.shape == (2, 8)
    assert np.allclose(proj.mean(axis=0), 0.0, atol=1e-12)


def test_project_codes_components_orthonormal():
    rng = np.random.default_rng(124)
    proj, comps = project_codes(rng.normal(size=(30, 6)), n_components=3)
    assert np.allclose(comps @ comps.T, np.eye(3), atol=1e-10)


def test_project_codes_sign_convention():
    rng = np.random.default_rng(125)
    _, comps = project_codes(rng.normal(size=(50, 7)), n_components=4)
    for row in comps:
        assert row[int(np.argmax(np.abs(row)))] > 0


def test_project_codes_line_recovered():
    # Points on a 1-D line embedded in 5-D: first component carries everything.
    rng = np.random.default_rng(126)
    direction = np.array([1.0, 2.0, 0.0, -1.0, 0.5])
    direction /= np.linalg.norm(direction)
    ts = rng.normal(size=60)
    codes = np.outer(ts, direction)
    proj, comps = project_codes(codes, n_components=2)
    assert np.allclose(np.abs(comps[0]), np.abs(direction), atol=1e-9)
    assert np.allclose(proj[:, 1], 0.0, atol=1e-9)
    centered_t = ts - ts.mean()
    assert np.allclose(np.abs(proj[:, 0]), np.abs(centered_t), atol=1e-9)


def test_project_codes_matches_eigendecomposition_oracle():
    rng = np.random.default_rng(127)
    for _ in range(20):
        codes = rng.normal(size=(25, 5)) @ np.diag([3.0, 2.0, 1.0, 0.5, 0.1])
        proj, comps = project_codes(codes, n_components=3)
        centered = codes - codes.mean(axis=0)
        evals, evecs = np.linalg.eigh(centered.T @ centered)
        order = np.argsort(evals)[::-1]
        for k in range(3):
            v = evecs[:, order[k]]
            pivot = int(np.argmax(np.abs(v)))
            if v[pivot] < 0:
                v = -v
            assert np.allclose(comps[k], v, atol=1e-8)
        assert np.allclose(proj, centered @ np.column_stack(
            [evecs[:, order[k]] * np.sign(evecs[np.argmax(np.abs(evecs[:, order[k]])), order[k]]) for k in range(3)]
        ), atol=1e-8)


def test_project_codes_variance_ordering():
    rng = np.random.default_rng(128)
    codes = rng.normal(size=(100, 6)) * np.array([5.0, 3.0, 2.0, 1.0, 0.5, 0.1])
    proj, _ = project_codes(codes, n_components=4)
    variances = proj.var(axis=0)
    assert all(variances[i] >= variances[i + 1] for i in range(3))


def test_project_codes_rejects_bad_inputs():
    with pytest.raises(DataError):
        project_codes(np.zeros(5))
    with pytest.raises(DataError):
        project_codes(np.zeros((4, 3)), n_components=4)
    with pytest.raises(DataError):
        project_codes(np.zeros((4, 3)), n_components=0)
    with pytest.raises(DataError):
        project_codes(np.ones((1, 3)))


def test_project_codes_identical_vectors_project_to_origin():
    pts = np.tile([3.0, -1.0, 2.0], (6, 1))
    projected, comps = project_codes(pts, n_components=2)
    assert np.allclose(projected, 0.0)
    assert comps.shape == (2, 3)

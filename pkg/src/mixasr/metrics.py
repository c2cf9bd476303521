"""Evaluation metrics: pooled word error rate, adaptation improvement, PCA.

WER is pooled over a corpus: edit counts are summed across utterance pairs and
divided by the total reference word count, matching how recognition systems
are scored. Among equal-cost alignments the decomposition with the fewest
substitutions is reported, which makes the counts canonical: swapping
reference and hypothesis leaves substitutions and hits unchanged and swaps
insertions with deletions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class EvalResult:
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    hits: int
    ref_words: int
    hyp_words: int
    num_utterances: int


def edit_counts(ref_tokens: Sequence[str], hyp_tokens: Sequence[str]) -> tuple[int, int, int, int]:
    """Levenshtein decomposition (substitutions, insertions, deletions, hits).

    Unit costs. Among minimum-cost alignments the one with the fewest
    substitutions is chosen; insertions and deletions are then fully
    determined by the cost and the length difference.
    """
    n, m = len(ref_tokens), len(hyp_tokens)
    # cell = (cost, substitutions), compared lexicographically
    prev = [(j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0)] + [(0, 0)] * m
        r = ref_tokens[i - 1]
        for j in range(1, m + 1):
            dc, ds = prev[j - 1]
            if r == hyp_tokens[j - 1]:
                diag = (dc, ds)
            else:
                diag = (dc + 1, ds + 1)
            up = (prev[j][0] + 1, prev[j][1])
            left = (cur[j - 1][0] + 1, cur[j - 1][1])
            cur[j] = min(diag, up, left)
        prev = cur
    cost, subs = prev[m]
    # hits + subs + dels = n and hits + subs + ins = m
    ins = (cost - subs + (m - n)) // 2
    dels = (cost - subs - (m - n)) // 2
    hits = n - subs - dels
    return subs, ins, dels, hits


def wer(refs: Sequence[str], hyps: Sequence[str]) -> EvalResult:
    """Pooled corpus word error rate over paired reference/hypothesis strings."""
    if len(refs) != len(hyps):
        raise DataError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise DataError("nothing to score")
    tot_s = tot_i = tot_d = tot_h = tot_ref = tot_hyp = 0
    for ref, hyp in zip(refs, hyps):
        r, h = ref.split(), hyp.split()
        s, i, d, hits = edit_counts(r, h)
        tot_s += s
        tot_i += i
        tot_d += d
        tot_h += hits
        tot_ref += len(r)
        tot_hyp += len(h)
    if tot_ref == 0:
        raise DataError("reference corpus contains no words")
    value = 100.0 * (tot_s + tot_i + tot_d) / tot_ref
    return EvalResult(value, tot_s, tot_i, tot_d, tot_h, tot_ref, tot_hyp, len(refs))


def rai(adapted_wer: float, unadapted_wer: float) -> float:
    """Relative adaptation improvement: percent WER reduction over the unadapted system.

    Positive values mean the adapted system is better.
    """
    if unadapted_wer <= 0:
        raise DataError(f"unadapted WER must be positive, got {unadapted_wer}")
    return -(adapted_wer - unadapted_wer) / unadapted_wer * 100.0


def project_codes(codes: np.ndarray, n_components: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Project code vectors onto their top principal components.

    Returns (projected [N, k], components [k, D]). Deterministic: each
    component's largest-magnitude coordinate is made positive, so repeated
    runs and equivalent eigensolvers agree up to that convention.
    """
    pts = np.asarray(codes, dtype=np.float64)
    if pts.ndim != 2:
        raise DataError(f"expected a 2-D array of code vectors, got shape {pts.shape}")
    n, d = pts.shape
    if n < 2:
        raise DataError(f"need at least 2 code vectors, got {n}")
    if not 1 <= n_components <= min(n, d):
        raise DataError(f"n_components must be in [1, {min(n, d)}], got {n_components}")
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:n_components]
    for k in range(n_components):
        pivot = int(np.argmax(np.abs(comps[k])))
        if comps[k, pivot] < 0:
            comps[k] = -comps[k]
    return centered @ comps.T, comps

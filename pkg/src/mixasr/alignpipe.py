"""Long-audio curation: chunking, transcript pairing, local alignment, filtering.

Pipeline: a long recording is decoded in ~30 s chunks elsewhere; each chunk
hypothesis is paired with the most similar slice of the official transcript by
TF-IDF cosine similarity, locally aligned against it with Smith-Waterman to
recover the exact reference word span, then filtered and attributed to a
speaker. The output is a manifest plus a yield report.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

from .corpus import Manifest, Utterance, infer_gender
from .errors import DataError

NOISE_TAG = "<spoken-noise>"


@dataclass(frozen=True)
class AudioChunk:
    recording_id: str
    start: float
    end: float
    hypothesis: str | None = None  # decoded text; None or empty means undecodable


@dataclass(frozen=True)
class Document:
    index: int
    tokens: tuple[str, ...]
    offset: int  # word offset of tokens[0] within the full transcript


@dataclass(frozen=True)
class MatchResult:
    doc_index: int
    similarity: float

    @property
    def matched(self) -> bool:
        return self.similarity > 0.0


@dataclass(frozen=True)
class SWResult:
    hyp_span: tuple[int, int]  # half-open token indices into the hypothesis
    ref_span: tuple[int, int]  # half-open token indices into the reference
    score: float


@dataclass(frozen=True)
class AlignedSegment:
    recording_id: str
    start: float
    end: float
    text: str
    score: float
    ref_start: int  # absolute word offset of the text within the transcript
    ref_end: int


def chunk_audio(duration_s: float, chunk_s: float = 30.0) -> list[tuple[float, float]]:
    """Tile [0, duration) into contiguous chunk_s windows; remainder forms the last."""
    if duration_s <= 0:
        raise DataError(f"duration must be positive, got {duration_s}")
    if chunk_s <= 0:
        raise DataError(f"chunk size must be positive, got {chunk_s}")
    n_full = int(duration_s // chunk_s)
    bounds = [(i * chunk_s, (i + 1) * chunk_s) for i in range(n_full)]
    if duration_s - n_full * chunk_s > 1e-9:
        bounds.append((n_full * chunk_s, duration_s))
    if not bounds:
        bounds.append((0.0, duration_s))
    return bounds


def split_documents(tokens: Sequence[str], words_per_doc: int = 1000) -> list[Document]:
    """Tile a transcript into fixed-size word windows; remainder forms the last."""
    if not tokens:
        raise DataError("empty transcript")
    if words_per_doc <= 0:
        raise DataError(f"words_per_doc must be positive, got {words_per_doc}")
    docs = []
    for idx, off in enumerate(range(0, len(tokens), words_per_doc)):
        docs.append(Document(idx, tuple(tokens[off:off + words_per_doc]), off))
    return docs


def tfidf_match(hyp_tokens: Sequence[str], docs: Sequence[Document]) -> MatchResult:
    """Pick the document with highest TF-IDF cosine similarity to the hypothesis.

    Raw term frequencies with smoothed IDF log((1+N)/(1+df)) + 1. Ties resolve
    to the lowest document index; a similarity of exactly zero means no term
    overlap and is surfaced via MatchResult.matched.
    """
    if not hyp_tokens:
        raise DataError("empty hypothesis")
    if not docs:
        raise DataError("no documents to match against")
    n_docs = len(docs)
    df: Counter[str] = Counter()
    doc_tfs = []
    for doc in docs:
        tf = Counter(doc.tokens)
        doc_tfs.append(tf)
        df.update(tf.keys())
    idf = defaultdict(lambda: math.log((1 + n_docs) / 1.0) + 1.0)
    for term, d in df.items():
        idf[term] = math.log((1 + n_docs) / (1 + d)) + 1.0

    hyp_tf = Counter(hyp_tokens)
    hyp_vec = {t: c * idf[t] for t, c in hyp_tf.items()}
    hyp_norm = math.sqrt(sum(v * v for v in hyp_vec.values()))

    best_idx, best_sim = 0, -1.0
    for i, tf in enumerate(doc_tfs):
        dot = sum(hyp_vec[t] * tf[t] * idf[t] for t in hyp_vec if t in tf)
        norm = math.sqrt(sum((c * idf[t]) ** 2 for t, c in tf.items()))
        sim = dot / (hyp_norm * norm) if hyp_norm > 0 and norm > 0 else 0.0
        if sim > best_sim:
            best_idx, best_sim = i, sim
    return MatchResult(best_idx, max(best_sim, 0.0))


def smith_waterman(
    hyp: Sequence[str],
    ref: Sequence[str],
    match: float = 2.0,
    mismatch: float = -1.0,
    gap: float = -1.0,
) -> SWResult:
    """Local alignment of token sequences (affine-free, linear gap penalty).

    Returns half-open spans of the best-scoring local alignment. When several
    cells reach the maximum, the alignment with the smallest reference start
    wins, then the smallest hypothesis start. An all-negative score surface
    yields the empty alignment with score 0.
    """
    if match <= 0:
        raise DataError("match reward must be positive")
    if mismatch > 0 or gap > 0:
        raise DataError("mismatch and gap penalties must be <= 0")
    n, m = len(hyp), len(ref)
    H = [[0.0] * (m + 1) for _ in range(n + 1)]
    best = 0.0
    for i in range(1, n + 1):
        row = H[i]
        prev = H[i - 1]
        hi = hyp[i - 1]
        for j in range(1, m + 1):
            s = match if hi == ref[j - 1] else mismatch
            v = max(0.0, prev[j - 1] + s, prev[j] + gap, row[j - 1] + gap)
            row[j] = v
            if v > best:
                best = v
    if best <= 0.0:
        return SWResult((0, 0), (0, 0), 0.0)

    def traceback(i: int, j: int) -> tuple[int, int]:
        while H[i][j] > 0.0:
            s = match if hyp[i - 1] == ref[j - 1] else mismatch
            if i > 0 and j > 0 and H[i][j] == H[i - 1][j - 1] + s:
                i, j = i - 1, j - 1
            elif i > 0 and H[i][j] == H[i - 1][j] + gap:
                i -= 1
            else:
                j -= 1
        return i, j

    candidates = []
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if H[i][j] == best:
                si, sj = traceback(i, j)
                candidates.append((sj, si, j, i))
    sj, si, j, i = min(candidates)
    return SWResult((si, i), (sj, j), best)


def reinsert_noise_tags(segment_tokens: Sequence[str], reference_tokens: Sequence[str]) -> list[str]:
    """Replace noise-tag runs with the reference words between their flanks.

    A run of NOISE_TAG tokens is replaced only when both flanking words occur
    exactly once in the reference window and in order; otherwise the run is
    kept verbatim.
    """
    out: list[str] = []
    i = 0
    toks = list(segment_tokens)
    while i < len(toks):
        if toks[i] != NOISE_TAG:
            out.append(toks[i])
            i += 1
            continue
        run_end = i
        while run_end < len(toks) and toks[run_end] == NOISE_TAG:
            run_end += 1
        left = toks[i - 1] if i > 0 else None
        right = toks[run_end] if run_end < len(toks) else None
        replaced = False
        if left is not None and right is not None:
            li = [k for k, t in enumerate(reference_tokens) if t == left]
            ri = [k for k, t in enumerate(reference_tokens) if t == right]
            if len(li) == 1 and len(ri) == 1 and li[0] < ri[0]:
                out.extend(reference_tokens[li[0] + 1:ri[0]])
                replaced = True
        if not replaced:
            out.extend(toks[i:run_end])
        i = run_end
    return out


def extract_segments(
    chunks: Sequence[AudioChunk],
    transcript_tokens: Sequence[str],
    words_per_doc: int = 1000,
    match: float = 2.0,
    mismatch: float = -1.0,
    gap: float = -1.0,
    score_floor: float | None = None,
    extend_edges: bool = True,
    raw_transcript_tokens: Sequence[str] | None = None,
) -> list[AlignedSegment]:
    """Align each decodable chunk against the transcript and keep solid matches.

    Chunks with empty hypotheses, zero-similarity document matches, or local
    alignment scores below the floor (default 2 * match) are dropped. Because a
    chunk hypothesis is a complete utterance whose words are expected to lie
    inside the matched document, unaligned hypothesis edge tokens widen the
    recovered reference span symmetrically (clipped to the document); disable
    with extend_edges=False when hypotheses may carry out-of-transcript speech.
    """
    docs = split_documents(transcript_tokens, words_per_doc)
    floor = 2.0 * match if score_floor is None else score_floor
    segments = []
    for chunk in chunks:
        hyp = (chunk.hypothesis or "").split()
        if not hyp:
            continue
        matched = tfidf_match(hyp, docs)
        if not matched.matched:
            continue
        doc = docs[matched.doc_index]
        sw = smith_waterman(hyp, doc.tokens, match=match, mismatch=mismatch, gap=gap)
        if sw.score < floor:
            continue
        rs, re = sw.ref_span
        if extend_edges:
            rs = max(0, rs - sw.hyp_span[0])
            re = min(len(doc.tokens), re + (len(hyp) - sw.hyp_span[1]))
        if re <= rs:
            continue
        text_tokens = list(doc.tokens[rs:re])
        if NOISE_TAG in text_tokens and raw_transcript_tokens is not None:
            window = raw_transcript_tokens[doc.offset:doc.offset + len(doc.tokens)]
            text_tokens = reinsert_noise_tags(text_tokens, window)
        segments.append(
            AlignedSegment(
                recording_id=chunk.recording_id,
                start=chunk.start,
                end=chunk.end,
                text=" ".join(text_tokens),
                score=sw.score,
                ref_start=doc.offset + rs,
                ref_end=doc.offset + re,
            )
        )
    return segments


@dataclass
class PostprocessResult:
    manifest: Manifest
    yield_percent: float
    dropped_short: int
    dropped_unattributed: int


def postprocess(
    segments: Sequence[AlignedSegment],
    speaker_map: Sequence[tuple[int, int, str]],
    raw_duration_s: float,
    recording_paths: Mapping[str, str] | None = None,
    domain: str = "source",
    min_words: int = 2,
) -> PostprocessResult:
    """Filter aligned segments and attribute speakers.

    speaker_map holds half-open transcript word-offset ranges (start, end,
    speaker). A segment takes the speaker with the largest word overlap;
    segments with fewer than min_words words or no overlapping speaker are
    dropped. Gender comes from the name-suffix rule. The yield is the percent
    of raw audio retained.
    """
    if raw_duration_s <= 0:
        raise DataError("raw duration must be positive")
    paths = recording_paths or {}
    entries = []
    dropped_short = 0
    dropped_unattributed = 0
    for seg in segments:
        words = seg.text.split()
        if len(words) < min_words:
            dropped_short += 1
            continue
        overlaps: dict[str, int] = defaultdict(int)
        for rs, re, spk in speaker_map:
            ov = min(seg.ref_end, re) - max(seg.ref_start, rs)
            if ov > 0:
                overlaps[spk] += ov
        if not overlaps:
            dropped_unattributed += 1
            continue
        speaker = max(overlaps.items(), key=lambda kv: kv[1])[0]
        utt_id = f"{speaker}-{seg.recording_id}-{int(round(seg.start * 100)):07d}-{int(round(seg.end * 100)):07d}"
        entries.append(
            Utterance(
                id=utt_id,
                audio_path=paths.get(seg.recording_id, seg.recording_id),
                domain=domain,
                start=seg.start,
                end=seg.end,
                text=seg.text,
                speaker=speaker,
                gender=infer_gender(speaker),
                recording_id=seg.recording_id,
            )
        )
    manifest = Manifest(entries, split="train")
    yield_percent = 100.0 * manifest.total_duration / raw_duration_s
    return PostprocessResult(manifest, yield_percent, dropped_short, dropped_unattributed)

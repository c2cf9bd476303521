"""Order-n backoff language modeling.

Counting with sentence markers, count pruning, interpolated modified Kneser-Ney
estimation, ARPA text serialization with lossless decimal round-trip, log10
scoring with backoff chains, and perplexity-based corpus filtering.

Counts use raw integer tables per order. Estimation replaces lower-order raw
counts with continuation counts (except for begin-marker histories, which keep
raw counts because nothing can precede the begin marker), applies one discount
per count bucket (1, 2, 3+) derived from counts-of-counts, and interpolates
every level with the next shorter history, ending in a uniform distribution
over the prediction vocabulary. This construction normalizes exactly: for any
history, the conditional probabilities over the full vocabulary sum to one.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataError

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

#: strict less-than pruning thresholds used for the biased in-domain model
DEFAULT_PRUNE: dict[int, int] = {2: 3, 3: 5, 4: 7}


@dataclass
class NGramCounts:
    order: int
    tables: list[dict[tuple[str, ...], int]]  # tables[k-1] holds order-k counts
    vocab: set[str]  # predictable tokens (corpus tokens plus the end marker)


@dataclass
class NGramModel:
    order: int
    # n-gram -> (log10 probability, log10 backoff weight or None at top order)
    entries: dict[tuple[str, ...], tuple[float, float | None]]
    vocab: frozenset[str]  # predictable tokens, including the end/unknown markers

    def counts_by_order(self) -> list[int]:
        sizes = [0] * self.order
        for g in self.entries:
            sizes[len(g) - 1] += 1
        return sizes


def count_ngrams(lines: Iterable[str], order: int = 4) -> NGramCounts:
    """Count all n-grams of orders 1..order with sentence markers.

    Each line is one sentence; tokens are whitespace-separated. The sequence is
    padded with one begin marker and one end marker. The bare begin marker is
    not a unigram event (it is only ever a context), but marker-initial
    higher-order n-grams are counted. Blank lines are skipped.
    """
    if order < 1:
        raise DataError(f"order must be >= 1, got {order}")
    tables: list[dict[tuple[str, ...], int]] = [defaultdict(int) for _ in range(order)]
    vocab: set[str] = {EOS}
    n_lines = 0
    for line in lines:
        tokens = line.split()
        if not tokens:
            continue
        n_lines += 1
        vocab.update(tokens)
        seq = [BOS] + tokens + [EOS]
        for k in range(1, order + 1):
            table = tables[k - 1]
            for i in range(len(seq) - k + 1):
                gram = tuple(seq[i:i + k])
                if k == 1 and gram == (BOS,):
                    continue
                table[gram] += 1
    if n_lines == 0:
        raise DataError("empty corpus: no non-blank lines to count")
    return NGramCounts(order=order, tables=[dict(t) for t in tables], vocab=vocab)


def prune_counts(counts: NGramCounts, thresholds: Mapping[int, int]) -> NGramCounts:
    """Drop n-grams whose raw count is strictly below the order's threshold.

    Unigrams are never pruned. After thresholding, orphaned higher-order
    entries (whose length n-1 prefix was removed) are dropped order by order;
    the bare begin marker is exempt from the prefix requirement because it is
    never a unigram entry.
    """
    if 1 in thresholds:
        raise DataError("unigrams are never pruned; threshold for order 1 is invalid")
    for k in thresholds:
        if not 2 <= k <= counts.order:
            raise DataError(f"threshold order {k} outside 2..{counts.order}")
    tables = [dict(t) for t in counts.tables]
    for k in range(2, counts.order + 1):
        thr = thresholds.get(k, 0)
        if thr > 1:
            tables[k - 1] = {g: c for g, c in tables[k - 1].items() if c >= thr}
    for k in range(2, counts.order + 1):
        prev = tables[k - 2]
        kept = {}
        for g, c in tables[k - 1].items():
            prefix = g[:-1]
            if prefix == (BOS,) or prefix in prev:
                kept[g] = c
        tables[k - 1] = kept
    return NGramCounts(order=counts.order, tables=tables, vocab=set(counts.vocab))


def _discounts(values: Iterable[int]) -> tuple[float, float, float]:
    """Per-bucket discounts (count 1, count 2, count 3+) from counts-of-counts.

    Uses the modified closed-form estimates; falls back to flat absolute
    discounting D = 0.75 whenever the counts-of-counts are degenerate or the
    closed form leaves a bucket non-positive (which would break normalization).
    """
    n = [0, 0, 0, 0]
    for v in values:
        if 1 <= v <= 4:
            n[v - 1] += 1
    n1, n2, n3, n4 = n
    if n1 == 0 or n2 == 0 or n3 == 0:
        return 0.75, 0.75, 0.75
    y = n1 / (n1 + 2.0 * n2)
    d1 = 1.0 - 2.0 * y * n2 / n1
    d2 = 2.0 - 3.0 * y * n3 / n2
    d3 = 3.0 - 4.0 * y * n4 / n3
    if d1 <= 0 or d2 <= 0 or d3 <= 0:
        return 0.75, 0.75, 0.75
    return d1, d2, d3


def estimate(counts: NGramCounts) -> NGramModel:
    """Interpolated modified Kneser-Ney estimation over (possibly pruned) counts."""
    order = counts.order
    if not counts.tables[0]:
        raise DataError("cannot estimate a model from empty counts")

    # adjusted count tables: raw at the top order, continuation counts below
    adjusted: list[dict[tuple[str, ...], int]] = [dict() for _ in range(order)]
    adjusted[order - 1] = dict(counts.tables[order - 1])
    for k in range(order - 1, 0, -1):
        cont: dict[tuple[str, ...], int] = defaultdict(int)
        for gram in adjusted[k]:
            cont[gram[1:]] += 1
        support = set(counts.tables[k - 1]) | set(cont)
        table = {}
        for g in support:
            if g[0] == BOS:
                table[g] = counts.tables[k - 1].get(g, 0)
            else:
                table[g] = cont.get(g, 0)
        adjusted[k - 1] = table

    disc = [_discounts(adjusted[k].values()) for k in range(order)]

    def subtract(count: int, k: int) -> float:
        if count <= 0:
            return 0.0
        d1, d2, d3 = disc[k]
        if count == 1:
            return min(d1, 1.0)
        if count == 2:
            return min(d2, 2.0)
        return min(d3, float(count))

    denom: list[dict[tuple[str, ...], float]] = [defaultdict(float) for _ in range(order)]
    gamma_num: list[dict[tuple[str, ...], float]] = [defaultdict(float) for _ in range(order)]
    for k in range(order):
        for g, c in adjusted[k].items():
            h = g[:-1]
            denom[k][h] += c
            gamma_num[k][h] += subtract(c, k)

    vocab = set(counts.vocab) | {UNK}
    vsize = len(vocab)
    uni_denom = denom[0][()]
    if uni_denom <= 0:
        raise DataError("degenerate unigram table")
    uni_gamma = gamma_num[0][()] / uni_denom

    from functools import lru_cache

    @lru_cache(maxsize=None)
    def prob(gram: tuple[str, ...]) -> float:
        k = len(gram)
        if k == 1:
            a = adjusted[0].get(gram, 0)
            return (a - subtract(a, 0)) / uni_denom + uni_gamma / vsize
        h = gram[:-1]
        if denom[k - 1].get(h, 0.0) <= 0.0:
            return prob(gram[1:])
        a = adjusted[k - 1].get(gram, 0)
        g_h = gamma_num[k - 1][h] / denom[k - 1][h]
        return (a - subtract(a, k - 1)) / denom[k - 1][h] + g_h * prob(gram[1:])

    def backoff(g: tuple[str, ...]) -> float:
        k = len(g)  # history of an order k+1 distribution
        if k >= order or denom[k].get(g, 0.0) <= 0.0:
            return 1.0
        return gamma_num[k][g] / denom[k][g]

    entries: dict[tuple[str, ...], tuple[float, float | None]] = {}
    for k in range(1, order + 1):
        for g in adjusted[k - 1]:
            logp = math.log10(prob(g))
            bow = math.log10(backoff(g)) if k < order else None
            entries[g] = (logp, bow)
    entries[(UNK,)] = (
        math.log10(uni_gamma / vsize),
        0.0 if order > 1 else None,
    )
    entries[(BOS,)] = (
        -99.0,
        math.log10(backoff((BOS,))) if order > 1 else None,
    )
    return NGramModel(order=order, entries=entries, vocab=frozenset(vocab))


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def _event_logp(model: NGramModel, history: tuple[str, ...], word: str) -> float:
    """log10 P(word | history) via the standard backoff chain."""
    entries = model.entries
    gram = history + (word,)
    if gram in entries:
        return entries[gram][0]
    if not history:
        raise DataError(f"token {word!r} unknown and model lacks an unknown entry")
    ent = entries.get(history)
    bow = ent[1] if ent is not None and ent[1] is not None else 0.0
    return bow + _event_logp(model, history[1:], word)


def start_state(model: NGramModel) -> tuple[str, ...]:
    """Initial scoring history: the sentence-start marker (empty for order 1)."""
    return (BOS,) if model.order > 1 else ()


def advance(model: NGramModel, history: tuple[str, ...], word: str) -> tuple[float, tuple[str, ...]]:
    """One incremental scoring step: log10 P(word | history) and the new history.

    Out-of-vocabulary words (and a literal start marker) map to the unknown
    token. The returned history is truncated to order-1 tokens.
    """
    w = word
    if w == BOS or (w,) not in model.entries:
        w = UNK
    max_hist = model.order - 1
    logp = _event_logp(model, history if max_hist > 0 else (), w)
    new_history = (history + (w,))[-max_hist:] if max_hist > 0 else ()
    return logp, new_history


def finish(model: NGramModel, history: tuple[str, ...]) -> float:
    """log10 probability of the end marker given the current history."""
    max_hist = model.order - 1
    return _event_logp(model, history if max_hist > 0 else (), EOS)


def score(model: NGramModel, tokens: Sequence[str]) -> float:
    """Total log10 probability of a token sequence, end marker included.

    Events are P(w1 | <s>), P(w2 | <s> w1), ..., P(</s> | last history), with
    histories truncated to order-1 tokens. Tokens outside the vocabulary (and
    literal markers) map to the unknown token.
    """
    total = 0.0
    history = start_state(model)
    for raw in tokens:
        logp, history = advance(model, history, raw)
        total += logp
    return total + finish(model, history)


def perplexity(model: NGramModel, line: str) -> float:
    """Per-event perplexity of one line: 10 ** (-score / (token count + 1))."""
    tokens = line.split()
    n_events = len(tokens) + 1
    return 10.0 ** (-score(model, tokens) / n_events)


def build_biased_lm(
    lines: Iterable[str],
    order: int = 4,
    thresholds: Mapping[int, int] | None = None,
) -> NGramModel:
    """In-domain model: count, prune with the default thresholds, estimate."""
    if thresholds is None:
        thresholds = {k: v for k, v in DEFAULT_PRUNE.items() if k <= order}
    return estimate(prune_counts(count_ngrams(lines, order), thresholds))


# ---------------------------------------------------------------------------
# perplexity filtering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoredLine:
    index: int
    text: str
    perplexity: float


def score_lines(lines: Sequence[str], model: NGramModel) -> list[ScoredLine]:
    return [ScoredLine(i, line, perplexity(model, line)) for i, line in enumerate(lines)]


def perplexity_filter(
    lines: Sequence[str],
    model: NGramModel,
    keep_ratio: float = 0.10,
) -> list[str]:
    """Keep the ceil(keep_ratio * N) lowest-perplexity lines, in original order.

    Ties are broken by original line index (earlier lines win). keep_ratio 1.0
    keeps everything.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise DataError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    if not lines:
        raise DataError("empty corpus: nothing to filter")
    scored = score_lines(lines, model)
    n_keep = math.ceil(keep_ratio * len(lines))
    ranked = sorted(scored, key=lambda s: (s.perplexity, s.index))
    kept = sorted(ranked[:n_keep], key=lambda s: s.index)
    return [s.text for s in kept]


# ---------------------------------------------------------------------------
# ARPA text format
# ---------------------------------------------------------------------------

def write_arpa(model: NGramModel, path: str | Path) -> None:
    """Serialize to the ARPA text format.

    Floats are written with shortest round-trip repr so that read followed by
    write reproduces the file byte for byte and parsed values are bit-equal.
    """
    path = Path(path)
    sizes = model.counts_by_order()
    by_order: list[list[tuple[tuple[str, ...], tuple[float, float | None]]]] = [
        [] for _ in range(model.order)
    ]
    for g, payload in model.entries.items():
        by_order[len(g) - 1].append((g, payload))
    with path.open("w", encoding="utf-8") as fh:
        fh.write("\\data\\\n")
        for k in range(1, model.order + 1):
            fh.write(f"ngram {k}={sizes[k - 1]}\n")
        for k in range(1, model.order + 1):
            fh.write(f"\n\\{k}-grams:\n")
            for g, (logp, bow) in sorted(by_order[k - 1]):
                line = f"{logp!r}\t{' '.join(g)}"
                if bow is not None:
                    line += f"\t{bow!r}"
                fh.write(line + "\n")
        fh.write("\n\\end\\\n")


def read_arpa(path: str | Path) -> NGramModel:
    path = Path(path)
    declared: dict[int, int] = {}
    entries: dict[tuple[str, ...], tuple[float, float | None]] = {}
    section = 0
    state = "preamble"
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line == "\\data\\":
                state = "data"
                continue
            if line == "\\end\\":
                state = "end"
                continue
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1:].split("-")[0])
                state = "grams"
                continue
            if state == "data":
                if not line.startswith("ngram "):
                    raise DataError(f"{path}:{lineno}: malformed count line {line!r}")
                k, n = line[len("ngram "):].split("=")
                declared[int(k)] = int(n)
                continue
            if state != "grams":
                raise DataError(f"{path}:{lineno}: unexpected content {line!r}")
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise DataError(f"{path}:{lineno}: malformed entry {line!r}")
            gram = tuple(parts[1].split(" "))
            if len(gram) != section:
                raise DataError(f"{path}:{lineno}: entry order mismatch")
            bow = float(parts[2]) if len(parts) == 3 else None
            entries[gram] = (float(parts[0]), bow)
    if state != "end":
        raise DataError(f"{path}: missing \\end\\ terminator")
    if not declared:
        raise DataError(f"{path}: missing \\data\\ header")
    order = max(declared)
    model = NGramModel(
        order=order,
        entries=entries,
        vocab=frozenset(g[0] for g in entries if len(g) == 1 and g[0] != BOS),
    )
    sizes = model.counts_by_order()
    for k, n in declared.items():
        if sizes[k - 1] != n:
            raise DataError(f"{path}: header declares {n} order-{k} entries, found {sizes[k - 1]}")
    return model

"""Corpus data model: utterances, manifests, text normalization, and dataset export.

A manifest is a list of utterance records tied to audio (raw 16 kHz mono PCM or a
precomputed feature matrix in synthetic mode). All operations are pure: filters
return new manifests and never mutate their inputs.
"""

from __future__ import annotations

import json
import unicodedata
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError
from .seeding import derive_rng

SAMPLE_RATE = 16000

#: name suffixes that mark a female first name in the supported locale
FEMALE_SUFFIXES = ("a", "h", "w", "is")

MANIFEST_FIELDS = ("id", "audio_path", "start", "end", "text", "speaker", "domain")


@dataclass(frozen=True)
class Utterance:
    id: str
    audio_path: str
    domain: str
    start: float | None = None
    end: float | None = None
    text: str | None = None  # None marks an unlabeled utterance
    speaker: str | None = None
    gender: str | None = None
    recording_id: str | None = None

    def __post_init__(self):
        if not self.id:
            raise DataError("utterance id must be non-empty")
        if (self.start is None) != (self.end is None):
            raise DataError(f"{self.id}: start and end must be set together")
        if self.start is not None and not self.end > self.start:
            raise DataError(f"{self.id}: end must exceed start")

    @property
    def duration(self) -> float | None:
        if self.start is None:
            return None
        return self.end - self.start

    @property
    def labeled(self) -> bool:
        return self.text is not None


@dataclass
class Manifest:
    entries: list[Utterance]
    split: str = "train"
    total_duration: float = field(init=False)

    def __post_init__(self):
        if self.split not in ("train", "dev", "test"):
            raise DataError(f"unknown split {self.split!r}")
        seen: set[str] = set()
        for utt in self.entries:
            if utt.id in seen:
                raise DataError(f"duplicate utterance id {utt.id!r}")
            seen.add(utt.id)
        self.total_duration = sum(u.duration or 0.0 for u in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def normalize_text(raw: str) -> str:
    """Normalize a transcript: lowercase, strip accents, drop punctuation.

    Accents are removed by canonical decomposition (NFD) followed by removal of
    combining marks. Punctuation is replaced by a space (not deleted outright)
    so that joined tokens never merge, then whitespace is collapsed and trimmed.
    The result is idempotent under a second application.
    """
    decomposed = unicodedata.normalize("NFD", raw.lower())
    out = []
    for ch in decomposed:
        cat = unicodedata.category(ch)
        if cat.startswith("M"):
            continue
        if cat.startswith("P"):
            out.append(" ")
        else:
            out.append(ch)
    return " ".join("".join(out).split())


def filter_by_duration(manifest: Manifest, max_seconds: float = 12.0) -> Manifest:
    """Keep utterances with duration <= max_seconds (inclusive), preserving order.

    Intended for training manifests; callers decide which splits to filter.
    """
    if max_seconds <= 0:
        raise DataError("max_seconds must be positive")
    kept = []
    for utt in manifest.entries:
        if utt.duration is None:
            raise DataError(f"{utt.id}: duration required for filtering")
        if utt.duration <= max_seconds:
            kept.append(utt)
    return Manifest(kept, split=manifest.split)


def subset_fraction(manifest: Manifest, fraction: float, seed: int) -> Manifest:
    """Sample a duration-budgeted subset uniformly without replacement.

    Walks a seeded permutation and accepts the next utterance only while doing
    so moves the running total closer to fraction * total_duration, which keeps
    the realized duration within a small relative error of the budget. The
    subset preserves original manifest order. fraction == 1.0 is the identity.
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    if not manifest.entries:
        raise DataError("cannot subset an empty manifest")
    if fraction == 1.0:
        return Manifest(list(manifest.entries), split=manifest.split)
    budget = fraction * manifest.total_duration
    rng = derive_rng(seed, "subset")
    order = rng.permutation(len(manifest.entries))
    total = 0.0
    chosen: set[int] = set()
    for idx in order:
        d = manifest.entries[idx].duration or 0.0
        if abs(total + d - budget) < abs(total - budget):
            chosen.add(int(idx))
            total += d
        else:
            break
    entries = [u for i, u in enumerate(manifest.entries) if i in chosen]
    return Manifest(entries, split=manifest.split)


def infer_gender(name: str) -> str:
    """Heuristic first-name gender rule: female iff the name ends in a/h/w/is."""
    key = name.strip().lower()
    if not key:
        raise DataError("empty speaker name")
    if key.endswith(FEMALE_SUFFIXES):
        return "female"
    return "male"


# ---------------------------------------------------------------------------
# manifest serialization (line-delimited JSON records)
# ---------------------------------------------------------------------------

def write_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for utt in manifest.entries:
            rec = {
                "id": utt.id,
                "audio_path": utt.audio_path,
                "start": utt.start,
                "end": utt.end,
                "text": utt.text,
                "speaker": utt.speaker,
                "domain": utt.domain,
            }
            if utt.gender is not None:
                rec["gender"] = utt.gender
            if utt.recording_id is not None:
                rec["recording_id"] = utt.recording_id
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_manifest(path: str | Path, split: str = "train") -> Manifest:
    path = Path(path)
    entries = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid manifest record: {exc}") from exc
            missing = [k for k in MANIFEST_FIELDS if k not in rec]
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {missing}")
            entries.append(
                Utterance(
                    id=rec["id"],
                    audio_path=rec["audio_path"],
                    domain=rec["domain"],
                    start=rec["start"],
                    end=rec["end"],
                    text=rec["text"],
                    speaker=rec["speaker"],
                    gender=rec.get("gender"),
                    recording_id=rec.get("recording_id"),
                )
            )
    return Manifest(entries, split=split)


# ---------------------------------------------------------------------------
# audio loading
# ---------------------------------------------------------------------------

def load_audio(utt: Utterance, root: str | Path | None = None) -> np.ndarray:
    """Load an utterance's signal.

    Returns a 1-D float32 PCM array (16 kHz) for .wav / 1-D .npy files, or a
    2-D float32 feature matrix [frames, dim] for .npy feature files.
    """
    path = Path(utt.audio_path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    if not path.exists():
        raise DataError(f"{utt.id}: audio file not found: {path}")
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim not in (1, 2):
            raise DataError(f"{utt.id}: expected 1-D PCM or 2-D features, got shape {arr.shape}")
        return arr.astype(np.float32)
    if path.suffix == ".wav":
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise DataError(f"{utt.id}: expected mono audio")
            if wf.getframerate() != SAMPLE_RATE:
                raise DataError(f"{utt.id}: expected {SAMPLE_RATE} Hz, got {wf.getframerate()}")
            if wf.getsampwidth() != 2:
                raise DataError(f"{utt.id}: expected 16-bit PCM")
            frames = wf.readframes(wf.getnframes())
        pcm = np.frombuffer(frames, dtype="<i2").astype(np.float32) / 32768.0
        return pcm
    raise DataError(f"{utt.id}: unsupported audio format {path.suffix!r}")


# ---------------------------------------------------------------------------
# Kaldi-style dataset directory
# ---------------------------------------------------------------------------

def emit_dataset_dir(manifest: Manifest, out_dir: str | Path) -> Path:
    """Write the five-file dataset layout: text, segments, utt2spk, spk2gender, wav.scp.

    Lines are sorted by id, space-separated, newline-terminated. Times are
    rendered with two decimals. Entries carrying segment times must name a
    speaker; genders fall back to the name-suffix rule when unset.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = sorted(manifest.entries, key=lambda u: u.id)

    spk2gender: dict[str, str] = {}
    recordings: dict[str, str] = {}
    text_lines, seg_lines, spk_lines = [], [], []
    for utt in entries:
        if utt.text is not None:
            text_lines.append(f"{utt.id} {utt.text}".rstrip())
        else:
            text_lines.append(utt.id)
        speaker = utt.speaker
        if utt.start is not None:
            if speaker is None:
                raise DataError(f"{utt.id}: segment entry without speaker")
            rec = utt.recording_id or utt.id
            seg_lines.append(f"{utt.id} {rec} {utt.start:.2f} {utt.end:.2f}")
            recordings[rec] = utt.audio_path
        else:
            recordings[utt.recording_id or utt.id] = utt.audio_path
        spk = speaker or utt.id
        spk_lines.append(f"{utt.id} {spk}")
        gender = utt.gender or (infer_gender(speaker) if speaker else "male")
        prev = spk2gender.setdefault(spk, gender)
        if prev != gender:
            raise DataError(f"conflicting gender for speaker {spk!r}")

    def dump(name: str, lines: Iterable[str]) -> None:
        with (out / name).open("w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")

    dump("text", text_lines)
    dump("segments", seg_lines)
    dump("utt2spk", spk_lines)
    dump("spk2gender", (f"{s} {g[0]}" for s, g in sorted(spk2gender.items())))
    dump("wav.scp", (f"{r} {p}" for r, p in sorted(recordings.items())))
    return out


def parse_dataset_dir(path: str | Path, domain: str = "source", split: str = "train") -> Manifest:
    """Rebuild a manifest from a dataset directory written by emit_dataset_dir."""
    root = Path(path)

    def read_map(name: str, nfields: int | None = 2) -> dict[str, str]:
        table: dict[str, str] = {}
        fpath = root / name
        if not fpath.exists():
            raise DataError(f"missing dataset file {fpath}")
        for line in fpath.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            parts = line.split(" ", 1)
            table[parts[0]] = parts[1] if len(parts) > 1 else ""
        return table

    text = read_map("text")
    utt2spk = read_map("utt2spk")
    spk2gender = read_map("spk2gender")
    wav_scp = read_map("wav.scp")
    segments: dict[str, tuple[str, float, float]] = {}
    for line in (root / "segments").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utt_id, rec, start, end = line.split(" ")
        segments[utt_id] = (rec, float(start), float(end))

    gender_names = {"m": "male", "f": "female"}
    entries = []
    for utt_id in sorted(text):
        spk = utt2spk.get(utt_id)
        seg = segments.get(utt_id)
        rec = seg[0] if seg else utt_id
        entries.append(
            Utterance(
                id=utt_id,
                audio_path=wav_scp.get(rec, ""),
                domain=domain,
                start=seg[1] if seg else None,
                end=seg[2] if seg else None,
                text=text[utt_id] if text[utt_id] else None,
                speaker=spk,
                gender=gender_names.get(spk2gender.get(spk, ""), None),
                recording_id=rec if seg else None,
            )
        )
    return Manifest(entries, split=split)

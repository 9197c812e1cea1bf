"""Four-bar monophonic melody phrases and their pianoroll rendering."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import BARS, HIGHEST_PITCH, LOWEST_PITCH, N_PITCHES, N_STEPS, STEPS_PER_BAR
from .smf import SMFError, read_smf

log = logging.getLogger(__name__)

ROLL_SHAPE = (BARS, STEPS_PER_BAR, N_PITCHES)


class CorpusError(ValueError):
    """Invalid phrase data. Messages carry the offending line or note."""


class Genre(str, enum.Enum):
    JAZZ = "jazz"
    OTHER = "other"


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


class SlicePolicy(str, enum.Enum):
    NON_OVERLAPPING = "non-overlapping"
    SLIDING = "sliding"


@dataclass(frozen=True, order=True, kw_only=True)
class NoteEvent:
    start: int
    pitch: int
    duration: int

    @property
    def end(self) -> int:
        return self.start + self.duration


@dataclass(frozen=True)
class NotePhrase:
    id: str
    genre: Genre
    notes: tuple[NoteEvent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "notes", tuple(self.notes))
        object.__setattr__(self, "genre", Genre(self.genre))
        validate_notes(self.notes)


def validate_notes(notes: Sequence[NoteEvent]) -> None:
    bad = [n for n in notes if not LOWEST_PITCH <= n.pitch <= HIGHEST_PITCH]
    if bad:
        raise CorpusError(
            f"pitch out of range [{LOWEST_PITCH},{HIGHEST_PITCH}]: {[n.pitch for n in bad]}"
        )
    for n in notes:
        if n.duration < 1 or n.start < 0:
            raise CorpusError(f"invalid note timing start={n.start} duration={n.duration}")
        if n.end > N_STEPS:
            raise CorpusError(f"phrase longer than {N_STEPS} steps (note ends at {n.end})")
    for a, b in zip(notes, notes[1:]):
        if b.start < a.end:
            raise CorpusError(f"overlapping notes at steps {a.start} and {b.start}")


@dataclass
class Corpus:
    phrases: list[NotePhrase] = field(default_factory=list)
    splits: list[Split] = field(default_factory=list)
    provenance: str = ""
    notes_dropped: int = 0

    def __post_init__(self):
        if not self.splits:
            self.splits = [Split.TRAIN] * len(self.phrases)
        self.splits = [Split(s) for s in self.splits]
        if len(self.splits) != len(self.phrases):
            raise CorpusError("one split tag per phrase is required")
        ids = [p.id for p in self.phrases]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CorpusError(f"duplicate phrase ids: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.phrases)

    def __iter__(self) -> Iterator[NotePhrase]:
        return iter(self.phrases)

    def subset(self, split: Split | str) -> Corpus:
        split = Split(split)
        keep = [p for p, s in zip(self.phrases, self.splits) if s is split]
        return Corpus(keep, [split] * len(keep), self.provenance)

    def train(self) -> Corpus:
        return self.subset(Split.TRAIN)

    def test(self) -> Corpus:
        return self.subset(Split.TEST)

    @property
    def n_bars(self) -> int:
        return BARS * len(self.phrases)


# --- line-delimited JSON ---------------------------------------------------

_RECORD_FIELDS = {"id", "genre", "notes", "split"}
_NOTE_FIELDS = {"pitch", "start", "duration"}


def _phrase_from_record(record) -> tuple[NotePhrase, Split]:
    if not isinstance(record, dict):
        raise CorpusError("record is not an object")
    unknown = set(record) - _RECORD_FIELDS
    if unknown:
        raise CorpusError(f"unknown fields {sorted(unknown)}")
    for key in ("id", "genre", "notes"):
        if key not in record:
            raise CorpusError(f"missing field {key!r}")
    if not isinstance(record["id"], str):
        raise CorpusError("id must be a string")
    try:
        genre = Genre(record["genre"])
        split = Split(record.get("split", "train"))
    except ValueError as exc:
        raise CorpusError(str(exc)) from None
    if not isinstance(record["notes"], list):
        raise CorpusError("notes must be a list")
    notes = []
    for raw in record["notes"]:
        if not isinstance(raw, dict) or set(raw) != _NOTE_FIELDS:
            raise CorpusError(f"note must have exactly the fields {sorted(_NOTE_FIELDS)}")
        if not all(isinstance(raw[k], int) and not isinstance(raw[k], bool) for k in _NOTE_FIELDS):
            raise CorpusError("note fields must be integers")
        notes.append(NoteEvent(start=raw["start"], pitch=raw["pitch"], duration=raw["duration"]))
    notes.sort()
    return NotePhrase(record["id"], genre, notes), split


def parse_jsonl(path: str | Path) -> Corpus:
    phrases, splits = [], []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                phrase, split = _phrase_from_record(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed record ({exc.msg})") from None
            except CorpusError as exc:
                raise CorpusError(f"line {lineno}: {exc}") from None
            if phrase.id in seen:
                raise CorpusError(f"line {lineno}: duplicate id {phrase.id!r}")
            seen.add(phrase.id)
            phrases.append(phrase)
            splits.append(split)
    return Corpus(phrases, splits, provenance=str(path))


def phrase_record(phrase: NotePhrase, split: Split = Split.TRAIN) -> dict:
    return {
        "id": phrase.id,
        "genre": phrase.genre.value,
        "notes": [{"pitch": n.pitch, "start": n.start, "duration": n.duration} for n in phrase.notes],
        "split": Split(split).value,
    }


def write_jsonl(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for phrase, split in zip(corpus.phrases, corpus.splits):
            fh.write(json.dumps(phrase_record(phrase, split)) + "\n")


# --- slicing and MIDI ingestion ---------------------------------------------

def slice_phrases(
    events: Iterable[NoteEvent],
    policy: SlicePolicy | str = SlicePolicy.NON_OVERLAPPING,
    *,
    genre: Genre | str = Genre.OTHER,
    id_prefix: str = "phrase",
    total_steps: int | None = None,
) -> list[NotePhrase]:
    """Cut a quantized monophonic note stream into 64-step phrases.

    ``total_steps`` defaults to the end of the last note. Incomplete trailing
    windows and windows without any sounding note are discarded.
    """
    events = sorted(events)
    if not events:
        return []
    if total_steps is None:
        total_steps = max(n.end for n in events)
    stride = N_STEPS if SlicePolicy(policy) is SlicePolicy.NON_OVERLAPPING else STEPS_PER_BAR
    phrases = []
    for w0 in range(0, total_steps - N_STEPS + 1, stride):
        w1 = w0 + N_STEPS
        notes = []
        for n in events:
            if n.end <= w0 or n.start >= w1:
                continue
            start, end = max(n.start, w0), min(n.end, w1)
            notes.append(NoteEvent(start=start - w0, pitch=n.pitch, duration=end - start))
        if notes:
            phrases.append(NotePhrase(f"{id_prefix}-{w0:06d}", genre, notes))
    return phrases


def _nearest_step(tick: int, ticks_per_step: float) -> int:
    return math.floor(tick / ticks_per_step + 0.5)


def _four_four_regions(time_signatures, last_tick: int) -> list[tuple[int, int]]:
    # SMF default meter is 4/4 until the first time-signature event
    changes = [(0, 4, 4)] + [ts for ts in time_signatures]
    regions = []
    for i, (tick, num, den) in enumerate(changes):
        end = changes[i + 1][0] if i + 1 < len(changes) else max(last_tick, tick) + 1
        if (num, den) == (4, 4) and end > tick:
            if regions and regions[-1][1] == tick:
                regions[-1] = (regions[-1][0], end)
            else:
                regions.append((tick, end))
    return regions


def resolve_monophony(events: Iterable[NoteEvent]) -> list[NoteEvent]:
    """Keep the highest pitch among simultaneous onsets; cut held notes at the next onset."""
    by_start: dict[int, NoteEvent] = {}
    for n in events:
        if n.start not in by_start or n.pitch > by_start[n.start].pitch:
            by_start[n.start] = n
    ordered = [by_start[s] for s in sorted(by_start)]
    out = []
    for a, b in zip(ordered, ordered[1:] + [None]):
        end = a.end if b is None else min(a.end, b.start)
        out.append(NoteEvent(start=a.start, pitch=a.pitch, duration=max(1, end - a.start)))
    return out


@dataclass
class SmfNotes:
    """Quantized notes of one track, one list per 4/4 region (steps relative to the region start)."""

    regions: list[list[NoteEvent]]
    dropped: int = 0


def quantize_smf(path: str | Path, track_index: int = 0, transpose: int = 0) -> SmfNotes:
    """Read one track, keep 4/4 regions, snap to the 16th-note grid and resolve overlaps."""
    try:
        midi = read_smf(path)
    except SMFError as exc:
        raise CorpusError(str(exc)) from None
    if not 0 <= track_index < len(midi.tracks):
        raise CorpusError(f"track {track_index} not present ({len(midi.tracks)} tracks)")
    raw = midi.tracks[track_index].notes
    if not raw:
        raise CorpusError(f"no note events on track {track_index}")
    last_tick = max(n.off_tick for n in raw)
    regions = _four_four_regions(midi.time_signatures(), last_tick)
    if not regions:
        raise CorpusError("no 4/4 region: time signature is never 4/4")

    ticks_per_step = midi.ticks_per_quarter / (STEPS_PER_BAR // 4)
    out = SmfNotes([])
    for r0, r1 in regions:
        events = []
        for n in raw:
            if not r0 <= n.on_tick < r1:
                continue
            pitch = n.pitch + transpose
            if not LOWEST_PITCH <= pitch <= HIGHEST_PITCH:
                out.dropped += 1
                continue
            start = _nearest_step(n.on_tick - r0, ticks_per_step)
            end = _nearest_step(min(n.off_tick, r1) - r0, ticks_per_step)
            events.append(NoteEvent(start=start, pitch=pitch, duration=max(1, end - start)))
        out.regions.append(resolve_monophony(events))
    if out.dropped:
        log.warning("%s: dropped %d notes outside [%d,%d]", path, out.dropped, LOWEST_PITCH, HIGHEST_PITCH)
    return out


def parse_smf(
    path: str | Path,
    track_index: int = 0,
    transpose: int = 0,
    *,
    genre: Genre | str = Genre.OTHER,
    policy: SlicePolicy | str = SlicePolicy.NON_OVERLAPPING,
) -> Corpus:
    notes = quantize_smf(path, track_index, transpose)
    stem = Path(path).stem
    phrases: list[NotePhrase] = []
    for k, events in enumerate(notes.regions):
        phrases += slice_phrases(events, policy, genre=genre, id_prefix=f"{stem}-t{track_index}-r{k}")
    return Corpus(phrases, provenance=str(path), notes_dropped=notes.dropped)


# --- pianoroll ---------------------------------------------------------------

def to_pianoroll(phrase: NotePhrase) -> np.ndarray:
    flat = np.zeros((N_STEPS, N_PITCHES), dtype=np.uint8)
    for n in phrase.notes:
        flat[n.start:n.end, n.pitch - LOWEST_PITCH] = 1
    return flat.reshape(ROLL_SHAPE)


def from_pianoroll(grid: np.ndarray, id: str = "roll", genre: Genre | str = Genre.OTHER) -> NotePhrase:
    grid = np.asarray(grid)
    if grid.shape != ROLL_SHAPE:
        raise CorpusError(f"pianoroll must have shape {ROLL_SHAPE}, got {grid.shape}")
    flat = grid.reshape(N_STEPS, N_PITCHES) != 0
    poly = np.flatnonzero(flat.sum(axis=1) > 1)
    if poly.size:
        raise CorpusError(f"polyphonic grid: more than one active pitch at steps {poly[:8].tolist()}")
    active = np.where(flat.any(axis=1), flat.argmax(axis=1), -1)
    notes = []
    step = 0
    while step < N_STEPS:
        p = active[step]
        if p < 0:
            step += 1
            continue
        end = step
        while end < N_STEPS and active[end] == p:
            end += 1
        notes.append(NoteEvent(start=step, pitch=int(p) + LOWEST_PITCH, duration=end - step))
        step = end
    return NotePhrase(id, genre, notes)


def binarize_monophonic(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Keep the most probable pitch per step if it clears ``threshold``.

    Ties go to the lower pitch (first maximum).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    probs = np.asarray(probs, dtype=float)
    if probs.shape != ROLL_SHAPE:
        raise CorpusError(f"probabilities must have shape {ROLL_SHAPE}, got {probs.shape}")
    flat = probs.reshape(N_STEPS, N_PITCHES)
    best = flat.argmax(axis=1)
    on = flat[np.arange(N_STEPS), best] >= threshold
    out = np.zeros((N_STEPS, N_PITCHES), dtype=np.uint8)
    out[np.flatnonzero(on), best[on]] = 1
    return out.reshape(ROLL_SHAPE)


def merge_repeats(phrase: NotePhrase) -> NotePhrase:
    """Fuse adjacent same-pitch notes, which a binary pianoroll cannot tell apart."""
    merged: list[NoteEvent] = []
    for n in phrase.notes:
        if merged and merged[-1].pitch == n.pitch and merged[-1].end == n.start:
            prev = merged.pop()
            n = NoteEvent(start=prev.start, pitch=n.pitch, duration=prev.duration + n.duration)
        merged.append(n)
    return NotePhrase(phrase.id, phrase.genre, merged)


def transpose_phrase(phrase: NotePhrase, semitones: int) -> NotePhrase:
    shifted = [NoteEvent(start=n.start, pitch=n.pitch + semitones, duration=n.duration) for n in phrase.notes]
    bad = [n for n in shifted if not LOWEST_PITCH <= n.pitch <= HIGHEST_PITCH]
    if bad:
        listing = ", ".join(f"step {n.start}: {n.pitch - semitones}->{n.pitch}" for n in bad)
        raise CorpusError(f"transpose by {semitones} leaves [{LOWEST_PITCH},{HIGHEST_PITCH}]: {listing}")
    return NotePhrase(phrase.id, phrase.genre, shifted)


def transpose_corpus(corpus: Corpus, semitones: int) -> Corpus:
    return Corpus(
        [transpose_phrase(p, semitones) for p in corpus.phrases],
        list(corpus.splits),
        provenance=f"{corpus.provenance}+transpose({semitones})",
    )


# --- synthetic corpora ------------------------------------------------------

@dataclass(frozen=True)
class SynthProfile:
    """Sampling weights for a synthetic melody style.

    ``durations`` maps a note length in steps to its relative weight; rests
    draw their lengths from the same table.
    """

    name: str
    genre: Genre
    pitch_class_weights: tuple[float, ...]
    octave_weights: tuple[float, ...] = (0.1, 0.4, 0.4, 0.1)
    durations: tuple[tuple[int, float], ...] = ((1, 0.1), (2, 0.35), (4, 0.35), (6, 0.05), (8, 0.15))
    rest_probability: float = 0.15

    def __post_init__(self):
        if len(self.pitch_class_weights) != 12 or sum(self.pitch_class_weights) <= 0:
            raise ValueError("pitch_class_weights needs 12 entries with positive total")
        if len(self.octave_weights) != 4 or sum(self.octave_weights) <= 0:
            raise ValueError("octave_weights needs 4 entries with positive total")


def _weights(support: Iterable[int], emphasis: dict[int, float] | None = None) -> tuple[float, ...]:
    w = [0.0] * 12
    for pc in support:
        w[pc] = 1.0
    for pc, v in (emphasis or {}).items():
        w[pc] = v
    return tuple(w)


PROFILES: dict[str, SynthProfile] = {
    "major": SynthProfile("major", Genre.JAZZ, _weights((0, 2, 4, 5, 7, 9, 11), {0: 2.0, 4: 1.5, 7: 1.5})),
    "minor": SynthProfile("minor", Genre.OTHER, _weights((0, 2, 3, 5, 7, 8, 10), {0: 2.0, 3: 1.5, 7: 1.5})),
    "mixed": SynthProfile(
        "mixed", Genre.OTHER,
        _weights((0, 2, 3, 4, 5, 7, 8, 9, 10, 11), {0: 2.0, 7: 1.5, 3: 0.6, 10: 0.6}),
        octave_weights=(0.2, 0.35, 0.35, 0.1),
        durations=((2, 0.3), (4, 0.45), (8, 0.2), (16, 0.05)),
    ),
    "even": SynthProfile("even", Genre.JAZZ, _weights((0, 2, 4, 6, 8, 10))),
    "odd": SynthProfile("odd", Genre.OTHER, _weights((1, 3, 5, 7, 9, 11))),
    # low-entropy pair with disjoint pitch classes, one octave, no rests
    "c-drone": SynthProfile(
        "c-drone", Genre.JAZZ, _weights((0, 4, 7), {0: 10.0}),
        octave_weights=(0, 1, 0, 0), durations=((4, 0.5), (8, 0.5)), rest_probability=0.0,
    ),
    "db-drone": SynthProfile(
        "db-drone", Genre.OTHER, _weights((1, 5, 8), {1: 10.0}),
        octave_weights=(0, 1, 0, 0), durations=((4, 0.5), (8, 0.5)), rest_probability=0.0,
    ),
}


def _synth_phrase(profile: SynthProfile, rng: np.random.Generator, pid: str) -> NotePhrase:
    pc_p = np.asarray(profile.pitch_class_weights, float)
    pc_p /= pc_p.sum()
    oct_p = np.asarray(profile.octave_weights, float)
    oct_p /= oct_p.sum()
    lengths = np.array([d for d, _ in profile.durations])
    len_p = np.array([w for _, w in profile.durations], float)
    len_p /= len_p.sum()
    notes = []
    pos = 0
    while pos < N_STEPS:
        dur = int(min(rng.choice(lengths, p=len_p), N_STEPS - pos))
        if rng.random() < profile.rest_probability:
            pos += dur
            continue
        pitch = LOWEST_PITCH + 12 * int(rng.choice(4, p=oct_p)) + int(rng.choice(12, p=pc_p))
        notes.append(NoteEvent(start=pos, pitch=pitch, duration=dur))
        pos += dur
    return NotePhrase(pid, profile.genre, notes)


def synth_corpus(profile: SynthProfile | str, count: int, seed: int, test_fraction: float = 0.1) -> Corpus:
    """Deterministic synthetic corpus; the last ``round(count * test_fraction)`` phrases are the test split."""
    if count < 1:
        raise CorpusError("count ≥ 1 required")
    if isinstance(profile, str):
        profile = PROFILES[profile]
    rng = np.random.default_rng(seed)
    phrases = [_synth_phrase(profile, rng, f"{profile.name}-{seed}-{i:05d}") for i in range(count)]
    n_test = int(round(count * test_fraction))
    splits = [Split.TRAIN] * (count - n_test) + [Split.TEST] * n_test
    return Corpus(phrases, splits, provenance=f"synth:{profile.name}:count={count}:seed={seed}")


def sample_ratio(source: Corpus, target: Corpus, R: int, seed: int) -> Corpus:
    """Uniformly subsample R x |target train| phrases from the source training split."""
    if R < 1:
        raise CorpusError("R must be ≥ 1")
    pool = source.train().phrases
    need = R * len(target.train())
    if need > len(pool):
        raise CorpusError(f"insufficient source phrases: R={R} needs {need}, have {len(pool)}")
    idx = np.random.default_rng(seed).choice(len(pool), size=need, replace=False)
    picked = [pool[i] for i in np.sort(idx)]
    return Corpus(picked, provenance=f"{source.provenance}|ratio R={R} seed={seed}")

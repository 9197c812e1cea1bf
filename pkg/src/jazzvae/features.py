"""Per-phrase pitch and rhythm descriptors used for overlapping-area evaluation.

Histograms and transition matrices are raw counts. Note lengths are measured
in units of 1/96 bar, so one pianoroll step is six units.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import BARS, N_STEPS, STEPS_PER_BAR
from .corpus import NotePhrase

UNITS_PER_STEP = 96 // STEPS_PER_BAR

LENGTH_CLASSES = (
    "full", "half", "quarter", "8th", "16th",
    "dot-half", "dot-quarter", "dot-8th", "dot-16th",
    "half-triplet", "quarter-triplet", "8th-triplet",
)
LENGTH_UNITS = np.array([96, 48, 24, 12, 6, 72, 36, 18, 9, 32, 16, 8])
N_LENGTH_CLASSES = len(LENGTH_CLASSES)

# report order of the evaluation tables
FEATURE_NAMES = ("NC", "NC/bar", "NLH", "NLTM", "PC", "PC/bar", "PR", "PCH", "PCTM")


@dataclass(frozen=True)
class FeatureVector:
    pc: int
    pc_per_bar: float
    pr: int
    pch: np.ndarray
    pctm: np.ndarray
    nc: int
    nc_per_bar: float
    nlh: np.ndarray
    nltm: np.ndarray

    def __getitem__(self, name: str):
        return getattr(self, _ATTR[name])

    def flat(self) -> np.ndarray:
        """All nine features concatenated; matrices row-major."""
        return np.concatenate([np.ravel(np.asarray(self[n], dtype=float)) for n in FEATURE_NAMES])


_ATTR = {
    "NC": "nc", "NC/bar": "nc_per_bar", "NLH": "nlh", "NLTM": "nltm",
    "PC": "pc", "PC/bar": "pc_per_bar", "PR": "pr", "PCH": "pch", "PCTM": "pctm",
}


def pitch_count(phrase: NotePhrase) -> int:
    return len({n.pitch for n in phrase.notes})


def _bar_span(start: int, end: int) -> range:
    return range(start // STEPS_PER_BAR, (end - 1) // STEPS_PER_BAR + 1)


def pitch_count_per_bar(phrase: NotePhrase) -> float:
    # a held note counts in every bar it sounds in
    per_bar: list[set[int]] = [set() for _ in range(BARS)]
    for n in phrase.notes:
        for b in _bar_span(n.start, n.end):
            per_bar[b].add(n.pitch)
    return sum(len(s) for s in per_bar) / BARS


def pitch_range(phrase: NotePhrase) -> int:
    if not phrase.notes:
        return 0
    pitches = [n.pitch for n in phrase.notes]
    return max(pitches) - min(pitches)


def pitch_class_histogram(phrase: NotePhrase) -> np.ndarray:
    hist = np.zeros(12)
    for n in phrase.notes:
        hist[n.pitch % 12] += 1
    return hist


def pitch_class_transition_matrix(phrase: NotePhrase) -> np.ndarray:
    m = np.zeros((12, 12))
    for a, b in zip(phrase.notes, phrase.notes[1:]):
        m[a.pitch % 12, b.pitch % 12] += 1
    return m


def note_count(phrase: NotePhrase) -> int:
    return len(phrase.notes)


def note_count_per_bar(phrase: NotePhrase) -> float:
    # onsets attribute notes to bars
    return len(phrase.notes) / BARS


def quantize_length(duration_steps: int) -> int:
    """Index into LENGTH_CLASSES of the nearest class; ties go to the shorter class.

    Lengths past a full bar land on ``full``, the longest class.
    """
    if duration_steps < 1:
        raise ValueError("duration must be at least one step")
    units = duration_steps * UNITS_PER_STEP
    gap = np.abs(LENGTH_UNITS - units)
    # sort key: distance first, then class length
    return int(np.lexsort((LENGTH_UNITS, gap))[0])


def _length_events(phrase: NotePhrase, rests: bool) -> list[int]:
    """Length-class indices of notes (and rest runs, offset by 12) in time order."""
    out = []
    pos = 0
    for n in phrase.notes:
        if rests and n.start > pos:
            out.append(N_LENGTH_CLASSES + quantize_length(n.start - pos))
        out.append(quantize_length(n.duration))
        pos = n.end
    if rests and pos < N_STEPS:
        out.append(N_LENGTH_CLASSES + quantize_length(N_STEPS - pos))
    return out


def note_length_histogram(phrase: NotePhrase, rests: bool = False) -> np.ndarray:
    size = 2 * N_LENGTH_CLASSES if rests else N_LENGTH_CLASSES
    return np.bincount(np.array(_length_events(phrase, rests), dtype=int), minlength=size).astype(float)


def note_length_transition_matrix(phrase: NotePhrase, rests: bool = False) -> np.ndarray:
    size = 2 * N_LENGTH_CLASSES if rests else N_LENGTH_CLASSES
    m = np.zeros((size, size))
    events = _length_events(phrase, rests)
    for a, b in zip(events, events[1:]):
        m[a, b] += 1
    return m


def extract(phrase: NotePhrase, rests: bool = False) -> FeatureVector:
    return FeatureVector(
        pc=pitch_count(phrase),
        pc_per_bar=pitch_count_per_bar(phrase),
        pr=pitch_range(phrase),
        pch=pitch_class_histogram(phrase),
        pctm=pitch_class_transition_matrix(phrase),
        nc=note_count(phrase),
        nc_per_bar=note_count_per_bar(phrase),
        nlh=note_length_histogram(phrase, rests),
        nltm=note_length_transition_matrix(phrase, rests),
    )


def extract_all(phrases: Iterable[NotePhrase], rests: bool = False) -> list[FeatureVector]:
    return [extract(p, rests) for p in phrases]


def feature_columns(rests: bool = False) -> list[str]:
    """Column manifest matching ``FeatureVector.flat``."""
    k = 2 * N_LENGTH_CLASSES if rests else N_LENGTH_CLASSES
    sizes = {"NC": 1, "NC/bar": 1, "NLH": k, "NLTM": k * k, "PC": 1, "PC/bar": 1, "PR": 1, "PCH": 12, "PCTM": 144}
    cols = []
    for name in FEATURE_NAMES:
        n = sizes[name]
        cols += [name] if n == 1 else [f"{name}[{i}]" for i in range(n)]
    return cols


def normalize(hist: np.ndarray) -> np.ndarray:
    """L1-normalise a histogram for display; all-zero input is returned unchanged."""
    total = hist.sum()
    return hist / total if total > 0 else hist.astype(float)

import sys
from pathlib import Path

import numpy as np
import pytest

from jazzvae import tensor as T
from jazzvae.corpus import NoteEvent, NotePhrase

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def finite_guard():
    old = T.set_finite_check(True)
    yield
    T.set_finite_check(old)


def random_phrase(rng: np.random.Generator, pid: str = "r", max_notes: int = 24) -> NotePhrase:
    """Monophonic phrase with random gaps, lengths and pitches, including repeated pitches."""
    notes = []
    pos = int(rng.integers(0, 6))
    while pos < 64 and len(notes) < max_notes:
        dur = int(rng.integers(1, 20))
        dur = min(dur, 64 - pos)
        pitch = int(notes[-1].pitch) if notes and rng.random() < 0.15 else int(rng.integers(48, 96))
        notes.append(NoteEvent(start=pos, pitch=pitch, duration=dur))
        pos += dur + (int(rng.integers(0, 8)) if rng.random() < 0.4 else 0)
    return NotePhrase(pid, "jazz", notes)


def phrase(*triples, pid="p", genre="jazz") -> NotePhrase:
    """Build a phrase from (pitch, start, duration) triples."""
    return NotePhrase(pid, genre, [NoteEvent(pitch=p, start=s, duration=d) for p, s, d in triples])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import phrase, random_phrase
from jazzvae.corpus import NoteEvent, NotePhrase, transpose_phrase
from jazzvae.features import (
    FEATURE_NAMES, LENGTH_CLASSES, LENGTH_UNITS, extract, extract_all, feature_columns, normalize,
    note_count, note_count_per_bar, note_length_histogram, note_length_transition_matrix, pitch_class_histogram,
    pitch_class_transition_matrix, pitch_count, pitch_count_per_bar, pitch_range, quantize_length,
)

Q = LENGTH_CLASSES.index("quarter")
E8 = LENGTH_CLASSES.index("8th")
FULL = LENGTH_CLASSES.index("full")

seeds = st.integers(0, 2**32 - 1)


def reverse(p: NotePhrase) -> NotePhrase:
    return NotePhrase(p.id, p.genre, sorted(NoteEvent(pitch=n.pitch, start=64 - n.end, duration=n.duration) for n in p.notes))


def test_length_table():
    assert len(LENGTH_CLASSES) == 12
    assert len(set(LENGTH_UNITS.tolist())) == 12 and (LENGTH_UNITS > 0).all()
    assert FEATURE_NAMES == ("NC", "NC/bar", "NLH", "NLTM", "PC", "PC/bar", "PR", "PCH", "PCTM")


class TestPitchFeatures:
    def test_pitch_count(self):
        assert pitch_count(phrase((60, 0, 4), (64, 4, 4), (67, 8, 4), (60, 12, 4))) == 3
        assert pitch_count(NotePhrase("e", "jazz")) == 0
        assert pitch_count(phrase(*[(48 + i, i, 1) for i in range(48)])) == 48

    def test_pitch_count_per_bar(self):
        assert pitch_count_per_bar(phrase((60, 0, 64))) == 1.0
        assert pitch_count_per_bar(phrase((60, 0, 4))) == 0.25
        assert pitch_count_per_bar(phrase(*[(48 + i % 48, i, 1) for i in range(64)])) == 16.0

    def test_held_note_crosses_bar(self):
        assert pitch_count_per_bar(phrase((60, 12, 8))) == 0.5

    def test_pitch_range(self):
        assert pitch_range(phrase((60, 0, 4))) == 0
        assert pitch_range(phrase((48, 0, 4), (95, 4, 4))) == 47
        assert pitch_range(NotePhrase("e", "jazz")) == 0

    def test_pch(self):
        h = pitch_class_histogram(phrase((60, 0, 4), (48, 4, 4), (72, 8, 4)))
        assert h[0] == 3 and h.sum() == 3
        assert not pitch_class_histogram(NotePhrase("e", "jazz")).any()
        assert (pitch_class_histogram(phrase(*[(60 + k, 4 * k, 4) for k in range(12)])) == 1).all()

    def test_pctm(self):
        m = pitch_class_transition_matrix(phrase((60, 0, 4), (62, 4, 4), (60, 8, 4)))
        assert m[0, 2] == 1 and m[2, 0] == 1 and m.sum() == 2
        assert not pitch_class_transition_matrix(phrase((60, 0, 4))).any()
        same = pitch_class_transition_matrix(phrase((60, 0, 4), (60, 8, 4)))
        assert same[0, 0] == 1

    def test_note_counts(self):
        assert note_count(NotePhrase("e", "jazz")) == 0
        assert note_count(phrase(*[(60, i, 1) for i in range(64)])) == 64
        assert note_count(phrase((60, 0, 64))) == 1
        assert note_count_per_bar(phrase(*[(60, 16 * b, 4) for b in range(4)])) == 1.0
        assert note_count_per_bar(phrase(*[(60 + i, 4 * i, 4) for i in range(4)])) == 1.0
        assert note_count_per_bar(NotePhrase("e", "jazz")) == 0.0


class TestLengths:
    @pytest.mark.parametrize("steps,name", [(4, "quarter"), (5, "half-triplet"), (16, "full"), (1, "16th"),
                                            (2, "8th"), (3, "dot-8th"), (6, "dot-quarter"), (64, "full")])
    def test_quantize(self, steps, name):
        assert LENGTH_CLASSES[quantize_length(steps)] == name

    def test_quantize_matches_scan(self):
        for steps in range(1, 65):
            assert quantize_length(steps) == oracles.nearest_class(steps)

    def test_tie_goes_shorter(self):
        # 7 steps = 42 units sits between 36 and 48: 6 each way
        assert LENGTH_CLASSES[quantize_length(7)] == "dot-quarter"

    def test_nlh(self):
        assert note_length_histogram(phrase((60, 0, 4)))[Q] == 1
        empty = note_length_histogram(NotePhrase("e", "jazz"), rests=True)
        assert empty.shape == (24,) and empty[12 + FULL] == 1 and empty.sum() == 1
        assert note_length_histogram(phrase((60, 0, 2), (62, 2, 2)))[E8] == 2

    def test_nltm(self):
        assert note_length_transition_matrix(phrase((60, 0, 4), (62, 4, 4)))[Q, Q] == 1
        assert not note_length_transition_matrix(phrase((60, 0, 4))).any()
        m = note_length_transition_matrix(phrase((60, 0, 4), (62, 8, 4)), rests=True)
        assert m.shape == (24, 24)
        assert m[Q, 12 + Q] == 1 and m[12 + Q, Q] == 1

    def test_rest_dims(self):
        fv = extract(phrase((60, 0, 4)), rests=True)
        assert fv.nlh.shape == (24,) and fv.nltm.shape == (24, 24)
        assert len(feature_columns(True)) == len(feature_columns(False)) + 12 + 24 * 24 - 144


def test_empty_phrase_all_zero():
    fv = extract(NotePhrase("e", "jazz"))
    for name in FEATURE_NAMES:
        assert not np.any(fv[name])


def _assert_matches_oracle(p, rests):
    fv = extract(p, rests)
    ref = oracles.features(p, rests)
    for name in ("NC", "PC", "PR"):
        assert fv[name] == ref[name], name
    for name in ("NC/bar", "PC/bar"):
        assert abs(fv[name] - ref[name]) <= 1e-12, name
    for name in ("PCH", "PCTM", "NLH", "NLTM"):
        assert np.array_equal(np.asarray(fv[name]), np.asarray(ref[name])), name


def test_oracle_equivalence_1000_phrases():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    for i in range(1000):
        p = random_phrase(rng, f"r{i}")
        _assert_matches_oracle(p, rests=bool(i % 2))
    assert time.perf_counter() - t0 < 60


@settings(max_examples=150, deadline=None)
@given(seeds)
def test_sum_laws(seed):
    fv = extract(random_phrase(np.random.default_rng(seed)))
    assert fv.pch.sum() == fv.nc
    assert fv.pctm.sum() == max(fv.nc - 1, 0)
    assert fv.nlh.sum() == fv.nc
    assert fv.pc <= 48 and fv.pr <= 47


@settings(max_examples=150, deadline=None)
@given(seeds, st.integers(-12, 12))
def test_transposition(seed, k):
    p = random_phrase(np.random.default_rng(seed))
    lo, hi = min(n.pitch for n in p.notes), max(n.pitch for n in p.notes)
    if lo + k < 48 or hi + k > 95:
        k = 0
    a, b = extract(p), extract(transpose_phrase(p, k))
    assert np.array_equal(np.roll(a.pch, k), b.pch)
    assert np.array_equal(np.roll(np.roll(a.pctm, k, 0), k, 1), b.pctm)
    for name in ("PC", "NC", "PR", "NC/bar", "PC/bar"):
        assert a[name] == b[name]
    assert np.array_equal(a.nlh, b.nlh) and np.array_equal(a.nltm, b.nltm)


@settings(max_examples=150, deadline=None)
@given(seeds, st.booleans())
def test_time_reversal(seed, rests):
    p = random_phrase(np.random.default_rng(seed))
    a, b = extract(p, rests), extract(reverse(p), rests)
    assert np.array_equal(a.pctm.T, b.pctm)
    assert np.array_equal(a.nltm.T, b.nltm)
    for name in ("PC", "NC", "PR", "PC/bar"):
        assert a[name] == b[name]
    assert np.array_equal(a.pch, b.pch) and np.array_equal(a.nlh, b.nlh)


def test_extract_all_deterministic():
    rng = np.random.default_rng(0)
    ps = [random_phrase(rng, f"p{i}") for i in range(20)]
    a, b = extract_all(ps), extract_all(ps)
    assert all(np.array_equal(x.flat(), y.flat()) for x, y in zip(a, b))
    assert all(np.array_equal(x.flat(), extract(p).flat()) for x, p in zip(a, ps))


def test_normalize():
    assert np.allclose(normalize(np.array([1.0, 3.0])), [0.25, 0.75])
    assert not normalize(np.zeros(12)).any()

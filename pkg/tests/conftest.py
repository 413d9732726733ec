"""Shared builders: raw SMF bytes, small scores and random melodies."""

import struct
from typing import List, Sequence, Tuple

import numpy as np
import pytest

from favtune_cli.midi_io import Note, Score, Track
from favtune_cli.remi_codec import TokenSequence, encode


def mtrk(body: bytes, end: bool = True) -> bytes:
    if end:
        body += b"\x00\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + body


def smf(chunks: Sequence[bytes], fmt: int = 0, division: int = 480, ntrks: int = None) -> bytes:
    count = len(chunks) if ntrks is None else ntrks
    return b"MThd" + struct.pack(">IHHH", 6, fmt, count, division) + b"".join(chunks)


def melody(pitches: Sequence[int], step: int = 240, velocity: int = 80, tpq: int = 480) -> Score:
    """One track of back-to-back notes, `step` ticks each"""
    notes = [Note(p, velocity, i * step, step) for i, p in enumerate(pitches)]
    return Score(ticks_per_quarter=tpq, tracks=(Track(name="melody", notes=tuple(notes)),))


def random_score(rng: np.random.Generator, n_notes: int = 24, tpq: int = 480) -> Score:
    """On-grid notes (16 positions per 4/4 bar, 32nd-note durations) in one track"""
    notes: List[Note] = []
    slot = 0
    for _ in range(n_notes):
        slot += int(rng.integers(0, 4))
        start = slot * tpq // 4
        duration = int(rng.integers(1, 17)) * tpq // 8
        notes.append(Note(int(rng.integers(48, 84)), int(rng.integers(1, 32)) * 4 + 2, start, duration))
    return Score(ticks_per_quarter=tpq, tracks=(Track(notes=tuple(notes)),))


def note_on_stream(seq: TokenSequence) -> List[int]:
    return [e.value for e in seq.events() if e.family.value == "NoteOn"]


SCALE_UP_DOWN: Tuple[int, ...] = (60, 62, 64, 65, 67, 65, 64, 62) * 4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def favorite_score():
    return melody(SCALE_UP_DOWN)


@pytest.fixture
def input_score():
    return melody((60, 64, 67, 72, 67, 64, 60, 55) * 4)


@pytest.fixture
def favorite_tokens(favorite_score):
    return encode(favorite_score, 0)

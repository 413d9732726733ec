"""Bundled public-domain melodies used to pretrain the attention model"""
from typing import Dict, List, Sequence, Tuple

from favtune_cli.midi_io import Note, Score, Track
from favtune_cli.remi_codec import TokenSequence, encode

TICKS_PER_QUARTER = 480
EIGHTH = TICKS_PER_QUARTER // 2

G3 = 55
C, D, E, F, G, A = 60, 62, 64, 65, 67, 69

# (pitch, length in eighth notes)
MELODIES: Dict[str, Sequence[Tuple[int, int]]] = {
    "twinkle": [
        (C, 2), (C, 2), (G, 2), (G, 2), (A, 2), (A, 2), (G, 4),
        (F, 2), (F, 2), (E, 2), (E, 2), (D, 2), (D, 2), (C, 4),
        (G, 2), (G, 2), (F, 2), (F, 2), (E, 2), (E, 2), (D, 4),
        (G, 2), (G, 2), (F, 2), (F, 2), (E, 2), (E, 2), (D, 4),
        (C, 2), (C, 2), (G, 2), (G, 2), (A, 2), (A, 2), (G, 4),
        (F, 2), (F, 2), (E, 2), (E, 2), (D, 2), (D, 2), (C, 4),
    ],
    "ode_to_joy": [
        (E, 2), (E, 2), (F, 2), (G, 2), (G, 2), (F, 2), (E, 2), (D, 2),
        (C, 2), (C, 2), (D, 2), (E, 2), (E, 3), (D, 1), (D, 4),
        (E, 2), (E, 2), (F, 2), (G, 2), (G, 2), (F, 2), (E, 2), (D, 2),
        (C, 2), (C, 2), (D, 2), (E, 2), (D, 3), (C, 1), (C, 4),
    ],
    "frere_jacques": [
        (C, 2), (D, 2), (E, 2), (C, 2), (C, 2), (D, 2), (E, 2), (C, 2),
        (E, 2), (F, 2), (G, 4), (E, 2), (F, 2), (G, 4),
        (G, 1), (A, 1), (G, 1), (F, 1), (E, 2), (C, 2),
        (G, 1), (A, 1), (G, 1), (F, 1), (E, 2), (C, 2),
        (C, 2), (G3, 2), (C, 4), (C, 2), (G3, 2), (C, 4),
    ],
    "mary_had_a_little_lamb": [
        (E, 2), (D, 2), (C, 2), (D, 2), (E, 2), (E, 2), (E, 4),
        (D, 2), (D, 2), (D, 4), (E, 2), (G, 2), (G, 4),
        (E, 2), (D, 2), (C, 2), (D, 2), (E, 2), (E, 2), (E, 2), (E, 2),
        (D, 2), (D, 2), (E, 2), (D, 2), (C, 8),
    ],
    "hot_cross_buns": [
        (E, 2), (D, 2), (C, 4), (E, 2), (D, 2), (C, 4),
        (C, 1), (C, 1), (C, 1), (C, 1), (D, 1), (D, 1), (D, 1), (D, 1),
        (E, 2), (D, 2), (C, 4),
    ],
}


def melody_score(name: str, velocity: int = 80) -> Score:
    notes = []
    tick = 0
    for pitch, eighths in MELODIES[name]:
        notes.append(Note(pitch, velocity, tick, eighths * EIGHTH))
        tick += eighths * EIGHTH
    return Score(ticks_per_quarter=TICKS_PER_QUARTER, tracks=(Track(name=name, notes=tuple(notes)),))


def corpus_scores() -> List[Score]:
    return [melody_score(name) for name in MELODIES]


def corpus_tokens() -> List[TokenSequence]:
    return [encode(score, 0) for score in corpus_scores()]

"""Tests for REMI encoding, decoding, grammar and token text."""

import numpy as np
import pytest

from favtune_cli.errors import EmptyTrack, GrammarViolation, OutOfVocabulary, TokenFormatError
from favtune_cli.midi_io import Note, Score, Track
from favtune_cli.remi_codec import (
    TOKEN_HEADER,
    VOCAB,
    EventFamily,
    EventToken,
    TokenSequence,
    check_grammar,
    classes_of,
    decode,
    detect_chord,
    dumps_tokens,
    encode,
    family_of,
    loads_tokens,
    segment,
    selected_stream,
)
from tests.conftest import melody, random_score

B = EventFamily

SINGLE_NOTE_EVENTS = [
    EventToken(B.BAR, 0),
    EventToken(B.POSITION, 0),
    EventToken(B.TEMPO_CLASS, 1),
    EventToken(B.TEMPO_VALUE, 30),
    EventToken(B.POSITION, 0),
    EventToken(B.NOTE_VELOCITY, 16),
    EventToken(B.NOTE_ON, 60),
    EventToken(B.NOTE_DURATION, 7),
]


def _one_note_score(note: Note) -> Score:
    return Score(tracks=(Track(notes=(note,)),))


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class TestVocabulary:
    def test_size(self):
        assert VOCAB.size == 364

    def test_first_id_is_bar(self):
        assert family_of(0) is B.BAR

    def test_note_on_block(self):
        ids = classes_of(B.NOTE_ON)
        assert len(ids) == 128
        assert all(family_of(i) is B.NOTE_ON for i in ids)

    def test_out_of_range(self):
        with pytest.raises(OutOfVocabulary):
            family_of(364)
        with pytest.raises(OutOfVocabulary):
            VOCAB.id_of(EventToken(B.POSITION, 16))

    def test_family_names(self):
        assert B.parse("note-on") is B.NOTE_ON
        assert B.parse("note_duration") is B.NOTE_DURATION


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

class TestEncode:
    def test_single_quarter_note(self):
        seq = encode(_one_note_score(Note(60, 64, 0, 480)))
        assert seq.events() == SINGLE_NOTE_EVENTS

    def test_empty_track(self):
        with pytest.raises(EmptyTrack):
            encode(Score(tracks=(Track(),)))

    def test_simultaneous_notes_by_ascending_pitch(self):
        score = Score(tracks=(Track(notes=(Note(64, 64, 0, 480), Note(60, 64, 0, 480))),))
        pitches = [e.value for e in encode(score).events() if e.family is B.NOTE_ON]
        assert pitches == [60, 64]

    def test_chord_token_for_triad(self):
        score = Score(tracks=(Track(notes=tuple(Note(p, 64, 0, 480) for p in (60, 64, 67))),))
        chords = [e.value for e in encode(score).events() if e.family is B.CHORD]
        assert chords == [0]  # C major

    def test_empty_bars_are_kept(self):
        seq = encode(_one_note_score(Note(60, 64, 3 * 1920, 480)))
        assert seq.count(B.BAR) == 4

    def test_tempo_change_emits_new_tempo_group(self):
        score = Score(
            tracks=(Track(notes=(Note(60, 64, 0, 480), Note(62, 64, 1920, 480))),),
            tempo_map=((0, 500000), (1920, 600000)),
        )
        events = encode(score).events()
        values = [e.value for e in events if e.family is B.TEMPO_VALUE]
        assert values == [30, 10]  # 120 and 100 BPM

    def test_family_counts_match_notes(self, rng):
        for _ in range(10):
            score = random_score(rng)
            seq = encode(score)
            n = len(score.tracks[0].notes)
            assert seq.count(B.NOTE_ON) == n
            assert seq.count(B.NOTE_VELOCITY) == n
            assert seq.count(B.NOTE_DURATION) == n

    def test_output_obeys_grammar(self, rng):
        for _ in range(10):
            check_grammar(encode(random_score(rng)).tokens)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

class TestDecode:
    def test_single_note_onto_empty_template(self):
        score = decode(TokenSequence.from_events(SINGLE_NOTE_EVENTS), Score())
        assert score.tracks[0].notes == (Note(60, 66, 0, 480),)
        assert score.tempo_map == ((0, 500000),)

    def test_lone_bar(self):
        score = decode(TokenSequence.from_events([EventToken(B.BAR, 0)]), Score())
        assert score.tracks[0].notes == ()

    def test_note_on_without_velocity(self):
        events = [EventToken(B.BAR, 0), EventToken(B.POSITION, 0), EventToken(B.NOTE_ON, 60),
                  EventToken(B.NOTE_DURATION, 7)]
        with pytest.raises(GrammarViolation) as info:
            decode(TokenSequence.from_events(events), Score())
        assert info.value.index == 2

    def test_other_tracks_untouched(self):
        bass = Track(name="bass", notes=(Note(36, 90, 0, 1920),))
        template = Score(tracks=(Track(name="lead", notes=(Note(72, 30, 0, 10),)), bass))
        score = decode(TokenSequence.from_events(SINGLE_NOTE_EVENTS), template, track=0)
        assert score.tracks[1] == bass
        assert score.tracks[0].name == "lead"
        assert score.tracks[0].notes == (Note(60, 66, 0, 480),)

    def test_encode_decode_fixed_point(self, rng):
        for _ in range(20):
            seq = encode(random_score(rng))
            again = encode(decode(seq, Score(tracks=(Track(),))))
            assert again == seq

    def test_unfinished_group(self):
        events = SINGLE_NOTE_EVENTS[:-1]
        with pytest.raises(GrammarViolation) as info:
            check_grammar(TokenSequence.from_events(events).tokens)
        assert info.value.index == len(events)


# ---------------------------------------------------------------------------
# Segments, streams and chords
# ---------------------------------------------------------------------------

class TestSegment:
    @pytest.mark.parametrize("n,expected", [(300, 2), (128, 1), (100, 0)])
    def test_counts(self, n, expected):
        segments = segment(TokenSequence(tuple([0] * n)), 128)
        assert len(segments) == expected
        assert all(len(s) == 128 for s in segments)

    def test_too_short_window(self):
        with pytest.raises(ValueError):
            segment(TokenSequence((0,)), 4)


class TestSelectedStream:
    def test_note_on_classes(self):
        seq = encode(melody([60, 62, 64]))
        assert selected_stream(seq, [B.NOTE_ON]).classes == (60, 62, 64)

    def test_transposition_keeps_positions(self):
        a = encode(melody([60, 62, 64, 60]))
        b = encode(melody([67, 69, 71, 67]))
        assert selected_stream(a, [B.POSITION]) == selected_stream(b, [B.POSITION])


class TestDetectChord:
    def test_minor(self):
        assert detect_chord({9, 0, 4}) == 9 * 5 + 1  # A minor

    def test_dominant_seventh_beats_triad(self):
        assert detect_chord({7, 11, 2, 5}) == 7 * 5 + 4

    def test_two_tones_is_no_chord(self):
        assert detect_chord({0, 4}) is None


# ---------------------------------------------------------------------------
# Token text
# ---------------------------------------------------------------------------

class TestTokenText:
    def test_dump_format(self):
        text = dumps_tokens(TokenSequence.from_events(SINGLE_NOTE_EVENTS))
        lines = text.splitlines()
        assert lines[0] == TOKEN_HEADER
        assert lines[1:4] == ["Bar:0", "Position:0", "TempoClass:1"]

    def test_round_trip(self, rng):
        seq = encode(random_score(rng))
        assert loads_tokens(dumps_tokens(seq)) == seq

    def test_bad_header(self):
        with pytest.raises(TokenFormatError):
            loads_tokens("Bar:0\n")

    def test_bad_line_number(self):
        with pytest.raises(TokenFormatError) as info:
            loads_tokens(f"{TOKEN_HEADER}\nBar:0\nNoteOn:200\n")
        assert info.value.line == 3

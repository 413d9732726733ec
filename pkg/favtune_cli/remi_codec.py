"""REMI tokens: a Score track <-> a flat sequence of integer token ids.

Eight event families share one contiguous id space (C = 364). Onsets sit on a
16-step grid per bar, durations are counted in 32nd notes and velocities in 32
bins, so decode(encode(s)) lands on the grid and re-encodes to the same tokens.
"""
import hashlib
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from favtune_cli.errors import EmptyTrack, GrammarViolation, OutOfVocabulary, TokenFormatError
from favtune_cli.midi_io import BarGrid, Note, Score, Track, note_sort_key

logger = logging.getLogger(__name__)

CODEC_VERSION = 1
POSITIONS_PER_BAR = 16
DURATION_STEPS_PER_QUARTER = 8  # 32nd notes
MIN_BPM, MAX_BPM, BPM_BAND = 30, 209, 60


class EventFamily(str, Enum):
    BAR = "Bar"
    POSITION = "Position"
    CHORD = "Chord"
    TEMPO_CLASS = "TempoClass"
    TEMPO_VALUE = "TempoValue"
    NOTE_VELOCITY = "NoteVelocity"
    NOTE_ON = "NoteOn"
    NOTE_DURATION = "NoteDuration"

    @classmethod
    def parse(cls, name: str) -> "EventFamily":
        """Accept 'NoteOn', 'note-on' or 'note_on'"""
        key = name.strip().replace("-", "").replace("_", "").lower()
        for family in cls:
            if family.value.lower() == key:
                return family
        raise ValueError(f"unknown event family '{name}'")


FAMILY_SIZES: Tuple[Tuple[EventFamily, int], ...] = (
    (EventFamily.BAR, 1),
    (EventFamily.POSITION, POSITIONS_PER_BAR),
    (EventFamily.CHORD, 60),
    (EventFamily.TEMPO_CLASS, 3),
    (EventFamily.TEMPO_VALUE, 60),
    (EventFamily.NOTE_VELOCITY, 32),
    (EventFamily.NOTE_ON, 128),
    (EventFamily.NOTE_DURATION, 64),
)

CHORD_QUALITIES: Tuple[Tuple[str, frozenset], ...] = (
    ("maj", frozenset({0, 4, 7})),
    ("min", frozenset({0, 3, 7})),
    ("dim", frozenset({0, 3, 6})),
    ("aug", frozenset({0, 4, 8})),
    ("dom7", frozenset({0, 4, 7, 10})),
)


@dataclass(frozen=True)
class EventToken:
    family: EventFamily
    value: int

    def __str__(self):
        return f"{self.family.value}:{self.value}"


class Vocabulary:
    """Bijection between token ids and (family, class) pairs"""

    def __init__(self, sizes: Sequence[Tuple[EventFamily, int]] = FAMILY_SIZES):
        self._sizes = tuple(sizes)
        self._offsets: Dict[EventFamily, int] = {}
        offset = 0
        for family, size in self._sizes:
            self._offsets[family] = offset
            offset += size
        self.size = offset
        self._family_by_id = [family for family, size in self._sizes for _ in range(size)]
        layout = ",".join(f"{f.value}:{n}" for f, n in self._sizes)
        self.hash = hashlib.sha256(f"remi;q={POSITIONS_PER_BAR};v={CODEC_VERSION};{layout}".encode()).hexdigest()

    def __len__(self):
        return self.size

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and other.hash == self.hash

    def __hash__(self):
        return hash(self.hash)

    def classes_of(self, family: EventFamily) -> range:
        start = self._offsets[family]
        return range(start, start + dict(self._sizes)[family])

    def family_of(self, token_id: int) -> EventFamily:
        if not 0 <= token_id < self.size:
            raise OutOfVocabulary(f"token id {token_id} outside 0..{self.size - 1}")
        return self._family_by_id[token_id]

    def id_of(self, token: EventToken) -> int:
        ids = self.classes_of(token.family)
        if not 0 <= token.value < len(ids):
            raise OutOfVocabulary(f"{token.family.value} class {token.value} outside 0..{len(ids) - 1}")
        return ids.start + token.value

    def token_of(self, token_id: int) -> EventToken:
        family = self.family_of(token_id)
        return EventToken(family, token_id - self._offsets[family])

    def class_of(self, token_id: int) -> int:
        return token_id - self._offsets[self.family_of(token_id)]


VOCAB = Vocabulary()


def family_of(token_id: int) -> EventFamily:
    return VOCAB.family_of(token_id)


def classes_of(family: EventFamily) -> range:
    return VOCAB.classes_of(family)


@dataclass(frozen=True)
class TokenSequence:
    tokens: Tuple[int, ...]
    vocabulary: Vocabulary = VOCAB

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def events(self) -> List[EventToken]:
        return [self.vocabulary.token_of(t) for t in self.tokens]

    def count(self, family: EventFamily) -> int:
        ids = self.vocabulary.classes_of(family)
        return sum(1 for t in self.tokens if t in ids)

    @classmethod
    def from_events(cls, events: Iterable[EventToken], vocabulary: Vocabulary = VOCAB) -> "TokenSequence":
        return cls(tuple(vocabulary.id_of(e) for e in events), vocabulary)


@dataclass(frozen=True)
class SelectedEventStream:
    """Class values of the selected-family tokens, in order of appearance"""

    classes: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))

    def __len__(self):
        return len(self.classes)


def selected_stream(seq: TokenSequence, families: Iterable[EventFamily]) -> SelectedEventStream:
    wanted = set(families)
    vocab = seq.vocabulary
    return SelectedEventStream(tuple(vocab.class_of(t) for t in seq.tokens if vocab.family_of(t) in wanted))


# grammar

_FOLLOWERS = {
    None: {EventFamily.BAR},
    EventFamily.BAR: {EventFamily.BAR, EventFamily.POSITION},
    EventFamily.POSITION: {EventFamily.CHORD, EventFamily.TEMPO_CLASS, EventFamily.NOTE_VELOCITY},
    EventFamily.CHORD: {EventFamily.BAR, EventFamily.POSITION},
    EventFamily.TEMPO_CLASS: {EventFamily.TEMPO_VALUE},
    EventFamily.TEMPO_VALUE: {EventFamily.BAR, EventFamily.POSITION},
    EventFamily.NOTE_VELOCITY: {EventFamily.NOTE_ON},
    EventFamily.NOTE_ON: {EventFamily.NOTE_DURATION},
    EventFamily.NOTE_DURATION: {EventFamily.BAR, EventFamily.POSITION},
}
_CAN_END = {None, EventFamily.BAR, EventFamily.CHORD, EventFamily.TEMPO_VALUE, EventFamily.NOTE_DURATION}


def check_grammar(tokens: Sequence[int], vocabulary: Vocabulary = VOCAB):
    """Raise GrammarViolation at the first token that breaks the REMI grammar"""
    previous: Optional[EventFamily] = None
    for index, token_id in enumerate(tokens):
        try:
            family = vocabulary.family_of(token_id)
        except OutOfVocabulary as e:
            raise GrammarViolation(index, str(e)) from e
        if family not in _FOLLOWERS[previous]:
            after = previous.value if previous else "start of sequence"
            raise GrammarViolation(index, f"{family.value} cannot follow {after}")
        previous = family
    if previous not in _CAN_END:
        raise GrammarViolation(len(tokens), f"sequence ends inside a {previous.value} group")


# quantization helpers


def _nearest_down(numerator: int, denominator: int) -> int:
    """round(numerator / denominator), halves going down"""
    return (2 * numerator + denominator - 1) // (2 * denominator)


def duration_steps(duration_ticks: int, ticks_per_quarter: int) -> int:
    steps = _nearest_down(duration_ticks * DURATION_STEPS_PER_QUARTER, ticks_per_quarter)
    return min(64, max(1, steps))


def duration_ticks(steps: int, ticks_per_quarter: int) -> int:
    return max(1, (2 * steps * ticks_per_quarter + DURATION_STEPS_PER_QUARTER) // (2 * DURATION_STEPS_PER_QUARTER))


def position_tick(grid: BarGrid, bar: int, position: int) -> int:
    start, length, _ = grid.bar(bar)
    return start + position * length // POSITIONS_PER_BAR


def bpm_of(microseconds_per_quarter: int) -> int:
    bpm = int(60_000_000 / microseconds_per_quarter + 0.5)
    return min(MAX_BPM, max(MIN_BPM, bpm))


def tempo_classes(bpm: int) -> Tuple[int, int]:
    offset = min(MAX_BPM, max(MIN_BPM, bpm)) - MIN_BPM
    return offset // BPM_BAND, offset % BPM_BAND


@dataclass(frozen=True)
class _QNote:
    bar: int
    position: int
    pitch: int
    velocity_bin: int
    duration_class: int


def _quantize(score: Score, notes: Sequence[Note], grid: BarGrid) -> List[_QNote]:
    tpq = score.ticks_per_quarter
    out = []
    for note in notes:
        bar = grid.index_of(note.start_tick)
        start, length, _ = grid.bar(bar)
        position = _nearest_down((note.start_tick - start) * POSITIONS_PER_BAR, length)
        if position >= POSITIONS_PER_BAR:
            bar, position = bar + 1, 0
        out.append(_QNote(bar, position, note.pitch, note.velocity // 4, duration_steps(note.duration_ticks, tpq) - 1))
    return out


def detect_chord(pitch_classes: Iterable[int]) -> Optional[int]:
    """Chord class (root * 5 + quality) for a set of sounding pitch classes, or None"""
    sounding = set(pitch_classes)
    best = None
    best_key = None
    for root in range(12):
        for quality, (_, template) in enumerate(CHORD_QUALITIES):
            tones = {(root + i) % 12 for i in template}
            matched = len(tones & sounding)
            if matched < 3:
                continue
            key = (-matched, -matched / len(tones), root, quality)
            if best_key is None or key < best_key:
                best_key, best = key, root * 5 + quality
    return best


def _beats(grid: BarGrid, n_bars: int):
    """(bar, position, tick, next beat tick) for every beat of the first n_bars bars"""
    for bar in range(n_bars):
        start, length, numerator = grid.bar(bar)
        for k in range(numerator):
            position = POSITIONS_PER_BAR * k // numerator
            tick = start + k * length // numerator
            end = start + (k + 1) * length // numerator
            yield bar, position, tick, end


def _tempo_at(tempo_map: Sequence[Tuple[int, int]], tick: int) -> int:
    current = tempo_map[0][1]
    for at, tempo in tempo_map:
        if at > tick:
            break
        current = tempo
    return current


def encode(score: Score, track: int = 0) -> TokenSequence:
    """Encode one track of `score` as a REMI token sequence"""
    notes = score.tracks[track].notes
    if not notes:
        raise EmptyTrack(f"track {track} has no notes")
    grid = BarGrid.of(score)
    tpq = score.ticks_per_quarter
    qnotes = _quantize(score, notes, grid)
    n_bars = max(q.bar for q in qnotes) + 1

    spans = []
    for q in qnotes:
        onset = position_tick(grid, q.bar, q.position)
        spans.append((onset, onset + duration_ticks(q.duration_class + 1, tpq), q.pitch % 12))

    # (bar, position) -> chord class / tempo bpm
    chords: Dict[Tuple[int, int], int] = {}
    tempos: Dict[Tuple[int, int], int] = {}
    last_chord: Optional[int] = None
    last_bpm: Optional[int] = None
    for bar, position, tick, end in _beats(grid, n_bars):
        chord = detect_chord(pc for onset, off, pc in spans if onset < end and off > tick)
        if chord is not None and chord != last_chord:
            chords[(bar, position)] = chord
        last_chord = chord
        bpm = bpm_of(_tempo_at(score.tempo_map, tick))
        if bpm != last_bpm:
            tempos[(bar, position)] = bpm
            last_bpm = bpm

    by_slot: Dict[Tuple[int, int], List[_QNote]] = {}
    for q in qnotes:
        by_slot.setdefault((q.bar, q.position), []).append(q)

    events: List[EventToken] = []
    for bar in range(n_bars):
        events.append(EventToken(EventFamily.BAR, 0))
        for position in range(POSITIONS_PER_BAR):
            slot = (bar, position)
            if slot in chords:
                events += [EventToken(EventFamily.POSITION, position), EventToken(EventFamily.CHORD, chords[slot])]
            if slot in tempos:
                tempo_class, tempo_value = tempo_classes(tempos[slot])
                events += [
                    EventToken(EventFamily.POSITION, position),
                    EventToken(EventFamily.TEMPO_CLASS, tempo_class),
                    EventToken(EventFamily.TEMPO_VALUE, tempo_value),
                ]
            for q in sorted(by_slot.get(slot, ()), key=lambda q: (q.pitch, q.duration_class, q.velocity_bin)):
                events += [
                    EventToken(EventFamily.POSITION, position),
                    EventToken(EventFamily.NOTE_VELOCITY, q.velocity_bin),
                    EventToken(EventFamily.NOTE_ON, q.pitch),
                    EventToken(EventFamily.NOTE_DURATION, q.duration_class),
                ]
    seq = TokenSequence.from_events(events)
    logger.debug("encoded track %d: %d notes, %d bars, %d tokens", track, len(notes), n_bars, len(seq))
    return seq


def decode(seq: TokenSequence, template: Score, track: int = 0, tempo_from_tokens: bool = True) -> Score:
    """Rebuild `track` of `template` from tokens; every other track is kept as is"""
    check_grammar(seq.tokens, seq.vocabulary)
    grid = BarGrid.of(template)
    tpq = template.ticks_per_quarter
    bar, position, velocity, pitch, tempo_class = -1, 0, 0, 0, 0
    notes: List[Note] = []
    tempos: List[Tuple[int, int]] = []
    for event in seq.events():
        family, value = event.family, event.value
        if family is EventFamily.BAR:
            bar += 1
        elif family is EventFamily.POSITION:
            position = value
        elif family is EventFamily.TEMPO_CLASS:
            tempo_class = value
        elif family is EventFamily.TEMPO_VALUE:
            bpm = MIN_BPM + tempo_class * BPM_BAND + value
            tempos.append((position_tick(grid, bar, position), int(60_000_000 / bpm + 0.5)))
        elif family is EventFamily.NOTE_VELOCITY:
            velocity = value * 4 + 2
        elif family is EventFamily.NOTE_ON:
            pitch = value
        elif family is EventFamily.NOTE_DURATION:
            start = position_tick(grid, bar, position)
            notes.append(Note(pitch, velocity, start, duration_ticks(value + 1, tpq)))

    tracks = list(template.tracks)
    if track < len(tracks):
        tracks[track] = replace(tracks[track], notes=tuple(sorted(notes, key=note_sort_key)))
    elif track == len(tracks):
        tracks.append(Track(notes=tuple(notes)))
    else:
        raise IndexError(f"track {track} is beyond the template's {len(tracks)} tracks")

    tempo_map = template.tempo_map
    if tempo_from_tokens and tempos:
        by_tick = dict(tempos)
        if 0 not in by_tick:
            by_tick[0] = template.tempo_map[0][1]
        tempo_map = tuple(sorted(by_tick.items()))
    return replace(template, tracks=tuple(tracks), tempo_map=tempo_map)


def segment(seq: TokenSequence, length: int) -> List[TokenSequence]:
    """Consecutive non-overlapping windows of exactly `length` tokens"""
    if length < 8:
        raise ValueError("segment length must be at least 8")
    count = len(seq) // length
    return [TokenSequence(seq.tokens[i * length:(i + 1) * length], seq.vocabulary) for i in range(count)]


# text interchange

TOKEN_HEADER = f"#remi q={POSITIONS_PER_BAR} C={VOCAB.size} version={CODEC_VERSION}"


def dumps_tokens(seq: TokenSequence) -> str:
    lines = [TOKEN_HEADER]
    lines.extend(str(event) for event in seq.events())
    return "\n".join(lines) + "\n"


def loads_tokens(text: str, vocabulary: Vocabulary = VOCAB) -> TokenSequence:
    lines = text.splitlines()
    if not lines or lines[0].strip() != TOKEN_HEADER:
        raise TokenFormatError(1, f"expected header '{TOKEN_HEADER}'")
    families = {f.value: f for f in EventFamily}
    tokens = []
    for number, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        name, sep, value = line.partition(":")
        if not sep or name not in families:
            raise TokenFormatError(number, f"expected 'Family:class', got '{line}'")
        try:
            token = EventToken(families[name], int(value))
            tokens.append(vocabulary.id_of(token))
        except ValueError:
            raise TokenFormatError(number, f"class '{value}' is not an integer")
        except OutOfVocabulary as e:
            raise TokenFormatError(number, str(e))
    return TokenSequence(tuple(tokens), vocabulary)

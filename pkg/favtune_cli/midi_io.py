"""Standard MIDI File reading and writing.

Only formats 0 and 1 with metrical (ticks per quarter) division are supported.
Notes are paired per channel and pitch, first-opened first-closed; everything that
is not a note, a tempo, a time signature or a track name is kept as an opaque
event so untouched tracks are written back unchanged. A chunk that plays on several
channels is read as one Track per channel.
"""
import logging
import struct
from bisect import bisect_right
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Optional, Sequence, Tuple, Union

from favtune_cli.errors import (
    BadVariableLength,
    MalformedHeader,
    MalformedTrack,
    NoNotes,
    TruncatedChunk,
    UnsupportedFormat,
)

logger = logging.getLogger(__name__)

DEFAULT_TEMPO = 500_000  # microseconds per quarter, 120 BPM
DEFAULT_TEMPO_MAP: Tuple[Tuple[int, int], ...] = ((0, DEFAULT_TEMPO),)
DEFAULT_TIME_SIGNATURE_MAP: Tuple[Tuple[int, int, int], ...] = ((0, 4, 4),)

_META = 0xFF
_META_END_OF_TRACK = 0x2F
_META_TEMPO = 0x51
_META_TIME_SIGNATURE = 0x58
_META_TRACK_NAME = 0x03

_DATA_LENGTH = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


@dataclass(frozen=True)
class Note:
    pitch: int
    velocity: int
    start_tick: int
    duration_ticks: int

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside 0..127")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside 1..127")
        if self.start_tick < 0:
            raise ValueError("start_tick must be >= 0")
        if self.duration_ticks < 1:
            raise ValueError("duration_ticks must be >= 1")

    @property
    def end_tick(self) -> int:
        return self.start_tick + self.duration_ticks


def note_sort_key(note: Note) -> Tuple[int, int, int, int]:
    return (note.start_tick, note.pitch, note.duration_ticks, note.velocity)


@dataclass(frozen=True)
class RawEvent:
    """A non-note event carried through verbatim (status byte included)"""

    tick: int
    data: bytes


@dataclass(frozen=True)
class Track:
    name: str = ""
    channel: int = 0
    notes: Tuple[Note, ...] = ()
    events: Tuple[RawEvent, ...] = ()

    def __post_init__(self):
        if not 0 <= self.channel <= 15:
            raise ValueError(f"channel {self.channel} outside 0..15")
        object.__setattr__(self, "notes", tuple(sorted(self.notes, key=note_sort_key)))
        object.__setattr__(self, "events", tuple(self.events))


@dataclass(frozen=True)
class Score:
    ticks_per_quarter: int = 480
    tracks: Tuple[Track, ...] = ()
    tempo_map: Tuple[Tuple[int, int], ...] = DEFAULT_TEMPO_MAP
    time_signature_map: Tuple[Tuple[int, int, int], ...] = DEFAULT_TIME_SIGNATURE_MAP

    def __post_init__(self):
        if self.ticks_per_quarter <= 0:
            raise ValueError("ticks_per_quarter must be positive")
        object.__setattr__(self, "tracks", tuple(self.tracks))
        object.__setattr__(self, "tempo_map", tuple(tuple(e) for e in self.tempo_map))
        object.__setattr__(self, "time_signature_map", tuple(tuple(e) for e in self.time_signature_map))
        for name, entries in (("tempo_map", self.tempo_map), ("time_signature_map", self.time_signature_map)):
            ticks = [e[0] for e in entries]
            if not ticks or ticks[0] != 0:
                raise ValueError(f"{name} needs an entry at tick 0")
            if any(b <= a for a, b in zip(ticks, ticks[1:])):
                raise ValueError(f"{name} must be strictly sorted by tick")

    @property
    def note_count(self) -> int:
        return sum(len(t.notes) for t in self.tracks)

    @property
    def end_tick(self) -> int:
        return max((n.end_tick for t in self.tracks for n in t.notes), default=0)


class BarGrid:
    """Bar lines derived from a time-signature map, extended lazily"""

    def __init__(self, ticks_per_quarter: int, time_signature_map: Sequence[Tuple[int, int, int]]):
        self._tpq = ticks_per_quarter
        self._signatures = list(time_signature_map)
        self._signature_ticks = [s[0] for s in self._signatures]
        self._starts: List[int] = [0]
        self._lengths: List[int] = []
        self._numerators: List[int] = []

    @classmethod
    def of(cls, score: Score) -> "BarGrid":
        return cls(score.ticks_per_quarter, score.time_signature_map)

    def _extend(self):
        start = self._starts[-1]
        i = bisect_right(self._signature_ticks, start) - 1
        _, numerator, denominator = self._signatures[i]
        length = max(1, self._tpq * 4 * numerator // denominator)
        # a signature change inside a bar starts a new bar there
        if i + 1 < len(self._signatures) and self._signature_ticks[i + 1] < start + length:
            length = self._signature_ticks[i + 1] - start
        self._lengths.append(length)
        self._numerators.append(numerator)
        self._starts.append(start + length)

    def bar(self, index: int) -> Tuple[int, int, int]:
        """(start tick, length in ticks, beats per bar) of bar `index`"""
        while len(self._lengths) <= index:
            self._extend()
        return self._starts[index], self._lengths[index], self._numerators[index]

    def index_of(self, tick: int) -> int:
        while self._starts[-1] <= tick:
            self._extend()
        return bisect_right(self._starts, tick) - 1


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def at_end(self) -> bool:
        return self.pos >= len(self.data)

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedChunk(f"needed {n} bytes at offset {self.pos}, {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.read(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.read(4))[0]

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            byte = self.u8()
            value = (value << 7) | (byte & 0x7F)
            if not byte & 0x80:
                return value
        raise BadVariableLength(f"variable-length quantity longer than 4 bytes at offset {self.pos}")


def _varlen_bytes(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


@dataclass
class _ParsedTrack:
    name: Optional[str] = None
    channels: List[int] = field(default_factory=list)
    notes: Dict[int, List[Note]] = field(default_factory=dict)
    # (channel, event); metas and sysex carry None
    events: List[Tuple[Optional[int], RawEvent]] = field(default_factory=list)
    tempos: List[Tuple[int, int]] = field(default_factory=list)
    signatures: List[Tuple[int, int, int]] = field(default_factory=list)

    @property
    def has_channel_events(self) -> bool:
        return bool(self.channels)

    def saw_channel(self, channel: int):
        if channel not in self.channels:
            self.channels.append(channel)
            self.notes[channel] = []

    def to_tracks(self) -> List[Track]:
        """One Track per channel in order of first use; the first also keeps the name, metas and sysex"""
        if not self.channels:
            return [Track(name=self.name or "", events=tuple(e for _, e in self.events))]
        tracks = []
        for index, channel in enumerate(self.channels):
            owned = (channel, None) if index == 0 else (channel,)
            tracks.append(Track(
                name=(self.name or "") if index == 0 else "",
                channel=channel,
                notes=tuple(self.notes[channel]),
                events=tuple(e for ch, e in self.events if ch in owned),
            ))
        return tracks


def _decode_text(payload: bytes) -> str:
    try:
        return payload.decode("utf-8")
    except UnicodeDecodeError:
        return payload.decode("latin-1")


def _parse_track(body: bytes) -> _ParsedTrack:
    cur = _Cursor(body)
    parsed = _ParsedTrack()
    open_notes: Dict[Tuple[int, int], Deque[Tuple[int, int]]] = defaultdict(deque)
    tick = 0
    status: Optional[int] = None

    while not cur.at_end():
        tick += cur.varlen()
        first = cur.u8()

        if first == _META:
            meta_type = cur.u8()
            length = cur.varlen()
            payload = cur.read(length)
            status = None
            if meta_type == _META_END_OF_TRACK:
                break
            if meta_type == _META_TEMPO and length == 3:
                tempo = int.from_bytes(payload, "big")
                if tempo > 0:
                    parsed.tempos.append((tick, tempo))
                continue
            if meta_type == _META_TIME_SIGNATURE and length >= 2:
                numerator, power = payload[0], payload[1]
                if numerator == 0 or power > 7:
                    raise MalformedTrack(f"invalid time signature {numerator}/2^{power} at tick {tick}")
                parsed.signatures.append((tick, numerator, 1 << power))
                continue
            if meta_type == _META_TRACK_NAME and not parsed.name:
                parsed.name = _decode_text(payload)
                continue
            raw = bytes([_META, meta_type]) + _varlen_bytes(length) + payload
            parsed.events.append((None, RawEvent(tick, raw)))
            continue

        if first in (0xF0, 0xF7):
            length = cur.varlen()
            payload = cur.read(length)
            status = None
            parsed.events.append((None, RawEvent(tick, bytes([first]) + _varlen_bytes(length) + payload)))
            continue

        if first & 0x80:
            if first >= 0xF0:
                raise MalformedTrack(f"system message 0x{first:02X} is not allowed in a track at tick {tick}")
            status = first
            data = [cur.u8()]
        elif status is None:
            raise MalformedTrack(f"running status without a preceding status byte at tick {tick}")
        else:
            data = [first]

        kind, channel = status & 0xF0, status & 0x0F
        if _DATA_LENGTH[kind] == 2:
            data.append(cur.u8())
        if any(b & 0x80 for b in data):
            raise MalformedTrack(f"data byte above 127 at tick {tick}")

        if kind == 0x90 and data[1] > 0:
            parsed.saw_channel(channel)
            open_notes[(channel, data[0])].append((tick, data[1]))
        elif kind in (0x80, 0x90):
            pending = open_notes.get((channel, data[0]))
            if pending:
                start, velocity = pending.popleft()
                parsed.notes[channel].append(Note(data[0], velocity, start, max(1, tick - start)))
            else:
                logger.debug("note-off without open note (channel %d, pitch %d) at tick %d", channel, data[0], tick)
        else:
            parsed.saw_channel(channel)
            parsed.events.append((channel, RawEvent(tick, bytes([status] + data))))

    for (channel, pitch), pending in open_notes.items():
        for start, velocity in pending:
            parsed.notes[channel].append(Note(pitch, velocity, start, 1))
    return parsed


def _merge_map(entries: List[tuple], default: tuple) -> Tuple[tuple, ...]:
    # stable sort keeps file order for equal ticks; the last entry at a tick wins
    by_tick: Dict[int, tuple] = {}
    for entry in sorted(entries, key=lambda e: e[0]):
        by_tick[entry[0]] = entry
    merged = [by_tick[t] for t in sorted(by_tick)]
    if not merged or merged[0][0] != 0:
        merged.insert(0, default)
    return tuple(merged)


def read_smf(data: bytes) -> Score:
    """Parse SMF bytes into a Score"""
    cur = _Cursor(bytes(data))
    if len(data) < 4 or cur.read(4) != b"MThd":
        raise MalformedHeader("file does not start with an MThd chunk")
    header_length = cur.u32()
    if header_length < 6:
        raise MalformedHeader(f"MThd length {header_length} is shorter than 6")
    header = cur.read(header_length)
    fmt, ntrks, division = struct.unpack(">HHH", header[:6])
    if fmt == 2:
        raise UnsupportedFormat("SMF format 2 (sequential tracks) is not supported")
    if fmt > 2:
        raise UnsupportedFormat(f"unknown SMF format {fmt}")
    if division & 0x8000:
        raise UnsupportedFormat("SMPTE time division is not supported")
    if division == 0:
        raise MalformedHeader("division of 0 ticks per quarter")

    parsed_tracks: List[_ParsedTrack] = []
    while len(parsed_tracks) < ntrks:
        if cur.at_end():
            raise TruncatedChunk(f"header announces {ntrks} tracks, found {len(parsed_tracks)}")
        chunk_type = cur.read(4)
        body = cur.read(cur.u32())
        if chunk_type != b"MTrk":
            logger.debug("skipping alien chunk %r", chunk_type)
            continue
        parsed_tracks.append(_parse_track(body))

    tempos = [t for p in parsed_tracks for t in p.tempos]
    signatures = [s for p in parsed_tracks for s in p.signatures]
    tracks = []
    for index, parsed in enumerate(parsed_tracks):
        # format 1 puts the tempo map in chunk 0; keep it only if it also plays something
        if fmt == 1 and index == 0 and not parsed.has_channel_events:
            continue
        tracks.extend(parsed.to_tracks())

    return Score(
        ticks_per_quarter=division,
        tracks=tuple(tracks),
        tempo_map=_merge_map(tempos, DEFAULT_TEMPO_MAP[0]),
        time_signature_map=_merge_map(signatures, DEFAULT_TIME_SIGNATURE_MAP[0]),
    )


def _chunk(events: List[Tuple[int, int, int, bytes]]) -> bytes:
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    body = bytearray()
    last = 0
    for tick, _, _, payload in events:
        body += _varlen_bytes(tick - last) + payload
        last = tick
    body += b"\x00\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def _conductor_chunk(score: Score) -> bytes:
    events = []
    for seq, (tick, numerator, denominator) in enumerate(score.time_signature_map):
        power = denominator.bit_length() - 1
        events.append((tick, 0, seq, bytes([_META, _META_TIME_SIGNATURE, 4, numerator, power, 24, 8])))
    for seq, (tick, tempo) in enumerate(score.tempo_map):
        events.append((tick, 1, seq, bytes([_META, _META_TEMPO, 3]) + tempo.to_bytes(3, "big")))
    return _chunk(events)


def _track_chunk(track: Track) -> bytes:
    events = []
    if track.name:
        name = track.name.encode("utf-8")
        events.append((0, 0, 0, bytes([_META, _META_TRACK_NAME]) + _varlen_bytes(len(name)) + name))
    # same tick: note-offs, then opaque events, then note-ons
    for seq, note in enumerate(track.notes):
        events.append((note.end_tick, 1, seq, bytes([0x80 | track.channel, note.pitch, 0])))
        events.append((note.start_tick, 3, seq, bytes([0x90 | track.channel, note.pitch, note.velocity])))
    for seq, event in enumerate(track.events):
        events.append((event.tick, 2, seq, event.data))
    return _chunk(events)


def write_smf(score: Score) -> bytes:
    """Serialize a Score as a format-1 SMF with a conductor chunk first"""
    chunks = []
    default_maps = (
        score.tempo_map == DEFAULT_TEMPO_MAP and score.time_signature_map == DEFAULT_TIME_SIGNATURE_MAP
    )
    if score.tracks or not default_maps:
        chunks.append(_conductor_chunk(score))
    chunks.extend(_track_chunk(track) for track in score.tracks)
    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(chunks), score.ticks_per_quarter)
    return header + b"".join(chunks)


def read_smf_file(path: Union[str, Path]) -> Score:
    return read_smf(Path(path).read_bytes())


def write_smf_file(score: Score, path: Union[str, Path]):
    Path(path).write_bytes(write_smf(score))


def select_melody_track(score: Score) -> int:
    """Index of the track with the most notes, lowest index on ties"""
    if not score.tracks:
        raise NoNotes("score has no tracks")
    counts = [len(t.notes) for t in score.tracks]
    best = max(counts)
    if best == 0:
        raise NoNotes("every track is empty")
    return counts.index(best)

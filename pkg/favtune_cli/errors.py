from typing import Optional


class FavtuneError(Exception):
    """Base class for every domain error raised by favtune"""

    exit_code = 4


# midi_io

class MidiError(FavtuneError):
    pass


class MalformedHeader(MidiError):
    pass


class UnsupportedFormat(MidiError):
    pass


class TruncatedChunk(MidiError):
    pass


class BadVariableLength(MidiError):
    pass


class MalformedTrack(MidiError):
    pass


class NoNotes(FavtuneError):
    pass


# remi_codec

class EmptyTrack(FavtuneError):
    pass


class GrammarViolation(FavtuneError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"token {index}: {reason}")
        self.index = index
        self.reason = reason


class OutOfVocabulary(FavtuneError):
    pass


class TokenFormatError(FavtuneError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


# predictor

class NoSelectedEvents(FavtuneError):
    pass


class LengthMismatch(FavtuneError):
    pass


class NonFiniteLoss(FavtuneError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class AllMasked(FavtuneError):
    pass


class NotTrainable(FavtuneError):
    pass


# pattern

class NoRepeatedPattern(FavtuneError):
    def __init__(self, a: int):
        super().__init__(f"no sub-list of length {a} repeats; shorten the pattern length")
        self.a = a


class PatternFormatError(FavtuneError):
    pass


# transfer

class VocabularyMismatch(FavtuneError):
    pass


# metrics

class BinMismatch(FavtuneError):
    pass


class TooShort(FavtuneError):
    pass


class DegenerateInput(FavtuneError):
    pass


# storage

class ConfigError(FavtuneError):
    def __init__(self, key: Optional[str], reason: str, line: Optional[int] = None):
        where = f"line {line}" if line is not None else ""
        if key:
            where = f"{where} key '{key}'".strip()
        super().__init__(f"{where}: {reason}" if where else reason)
        self.key = key
        self.line = line


class HashMismatch(FavtuneError):
    def __init__(self, path: str):
        super().__init__(f"content hash of {path} does not match the manifest")
        self.path = path


class VersionMismatch(FavtuneError):
    pass


class CheckpointFormatError(FavtuneError):
    pass

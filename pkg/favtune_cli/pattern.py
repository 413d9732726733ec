import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from favtune_cli.errors import NoRepeatedPattern, PatternFormatError
from favtune_cli.remi_codec import SelectedEventStream

logger = logging.getLogger(__name__)

PATTERN_MODES = ("ranked", "random")


@dataclass(frozen=True)
class SignaturePattern:
    values: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        if len(self.values) < 2:
            raise ValueError("a signature pattern needs at least 2 values")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class PatternInterval:
    deltas: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(int(d) for d in self.deltas))
        if not self.deltas:
            raise ValueError("a pattern interval needs at least 1 delta")

    def __len__(self):
        return len(self.deltas)


def repeated_windows(values: Sequence[int], a: int) -> Dict[Tuple[int, ...], Tuple[int, int]]:
    """Every length-a window seen at least twice -> (count, first index); overlaps count"""
    seen: Dict[Tuple[int, ...], List[int]] = {}
    for i in range(len(values) - a + 1):
        window = tuple(values[i:i + a])
        if window in seen:
            seen[window][0] += 1
        else:
            seen[window] = [1, i]
    return {w: (c, first) for w, (c, first) in seen.items() if c >= 2}


def extract_smp(
    stream: Union[SelectedEventStream, Sequence[int]], a: int = 8, seed: int = 0, mode: str = "ranked"
) -> SignaturePattern:
    """Pick one repeated length-a sub-list of the stream.

    "ranked" takes the most frequent, then the earliest, then the smallest;
    "random" picks uniformly among the repeats with a seeded generator.
    """
    if a < 2:
        raise ValueError("pattern length must be >= 2")
    if mode not in PATTERN_MODES:
        raise ValueError(f"pattern mode must be one of {', '.join(PATTERN_MODES)}")
    values = stream.classes if isinstance(stream, SelectedEventStream) else tuple(stream)
    candidates = repeated_windows(values, a)
    if not candidates:
        raise NoRepeatedPattern(a)
    if mode == "random":
        ordered = sorted(candidates, key=lambda w: candidates[w][1])
        choice = ordered[int(np.random.default_rng(seed).integers(len(ordered)))]
    else:
        choice = min(candidates, key=lambda w: (-candidates[w][0], candidates[w][1], w))
    count, first = candidates[choice]
    logger.debug("SMP of length %d occurs %d times, first at %d: %s", a, count, first, choice)
    return SignaturePattern(choice)


def extract_smp_auto(
    stream: Union[SelectedEventStream, Sequence[int]], a: int = 8, seed: int = 0, mode: str = "ranked"
) -> SignaturePattern:
    """extract_smp, shortening the length until some sub-list repeats"""
    for length in range(a, 1, -1):
        try:
            return extract_smp(stream, length, seed, mode)
        except NoRepeatedPattern:
            if length > 2:
                logger.warning("no repeated pattern of length %d; trying %d", length, length - 1)
    raise NoRepeatedPattern(2)


def smp_to_smpi(smp: SignaturePattern) -> PatternInterval:
    v = smp.values
    return PatternInterval(tuple(b - a for a, b in zip(v, v[1:])))


def dumps_smpi(smpi: PatternInterval) -> str:
    return ",".join(str(d) for d in smpi.deltas) + "\n"


def loads_smpi(text: str) -> PatternInterval:
    line = text.strip()
    if not line or "\n" in line:
        raise PatternFormatError("expected one line of comma-separated integers")
    try:
        return PatternInterval(tuple(int(part) for part in line.split(",")))
    except ValueError as e:
        raise PatternFormatError(f"bad SMPI line '{line}': {e}") from e

"""Transfer-phase decoding.

Tokens outside the selected families are copied from the input. Selected
slots are sampled from the model, restricted to the slot's family, until two
consecutive selected values differ by the first SMPI interval; the following
slots are then forced to walk the SMPI before sampling resumes.
"""
import logging
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Union

import numpy as np

from favtune_cli.errors import EmptyTrack, VocabularyMismatch
from favtune_cli.midi_io import Score, select_melody_track
from favtune_cli.pattern import PatternInterval, SignaturePattern, extract_smp_auto, smp_to_smpi
from favtune_cli.predictor import (
    PredictorCheckpoint,
    PredictorInterface,
    predictor_from_checkpoint,
    sample_constrained,
    single_threaded_blas,
)
from favtune_cli.remi_codec import (
    VOCAB,
    EventFamily,
    TokenSequence,
    check_grammar,
    decode,
    encode,
    selected_stream,
)

logger = logging.getLogger(__name__)

BOUND_POLICIES = ("fold", "saturate")
FORCED_STARTS = ("first", "second")
TEMPO_FAMILIES = frozenset({EventFamily.TEMPO_CLASS, EventFamily.TEMPO_VALUE})


@dataclass(frozen=True)
class TransferConfig:
    selected: FrozenSet[EventFamily] = frozenset({EventFamily.NOTE_ON})
    temperature: float = 1.0
    seed: int = 0
    bound_policy: str = "fold"
    event_learning: bool = True
    forced_start: str = "first"

    def __post_init__(self):
        object.__setattr__(self, "selected", frozenset(self.selected))
        if not self.selected:
            raise ValueError("at least one event family must be selected")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.bound_policy not in BOUND_POLICIES:
            raise ValueError(f"bound_policy must be one of {', '.join(BOUND_POLICIES)}")
        if self.forced_start not in FORCED_STARTS:
            raise ValueError(f"forced_start must be one of {', '.join(FORCED_STARTS)}")


@dataclass
class TransferResult:
    sequence: TokenSequence
    empty_selection: bool = False
    triggers: int = 0
    forced_slots: List[int] = field(default_factory=list)


def bound_value(value: int, family: EventFamily, n_classes: int, policy: str = "fold") -> int:
    """Map a forced class value back into 0..n_classes-1"""
    if family is EventFamily.NOTE_ON and policy == "fold":
        while value >= n_classes:
            value -= 12
        while value < 0:
            value += 12
        return value
    return min(n_classes - 1, max(0, value))


def transfer(
    y: TokenSequence, model: PredictorInterface, smpi: PatternInterval, cfg: TransferConfig = TransferConfig()
) -> TransferResult:
    vocab = y.vocabulary
    if model.vocab_size != vocab.size:
        raise VocabularyMismatch(f"model predicts {model.vocab_size} classes, tokens use {vocab.size}")
    check_grammar(y.tokens, vocab)
    if not any(vocab.family_of(t) in cfg.selected for t in y.tokens):
        logger.warning("input has no tokens of the selected families; returning it unchanged")
        return TransferResult(sequence=y, empty_selection=True)

    rng = np.random.default_rng(cfg.seed)
    deltas = smpi.deltas
    last_idx = len(deltas)  # a - 1
    out = list(y.tokens)
    flag, idx, v = False, 1, None
    result = TransferResult(sequence=y)

    with single_threaded_blas():
        for n, token in enumerate(y.tokens):
            family = vocab.family_of(token)
            if family not in cfg.selected:
                continue
            ids = vocab.classes_of(family)
            if flag:
                value = vocab.class_of(out[v]) + deltas[idx - 1]
                out[n] = ids.start + bound_value(value, family, len(ids), cfg.bound_policy)
                result.forced_slots.append(n)
                idx += 1
                if idx > last_idx:
                    flag = False
            else:
                out[n] = sample_constrained(model, out[:n], ids, cfg.temperature, rng)
                if cfg.event_learning and v is not None:
                    if vocab.class_of(out[n]) - vocab.class_of(out[v]) == deltas[0]:
                        result.triggers += 1
                        idx = 1 if cfg.forced_start == "first" else 2
                        flag = idx <= last_idx
                        logger.debug("SMPI trigger at token %d (forcing from interval %d)", n, idx)
            v = n

    result.sequence = TokenSequence(tuple(out), vocab)
    logger.info("transfer: %d triggers, %d forced slots", result.triggers, len(result.forced_slots))
    return result


@dataclass
class TransferOutcome:
    score: Score
    track: int
    input_tokens: TokenSequence
    output_tokens: TokenSequence
    smp: Optional[SignaturePattern]
    smpi: PatternInterval
    result: TransferResult


def favorite_smpi(
    favorite: Score, selected: FrozenSet[EventFamily], pattern_length: int = 8, seed: int = 0, mode: str = "ranked"
):
    """SMP and SMPI of the favorite's melody track"""
    tokens = encode(favorite, select_melody_track(favorite))
    smp = extract_smp_auto(selected_stream(tokens, selected), pattern_length, seed, mode)
    return smp, smp_to_smpi(smp)


def resolve_model(model: Union[PredictorInterface, PredictorCheckpoint]) -> PredictorInterface:
    if isinstance(model, PredictorCheckpoint):
        if model.vocab_hash != VOCAB.hash:
            raise VocabularyMismatch("checkpoint was trained with a different token vocabulary")
        return predictor_from_checkpoint(model)
    return model


def transfer_score(
    input_score: Score,
    favorite: Optional[Score],
    model: Union[PredictorInterface, PredictorCheckpoint],
    cfg: TransferConfig = TransferConfig(),
    pattern_length: int = 8,
    pattern_mode: str = "ranked",
    smpi: Optional[PatternInterval] = None,
) -> TransferOutcome:
    """Transfer the input's melody track toward the favorite; other tracks are kept"""
    predictor = resolve_model(model)
    if not input_score.tracks:
        raise EmptyTrack("input has no tracks")
    track = select_melody_track(input_score) if input_score.note_count else 0
    y = encode(input_score, track)

    smp = None
    if smpi is None:
        if favorite is None:
            raise ValueError("either a favorite score or an SMPI is required")
        smp, smpi = favorite_smpi(favorite, cfg.selected, pattern_length, cfg.seed, pattern_mode)
    result = transfer(y, predictor, smpi, cfg)
    score = decode(result.sequence, input_score, track, tempo_from_tokens=bool(cfg.selected & TEMPO_FAMILIES))
    return TransferOutcome(
        score=score, track=track, input_tokens=y, output_tokens=result.sequence, smp=smp, smpi=smpi, result=result
    )

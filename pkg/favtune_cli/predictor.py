import logging
from abc import ABC, abstractmethod
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from threadpoolctl import threadpool_limits

from favtune_cli.errors import AllMasked, LengthMismatch, NoSelectedEvents, NotTrainable
from favtune_cli.remi_codec import VOCAB, EventFamily, TokenSequence

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FavoriteWeights:
    """Per-class loss weights: alpha everywhere, plus favorite frequencies on selected families"""

    w: np.ndarray
    alpha: float
    selected: FrozenSet[EventFamily] = frozenset()

    def __eq__(self, other):
        return (
            isinstance(other, FavoriteWeights)
            and self.alpha == other.alpha
            and self.selected == other.selected
            and np.array_equal(self.w, other.w)
        )


def compute_favorite_weights(
    favorite: TokenSequence, selected: Iterable[EventFamily], alpha: float = 0.01
) -> FavoriteWeights:
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if not len(favorite):
        raise NoSelectedEvents("favorite sequence is empty")
    selected = frozenset(selected)
    vocab = favorite.vocabulary
    counts = np.bincount(np.asarray(favorite.tokens, dtype=np.int64), minlength=vocab.size).astype(np.float64)
    mask = np.zeros(vocab.size, dtype=bool)
    for family in selected:
        ids = vocab.classes_of(family)
        mask[ids.start:ids.stop] = True
    total = counts[mask].sum()
    if total == 0:
        names = ", ".join(sorted(f.value for f in selected))
        raise NoSelectedEvents(f"favorite has no tokens of the selected families ({names})")
    w = np.full(vocab.size, alpha, dtype=np.float64)
    w[mask] += counts[mask] / total
    return FavoriteWeights(w=w, alpha=float(alpha), selected=selected)


def uniform_weights(vocab_size: int = VOCAB.size) -> FavoriteWeights:
    """All weights 1: plain cross-entropy"""
    return FavoriteWeights(w=np.ones(vocab_size, dtype=np.float64), alpha=1.0)


def favorite_aware_loss(logq: np.ndarray, truth: Sequence[int], weights: FavoriteWeights) -> float:
    """Weighted negative log-likelihood averaged over positions"""
    logq = np.asarray(logq, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if logq.ndim != 2 or logq.shape[0] != truth.shape[0]:
        raise LengthMismatch(f"{logq.shape[0] if logq.ndim else 0} probability rows for {truth.shape[0]} targets")
    if logq.shape[1] != weights.w.shape[0]:
        raise LengthMismatch(f"rows have {logq.shape[1]} classes, weights have {weights.w.shape[0]}")
    if truth.shape[0] == 0:
        return 0.0
    picked = logq[np.arange(truth.shape[0]), truth]
    return float(-np.mean(weights.w[truth] * picked))


@dataclass
class PredictorCheckpoint:
    kind: str
    vocab_hash: str
    seed: int
    hyperparameters: Dict[str, Any]
    arrays: Dict[str, np.ndarray]
    loss_curve: List[float] = field(default_factory=list)
    weights: Optional[FavoriteWeights] = None
    version: int = CHECKPOINT_VERSION


class PredictorInterface(ABC):
    """Next-token distribution over the whole vocabulary"""

    kind: str = ""
    trainable: bool = False

    def __init__(self, vocab_size: int = VOCAB.size):
        self.vocab_size = vocab_size

    @abstractmethod
    def predict(self, context: Sequence[int]) -> np.ndarray:
        pass

    @abstractmethod
    def hyperparameters(self) -> Dict[str, Any]:
        pass

    @abstractmethod
    def state_arrays(self) -> Dict[str, np.ndarray]:
        pass

    @abstractmethod
    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        pass

    def checkpoint(
        self, seed: int = 0, loss_curve: Sequence[float] = (), weights: Optional[FavoriteWeights] = None
    ) -> PredictorCheckpoint:
        return PredictorCheckpoint(
            kind=self.kind,
            vocab_hash=VOCAB.hash,
            seed=seed,
            hyperparameters=self.hyperparameters(),
            arrays=self.state_arrays(),
            loss_curve=[float(x) for x in loss_curve],
            weights=weights,
        )


class NGramModel(PredictorInterface):
    """Count-table model with additive smoothing, backing off to the longest seen context"""

    kind = "ngram"
    trainable = False

    def __init__(self, order: int = 3, delta: float = 0.01, vocab_size: int = VOCAB.size):
        super().__init__(vocab_size)
        if not 2 <= order <= 5:
            raise ValueError("n-gram order must be in 2..5")
        if delta <= 0:
            raise ValueError("smoothing delta must be > 0")
        self.order = order
        self.delta = delta
        # tables[k]: context of length k -> next-token counts
        self.tables: List[Dict[Tuple[int, ...], np.ndarray]] = [dict() for _ in range(order)]

    def fit(self, segments: Iterable[Union[TokenSequence, Sequence[int]]]) -> "NGramModel":
        tables: List[Dict[Tuple[int, ...], np.ndarray]] = [
            defaultdict(lambda: np.zeros(self.vocab_size, dtype=np.int64)) for _ in range(self.order)
        ]
        for seg in segments:
            tokens = list(seg)
            for i, nxt in enumerate(tokens):
                for k in range(min(i, self.order - 1) + 1):
                    tables[k][tuple(tokens[i - k:i])][nxt] += 1
        self.tables = [dict(t) for t in tables]
        logger.debug("n-gram fit: %s contexts per order", [len(t) for t in self.tables])
        return self

    def counts_for(self, context: Sequence[int]) -> np.ndarray:
        context = list(context)
        for k in range(min(len(context), self.order - 1), -1, -1):
            key = tuple(context[len(context) - k:])
            counts = self.tables[k].get(key)
            if counts is not None:
                return counts
        return np.zeros(self.vocab_size, dtype=np.int64)

    def predict(self, context: Sequence[int]) -> np.ndarray:
        counts = self.counts_for(context).astype(np.float64) + self.delta
        return counts / counts.sum()

    def hyperparameters(self) -> Dict[str, Any]:
        return {"order": self.order, "delta": self.delta, "vocab_size": self.vocab_size}

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for k, table in enumerate(self.tables):
            rows = []
            for context in sorted(table):
                counts = table[context]
                for nxt in np.flatnonzero(counts):
                    rows.append(list(context) + [int(nxt), int(counts[nxt])])
            arrays[f"table_{k}"] = np.asarray(rows, dtype=np.int32).reshape(len(rows), k + 2)
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        self.tables = [dict() for _ in range(self.order)]
        for k in range(self.order):
            for row in arrays.get(f"table_{k}", np.zeros((0, k + 2), dtype=np.int32)):
                key = tuple(int(x) for x in row[:k])
                counts = self.tables[k].setdefault(key, np.zeros(self.vocab_size, dtype=np.int64))
                counts[int(row[k])] = int(row[k + 1])


class UniformModel(PredictorInterface):
    """Equal probability for every id"""

    kind = "uniform"

    def predict(self, context: Sequence[int]) -> np.ndarray:
        return np.full(self.vocab_size, 1.0 / self.vocab_size)

    def hyperparameters(self) -> Dict[str, Any]:
        return {"vocab_size": self.vocab_size}

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        pass


def predict(model: PredictorInterface, context: Sequence[int]) -> np.ndarray:
    return model.predict(list(context))


def _rng(seed: Union[int, np.random.Generator, None]) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_constrained(
    model: PredictorInterface,
    context: Sequence[int],
    allowed: Iterable[int],
    temperature: float = 1.0,
    seed: Union[int, np.random.Generator, None] = 0,
) -> int:
    """Sample the next id from the model renormalized over `allowed`.

    A temperature of 0 (or below) picks the most probable allowed id, lowest id on ties.
    Passing a Generator instead of an int seed continues its stream.
    """
    ids = np.array(sorted(set(int(a) for a in allowed)), dtype=np.int64)
    if ids.size == 0:
        raise AllMasked("no ids are allowed")
    if ids.size == 1:
        return int(ids[0])
    probs = model.predict(list(context))[ids]
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    if not np.isfinite(logp).any():
        raise AllMasked(f"model gives zero probability to all {ids.size} allowed ids")
    if temperature <= 0:
        return int(ids[int(np.argmax(logp))])
    z = logp / temperature
    z -= z[np.isfinite(z)].max()
    p = np.exp(z)
    p /= p.sum()
    return int(ids[_rng(seed).choice(ids.size, p=p)])


def get_predictor(kind: str, **hyperparameters) -> PredictorInterface:
    """Build a fresh predictor of the given kind"""
    if kind == "ngram":
        return NGramModel(**hyperparameters)
    elif kind == "attention":
        from favtune_cli.attention_model import AttentionModel, AttentionModelParams

        return AttentionModel(AttentionModelParams(**hyperparameters))
    elif kind == "uniform":
        return UniformModel(**hyperparameters)
    raise ValueError(f"unknown model kind '{kind}' (expected attention or ngram)")


def predictor_from_checkpoint(checkpoint: PredictorCheckpoint) -> PredictorInterface:
    model = get_predictor(checkpoint.kind, **checkpoint.hyperparameters)
    model.load_state_arrays(checkpoint.arrays)
    return model


def single_threaded_blas():
    """Context manager holding BLAS to one thread, so every matrix product sums in one fixed order"""
    return threadpool_limits(limits=1, user_api="blas")


def require_trainable(model: PredictorInterface):
    if not model.trainable:
        raise NotTrainable(f"{model.kind} model cannot be fine-tuned by gradient descent")


EpochCallback = Callable[[int, float], None]

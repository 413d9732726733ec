import logging
from typing import List, Optional, Sequence

import numpy as np

from favtune_cli.config import PipelineConfig
from favtune_cli.corpus import corpus_tokens
from favtune_cli.errors import LengthMismatch, NonFiniteLoss
from favtune_cli.midi_io import Score, select_melody_track
from favtune_cli.predictor import (
    EpochCallback,
    FavoriteWeights,
    NGramModel,
    PredictorCheckpoint,
    PredictorInterface,
    compute_favorite_weights,
    get_predictor,
    require_trainable,
    single_threaded_blas,
    uniform_weights,
)
from favtune_cli.remi_codec import TokenSequence, encode, segment

logger = logging.getLogger(__name__)


def training_segments(seq: TokenSequence, length: int) -> List[TokenSequence]:
    """Fixed-length windows, or the whole sequence when it is shorter than one window"""
    segments = segment(seq, length)
    if not segments and len(seq) >= 2:
        logger.warning("sequence of %d tokens is shorter than one %d-token segment; training on it whole",
                       len(seq), length)
        segments = [seq]
    return segments


def finetune(
    model: PredictorInterface,
    segments: Sequence[TokenSequence],
    weights: FavoriteWeights,
    epochs: int = 200,
    stop_loss: float = 0.1,
    seed: int = 0,
    learning_rate: float = 0.1,
    clip_norm: float = 1.0,
    on_epoch: Optional[EpochCallback] = None,
) -> PredictorCheckpoint:
    """SGD on the favorite-aware loss, one step per segment in order.

    Memory and the last token are carried from each segment to the next within an
    epoch, so only the very first token goes unpredicted. Stops after
    `epochs` or as soon as an epoch's mean segment loss drops below `stop_loss`.
    """
    require_trainable(model)
    if not segments:
        raise LengthMismatch("no segments to train on")
    lengths = {len(s) for s in segments}
    if len(lengths) != 1:
        raise LengthMismatch(f"segments have differing lengths {sorted(lengths)}")

    curve: List[float] = []
    with single_threaded_blas():
        for epoch in range(1, epochs + 1):
            memory, lead = None, None
            losses = []
            for seg in segments:
                loss, grads, memory = model.gradient(seg.tokens, weights, memory, lead)
                lead = seg.tokens[-1]
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise NonFiniteLoss(epoch)
                model.apply_gradients(grads, learning_rate, clip_norm)
                losses.append(loss)
            mean = float(np.mean(losses))
            curve.append(mean)
            logger.info("epoch %d/%d loss %.6f", epoch, epochs, mean)
            if on_epoch:
                on_epoch(epoch, mean)
            if mean < stop_loss:
                logger.info("stopping early: loss %.6f below %g", mean, stop_loss)
                break
    return model.checkpoint(seed=seed, loss_curve=curve, weights=weights)


def pretrain(
    model: PredictorInterface,
    segments: Sequence[TokenSequence],
    epochs: int,
    seed: int = 0,
    learning_rate: float = 0.1,
    clip_norm: float = 1.0,
) -> PredictorCheckpoint:
    """Plain cross-entropy training from scratch"""
    return finetune(
        model,
        segments,
        uniform_weights(model.vocab_size),
        epochs=epochs,
        stop_loss=0.0,
        seed=seed,
        learning_rate=learning_rate,
        clip_norm=clip_norm,
    )


def train_predictor(
    model: PredictorInterface,
    segments: Sequence[TokenSequence],
    weights: FavoriteWeights,
    epochs: int = 200,
    stop_loss: float = 0.1,
    seed: int = 0,
    learning_rate: float = 0.1,
    clip_norm: float = 1.0,
    on_epoch: Optional[EpochCallback] = None,
) -> PredictorCheckpoint:
    """Gradient fine-tuning for trainable models, count fitting for n-grams"""
    if isinstance(model, NGramModel):
        model.fit(segments)
        return model.checkpoint(seed=seed, weights=weights)
    return finetune(model, segments, weights, epochs, stop_loss, seed, learning_rate, clip_norm, on_epoch)


def train_for_favorite(
    favorite: Score, cfg: PipelineConfig, on_epoch: Optional[EpochCallback] = None
) -> PredictorCheckpoint:
    """Build the configured model, pretrain it on the bundled corpus and fit it to the favorite"""
    tokens = encode(favorite, select_melody_track(favorite))
    if cfg.favorite_aware:
        weights = compute_favorite_weights(tokens, cfg.selected, cfg.alpha)
    else:
        weights = uniform_weights()
    model = get_predictor(cfg.model, **cfg.predictor_hyperparameters())

    if not model.trainable:
        return train_predictor(model, [tokens], weights, seed=cfg.seed)

    if cfg.pretrain_epochs:
        corpus = TokenSequence(tuple(t for seq in corpus_tokens() for t in seq.tokens))
        logger.info("pretraining on %d corpus tokens for %d epochs", len(corpus), cfg.pretrain_epochs)
        pretrain(model, training_segments(corpus, cfg.sequence_length), cfg.pretrain_epochs,
                 cfg.seed, cfg.learning_rate, cfg.clip_norm)
    return finetune(
        model,
        training_segments(tokens, cfg.sequence_length),
        weights,
        epochs=cfg.epochs,
        stop_loss=cfg.stop_loss,
        seed=cfg.seed,
        learning_rate=cfg.learning_rate,
        clip_norm=cfg.clip_norm,
        on_epoch=on_epoch,
    )

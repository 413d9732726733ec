"""Tests for favorite-aware fine-tuning."""

import numpy as np
import pytest
from threadpoolctl import threadpool_info, threadpool_limits

from favtune_cli.attention_model import AttentionModel, AttentionModelParams
from favtune_cli.config import PipelineConfig
from favtune_cli.errors import LengthMismatch, NonFiniteLoss, NotTrainable
from favtune_cli.predictor import FavoriteWeights, NGramModel, compute_favorite_weights, uniform_weights
from favtune_cli.remi_codec import EventFamily, TokenSequence, segment
from favtune_cli.training import finetune, pretrain, train_for_favorite, training_segments

SMALL = AttentionModelParams(d_model=8, n_layers=1, n_heads=2, context=16, memory=16, seed=0)
TOY = AttentionModelParams(d_model=8, n_layers=1, n_heads=2, context=128, memory=128, seed=0)


def _segments(tokens, length=16):
    return segment(tokens, length)


class TestFinetune:
    def test_zero_epochs_leaves_parameters(self, favorite_tokens):
        model = AttentionModel(SMALL)
        before = {k: v.copy() for k, v in model.params.items()}
        weights = compute_favorite_weights(favorite_tokens, {EventFamily.NOTE_ON})
        checkpoint = finetune(model, _segments(favorite_tokens), weights, epochs=0)
        assert checkpoint.loss_curve == []
        assert all(np.array_equal(checkpoint.arrays[k], before[k].astype(np.float32)) for k in before)

    def test_loss_decreases(self, favorite_tokens):
        checkpoint = pretrain(AttentionModel(SMALL), _segments(favorite_tokens), epochs=30, learning_rate=0.2)
        assert len(checkpoint.loss_curve) == 30
        assert checkpoint.loss_curve[-1] < checkpoint.loss_curve[0]

    def test_stops_below_threshold(self, favorite_tokens):
        weights = compute_favorite_weights(favorite_tokens, {EventFamily.NOTE_ON})
        checkpoint = finetune(AttentionModel(SMALL), _segments(favorite_tokens), weights, epochs=50, stop_loss=10.0)
        assert len(checkpoint.loss_curve) == 1

    def test_deterministic(self, favorite_tokens):
        weights = compute_favorite_weights(favorite_tokens, {EventFamily.NOTE_ON})
        a = finetune(AttentionModel(SMALL), _segments(favorite_tokens), weights, epochs=3, stop_loss=0.0)
        b = finetune(AttentionModel(SMALL), _segments(favorite_tokens), weights, epochs=3, stop_loss=0.0)
        assert a.loss_curve == b.loss_curve
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)

    def test_blas_held_to_one_thread(self, favorite_tokens, monkeypatch):
        model = AttentionModel(SMALL)
        gradient = model.gradient
        seen = []

        def counting_gradient(*args, **kwargs):
            seen.extend(info["num_threads"] for info in threadpool_info() if info["user_api"] == "blas")
            return gradient(*args, **kwargs)

        monkeypatch.setattr(model, "gradient", counting_gradient)
        finetune(model, _segments(favorite_tokens), uniform_weights(), epochs=1)
        assert all(n == 1 for n in seen)

    def test_same_result_under_any_thread_limit(self, favorite_tokens):
        weights = compute_favorite_weights(favorite_tokens, {EventFamily.NOTE_ON})
        with threadpool_limits(limits=4):
            a = finetune(AttentionModel(SMALL), _segments(favorite_tokens), weights, epochs=3, stop_loss=0.0)
        b = finetune(AttentionModel(SMALL), _segments(favorite_tokens), weights, epochs=3, stop_loss=0.0)
        assert a.loss_curve == b.loss_curve
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)

    def test_first_token_of_later_segments_is_a_target(self):
        segments = [TokenSequence(tuple(range(16))), TokenSequence(tuple(range(16, 32)))]
        model = AttentionModel(SMALL)
        w = np.zeros(model.vocab_size)
        w[16] = 1.0
        weights = FavoriteWeights(w=w, alpha=0.0)
        checkpoint = finetune(model, segments, weights, epochs=1, stop_loss=-1.0, learning_rate=0.0)
        assert checkpoint.loss_curve[0] > 0.0

    def test_ngram_is_not_trainable(self, favorite_tokens):
        with pytest.raises(NotTrainable):
            finetune(NGramModel(), _segments(favorite_tokens), uniform_weights(), epochs=1)

    def test_segments_must_share_length(self, favorite_tokens):
        segments = [TokenSequence(favorite_tokens.tokens[:16]), TokenSequence(favorite_tokens.tokens[:12])]
        with pytest.raises(LengthMismatch):
            finetune(AttentionModel(SMALL), segments, uniform_weights(), epochs=1)

    def test_non_finite_loss(self, favorite_tokens):
        model = AttentionModel(SMALL)
        model.params["lm_head"][:] = np.nan
        with pytest.raises(NonFiniteLoss) as info:
            finetune(model, _segments(favorite_tokens), uniform_weights(), epochs=2)
        assert info.value.epoch == 1


class TestTrainForFavorite:
    def test_short_sequence_is_trained_whole(self, favorite_tokens):
        short = TokenSequence(favorite_tokens.tokens[:20])
        assert training_segments(short, 128) == [short]

    def test_ngram_config(self, favorite_score):
        cfg = PipelineConfig(model="ngram", seed=5)
        checkpoint = train_for_favorite(favorite_score, cfg)
        assert checkpoint.kind == "ngram"
        assert checkpoint.seed == 5
        assert checkpoint.weights.alpha == 0.01
        assert checkpoint.weights.selected == frozenset({EventFamily.NOTE_ON})

    def test_attention_config(self, favorite_score):
        cfg = PipelineConfig(d_model=8, n_layers=1, n_heads=2, context=16, memory=16, sequence_length=16,
                             epochs=2, stop_loss=0.0, pretrain_epochs=1)
        checkpoint = train_for_favorite(favorite_score, cfg)
        assert checkpoint.kind == "attention"
        assert len(checkpoint.loss_curve) == 2


class TestConvergence:
    def test_one_piece_favorite(self, favorite_tokens):
        weights = compute_favorite_weights(favorite_tokens, {EventFamily.NOTE_ON})
        segments = training_segments(favorite_tokens, 128)
        assert len(segments) == 1
        checkpoint = finetune(AttentionModel(TOY), segments, weights, epochs=200, stop_loss=0.0)
        curve = np.asarray(checkpoint.loss_curve)
        assert len(curve) == 200
        assert curve.min() < 0.5
        moving = np.convolve(curve, np.ones(10) / 10, mode="valid")
        assert np.all(np.diff(moving) <= 1e-9)

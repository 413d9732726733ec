"""Gradient and inference checks for the segment-recurrent attention model."""

import numpy as np
import pytest

from favtune_cli.attention_model import AttentionModel, AttentionModelParams
from favtune_cli.predictor import (
    FavoriteWeights,
    compute_favorite_weights,
    predictor_from_checkpoint,
    uniform_weights,
)
from favtune_cli.remi_codec import VOCAB, EventFamily
from favtune_cli.storage import dumps_checkpoint, loads_checkpoint

TINY = AttentionModelParams(d_model=8, n_layers=2, n_heads=2, context=6, memory=4, seed=0)


@pytest.fixture
def model():
    return AttentionModel(TINY)


def _tokens(rng, n):
    return rng.integers(0, VOCAB.size, size=n)


class TestGradient:
    def test_matches_central_differences(self, model, rng, favorite_tokens):
        weights = compute_favorite_weights(favorite_tokens, {EventFamily.NOTE_ON, EventFamily.POSITION})
        previous = _tokens(rng, 6)
        memory = model.gradient(previous, weights)[2]
        lead = int(previous[-1])
        tokens = _tokens(rng, 6)
        _, grads, _ = model.gradient(tokens, weights, memory, lead)

        eps = 1e-6
        names = sorted(model.params)
        checked = 0
        for _ in range(120):
            name = names[int(rng.integers(len(names)))]
            param = model.params[name]
            index = tuple(int(rng.integers(n)) for n in param.shape)
            original = param[index]
            param[index] = original + eps
            up = model.loss(tokens, weights, memory, lead)
            param[index] = original - eps
            down = model.loss(tokens, weights, memory, lead)
            param[index] = original
            numeric = (up - down) / (2 * eps)
            assert numeric == pytest.approx(grads[name][index], rel=1e-4, abs=1e-7), (name, index)
            checked += 1
        assert checked >= 100

    def test_memory_is_limited(self, model, rng):
        _, _, memory = model.gradient(_tokens(rng, 6), uniform_weights())
        assert len(memory) == TINY.n_layers
        assert all(m.shape == (TINY.memory, TINY.d_model) for m in memory)

    def test_lead_token_makes_first_token_a_target(self, model):
        tokens = [5, 6, 7, 8, 9, 10]
        w = np.zeros(VOCAB.size)
        w[5] = 1.0
        weights = FavoriteWeights(w=w, alpha=0.0)
        assert model.loss(tokens, weights) == 0.0
        with_lead = model.loss(tokens, weights, lead=4)
        assert with_lead > 0.0
        assert model.gradient(tokens, weights, lead=4)[0] == pytest.approx(with_lead)


class TestPredict:
    @pytest.mark.parametrize("length", [0, 1, 6, 15])
    def test_distribution(self, model, rng, length):
        probs = model.predict(list(_tokens(rng, length)))
        assert probs.shape == (VOCAB.size,)
        assert probs.sum() == pytest.approx(1.0)
        assert (probs >= 0).all()

    def test_checkpoint_reproduces_predictions(self, model, rng):
        grads = model.gradient(_tokens(rng, 6), uniform_weights())[1]
        model.apply_gradients(grads, 0.1, 1.0)
        context = list(_tokens(rng, 9))
        restored = predictor_from_checkpoint(loads_checkpoint(dumps_checkpoint(model.checkpoint(seed=0))))
        assert np.array_equal(restored.predict(context), model.predict(context))

    def test_segment_longer_than_window(self, model):
        with pytest.raises(ValueError):
            model.loss(list(range(7)), uniform_weights())


class TestParams:
    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            AttentionModelParams(d_model=10, n_heads=3)

    def test_same_seed_same_parameters(self):
        a, b = AttentionModel(TINY), AttentionModel(TINY)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

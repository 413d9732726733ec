"""Small segment-recurrent attention model with hand-written backprop.

Pre-norm blocks (RMSNorm without gain, causal multi-head attention, ReLU MLP).
Each layer attends over [memory ; segment], where memory is the previous
segment's input to that layer held constant. Parameters are kept
float32-representable so a checkpoint reproduces the live model exactly.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from favtune_cli.predictor import FavoriteWeights, PredictorInterface, favorite_aware_loss
from favtune_cli.remi_codec import VOCAB

logger = logging.getLogger(__name__)

RMS_EPS = 1e-5
INIT_STD = 0.08

Memory = List[np.ndarray]


@dataclass(frozen=True)
class AttentionModelParams:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context: int = 128
    memory: int = 128
    seed: int = 0
    vocab_size: int = VOCAB.size

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ValueError("d_model must be a positive multiple of n_heads")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.context < 2:
            raise ValueError("context window must be >= 2")
        if self.memory < 0:
            raise ValueError("memory length must be >= 0")


def rmsnorm(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * scale, scale


def rmsnorm_backward(x: np.ndarray, scale: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return scale * dy - scale ** 3 * x * np.sum(dy * x, axis=-1, keepdims=True) / x.shape[-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def to_float32_grid(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


class AttentionModel(PredictorInterface):
    kind = "attention"
    trainable = True

    def __init__(self, config: AttentionModelParams = AttentionModelParams()):
        super().__init__(config.vocab_size)
        self.config = config
        self.params = self._init_params()

    def _init_params(self) -> Dict[str, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, C = cfg.d_model, cfg.vocab_size

        def matrix(rows, cols):
            return to_float32_grid(rng.normal(0.0, INIT_STD, size=(rows, cols)))

        params = {"wte": matrix(C, d), "wpe": matrix(cfg.context, d)}
        for i in range(cfg.n_layers):
            params[f"layer{i}.attn_wq"] = matrix(d, d)
            params[f"layer{i}.attn_wk"] = matrix(d, d)
            params[f"layer{i}.attn_wv"] = matrix(d, d)
            params[f"layer{i}.attn_wo"] = matrix(d, d)
            params[f"layer{i}.mlp_fc1"] = matrix(d, 4 * d)
            params[f"layer{i}.mlp_fc2"] = matrix(4 * d, d)
        params["lm_head"] = matrix(d, C)
        return params

    def hyperparameters(self) -> Dict[str, Any]:
        return asdict(self.config)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.astype(np.float32) for name, p in self.params.items()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {', '.join(sorted(missing))}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
        self.params = {name: np.asarray(arrays[name], dtype=np.float64) for name in self.params}

    # forward

    def _forward(self, tokens: Sequence[int], memory: Optional[Memory]):
        cfg = self.config
        p = self.params
        x = np.asarray(tokens, dtype=np.int64)
        T, d, H = x.shape[0], cfg.d_model, cfg.n_heads
        dh = d // H
        if T > cfg.context:
            raise ValueError(f"segment of {T} tokens exceeds the {cfg.context}-token window")

        h = p["wte"][x] + p["wpe"][:T]
        caches = []
        new_memory: Memory = []
        for i in range(cfg.n_layers):
            mem = memory[i] if memory else np.zeros((0, d))
            M = mem.shape[0]
            h_in = h
            full = np.concatenate([mem, h_in])
            new_memory.append(full[-cfg.memory:] if cfg.memory else np.zeros((0, d)))

            n_full, s_full = rmsnorm(full)
            n = n_full[M:]
            q = n @ p[f"layer{i}.attn_wq"]
            k = n_full @ p[f"layer{i}.attn_wk"]
            v = n_full @ p[f"layer{i}.attn_wv"]
            qh = q.reshape(T, H, dh).transpose(1, 0, 2)
            kh = k.reshape(M + T, H, dh).transpose(1, 0, 2)
            vh = v.reshape(M + T, H, dh).transpose(1, 0, 2)

            att = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
            future = np.zeros((T, M + T), dtype=bool)
            future[:, M:] = np.triu(np.ones((T, T), dtype=bool), k=1)
            att = np.where(future, -np.inf, att)
            att = att - att.max(axis=-1, keepdims=True)
            a = np.exp(att)
            a /= a.sum(axis=-1, keepdims=True)
            o = (a @ vh).transpose(1, 0, 2).reshape(T, d)
            h_mid = h_in + o @ p[f"layer{i}.attn_wo"]

            n2, s2 = rmsnorm(h_mid)
            u = n2 @ p[f"layer{i}.mlp_fc1"]
            f = np.maximum(u, 0.0)
            h = h_mid + f @ p[f"layer{i}.mlp_fc2"]
            caches.append(
                dict(M=M, h_in=h_in, s_in=s_full[M:], n=n, n_full=n_full, qh=qh, kh=kh, vh=vh, a=a, o=o,
                     h_mid=h_mid, s2=s2, n2=n2, u=u, f=f)
            )
        nf, sf = rmsnorm(h)
        logits = nf @ p["lm_head"]
        return logits, caches, (h, sf, nf), new_memory

    def _inputs_targets(self, tokens: Sequence[int], lead: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
        """Model inputs and prediction targets for one segment.

        With a lead token (the last token of the previous segment) every token of the
        segment is a target; without one the first token has nothing to be predicted from.
        The segment's own last token is read as the next segment's lead.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[0] > self.config.context:
            raise ValueError(f"segment of {tokens.shape[0]} tokens exceeds the {self.config.context}-token window")
        if lead is None:
            return tokens[:-1], tokens[1:]
        return np.concatenate([np.asarray([lead], dtype=np.int64), tokens[:-1]]), tokens

    def loss(
        self, tokens: Sequence[int], weights: FavoriteWeights, memory: Optional[Memory] = None,
        lead: Optional[int] = None,
    ) -> float:
        inputs, targets = self._inputs_targets(tokens, lead)
        logits = self._forward(inputs, memory)[0]
        return favorite_aware_loss(log_softmax(logits), targets, weights)

    def gradient(
        self, tokens: Sequence[int], weights: FavoriteWeights, memory: Optional[Memory] = None,
        lead: Optional[int] = None,
    ) -> Tuple[float, Dict[str, np.ndarray], Memory]:
        """Loss, gradients of every parameter, and the memory for the next segment"""
        cfg = self.config
        p = self.params
        if len(tokens) < 2:
            raise ValueError("a training segment needs at least 2 tokens")
        inputs, targets = self._inputs_targets(tokens, lead)
        T, d, H = inputs.shape[0], cfg.d_model, cfg.n_heads
        dh = d // H
        logits, caches, (h_final, sf, nf), new_memory = self._forward(inputs, memory)

        logp = log_softmax(logits)
        loss = favorite_aware_loss(logp, targets, weights)

        dlogits = np.exp(logp)
        dlogits[np.arange(T), targets] -= 1.0
        dlogits *= (weights.w[targets] / T)[:, None]

        grads = {name: np.zeros_like(value) for name, value in p.items()}
        grads["lm_head"] = nf.T @ dlogits
        dh_ = rmsnorm_backward(h_final, sf, dlogits @ p["lm_head"].T)

        for i in reversed(range(cfg.n_layers)):
            c = caches[i]
            M = c["M"]
            fc1, fc2 = p[f"layer{i}.mlp_fc1"], p[f"layer{i}.mlp_fc2"]
            grads[f"layer{i}.mlp_fc2"] = c["f"].T @ dh_
            du = (dh_ @ fc2.T) * (c["u"] > 0)
            grads[f"layer{i}.mlp_fc1"] = c["n2"].T @ du
            dh_mid = dh_ + rmsnorm_backward(c["h_mid"], c["s2"], du @ fc1.T)

            wq, wk, wv, wo = (p[f"layer{i}.attn_{w}"] for w in ("wq", "wk", "wv", "wo"))
            grads[f"layer{i}.attn_wo"] = c["o"].T @ dh_mid
            do = (dh_mid @ wo.T).reshape(T, H, dh).transpose(1, 0, 2)
            a = c["a"]
            da = do @ c["vh"].transpose(0, 2, 1)
            dvh = a.transpose(0, 2, 1) @ do
            datt = a * (da - np.sum(da * a, axis=-1, keepdims=True)) / np.sqrt(dh)
            dqh = datt @ c["kh"]
            dkh = datt.transpose(0, 2, 1) @ c["qh"]
            dq = dqh.transpose(1, 0, 2).reshape(T, d)
            dk = dkh.transpose(1, 0, 2).reshape(M + T, d)
            dv = dvh.transpose(1, 0, 2).reshape(M + T, d)
            grads[f"layer{i}.attn_wq"] = c["n"].T @ dq
            grads[f"layer{i}.attn_wk"] = c["n_full"].T @ dk
            grads[f"layer{i}.attn_wv"] = c["n_full"].T @ dv
            # memory rows are constants; only the segment rows pass gradient down
            dn = dq @ wq.T + (dk @ wk.T + dv @ wv.T)[M:]
            dh_ = dh_mid + rmsnorm_backward(c["h_in"], c["s_in"], dn)

        np.add.at(grads["wte"], inputs, dh_)
        grads["wpe"][:T] += dh_
        return loss, grads, new_memory

    def apply_gradients(self, grads: Dict[str, np.ndarray], learning_rate: float, clip_norm: float) -> float:
        """One SGD step with global-norm clipping; returns the pre-clip norm"""
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        scale = clip_norm / norm if clip_norm > 0 and norm > clip_norm else 1.0
        for name, g in grads.items():
            self.params[name] = to_float32_grid(self.params[name] - learning_rate * scale * g)
        return norm

    # inference

    def predict(self, context: Sequence[int]) -> np.ndarray:
        ctx = list(context)
        if not ctx:
            return np.full(self.vocab_size, 1.0 / self.vocab_size)
        W = self.config.context
        memory = None
        if self.config.memory and len(ctx) > W:
            previous = ctx[max(0, len(ctx) - 2 * W):len(ctx) - W]
            memory = self._forward(previous, None)[3]
        logits = self._forward(ctx[-W:], memory)[0][-1]
        return np.exp(log_softmax(logits))

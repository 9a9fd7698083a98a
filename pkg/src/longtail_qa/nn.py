"""Layers and the optimizer used by every trainable component.

All parameters are float64 and initialized from an explicit
``numpy.random.Generator`` so runs are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, gather_rows, log_softmax, masked_fill, parameter

NEG_FILL = -1e30  # attention mask fill; finite so softmax backward stays NaN-free


class Module:
    """Parameter container; children are discovered through attributes."""

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        seen: set[int] = set()

        def visit(obj):
            if isinstance(obj, Tensor):
                if obj.requires_grad and id(obj) not in seen:
                    seen.add(id(obj))
                    out.append(obj)
            elif isinstance(obj, Module):
                for v in vars(obj).values():
                    visit(v)
            elif isinstance(obj, (list, tuple)):
                for v in obj:
                    visit(v)

        visit(self)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_state_arrays(self, arrays: list[np.ndarray]):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"state has {len(arrays)} arrays, model has {len(params)}")
        for p, a in zip(params, arrays):
            if p.data.shape != a.shape:
                raise ValueError(f"shape mismatch {p.data.shape} vs {a.shape}")
            p.data = a.astype(np.float64)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        scale = 1.0 / np.sqrt(d_in)
        self.w = parameter(rng.uniform(-scale, scale, size=(d_in, d_out)), name="w")
        self.b = parameter(np.zeros(d_out), name="b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, scale: float = 0.1):
        self.table = parameter(rng.normal(0.0, scale, size=(n, d)), name="emb")

    def __call__(self, idx: np.ndarray) -> Tensor:
        return gather_rows(self.table, idx)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(d), name="ln_g")
        self.beta = parameter(np.zeros(d), name="ln_b")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered ** 2).mean(axis=-1, keepdims=True)
        return centered / ((var + self.eps) ** 0.5) * self.gamma + self.beta


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError("d_model must divide evenly into heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor, B: int, T: int) -> Tensor:
        return x.reshape(B, T, self.n_heads, self.d_head).transpose((0, 2, 1, 3))

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        B, Tq, _ = q_in.shape
        Tk = k_in.shape[1]
        q = self._split(self.wq(q_in), B, Tq)
        k = self._split(self.wk(k_in), B, Tk)
        v = self._split(self.wv(v_in), B, Tk)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.d_head))
        if mask is not None:
            scores = masked_fill(scores, mask, NEG_FILL)
        attn = log_softmax(scores, axis=-1).exp()
        ctx = (attn @ v).transpose((0, 2, 1, 3)).reshape(B, Tq, self.n_heads * self.d_head)
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(self.w1(x).relu())


class EncoderBlock(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h, pad_mask)
        return x + self.ff(self.ln2(x))


class DecoderBlock(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ln3 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, enc: Tensor, causal_mask: np.ndarray,
                 enc_pad_mask: np.ndarray | None) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, h, causal_mask)
        h = self.ln2(x)
        x = x + self.cross_attn(h, enc, enc, enc_pad_mask)
        return x + self.ff(self.ln3(x))


def causal_mask(T: int) -> np.ndarray:
    """(1, 1, T, T) boolean mask, True above the diagonal (blocked)."""
    return np.triu(np.ones((T, T), dtype=bool), k=1)[None, None, :, :]


def pad_attention_mask(valid: np.ndarray) -> np.ndarray:
    """valid: (B, Tk) bool -> (B, 1, 1, Tk) mask, True where padded."""
    return ~valid[:, None, None, :]


class AdamW:
    """Adam with decoupled weight decay; state round-trips for resume."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
        }

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        self.m = [np.asarray(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.asarray(a, dtype=np.float64) for a in state["v"]]
        if len(self.m) != len(self.params):
            raise ValueError("optimizer state does not match parameter count")

"""Transformer building blocks shared by the encoders and the aggregator.

A `TransformerCore` prepends a learnable CLS token to a feature sequence,
adds sinusoidal positional encodings, runs pre-norm self-attention blocks
with a key padding mask, and projects the final CLS state to the shared
embedding space with L2 normalization.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

MASK_BIAS = -1e9


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Standard sin/cos positional encoding table of shape [length, dim]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * np.floor(i / 2.0)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


class TransformerCore:
    """CLS-pooled transformer encoder over a pre-embedded feature sequence."""

    def __init__(
        self,
        prefix: str,
        model_dim: int,
        num_layers: int,
        num_heads: int,
        mlp_dim: int,
        embed_dim: int,
        rng: np.random.Generator,
    ):
        if model_dim % num_heads != 0:
            raise ContractError(f"model_dim {model_dim} not divisible by num_heads {num_heads}")
        self.prefix = prefix
        self.model_dim = model_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.mlp_dim = mlp_dim
        self.embed_dim = embed_dim
        self.params: dict[str, Tensor] = {}

        d, m = model_dim, mlp_dim
        self._add("cls", rng.normal(0.0, 0.02, size=(d,)))
        for layer in range(num_layers):
            p = f"layer{layer}."
            for name in ("wq", "wk", "wv", "wo"):
                self._add(p + name, _xavier(rng, d, d))
                self._add(p + name.replace("w", "b"), np.zeros(d))
            self._add(p + "ln1_g", np.ones(d))
            self._add(p + "ln1_b", np.zeros(d))
            self._add(p + "ln2_g", np.ones(d))
            self._add(p + "ln2_b", np.zeros(d))
            self._add(p + "w1", _xavier(rng, d, m))
            self._add(p + "b1", np.zeros(m))
            self._add(p + "w2", _xavier(rng, m, d))
            self._add(p + "b2", np.zeros(d))
        self._add("ln_f_g", np.ones(d))
        self._add("ln_f_b", np.zeros(d))
        self._add("w_proj", _xavier(rng, d, embed_dim))
        self._add("b_proj", np.zeros(embed_dim))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        return {f"{self.prefix}{k}": v for k, v in self.params.items()}

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _attention(self, x: Tensor, mask_bias: Tensor | None, layer: int) -> Tensor:
        p = self.params
        pre = f"layer{layer}."
        b, s, d = x.shape
        h = self.num_heads
        dh = d // h
        q = linear(x, p[pre + "wq"], p[pre + "bq"])
        k = linear(x, p[pre + "wk"], p[pre + "bk"])
        v = linear(x, p[pre + "wv"], p[pre + "bv"])
        # [B,S,D] -> [B,H,S,Dh]
        q = q.reshape(b, s, h, dh).transpose((0, 2, 1, 3))
        k = k.reshape(b, s, h, dh).transpose((0, 2, 1, 3))
        v = v.reshape(b, s, h, dh).transpose((0, 2, 1, 3))
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        if mask_bias is not None:
            scores = scores + mask_bias
        attn = ad.softmax(scores, axis=-1)
        mixed = attn @ v
        mixed = mixed.transpose((0, 2, 1, 3)).reshape(b, s, d)
        return linear(mixed, p[pre + "wo"], p[pre + "bo"])

    def forward(
        self,
        x: Tensor,
        valid_len: np.ndarray | None,
        use_positional: bool = True,
    ) -> Tensor:
        """Encode a batch [B, S, model_dim] to unit-norm embeddings [B, embed_dim].

        `valid_len[i]` marks how many of the S positions are real; padded
        positions are excluded from attention via a key mask.
        """
        if x.ndim != 3 or x.shape[2] != self.model_dim:
            raise ShapeError(f"expected [B,S,{self.model_dim}] input, got {x.shape}")
        b, s, d = x.shape
        p = self.params

        cls_row = p["cls"].reshape(1, 1, d) * Tensor(np.ones((b, 1, 1)))
        seq = ad.concat([cls_row, x], axis=1)
        if use_positional:
            seq = seq + Tensor(sinusoidal_positions(s + 1, d))

        mask_bias = None
        if valid_len is not None:
            valid_len = np.asarray(valid_len)
            if valid_len.shape != (b,):
                raise ShapeError(f"valid_len shape {valid_len.shape} vs batch {b}")
            if np.any(valid_len < 1) or np.any(valid_len > s):
                raise ContractError(f"valid_len out of range [1, {s}]")
            # position 0 is CLS, always valid
            pos = np.arange(s + 1)[None, :]
            keep = pos <= valid_len[:, None]
            bias = np.where(keep, 0.0, MASK_BIAS)
            mask_bias = Tensor(bias[:, None, None, :])

        for layer in range(self.num_layers):
            pre = f"layer{layer}."
            normed = ad.layer_norm(seq, p[pre + "ln1_g"], p[pre + "ln1_b"])
            seq = seq + self._attention(normed, mask_bias, layer)
            normed = ad.layer_norm(seq, p[pre + "ln2_g"], p[pre + "ln2_b"])
            hidden = ad.gelu(linear(normed, p[pre + "w1"], p[pre + "b1"]))
            seq = seq + linear(hidden, p[pre + "w2"], p[pre + "b2"])

        final = ad.layer_norm(seq, p["ln_f_g"], p["ln_f_b"])
        cls_out = final[:, 0, :]
        projected = linear(cls_out, p["w_proj"], p["b_proj"])
        return ad.l2_normalize(projected, axis=-1)


def core_param_count(
    model_dim: int, num_layers: int, num_heads: int, mlp_dim: int, embed_dim: int
) -> int:
    """Analytic parameter count of a TransformerCore (excludes input embedding)."""
    d, m = model_dim, mlp_dim
    per_layer = 4 * (d * d + d) + 4 * d + (d * m + m) + (m * d + d)
    return d + num_layers * per_layer + 2 * d + (d * embed_dim + embed_dim)

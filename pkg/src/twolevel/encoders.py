"""Short-term encoders: clip frames -> embedding and token text -> embedding.

Both encoders are tiny CLS-pooled transformers projecting into one shared,
L2-normalized embedding space. The same text encoder instance serves
narrations and summaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .nn import TransformerCore, core_param_count


@dataclass(frozen=True)
class EncoderConfig:
    """Topology of one encoder; `vocab_size` for text, `frame_feature_dim` for clips."""

    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_dim: int = 128
    max_seq_len: int = 16
    embed_dim: int = 32
    vocab_size: int | None = None
    frame_feature_dim: int | None = None

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.max_seq_len < 1 or self.embed_dim < 1:
            raise ConfigError("max_seq_len and embed_dim must be positive")


@dataclass
class ClipInput:
    """One clip as a padded frame-feature matrix plus its real frame count."""

    frames: np.ndarray  # [n, frame_feature_dim] with n >= valid_len
    valid_len: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ContractError(f"frames must be 2-D, got shape {self.frames.shape}")
        if not (1 <= self.valid_len <= self.frames.shape[0]):
            raise ContractError(
                f"valid_len {self.valid_len} outside [1, {self.frames.shape[0]}]"
            )


@dataclass
class TextInput:
    """One token sequence (narration or summary) plus its real length."""

    tokens: np.ndarray  # int ids, [n] with n >= valid_len
    valid_len: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ContractError(f"tokens must be 1-D, got shape {self.tokens.shape}")
        if not (1 <= self.valid_len <= self.tokens.shape[0]):
            raise ContractError(
                f"valid_len {self.valid_len} outside [1, {self.tokens.shape[0]}]"
            )


def pad_clip_batch(clips: list[ClipInput], feature_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack clips into [B, S, F] padded to the longest valid length."""
    if not clips:
        raise ContractError("empty clip batch")
    lens = np.array([c.valid_len for c in clips])
    s = int(lens.max())
    out = np.zeros((len(clips), s, feature_dim))
    for i, c in enumerate(clips):
        if c.frames.shape[1] != feature_dim:
            raise ShapeError(f"clip feature dim {c.frames.shape[1]} != {feature_dim}")
        out[i, : c.valid_len] = c.frames[: c.valid_len]
    return out, lens


def pad_text_batch(texts: list[TextInput]) -> tuple[np.ndarray, np.ndarray]:
    """Stack token sequences into [B, S] padded with zeros."""
    if not texts:
        raise ContractError("empty text batch")
    lens = np.array([t.valid_len for t in texts])
    s = int(lens.max())
    out = np.zeros((len(texts), s), dtype=np.int64)
    for i, t in enumerate(texts):
        out[i, : t.valid_len] = t.tokens[: t.valid_len]
    return out, lens


class ClipEncoder:
    """f_v: frame-feature sequence -> unit-norm embedding."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        if config.frame_feature_dim is None:
            raise ConfigError("ClipEncoder needs frame_feature_dim")
        self.config = config
        f, d = config.frame_feature_dim, config.model_dim
        std = (2.0 / (f + d)) ** 0.5
        self.w_in = Tensor(rng.normal(0.0, std, size=(f, d)), requires_grad=True)
        self.b_in = Tensor(np.zeros(d), requires_grad=True)
        self.core = TransformerCore(
            "core.", d, config.num_layers, config.num_heads,
            config.mlp_dim, config.embed_dim, rng,
        )

    def named_params(self) -> dict[str, Tensor]:
        out = {"w_in": self.w_in, "b_in": self.b_in}
        out.update(self.core.named_params())
        return out

    def param_count(self) -> int:
        return self.w_in.size + self.b_in.size + self.core.param_count()

    def expected_param_count(self) -> int:
        c = self.config
        return c.frame_feature_dim * c.model_dim + c.model_dim + core_param_count(
            c.model_dim, c.num_layers, c.num_heads, c.mlp_dim, c.embed_dim
        )

    def encode_batch(self, frames: np.ndarray | Tensor, valid_len: np.ndarray) -> Tensor:
        """Encode [B, S, F] padded frames to [B, embed_dim] unit-norm rows."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.ndim != 3 or x.shape[2] != self.config.frame_feature_dim:
            raise ShapeError(
                f"expected [B,S,{self.config.frame_feature_dim}] frames, got {x.shape}"
            )
        if x.shape[1] > self.config.max_seq_len:
            raise ContractError(
                f"sequence length {x.shape[1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        projected = x @ self.w_in + self.b_in
        return self.core.forward(projected, valid_len)

    def encode(self, clip: ClipInput) -> np.ndarray:
        """Single-clip convenience wrapper; no gradient graph."""
        with ad.no_grad():
            emb = self.encode_batch(
                clip.frames[None, : clip.valid_len, :], np.array([clip.valid_len])
            )
        return emb.data[0]


class TextEncoder:
    """f_n: token sequence -> unit-norm embedding (narrations and summaries alike)."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        if config.vocab_size is None:
            raise ConfigError("TextEncoder needs vocab_size")
        self.config = config
        self.token_table = Tensor(
            rng.normal(0.0, 0.02, size=(config.vocab_size, config.model_dim)),
            requires_grad=True,
        )
        self.core = TransformerCore(
            "core.", config.model_dim, config.num_layers, config.num_heads,
            config.mlp_dim, config.embed_dim, rng,
        )

    def named_params(self) -> dict[str, Tensor]:
        out = {"token_table": self.token_table}
        out.update(self.core.named_params())
        return out

    def param_count(self) -> int:
        return self.token_table.size + self.core.param_count()

    def expected_param_count(self) -> int:
        c = self.config
        return c.vocab_size * c.model_dim + core_param_count(
            c.model_dim, c.num_layers, c.num_heads, c.mlp_dim, c.embed_dim
        )

    def encode_batch(self, tokens: np.ndarray, valid_len: np.ndarray) -> Tensor:
        """Encode [B, S] token ids to [B, embed_dim] unit-norm rows."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeError(f"expected [B,S] token ids, got {tokens.shape}")
        if tokens.shape[1] > self.config.max_seq_len:
            raise ContractError(
                f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if tokens.size and tokens.max() >= self.config.vocab_size:
            raise ContractError(f"token id {tokens.max()} >= vocab {self.config.vocab_size}")
        embedded = ad.embedding_lookup(self.token_table, tokens)
        return self.core.forward(embedded, valid_len)

    def encode(self, text: TextInput) -> np.ndarray:
        """Single-text convenience wrapper; no gradient graph."""
        with ad.no_grad():
            emb = self.encode_batch(
                text.tokens[None, : text.valid_len], np.array([text.valid_len])
            )
        return emb.data[0]


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit-norm embedding vectors; symmetric, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"similarity on shapes {a.shape} and {b.shape}")
    return float(a @ b)

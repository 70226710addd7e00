"""Long-term features as aggregations of short-term clip/narration embeddings.

Two aggregators: parameter-free averaging (order-blind by construction,
bitwise permutation-invariant thanks to sorted summation) and a CLS-pooled
self-attention stack whose positional encodings make it order-aware. One
aggregator instance serves both the visual and the textual stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ClipEncoder, TextEncoder, pad_clip_batch, pad_text_batch, ClipInput, TextInput
from .errors import ConfigError, ContractError, DegenerateAggregateError, ShapeError
from .nn import TransformerCore

AVERAGE = "average"
SELF_ATTENTION = "self_attention"


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = SELF_ATTENTION
    k_clips: int = 16
    sa_layers: int = 2
    sa_heads: int = 4
    sa_model_dim: int = 32
    sa_mlp_dim: int = 64

    def __post_init__(self):
        if self.kind not in (AVERAGE, SELF_ATTENTION):
            raise ConfigError(f"unknown aggregator kind {self.kind!r}")
        if self.k_clips < 1:
            raise ConfigError("k_clips must be >= 1")


def sample_uniform(video_or_count, k: int) -> list[int]:
    """K clip indices spread uniformly over the video, sorted ascending.

    Uses the floor(j * n / k) rule; when the video has fewer than k clips
    the nearest indices repeat.
    """
    n = len(video_or_count.clips) if hasattr(video_or_count, "clips") else int(video_or_count)
    if n < 1:
        raise ContractError("cannot sample clips from an empty video")
    if k < 1:
        raise ContractError("k must be >= 1")
    return [j * n // k for j in range(k)]


class AverageAggregator:
    """Arithmetic mean of the K vectors, then L2 normalization."""

    kind = AVERAGE

    def __init__(self, config: AggregatorConfig | None = None):
        self.config = config or AggregatorConfig(kind=AVERAGE)

    def named_params(self) -> dict[str, Tensor]:
        return {}

    def aggregate(self, seq: Tensor) -> Tensor:
        """[B, K, D] -> [B, D]; the mean uses sorted summation so the value is
        bitwise invariant to clip order."""
        if seq.ndim != 3:
            raise ShapeError(f"expected [B,K,D], got {seq.shape}")
        mean = ad.sorted_mean(seq, axis=1)
        norms = np.sqrt((mean.data**2).sum(axis=-1))
        if np.any(norms < 1e-8):
            raise DegenerateAggregateError(
                f"mean vector norm {norms.min():.3e} below 1e-8; opposing inputs cancelled"
            )
        return ad.l2_normalize(mean, axis=-1)


class SelfAttentionAggregator:
    """Order-aware aggregator: positional encodings + CLS-pooled attention stack."""

    kind = SELF_ATTENTION

    def __init__(
        self,
        config: AggregatorConfig,
        rng: np.random.Generator,
        use_positional: bool = True,
    ):
        if config.kind != SELF_ATTENTION:
            raise ConfigError("SelfAttentionAggregator requires kind='self_attention'")
        self.config = config
        self.use_positional = use_positional
        self.core = TransformerCore(
            "core.",
            config.sa_model_dim,
            config.sa_layers,
            config.sa_heads,
            config.sa_mlp_dim,
            config.sa_model_dim,
            rng,
        )

    def named_params(self) -> dict[str, Tensor]:
        return self.core.named_params()

    def param_count(self) -> int:
        return self.core.param_count()

    def aggregate(self, seq: Tensor) -> Tensor:
        """[B, K, D] -> [B, D] unit-norm; D must equal sa_model_dim."""
        if seq.ndim != 3 or seq.shape[2] != self.config.sa_model_dim:
            raise ShapeError(
                f"expected [B,K,{self.config.sa_model_dim}], got {seq.shape}"
            )
        return self.core.forward(seq, None, use_positional=self.use_positional)


Aggregator = AverageAggregator | SelfAttentionAggregator


def build_aggregator(
    config: AggregatorConfig, rng: np.random.Generator
) -> Aggregator:
    if config.kind == AVERAGE:
        return AverageAggregator(config)
    return SelfAttentionAggregator(config, rng)


def long_term_visual(video, clip_encoder: ClipEncoder, agg: Aggregator, k: int) -> np.ndarray:
    """f_V of one video: uniform clip sample -> f_v each -> aggregate. No graph."""
    indices = sample_uniform(video, k)
    clips = [
        ClipInput(video.clips[i].frames, video.clips[i].frames.shape[0]) for i in indices
    ]
    frames, lens = pad_clip_batch(clips, clip_encoder.config.frame_feature_dim)
    with ad.no_grad():
        embs = clip_encoder.encode_batch(frames, lens)
        out = agg.aggregate(embs.reshape(1, len(indices), embs.shape[1]))
    return out.data[0]


def long_term_textual(video, text_encoder: TextEncoder, agg: Aggregator, k: int) -> np.ndarray:
    """f_N of one video over the same uniform indices as the visual stream."""
    indices = sample_uniform(video, k)
    texts = [
        TextInput(video.clips[i].narration_tokens, len(video.clips[i].narration_tokens))
        for i in indices
    ]
    tokens, lens = pad_text_batch(texts)
    with ad.no_grad():
        embs = text_encoder.encode_batch(tokens, lens)
        out = agg.aggregate(embs.reshape(1, len(indices), embs.shape[1]))
    return out.data[0]

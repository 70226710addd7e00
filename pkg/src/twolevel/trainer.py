"""Joint two-level training: m child steps, then one parent step, repeated.

Child steps update the two encoders through the clip<->narration loss. Parent
steps aggregate per-video clip features and update the aggregator AND both
encoders through the summary-matching loss. All ablation modes of the
comparison table are driven from one schedule loop. Checkpoints capture
parameters, optimizer moments, and RNG state, so strict runs resume
bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .aggregation import (
    AVERAGE,
    SELF_ATTENTION,
    AggregatorConfig,
    AverageAggregator,
    SelfAttentionAggregator,
)
from .autodiff import Tensor, gradient_map
from .corpus import (
    ChildBatchInputs,
    Corpus,
    ParentBatchInputs,
    build_child_batch,
    build_parent_batch,
    build_summary_child_batch,
)
from .encoders import ClipEncoder, EncoderConfig, TextEncoder
from .errors import ConfigError, ContractError, NumericError, TrainingAborted
from .objectives import (
    ChildBatch,
    ParentBatch,
    child_loss,
    nce_grouped,
    parent_loss,
    parent_loss_no_summary,
)
from .optim import AdamW

MODES = (
    "child_only",
    "joint_avg",
    "joint_sa",
    "parent_only",
    "flat_summary",
    "no_summary",
    "video_summary_only",
)

# parent-loss variant per mode; None means the mode has no parent level
_PARENT_VARIANT = {
    "child_only": None,
    "flat_summary": None,
    "joint_avg": "summary",
    "joint_sa": "summary",
    "parent_only": "summary",
    "no_summary": "video_narration",
    "video_summary_only": "summary_video_only",
}

_AGG_KIND = {
    "child_only": None,
    "flat_summary": None,
    "joint_avg": AVERAGE,
    "joint_sa": SELF_ATTENTION,
    "parent_only": SELF_ATTENTION,
    "no_summary": SELF_ATTENTION,
    "video_summary_only": SELF_ATTENTION,
}

CHECKPOINT_MAGIC = b"TWOLEVEL-CKPT-1\n"


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "joint_sa"
    m: int = 5
    child_batch_size: int = 32
    parent_videos_per_batch: int = 8
    k_clips: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    temperature: float = 0.05
    total_steps: int = 1200
    seed: int = 0
    strict_determinism: bool = True
    one_sided: bool = False
    parent_every: str = "step"  # "step": m child STEPS per parent step; "epoch": m epochs
    init_checkpoint: str | None = None
    checkpoint_every: int = 0  # 0: final checkpoint only
    precision: str = "f64"
    # encoder topology (desk-scale defaults)
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_dim: int = 128
    max_seq_len: int = 16
    embed_dim: int = 32
    vocab_size: int = 256
    frame_feature_dim: int = 16
    # self-attention aggregator topology
    sa_layers: int = 2
    sa_heads: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.parent_every not in ("step", "epoch"):
            raise ConfigError("parent_every must be 'step' or 'epoch'")
        if self.precision not in ("f64", "f32"):
            raise ConfigError("precision must be 'f64' or 'f32'")
        if self.mode == "parent_only" and self.init_checkpoint is None:
            raise ConfigError("parent_only mode requires init_checkpoint")

    @property
    def has_child(self) -> bool:
        return self.mode != "parent_only"

    @property
    def has_parent(self) -> bool:
        return _PARENT_VARIANT[self.mode] is not None

    @property
    def parent_variant(self) -> str | None:
        return _PARENT_VARIANT[self.mode]

    @property
    def aggregator_kind(self) -> str | None:
        return _AGG_KIND[self.mode]

    def encoder_config(self, kind: str) -> EncoderConfig:
        return EncoderConfig(
            model_dim=self.model_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            mlp_dim=self.mlp_dim,
            max_seq_len=self.max_seq_len,
            embed_dim=self.embed_dim,
            vocab_size=self.vocab_size if kind == "text" else None,
            frame_feature_dim=self.frame_feature_dim if kind == "clip" else None,
        )

    def aggregator_config(self) -> AggregatorConfig:
        kind = self.aggregator_kind or AVERAGE
        return AggregatorConfig(
            kind=kind,
            k_clips=self.k_clips,
            sa_layers=self.sa_layers,
            sa_heads=self.sa_heads,
            sa_model_dim=self.embed_dim,
            sa_mlp_dim=2 * self.embed_dim,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass
class TrainState:
    config: TrainConfig
    clip_encoder: ClipEncoder
    text_encoder: TextEncoder
    aggregator: SelfAttentionAggregator | AverageAggregator | None
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    loss_history: list[float] = field(default_factory=list)

    def child_params(self) -> dict[str, Tensor]:
        out = {f"clip.{k}": v for k, v in self.clip_encoder.named_params().items()}
        out.update({f"text.{k}": v for k, v in self.text_encoder.named_params().items()})
        return out

    def agg_params(self) -> dict[str, Tensor]:
        if self.aggregator is None:
            return {}
        return {f"agg.{k}": v for k, v in self.aggregator.named_params().items()}

    def named_params(self) -> dict[str, Tensor]:
        out = self.child_params()
        out.update(self.agg_params())
        return out

    def eval_aggregator(self):
        """Aggregator used at evaluation time: the trained one if the mode has
        any, parameter-free averaging otherwise."""
        return self.aggregator if self.aggregator is not None else AverageAggregator()


def build_state(config: TrainConfig) -> TrainState:
    """Fresh state: parameter init and data-sampling RNG derived from the seed."""
    ad.set_default_dtype("float64" if config.precision == "f64" else "float32")
    ss_params, ss_data = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(ss_params)
    clip_enc = ClipEncoder(config.encoder_config("clip"), init_rng)
    text_enc = TextEncoder(config.encoder_config("text"), init_rng)
    agg = None
    if config.aggregator_kind == SELF_ATTENTION:
        agg = SelfAttentionAggregator(config.aggregator_config(), init_rng)
    elif config.aggregator_kind == AVERAGE:
        agg = AverageAggregator(config.aggregator_config())
    optimizer = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    state = TrainState(
        config=config,
        clip_encoder=clip_enc,
        text_encoder=text_enc,
        aggregator=agg,
        optimizer=optimizer,
        rng=np.random.default_rng(ss_data),
    )
    if config.init_checkpoint is not None:
        _load_params_into(state, config.init_checkpoint)
    return state


def _load_params_into(state: TrainState, checkpoint_path: str) -> None:
    """Adopt parameters (not optimizer/rng/step) from another run's checkpoint.

    Only names present in both are copied; shapes must match. The aggregator
    keeps its fresh init when the source run had none.
    """
    header, arrays = _read_checkpoint(checkpoint_path)
    own = state.named_params()
    for name, tensor in own.items():
        key = f"param.{name}"
        if key not in arrays:
            continue
        src = arrays[key]
        if src.shape != tensor.shape:
            raise ContractError(
                f"init_checkpoint param {name} has shape {src.shape}, expected {tensor.shape}"
            )
        tensor.data = src.astype(tensor.data.dtype)


# -- training steps -----------------------------------------------------------------


def train_step_child(
    state: TrainState, batch: ChildBatchInputs, lr: float | None = None
) -> float:
    """One child-level update: encoders only, through the clip<->narration loss."""
    cfg = state.config
    clip_emb = state.clip_encoder.encode_batch(batch.frames, batch.frame_lens)
    text_emb = state.text_encoder.encode_batch(batch.tokens, batch.token_lens)
    loss = child_loss(
        ChildBatch(clip_emb, text_emb, batch.positive_mask),
        cfg.temperature,
        one_sided=cfg.one_sided,
    )
    params = state.child_params()
    grads = gradient_map(loss, params)
    state.optimizer.step(params, grads)
    return loss.item()


def _encode_parent_streams(
    state: TrainState, batch: ParentBatchInputs, need_narrations: bool, need_summaries: bool
):
    b, k = batch.frame_lens.shape
    flat_frames = batch.frames.reshape(b * k, *batch.frames.shape[2:])
    clip_emb = state.clip_encoder.encode_batch(flat_frames, batch.frame_lens.reshape(-1))
    f_v = state.aggregator.aggregate(clip_emb.reshape(b, k, state.config.embed_dim))
    f_n = None
    if need_narrations:
        flat_tokens = batch.narration_tokens.reshape(b * k, -1)
        narr_emb = state.text_encoder.encode_batch(
            flat_tokens, batch.narration_lens.reshape(-1)
        )
        f_n = state.aggregator.aggregate(narr_emb.reshape(b, k, state.config.embed_dim))
    f_s = None
    if need_summaries:
        f_s = state.text_encoder.encode_batch(batch.summary_tokens, batch.summary_lens)
    return f_v, f_n, f_s


def train_step_parent(state: TrainState, batch: ParentBatchInputs) -> float:
    """One parent-level update: aggregator and both encoders.

    The loss variant follows the mode: summary matching (video and narration
    streams), summary matching without the narration stream, or the
    no-summary video<->narration pairing.
    """
    cfg = state.config
    if not cfg.has_parent:
        raise ContractError(f"mode {cfg.mode} has no parent level")
    variant = cfg.parent_variant
    if variant == "summary":
        f_v, f_n, f_s = _encode_parent_streams(state, batch, True, True)
        loss = parent_loss(
            ParentBatch(f_v, f_n, f_s, batch.positive_mask), cfg.temperature
        )
    elif variant == "summary_video_only":
        f_v, _, f_s = _encode_parent_streams(state, batch, False, True)
        loss = nce_grouped(f_v, f_s, batch.positive_mask, cfg.temperature)
    elif variant == "video_narration":
        f_v, f_n, _ = _encode_parent_streams(state, batch, True, False)
        loss = parent_loss_no_summary(f_v, f_n, cfg.temperature)
    else:  # pragma: no cover
        raise ConfigError(f"unhandled parent variant {variant!r}")
    params = state.named_params()
    grads = gradient_map(loss, params)
    state.optimizer.step(params, grads)
    return loss.item()


# -- schedule -------------------------------------------------------------------------


def _level_sequence(config: TrainConfig, corpus_size: int) -> Iterator[str]:
    """Yield 'child' / 'parent' / 'summary_child' labels for each step."""
    if config.mode == "parent_only":
        while True:
            yield "parent"
    slot = "summary_child" if config.mode == "flat_summary" else "parent"
    two_level = config.has_parent or config.mode == "flat_summary"
    if not two_level:
        while True:
            yield "child"
    if config.parent_every == "epoch":
        epoch_steps = max(1, corpus_size // config.child_batch_size)
        children = config.m * epoch_steps
    else:
        children = config.m
    while True:
        for _ in range(children):
            yield "child"
        yield slot


def run_schedule(
    config: TrainConfig,
    corpus: Corpus,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run the whole training schedule; return final state and metric records.

    With `out_dir` set, writes `metrics.jsonl`, periodic checkpoints, and
    `checkpoint_final.bin`. `resume_from` restores a checkpoint saved by a run
    with the IDENTICAL config (hash-checked) and continues to `total_steps`.
    """
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if config_hash(state.config) != config_hash(config):
            raise ContractError(
                "refusing to resume: checkpoint config hash "
                f"{config_hash(state.config)} != requested {config_hash(config)}"
            )
    else:
        state = build_state(config)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    levels = _level_sequence(config, len(corpus))
    # burn level labels already consumed by a resumed run
    for _ in range(state.step):
        next(levels)

    metrics: list[dict] = []
    while state.step < config.total_steps:
        level = next(levels)
        started = time.perf_counter()
        try:
            if level == "child":
                batch = build_child_batch(corpus, config.child_batch_size, state.rng)
                loss = train_step_child(state, batch)
            elif level == "summary_child":
                batch = build_summary_child_batch(
                    corpus, config.child_batch_size, state.rng
                )
                loss = train_step_child(state, batch)
            else:
                pbatch = build_parent_batch(
                    corpus, config.parent_videos_per_batch, config.k_clips, state.rng
                )
                loss = train_step_parent(state, pbatch)
        except NumericError as exc:
            raise TrainingAborted(
                f"non-finite loss at step {state.step + 1} ({level}): {exc}",
                step=state.step + 1,
                loss_history=state.loss_history[-10:],
            ) from exc
        if not np.isfinite(loss):
            raise TrainingAborted(
                f"non-finite loss at step {state.step + 1} ({level})",
                step=state.step + 1,
                loss_history=state.loss_history[-10:],
            )
        state.step += 1
        state.loss_history.append(loss)
        wall_ms = 0.0 if config.strict_determinism else (time.perf_counter() - started) * 1e3
        record = {
            "step": state.step,
            "level": "parent" if level == "parent" else "child",
            "loss": loss,
            "lr": config.lr,
            "wall_ms": wall_ms,
        }
        metrics.append(record)
        if (
            out_path is not None
            and config.checkpoint_every > 0
            and state.step % config.checkpoint_every == 0
            and state.step < config.total_steps
        ):
            save_checkpoint(out_path / f"checkpoint_{state.step:06d}.bin", state)

    if out_path is not None:
        mode = "a" if resume_from is not None else "w"
        with open(out_path / "metrics.jsonl", mode) as fh:
            for record in metrics:
                fh.write(json.dumps(record) + "\n")
        save_checkpoint(out_path / "checkpoint_final.bin", state)
    return state, metrics


# -- checkpointing ----------------------------------------------------------------------


def _collect_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {f"param.{k}": v.data for k, v in state.named_params().items()}
    for k, v in state.optimizer.state_arrays().items():
        arrays[f"opt.{k}"] = v
    return arrays


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    """Single-file checkpoint: json header plus raw array blob.

    Serialization is canonical (sorted names, fixed layout), so saving an
    unchanged state twice produces identical bytes.
    """
    arrays = _collect_arrays(state)
    entries = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
            }
        )
        offset += arr.nbytes
    header = {
        "version": 1,
        "config": state.config.to_dict(),
        "config_hash": config_hash(state.config),
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "opt_steps": state.optimizer.step_counters(),
        "loss_history_tail": [float(x) for x in state.loss_history[-10:]],
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for name in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[name]).tobytes())


def _read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"{path} is not a checkpoint file")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode())
        blob = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype=dtype, count=count, offset=start
        ).reshape(shape).copy()
    return header, arrays


def load_checkpoint(path: str | Path) -> TrainState:
    """Rebuild a TrainState (params, optimizer moments, RNG, step) from file."""
    header, arrays = _read_checkpoint(path)
    config = TrainConfig(**header["config"])
    ad.set_default_dtype("float64" if config.precision == "f64" else "float32")
    # build_state would re-apply init_checkpoint; params are overwritten below anyway
    ss_params, _ = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(ss_params)
    clip_enc = ClipEncoder(config.encoder_config("clip"), init_rng)
    text_enc = TextEncoder(config.encoder_config("text"), init_rng)
    agg = None
    if config.aggregator_kind == SELF_ATTENTION:
        agg = SelfAttentionAggregator(config.aggregator_config(), init_rng)
    elif config.aggregator_kind == AVERAGE:
        agg = AverageAggregator(config.aggregator_config())
    optimizer = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    state = TrainState(
        config=config,
        clip_encoder=clip_enc,
        text_encoder=text_enc,
        aggregator=agg,
        optimizer=optimizer,
        rng=np.random.default_rng(0),
        step=int(header["step"]),
        loss_history=list(header.get("loss_history_tail", [])),
    )
    for name, tensor in state.named_params().items():
        key = f"param.{name}"
        if key not in arrays:
            raise ContractError(f"checkpoint missing parameter {name}")
        if arrays[key].shape != tensor.shape:
            raise ContractError(f"checkpoint param {name} shape mismatch")
        tensor.data = arrays[key]
    opt_arrays = {
        k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.")
    }
    optimizer.load_state(opt_arrays, header["opt_steps"])
    state.rng.bit_generator.state = header["rng_state"]
    return state

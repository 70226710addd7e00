"""Hierarchical synthetic corpus: videos of clips with narrations plus one
summary per video, stored as JSONL with a sidecar manifest.

Each video draws a latent intent; an intent-specific Markov chain over action
labels emits the clip sequence. Clip frames are noisy linear renderings of
per-action latent vectors; narrations are noisy token encodings of the action
label; summaries encode the intent. With `order_signal` enabled, intents come
in pairs that share one action set but traverse it in opposite directions, so
clip ORDER (not just content) separates the pair. Everything is deterministic
given the seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError, IntegrityError, ParseError

FORMAT_VERSION = 1

PAD_TOKEN = 0
NUM_NOISE_TOKENS = 8
NOISE_TOKEN_BASE = 1
ACTION_TOKEN_BASE = NOISE_TOKEN_BASE + NUM_NOISE_TOKENS


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic corpus generator."""

    num_videos: int = 200
    clips_per_video: int = 16
    num_intents: int = 8
    actions_per_intent: int = 6
    frame_feature_dim: int = 16
    latent_dim: int = 8
    frames_per_clip: int = 4
    min_text_tokens: int = 3
    max_text_tokens: int = 6
    vocab_size: int = 256
    frame_noise: float = 0.2
    token_noise: float = 0.02
    order_signal: bool = True
    advance_prob: float = 0.4
    # seed of the fixed rendering structure (action latents, renderer, slot
    # offsets); splits meant to be evaluated together must share it
    structure_seed: int = 0

    def __post_init__(self):
        if self.num_videos < 1 or self.clips_per_video < 1:
            raise ConfigError("need at least one video and one clip per video")
        if self.actions_per_intent * self.num_intents > self.vocab_size:
            raise ConfigError(
                f"actions_per_intent*num_intents = "
                f"{self.actions_per_intent * self.num_intents} exceeds vocab "
                f"{self.vocab_size}"
            )
        if self.intent_token_base + self.num_intents > self.vocab_size:
            raise ConfigError(
                "token layout (pad + noise + actions + intents) does not fit vocab"
            )
        if not (1 <= self.min_text_tokens <= self.max_text_tokens):
            raise ConfigError("text token lengths must satisfy 1 <= min <= max")
        if self.frame_noise < 0 or not (0 <= self.token_noise <= 1):
            raise ConfigError("invalid noise levels")
        if not (0 < self.advance_prob <= 1):
            raise ConfigError("advance_prob must be in (0, 1]")

    @property
    def num_action_sets(self) -> int:
        if self.order_signal:
            return (self.num_intents + 1) // 2
        return self.num_intents

    @property
    def num_actions(self) -> int:
        return self.num_action_sets * self.actions_per_intent

    @property
    def intent_token_base(self) -> int:
        return ACTION_TOKEN_BASE + self.num_actions

    def action_progression(self, intent: int) -> list[int]:
        """Ordered action labels this intent walks through."""
        if self.order_signal:
            set_id = intent // 2
            base = set_id * self.actions_per_intent
            labels = list(range(base, base + self.actions_per_intent))
            return labels if intent % 2 == 0 else list(reversed(labels))
        base = intent * self.actions_per_intent
        return list(range(base, base + self.actions_per_intent))


@dataclass
class ClipRecord:
    """One short clip: rendered frames, its narration, and the latent action."""

    clip_index: int
    frames: np.ndarray          # [frames_per_clip, frame_feature_dim]
    narration_tokens: np.ndarray  # [n] int ids, no padding
    action_label: int


@dataclass
class VideoRecord:
    """One long video: ordered clips, one summary, latent intent label."""

    video_id: str
    clips: list[ClipRecord]
    summary_tokens: np.ndarray
    latent_intent_id: int

    def __post_init__(self):
        if not self.clips:
            raise ContractError(f"video {self.video_id} has no clips")
        for want, clip in enumerate(self.clips):
            if clip.clip_index != want:
                raise ContractError(
                    f"video {self.video_id}: clip indices not contiguous from 0"
                )

    @property
    def duration_clips(self) -> int:
        return len(self.clips)


@dataclass
class CorpusManifest:
    split: str
    video_count: int
    vocab_size: int
    frame_feature_dim: int
    seed: int | None = None
    generator: dict | None = None
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Corpus:
    manifest: CorpusManifest
    videos: list[VideoRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self) -> Iterator[VideoRecord]:
        return iter(self.videos)

    def __getitem__(self, i: int) -> VideoRecord:
        return self.videos[i]


# -- generation ------------------------------------------------------------------


def _sample_action_sequence(
    cfg: GeneratorConfig, intent: int, rng: np.random.Generator
) -> list[int]:
    progression = cfg.action_progression(intent)
    if not cfg.order_signal:
        return [int(a) for a in rng.choice(progression, size=cfg.clips_per_video)]
    pos = 0
    labels = []
    for _ in range(cfg.clips_per_video):
        labels.append(progression[pos])
        if pos < len(progression) - 1 and rng.random() < cfg.advance_prob:
            pos += 1
    return labels


def _encode_text(
    cfg: GeneratorConfig, base_token: int, rng: np.random.Generator
) -> np.ndarray:
    length = int(rng.integers(cfg.min_text_tokens, cfg.max_text_tokens + 1))
    tokens = np.full(length, base_token, dtype=np.int64)
    if cfg.token_noise > 0:
        flip = rng.random(length) < cfg.token_noise
        tokens[flip] = NOISE_TOKEN_BASE + rng.integers(
            0, NUM_NOISE_TOKENS, size=int(flip.sum())
        )
    return tokens


def generate_synthetic(cfg: GeneratorConfig, seed: int, split: str = "train") -> Corpus:
    """Build a corpus in memory; byte-identical output for identical inputs."""
    rng = np.random.default_rng(seed)

    # fixed structure: per-action latents, a linear renderer, per-slot offsets;
    # drawn from structure_seed so train/eval splits see one visual world
    struct_rng = np.random.default_rng(cfg.structure_seed)
    latents = struct_rng.normal(size=(cfg.num_actions, cfg.latent_dim))
    render = struct_rng.normal(size=(cfg.frame_feature_dim, cfg.latent_dim)) / np.sqrt(
        cfg.latent_dim
    )
    slot_offsets = struct_rng.normal(size=(cfg.frames_per_clip, cfg.frame_feature_dim)) * 0.3
    rendered = latents @ render.T  # [num_actions, frame_feature_dim]

    # balanced intent assignment in a random order
    intents = np.array(
        [i % cfg.num_intents for i in range(cfg.num_videos)], dtype=np.int64
    )
    rng.shuffle(intents)

    videos: list[VideoRecord] = []
    for vi in range(cfg.num_videos):
        intent = int(intents[vi])
        actions = _sample_action_sequence(cfg, intent, rng)
        clips = []
        for ci, action in enumerate(actions):
            frames = rendered[action][None, :] + slot_offsets
            if cfg.frame_noise > 0:
                frames = frames + rng.normal(size=frames.shape) * cfg.frame_noise
            narration = _encode_text(cfg, ACTION_TOKEN_BASE + action, rng)
            clips.append(
                ClipRecord(
                    clip_index=ci,
                    frames=np.asarray(frames, dtype=np.float64),
                    narration_tokens=narration,
                    action_label=action,
                )
            )
        summary = _encode_text(cfg, cfg.intent_token_base + intent, rng)
        videos.append(
            VideoRecord(
                video_id=f"{split}-{vi:04d}",
                clips=clips,
                summary_tokens=summary,
                latent_intent_id=intent,
            )
        )

    manifest = CorpusManifest(
        split=split,
        video_count=cfg.num_videos,
        vocab_size=cfg.vocab_size,
        frame_feature_dim=cfg.frame_feature_dim,
        seed=seed,
        generator=asdict(cfg),
    )
    return Corpus(manifest=manifest, videos=videos)


# -- persistence -------------------------------------------------------------------


def _video_to_json(video: VideoRecord) -> str:
    obj = {
        "video_id": video.video_id,
        "intent": video.latent_intent_id,
        "summary_tokens": video.summary_tokens.tolist(),
        "clips": [
            {
                "index": c.clip_index,
                "action": c.action_label,
                "narration_tokens": c.narration_tokens.tolist(),
                "frames": c.frames.tolist(),
            }
            for c in video.clips
        ],
    }
    return json.dumps(obj, separators=(",", ":"))


def _video_from_json(obj: dict) -> VideoRecord:
    clips = [
        ClipRecord(
            clip_index=int(c["index"]),
            frames=np.asarray(c["frames"], dtype=np.float64),
            narration_tokens=np.asarray(c["narration_tokens"], dtype=np.int64),
            action_label=int(c["action"]),
        )
        for c in obj["clips"]
    ]
    return VideoRecord(
        video_id=obj["video_id"],
        clips=clips,
        summary_tokens=np.asarray(obj["summary_tokens"], dtype=np.int64),
        latent_intent_id=int(obj["intent"]),
    )


def corpus_paths(prefix: str | Path) -> tuple[Path, Path]:
    prefix = Path(prefix)
    return prefix.with_suffix(".jsonl"), prefix.with_suffix(".manifest.json")


def save_corpus(corpus: Corpus, prefix: str | Path) -> None:
    """Write `<prefix>.jsonl` (one video per line) and `<prefix>.manifest.json`."""
    data_path, manifest_path = corpus_paths(prefix)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    with open(data_path, "w") as fh:
        for video in corpus.videos:
            fh.write(_video_to_json(video))
            fh.write("\n")
    with open(manifest_path, "w") as fh:
        json.dump(corpus.manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def iter_videos(prefix: str | Path) -> Iterator[VideoRecord]:
    """Stream videos one line at a time without materializing the corpus."""
    data_path, _ = corpus_paths(prefix)
    with open(data_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                yield _video_from_json(obj)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{data_path}:{lineno}: malformed video record: {exc}") from exc


def load_manifest(prefix: str | Path) -> CorpusManifest:
    _, manifest_path = corpus_paths(prefix)
    with open(manifest_path) as fh:
        raw = json.load(fh)
    known = {k: raw[k] for k in CorpusManifest.__dataclass_fields__ if k in raw}
    return CorpusManifest(**known)


def load_corpus(prefix: str | Path) -> Corpus:
    """Load a corpus and verify it against its manifest."""
    manifest = load_manifest(prefix)
    videos = list(iter_videos(prefix))
    if len(videos) != manifest.video_count:
        raise IntegrityError(
            f"manifest promises {manifest.video_count} videos but file has {len(videos)}"
        )
    return Corpus(manifest=manifest, videos=videos)


# -- batch assembly ---------------------------------------------------------------


@dataclass
class ChildBatchInputs:
    """Raw clip/narration pairs sampled from distinct videos."""

    frames: np.ndarray        # [B, S, F]
    frame_lens: np.ndarray    # [B]
    tokens: np.ndarray        # [B, T]
    token_lens: np.ndarray    # [B]
    action_labels: np.ndarray  # [B]
    video_ids: list[str]
    positive_mask: np.ndarray  # [B, B]


@dataclass
class ParentBatchInputs:
    """Per-video uniform clip samples, their narrations, and the summary."""

    frames: np.ndarray         # [B, K, S, F]
    frame_lens: np.ndarray     # [B, K]
    narration_tokens: np.ndarray  # [B, K, T]
    narration_lens: np.ndarray    # [B, K]
    summary_tokens: np.ndarray    # [B, Ts]
    summary_lens: np.ndarray      # [B]
    clip_indices: np.ndarray      # [B, K]
    intents: np.ndarray           # [B]
    video_ids: list[str]
    positive_mask: np.ndarray     # [B, B]


def _pad_token_rows(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(r) for r in rows])
    out = np.full((len(rows), int(lens.max())), PAD_TOKEN, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out, lens


def _pad_frame_stack(stacks: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([s.shape[0] for s in stacks])
    smax = int(lens.max())
    dim = stacks[0].shape[1]
    out = np.zeros((len(stacks), smax, dim))
    for i, s in enumerate(stacks):
        out[i, : s.shape[0]] = s
    return out, lens


def build_child_batch(
    corpus: Corpus, batch_size: int, rng: np.random.Generator
) -> ChildBatchInputs:
    """Sample `batch_size` (clip, narration) pairs from distinct videos.

    Positives group batch items sharing an action label, plus the diagonal.
    """
    if len(corpus) < batch_size:
        raise ContractError(
            f"corpus has {len(corpus)} videos, need at least {batch_size}"
        )
    video_idx = rng.choice(len(corpus), size=batch_size, replace=False)
    frames, narrs, actions, vids = [], [], [], []
    for vi in video_idx:
        video = corpus[int(vi)]
        clip = video.clips[int(rng.integers(0, len(video.clips)))]
        frames.append(clip.frames)
        narrs.append(clip.narration_tokens)
        actions.append(clip.action_label)
        vids.append(video.video_id)
    frame_arr, frame_lens = _pad_frame_stack(frames)
    token_arr, token_lens = _pad_token_rows(narrs)
    labels = np.array(actions)
    mask = labels[:, None] == labels[None, :]
    np.fill_diagonal(mask, True)
    return ChildBatchInputs(
        frames=frame_arr,
        frame_lens=frame_lens,
        tokens=token_arr,
        token_lens=token_lens,
        action_labels=labels,
        video_ids=vids,
        positive_mask=mask,
    )


def build_summary_child_batch(
    corpus: Corpus, batch_size: int, rng: np.random.Generator
) -> ChildBatchInputs:
    """Flat-summary variant: pair each video's summary with one of its clips.

    Used by the no-hierarchy ablation, which feeds summaries through the
    child-level loss instead of aggregating. Positives group same-intent
    items (identical summaries must not be each other's negatives).
    """
    if len(corpus) < batch_size:
        raise ContractError(
            f"corpus has {len(corpus)} videos, need at least {batch_size}"
        )
    video_idx = rng.choice(len(corpus), size=batch_size, replace=False)
    frames, texts, intents, vids = [], [], [], []
    for vi in video_idx:
        video = corpus[int(vi)]
        clip = video.clips[int(rng.integers(0, len(video.clips)))]
        frames.append(clip.frames)
        texts.append(video.summary_tokens)
        intents.append(video.latent_intent_id)
        vids.append(video.video_id)
    frame_arr, frame_lens = _pad_frame_stack(frames)
    token_arr, token_lens = _pad_token_rows(texts)
    labels = np.array(intents)
    mask = labels[:, None] == labels[None, :]
    np.fill_diagonal(mask, True)
    return ChildBatchInputs(
        frames=frame_arr,
        frame_lens=frame_lens,
        tokens=token_arr,
        token_lens=token_lens,
        action_labels=labels,
        video_ids=vids,
        positive_mask=mask,
    )


def build_parent_batch(
    corpus: Corpus, num_videos: int, k: int, rng: np.random.Generator
) -> ParentBatchInputs:
    """Sample `num_videos` distinct videos; take K uniform clips from each.

    Positive mask is diagonal: each summary matches only its own video.
    """
    from .aggregation import sample_uniform

    if len(corpus) < num_videos:
        raise ContractError(
            f"corpus has {len(corpus)} videos, need at least {num_videos}"
        )
    video_idx = rng.choice(len(corpus), size=num_videos, replace=False)
    all_frames, all_narrs, summaries, intents, vids, indices = [], [], [], [], [], []
    for vi in video_idx:
        video = corpus[int(vi)]
        idx = sample_uniform(video, k)
        indices.append(idx)
        all_frames.extend(video.clips[i].frames for i in idx)
        all_narrs.extend(video.clips[i].narration_tokens for i in idx)
        summaries.append(video.summary_tokens)
        intents.append(video.latent_intent_id)
        vids.append(video.video_id)
    frame_arr, frame_lens = _pad_frame_stack(all_frames)
    narr_arr, narr_lens = _pad_token_rows(all_narrs)
    summ_arr, summ_lens = _pad_token_rows(summaries)
    b = num_videos
    return ParentBatchInputs(
        frames=frame_arr.reshape(b, k, *frame_arr.shape[1:]),
        frame_lens=frame_lens.reshape(b, k),
        narration_tokens=narr_arr.reshape(b, k, -1),
        narration_lens=narr_lens.reshape(b, k),
        summary_tokens=summ_arr,
        summary_lens=summ_lens,
        clip_indices=np.array(indices),
        intents=np.array(intents),
        video_ids=vids,
        positive_mask=np.eye(b, dtype=bool),
    )

"""Evaluation protocols: three 5-way MCQ tasks, retrieval metrics, a linear
probe, and embedding export.

The child MCQ matches a narration prompt against candidate clips (inter- and
intra-video splits). The summary MCQ matches a summary prompt against
candidate whole videos. The shuffle MCQ keeps one video's clip set fixed and
varies only the clip order, probing temporal sensitivity. Scoring breaks
exact similarity ties uniformly at random and logs how many occurred:
an order-blind scorer produces exact ties on the shuffle task, and silent
first-index argmax would misreport its accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aggregation import sample_uniform
from .autodiff import Tensor
from .corpus import Corpus
from .encoders import ClipEncoder, TextEncoder
from .errors import ContractError
from .optim import AdamW

CHANCE_5WAY = 20.0


@dataclass(frozen=True)
class SourceRef:
    """Pointer to corpus content an MCQ prompt or candidate embeds."""

    kind: str  # "narration" | "summary" | "clip" | "video"
    video_id: str
    clip_index: int | None = None
    clip_indices: tuple[int, ...] | None = None  # video candidates; order matters


@dataclass(frozen=True)
class MCQItem:
    prompt: SourceRef
    candidates: tuple[SourceRef, ...]
    answer_index: int
    split_tag: str = "none"  # "inter" | "intra" | "none"

    def __post_init__(self):
        if len(self.candidates) != 5:
            raise ContractError(f"MCQ item needs exactly 5 candidates, got {len(self.candidates)}")
        if not (0 <= self.answer_index < 5):
            raise ContractError(f"answer_index {self.answer_index} outside [0, 5)")


@dataclass
class EvalReport:
    task: str
    accuracy: float  # percent
    item_count: int
    chance: float = CHANCE_5WAY
    per_split: dict[str, float] = field(default_factory=dict)
    tie_count: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def _json_safe(x: float):
            return None if np.isnan(x) else x

        return {
            "task": self.task,
            "accuracy": _json_safe(self.accuracy),
            "item_count": self.item_count,
            "chance": _json_safe(self.chance),
            "per_split": self.per_split,
            "tie_count": self.tie_count,
            **({"extras": self.extras} if self.extras else {}),
        }


# -- item builders -----------------------------------------------------------------


def _place_answer(correct: SourceRef, distractors: list[SourceRef], rng) -> tuple[tuple, int]:
    answer = int(rng.integers(0, 5))
    cands = list(distractors)
    cands.insert(answer, correct)
    return tuple(cands), answer


def build_child_mcq(
    corpus: Corpus, n_items: int, split: str, rng: np.random.Generator
) -> list[MCQItem]:
    """Narration prompt, five candidate clips.

    inter: distractor clips come from four other videos; intra: from four
    other positions of the same video.
    """
    if split not in ("inter", "intra"):
        raise ContractError(f"split must be 'inter' or 'intra', got {split!r}")
    if split == "inter" and len(corpus) < 5:
        raise ContractError("inter split needs at least 5 videos")
    eligible = [i for i, v in enumerate(corpus) if len(v.clips) >= 5]
    if split == "intra" and not eligible:
        raise ContractError("intra split needs videos with at least 5 clips")
    items = []
    for _ in range(n_items):
        if split == "inter":
            vi = int(rng.integers(0, len(corpus)))
        else:
            vi = int(eligible[rng.integers(0, len(eligible))])
        video = corpus[vi]
        ci = int(rng.integers(0, len(video.clips)))
        prompt = SourceRef("narration", video.video_id, clip_index=ci)
        correct = SourceRef("clip", video.video_id, clip_index=ci)
        distractors = []
        if split == "inter":
            others = rng.choice(
                [i for i in range(len(corpus)) if i != vi], size=4, replace=False
            )
            for oi in others:
                other = corpus[int(oi)]
                distractors.append(
                    SourceRef(
                        "clip",
                        other.video_id,
                        clip_index=int(rng.integers(0, len(other.clips))),
                    )
                )
        else:
            other_clips = rng.choice(
                [j for j in range(len(video.clips)) if j != ci], size=4, replace=False
            )
            distractors = [
                SourceRef("clip", video.video_id, clip_index=int(j)) for j in other_clips
            ]
        cands, answer = _place_answer(correct, distractors, rng)
        items.append(MCQItem(prompt, cands, answer, split_tag=split))
    return items


def build_summary_mcq(
    corpus: Corpus, n_items: int, rng: np.random.Generator, k: int = 16
) -> list[MCQItem]:
    """Summary prompt, five candidate videos (K uniformly sampled clips each)."""
    if len(corpus) < 5:
        raise ContractError("summary MCQ needs at least 5 videos")
    items = []
    for _ in range(n_items):
        vi = int(rng.integers(0, len(corpus)))
        video = corpus[vi]
        prompt = SourceRef("summary", video.video_id)
        correct = SourceRef(
            "video", video.video_id, clip_indices=tuple(sample_uniform(video, k))
        )
        others = rng.choice(
            [i for i in range(len(corpus)) if i != vi], size=4, replace=False
        )
        distractors = [
            SourceRef(
                "video",
                corpus[int(oi)].video_id,
                clip_indices=tuple(sample_uniform(corpus[int(oi)], k)),
            )
            for oi in others
        ]
        cands, answer = _place_answer(correct, distractors, rng)
        items.append(MCQItem(prompt, cands, answer))
    return items


def build_shuffle_mcq(
    corpus: Corpus, n_items: int, rng: np.random.Generator, k: int = 16,
    max_retries: int = 100,
) -> list[MCQItem]:
    """Summary prompt; all five candidates hold the SAME clips of the prompt's
    video, but only the correct one preserves temporal order."""
    eligible = [i for i, v in enumerate(corpus) if len(v.clips) >= 3]
    if not eligible:
        raise ContractError("shuffle MCQ needs videos with at least 3 clips")
    items = []
    for _ in range(n_items):
        vi = int(eligible[rng.integers(0, len(eligible))])
        video = corpus[vi]
        original = tuple(sample_uniform(video, k))
        prompt = SourceRef("summary", video.video_id)
        correct = SourceRef("video", video.video_id, clip_indices=original)
        seen = {original}
        orders: list[tuple[int, ...]] = []
        tries = 0
        while len(orders) < 4:
            perm = tuple(int(x) for x in rng.permutation(list(original)))
            tries += 1
            if perm not in seen:
                seen.add(perm)
                orders.append(perm)
            elif tries > max_retries:
                raise ContractError(
                    f"could not find 4 distinct shuffles for video {video.video_id}"
                )
        distractors = [
            SourceRef("video", video.video_id, clip_indices=o) for o in orders
        ]
        cands, answer = _place_answer(correct, distractors, rng)
        items.append(MCQItem(prompt, cands, answer))
    return items


# -- scoring -----------------------------------------------------------------------


class EmbeddingCache:
    """Per-corpus embeddings of every clip, narration, and summary, encoded in
    batches without building gradient graphs."""

    def __init__(
        self,
        corpus: Corpus,
        clip_encoder: ClipEncoder,
        text_encoder: TextEncoder,
        chunk: int = 256,
    ):
        self._clip_rows: dict[tuple[str, int], int] = {}
        self._narr_rows: dict[tuple[str, int], int] = {}
        self._summary_rows: dict[str, int] = {}
        frames, narrs, summaries = [], [], []
        for video in corpus:
            for clip in video.clips:
                self._clip_rows[(video.video_id, clip.clip_index)] = len(frames)
                frames.append(clip.frames)
                self._narr_rows[(video.video_id, clip.clip_index)] = len(narrs)
                narrs.append(clip.narration_tokens)
            self._summary_rows[video.video_id] = len(summaries)
            summaries.append(video.summary_tokens)
        self.clip_embs = self._encode_frames(clip_encoder, frames, chunk)
        self.narr_embs = self._encode_tokens(text_encoder, narrs, chunk)
        self.summary_embs = self._encode_tokens(text_encoder, summaries, chunk)

    @staticmethod
    def _encode_frames(encoder: ClipEncoder, stacks: list[np.ndarray], chunk: int) -> np.ndarray:
        from .corpus import _pad_frame_stack

        out = []
        with ad.no_grad():
            for i in range(0, len(stacks), chunk):
                arr, lens = _pad_frame_stack(stacks[i : i + chunk])
                out.append(encoder.encode_batch(arr, lens).data)
        return np.concatenate(out, axis=0)

    @staticmethod
    def _encode_tokens(encoder: TextEncoder, rows: list[np.ndarray], chunk: int) -> np.ndarray:
        from .corpus import _pad_token_rows

        out = []
        with ad.no_grad():
            for i in range(0, len(rows), chunk):
                arr, lens = _pad_token_rows(rows[i : i + chunk])
                out.append(encoder.encode_batch(arr, lens).data)
        return np.concatenate(out, axis=0)

    def clip(self, video_id: str, clip_index: int) -> np.ndarray:
        return self.clip_embs[self._clip_rows[(video_id, clip_index)]]

    def narration(self, video_id: str, clip_index: int) -> np.ndarray:
        return self.narr_embs[self._narr_rows[(video_id, clip_index)]]

    def summary(self, video_id: str) -> np.ndarray:
        return self.summary_embs[self._summary_rows[video_id]]

    def video_sequences(self, refs: list[SourceRef], aggregator, chunk: int = 256) -> np.ndarray:
        """Aggregate cached clip embeddings for video refs (order preserved)."""
        stacked = np.stack(
            [
                np.stack([self.clip(r.video_id, i) for i in r.clip_indices])
                for r in refs
            ]
        )
        out = []
        with ad.no_grad():
            for i in range(0, len(refs), chunk):
                out.append(aggregator.aggregate(Tensor(stacked[i : i + chunk])).data)
        return np.concatenate(out, axis=0)


def _resolve_embeddings(
    refs: list[SourceRef], cache: EmbeddingCache, aggregator
) -> np.ndarray:
    video_refs = [(i, r) for i, r in enumerate(refs) if r.kind == "video"]
    out = np.zeros((len(refs), cache.clip_embs.shape[1]))
    if video_refs:
        agg = cache.video_sequences([r for _, r in video_refs], aggregator)
        for (i, _), emb in zip(video_refs, agg):
            out[i] = emb
    for i, r in enumerate(refs):
        if r.kind == "clip":
            out[i] = cache.clip(r.video_id, r.clip_index)
        elif r.kind == "narration":
            out[i] = cache.narration(r.video_id, r.clip_index)
        elif r.kind == "summary":
            out[i] = cache.summary(r.video_id)
        elif r.kind != "video":
            raise ContractError(f"unknown source kind {r.kind!r}")
    return out


def score_mcq(
    corpus: Corpus,
    items: list[MCQItem],
    clip_encoder: ClipEncoder,
    text_encoder: TextEncoder,
    aggregator,
    rng: np.random.Generator,
    task: str = "mcq",
    cache: EmbeddingCache | None = None,
) -> EvalReport:
    """Pick the candidate most similar to the prompt; exact ties are broken
    uniformly at random and counted."""
    if not items:
        raise ContractError("no MCQ items to score")
    if cache is None:
        cache = EmbeddingCache(corpus, clip_encoder, text_encoder)
    prompts = _resolve_embeddings([it.prompt for it in items], cache, aggregator)
    flat_cands = [c for it in items for c in it.candidates]
    cand_embs = _resolve_embeddings(flat_cands, cache, aggregator).reshape(
        len(items), 5, -1
    )
    ties = 0
    correct = 0
    split_total: dict[str, int] = {}
    split_hit: dict[str, int] = {}
    for i, item in enumerate(items):
        # per-row reduction, not a BLAS matvec: blocked dgemv kernels can give
        # bitwise-identical rows different last-bit sums, breaking exact ties
        sims = (cand_embs[i] * prompts[i]).sum(axis=1)
        best = sims.max()
        tied = np.flatnonzero(sims == best)
        if len(tied) > 1:
            ties += 1
            pick = int(tied[rng.integers(0, len(tied))])
        else:
            pick = int(tied[0])
        hit = pick == item.answer_index
        correct += hit
        split_total[item.split_tag] = split_total.get(item.split_tag, 0) + 1
        split_hit[item.split_tag] = split_hit.get(item.split_tag, 0) + hit
    per_split = {
        tag: 100.0 * split_hit[tag] / split_total[tag] for tag in split_total
    }
    return EvalReport(
        task=task,
        accuracy=100.0 * correct / len(items),
        item_count=len(items),
        chance=CHANCE_5WAY,
        per_split=per_split,
        tie_count=ties,
    )


# -- retrieval metrics ----------------------------------------------------------------


def _average_precision_matrix(scores: np.ndarray, relevance: np.ndarray) -> float:
    """Mean AP over query rows; queries without relevant items are skipped."""
    qn = scores.shape[0]
    aps = []
    for q in range(qn):
        order = np.argsort(-scores[q], kind="stable")
        rel = (relevance[q, order] > 0).astype(np.float64)
        total = rel.sum()
        if total == 0:
            continue
        cum = np.cumsum(rel)
        ranks = np.arange(1, len(rel) + 1)
        aps.append(float(((cum / ranks) * rel).sum() / total))
    if not aps:
        raise ContractError("no query has any relevant gallery item")
    return float(np.mean(aps))


def _ndcg_matrix(scores: np.ndarray, relevance: np.ndarray) -> float:
    """Mean nDCG with log2 discount; supports graded relevance."""
    qn = scores.shape[0]
    vals = []
    discount = 1.0 / np.log2(np.arange(2, scores.shape[1] + 2))
    for q in range(qn):
        order = np.argsort(-scores[q], kind="stable")
        gains = relevance[q, order].astype(np.float64)
        dcg = float((gains * discount).sum())
        ideal = float((np.sort(relevance[q])[::-1] * discount).sum())
        if ideal == 0:
            continue
        vals.append(dcg / ideal)
    if not vals:
        raise ContractError("no query has any relevant gallery item")
    return float(np.mean(vals))


def retrieval_metrics(
    query_embs: np.ndarray, gallery_embs: np.ndarray, relevance: np.ndarray
) -> tuple[float, float]:
    """(mAP, nDCG), each averaged over the two retrieval directions."""
    relevance = np.asarray(relevance)
    if relevance.shape != (query_embs.shape[0], gallery_embs.shape[0]):
        raise ContractError(
            f"relevance shape {relevance.shape} does not match "
            f"{query_embs.shape[0]}x{gallery_embs.shape[0]}"
        )
    forward = query_embs @ gallery_embs.T
    backward = gallery_embs @ query_embs.T
    m_ap = 0.5 * (
        _average_precision_matrix(forward, relevance)
        + _average_precision_matrix(backward, relevance.T)
    )
    ndcg = 0.5 * (
        _ndcg_matrix(forward, relevance) + _ndcg_matrix(backward, relevance.T)
    )
    return m_ap, ndcg


# -- linear probe -----------------------------------------------------------------------


def linear_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    eval_features: np.ndarray,
    eval_labels: np.ndarray,
    num_classes: int,
    steps: int = 300,
    lr: float = 0.05,
) -> float:
    """Train one linear layer with softmax cross-entropy on frozen features;
    return accuracy (percent) on the eval split."""
    n, d = train_features.shape
    w = Tensor(np.zeros((d, num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    x = Tensor(train_features)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), train_labels] = 1.0
    opt = AdamW(lr=lr, weight_decay=0.0)
    params = {"w": w, "b": b}
    for _ in range(steps):
        logits = x @ w + b
        lse = ad.logsumexp(logits, axis=1)
        picked = (logits * Tensor(onehot)).sum(axis=1)
        loss = (lse - picked).mean()
        grads = ad.gradient_map(loss, params)
        opt.step(params, grads)
    eval_logits = eval_features @ w.data + b.data
    pred = eval_logits.argmax(axis=1)
    return float(100.0 * (pred == eval_labels).mean())


# -- export ------------------------------------------------------------------------------


def export_embeddings(
    corpus: Corpus,
    clip_encoder: ClipEncoder,
    text_encoder: TextEncoder,
    aggregator,
    level: str,
    path: str | Path,
    k: int = 16,
) -> int:
    """Write one JSONL row per clip (child) or per video (parent); rows carry
    the latent label so projections can be colored. Returns the row count."""
    if level not in ("child", "parent"):
        raise ContractError(f"level must be 'child' or 'parent', got {level!r}")
    cache = EmbeddingCache(corpus, clip_encoder, text_encoder)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w") as fh:
        if level == "child":
            for video in corpus:
                for clip in video.clips:
                    row = {
                        "id": f"{video.video_id}/{clip.clip_index}",
                        "level": "child",
                        "label": clip.action_label,
                        "vector": cache.clip(video.video_id, clip.clip_index).tolist(),
                    }
                    fh.write(json.dumps(row) + "\n")
                    count += 1
        else:
            refs = [
                SourceRef(
                    "video", v.video_id, clip_indices=tuple(sample_uniform(v, k))
                )
                for v in corpus
            ]
            embs = cache.video_sequences(refs, aggregator)
            for video, emb in zip(corpus, embs):
                row = {
                    "id": video.video_id,
                    "level": "parent",
                    "label": video.latent_intent_id,
                    "vector": emb.tolist(),
                }
                fh.write(json.dumps(row) + "\n")
                count += 1
    return count


# -- the standard suite -----------------------------------------------------------------


def video_features(
    corpus: Corpus,
    clip_encoder: ClipEncoder,
    text_encoder: TextEncoder,
    aggregator,
    k: int = 16,
) -> tuple[np.ndarray, np.ndarray]:
    """(aggregated video embeddings, intent labels) for every video."""
    cache = EmbeddingCache(corpus, clip_encoder, text_encoder)
    refs = [
        SourceRef("video", v.video_id, clip_indices=tuple(sample_uniform(v, k)))
        for v in corpus
    ]
    feats = cache.video_sequences(refs, aggregator)
    labels = np.array([v.latent_intent_id for v in corpus])
    return feats, labels


def standard_eval(
    eval_corpus: Corpus,
    clip_encoder: ClipEncoder,
    text_encoder: TextEncoder,
    aggregator,
    n_items: int = 500,
    seed: int = 0,
    k: int = 16,
    train_corpus: Corpus | None = None,
    num_intents: int | None = None,
) -> dict[str, EvalReport]:
    """Run the MCQ trio (plus retrieval and, with a train corpus, the linear
    probe) and return one report per task."""
    reports: dict[str, EvalReport] = {}
    cache = EmbeddingCache(eval_corpus, clip_encoder, text_encoder)

    def _score(name: str, items: list[MCQItem], rng_scores) -> None:
        reports[name] = score_mcq(
            eval_corpus, items, clip_encoder, text_encoder, aggregator,
            rng_scores, task=name, cache=cache,
        )

    _score(
        "childMCQ-inter",
        build_child_mcq(eval_corpus, n_items, "inter", np.random.default_rng(seed)),
        np.random.default_rng(seed + 10),
    )
    _score(
        "childMCQ-intra",
        build_child_mcq(eval_corpus, n_items, "intra", np.random.default_rng(seed + 1)),
        np.random.default_rng(seed + 11),
    )
    _score(
        "summaryMCQ",
        build_summary_mcq(eval_corpus, n_items, np.random.default_rng(seed + 2), k=k),
        np.random.default_rng(seed + 12),
    )
    _score(
        "shuffleMCQ",
        build_shuffle_mcq(eval_corpus, n_items, np.random.default_rng(seed + 3), k=k),
        np.random.default_rng(seed + 13),
    )

    actions = np.array([c.action_label for v in eval_corpus for c in v.clips])
    relevance = (actions[:, None] == actions[None, :]).astype(np.float64)
    m_ap, ndcg = retrieval_metrics(cache.clip_embs, cache.narr_embs, relevance)
    reports["retrieval"] = EvalReport(
        task="retrieval",
        accuracy=float("nan"),
        item_count=len(actions),
        chance=float("nan"),
        extras={"mAP": m_ap, "nDCG": ndcg},
    )

    if train_corpus is not None:
        train_x, train_y = video_features(
            train_corpus, clip_encoder, text_encoder, aggregator, k=k
        )
        eval_x, eval_y = video_features(
            eval_corpus, clip_encoder, text_encoder, aggregator, k=k
        )
        classes = num_intents or int(max(train_y.max(), eval_y.max())) + 1
        acc = linear_probe(train_x, train_y, eval_x, eval_y, classes)
        reports["linear-probe"] = EvalReport(
            task="linear-probe",
            accuracy=acc,
            item_count=len(eval_y),
            chance=100.0 / classes,
        )
    return reports

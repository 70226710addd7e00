import json
from dataclasses import replace

import numpy as np
import pytest

from twolevel.corpus import (
    ACTION_TOKEN_BASE,
    Corpus,
    CorpusManifest,
    GeneratorConfig,
    build_child_batch,
    build_parent_batch,
    build_summary_child_batch,
    corpus_paths,
    generate_synthetic,
    iter_videos,
    load_corpus,
    save_corpus,
)
from twolevel.errors import ConfigError, ContractError, IntegrityError, ParseError

NOISE_FREE = GeneratorConfig(
    num_videos=16,
    clips_per_video=6,
    num_intents=4,
    actions_per_intent=2,
    frames_per_clip=2,
    frame_feature_dim=6,
    latent_dim=3,
    frame_noise=0.0,
    token_noise=0.0,
    order_signal=False,
)


def test_config_rejects_action_vocab_overflow():
    with pytest.raises(ConfigError):
        GeneratorConfig(num_intents=40, actions_per_intent=10, vocab_size=256)


def test_config_rejects_token_layout_overflow():
    # 240 action labels fit the vocab, but pad + noise + intent tokens do not
    with pytest.raises(ConfigError):
        GeneratorConfig(num_intents=40, actions_per_intent=6, vocab_size=249,
                        order_signal=False)


def test_same_seed_gives_byte_identical_files(tmp_path):
    cfg = GeneratorConfig(num_videos=6, clips_per_video=4)
    for name in ("a", "b"):
        save_corpus(generate_synthetic(cfg, seed=5), tmp_path / name)
    data_a, man_a = corpus_paths(tmp_path / "a")
    data_b, man_b = corpus_paths(tmp_path / "b")
    assert data_a.read_bytes() == data_b.read_bytes()
    assert man_a.read_bytes() == man_b.read_bytes()


def test_zero_noise_same_action_sequence_means_identical_frames():
    # one action per intent makes every video of an intent repeat one label,
    # so any two same-intent videos share the action sequence exactly
    cfg = replace(NOISE_FREE, actions_per_intent=1)
    corpus = generate_synthetic(cfg, seed=2)
    by_intent = {}
    for video in corpus:
        by_intent.setdefault(video.latent_intent_id, []).append(video)
    pair = next(vs for vs in by_intent.values() if len(vs) >= 2)
    a, b = pair[0], pair[1]
    assert [c.action_label for c in a.clips] == [c.action_label for c in b.clips]
    for ca, cb in zip(a.clips, b.clips):
        np.testing.assert_array_equal(ca.frames, cb.frames)


def test_splits_share_rendering_structure():
    cfg = NOISE_FREE
    train = generate_synthetic(cfg, seed=0, split="train")
    other = generate_synthetic(replace(cfg, num_videos=8), seed=9, split="eval")

    def frames_by_action(corpus):
        table = {}
        for video in corpus:
            for clip in video.clips:
                table.setdefault(clip.action_label, clip.frames)
        return table

    ft, fo = frames_by_action(train), frames_by_action(other)
    shared = set(ft) & set(fo)
    assert shared
    for action in shared:
        np.testing.assert_array_equal(ft[action], fo[action])


def test_order_signal_position_classifier_oracle():
    # label-level oracle: progression ranks of an untouched sequence are
    # monotone; a shuffled copy almost never is
    cfg = GeneratorConfig(num_videos=500, clips_per_video=16, frames_per_clip=1,
                          frame_feature_dim=2, latent_dim=2, order_signal=True)
    corpus = generate_synthetic(cfg, seed=3)
    rng = np.random.default_rng(4)
    a = cfg.actions_per_intent

    def monotone(labels):
        ranks = np.array(labels) % a
        up = np.all(np.diff(ranks) >= 0)
        down = np.all(np.diff(ranks) <= 0)
        return up or down

    correct = 0
    total = 0
    for video in corpus:
        labels = [c.action_label for c in video.clips]
        correct += monotone(labels)  # true original classified as original
        total += 1
        shuffled = list(labels)
        rng.shuffle(shuffled)
        correct += not monotone(shuffled)
        total += 1
    assert total == 1000
    assert correct / total > 0.9


def test_order_signal_pairs_share_action_sets():
    cfg = GeneratorConfig(num_videos=64, order_signal=True)
    corpus = generate_synthetic(cfg, seed=1)
    sets_by_intent = {}
    for video in corpus:
        sets_by_intent.setdefault(video.latent_intent_id, set()).update(
            c.action_label for c in video.clips
        )
    for pair in range(cfg.num_intents // 2):
        fwd, rev = sets_by_intent.get(2 * pair), sets_by_intent.get(2 * pair + 1)
        if fwd and rev:
            expected = set(cfg.action_progression(2 * pair))
            assert fwd <= expected and rev <= expected


def test_matched_pairs_share_labels_and_summaries_encode_intents():
    corpus = generate_synthetic(NOISE_FREE, seed=6)
    for video in corpus:
        for clip in video.clips:
            # narration tokens decode to exactly the clip's action label
            decoded = set(clip.narration_tokens.tolist())
            assert decoded == {ACTION_TOKEN_BASE + clip.action_label}
            # actions stay within the intent's own set
            assert clip.action_label in NOISE_FREE.action_progression(
                video.latent_intent_id
            )
        assert set(video.summary_tokens.tolist()) == {
            NOISE_FREE.intent_token_base + video.latent_intent_id
        }


def test_corpus_wide_narration_shuffle_breaks_alignment():
    corpus = generate_synthetic(GeneratorConfig(num_videos=50), seed=8)
    actions = np.array([c.action_label for v in corpus for c in v.clips])
    rng = np.random.default_rng(9)
    shuffled = actions[rng.permutation(len(actions))]
    agreement = (actions == shuffled).mean()
    assert agreement < 0.10


def test_round_trip_preserves_records(tmp_path, tiny_corpus):
    save_corpus(tiny_corpus, tmp_path / "c")
    loaded = load_corpus(tmp_path / "c")
    assert len(loaded) == len(tiny_corpus)
    for a, b in zip(tiny_corpus, loaded):
        assert a.video_id == b.video_id
        assert a.latent_intent_id == b.latent_intent_id
        np.testing.assert_array_equal(a.summary_tokens, b.summary_tokens)
        for ca, cb in zip(a.clips, b.clips):
            assert ca.action_label == cb.action_label
            np.testing.assert_array_equal(ca.frames, cb.frames)
            np.testing.assert_array_equal(ca.narration_tokens, cb.narration_tokens)


def test_truncated_file_raises_integrity_error(tmp_path, tiny_corpus):
    save_corpus(tiny_corpus, tmp_path / "c")
    data_path, _ = corpus_paths(tmp_path / "c")
    lines = data_path.read_text().splitlines()
    data_path.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(IntegrityError, match=r"24.*21|21.*24"):
        load_corpus(tmp_path / "c")


def test_malformed_line_raises_parse_error_with_lineno(tmp_path, tiny_corpus):
    save_corpus(tiny_corpus, tmp_path / "c")
    data_path, _ = corpus_paths(tmp_path / "c")
    lines = data_path.read_text().splitlines()
    lines[4] = "{not json"
    data_path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match=":5:"):
        list(iter_videos(tmp_path / "c"))


def test_empty_corpus_round_trips(tmp_path):
    empty = Corpus(
        manifest=CorpusManifest(split="train", video_count=0, vocab_size=256,
                                frame_feature_dim=16)
    )
    save_corpus(empty, tmp_path / "e")
    loaded = load_corpus(tmp_path / "e")
    assert len(loaded) == 0


def test_streaming_iteration_matches_load(tmp_path, tiny_corpus):
    save_corpus(tiny_corpus, tmp_path / "c")
    streamed = [v.video_id for v in iter_videos(tmp_path / "c")]
    assert streamed == [v.video_id for v in tiny_corpus]


def test_manifest_matches_generator_for_regeneration(tmp_path):
    cfg = GeneratorConfig(num_videos=5, clips_per_video=3)
    save_corpus(generate_synthetic(cfg, seed=13), tmp_path / "c")
    _, manifest_path = corpus_paths(tmp_path / "c")
    stored = json.loads(manifest_path.read_text())
    regenerated = generate_synthetic(
        GeneratorConfig(**stored["generator"]), seed=stored["seed"]
    )
    original = load_corpus(tmp_path / "c")
    for a, b in zip(regenerated, original):
        np.testing.assert_array_equal(a.clips[0].frames, b.clips[0].frames)


def test_child_batch_distinct_videos_and_symmetric_mask(tiny_corpus):
    rng = np.random.default_rng(1)
    batch = build_child_batch(tiny_corpus, 16, rng)
    assert len(set(batch.video_ids)) == 16
    assert batch.positive_mask.shape == (16, 16)
    assert np.diagonal(batch.positive_mask).all()
    assert (batch.positive_mask == batch.positive_mask.T).all()
    same = batch.action_labels[:, None] == batch.action_labels[None, :]
    assert (batch.positive_mask == same | np.eye(16, dtype=bool)).all()


def test_child_batch_deterministic_for_fixed_seed(tiny_corpus):
    a = build_child_batch(tiny_corpus, 8, np.random.default_rng(7))
    b = build_child_batch(tiny_corpus, 8, np.random.default_rng(7))
    assert a.video_ids == b.video_ids
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.tokens, b.tokens)


def test_child_batch_requires_enough_videos(tiny_corpus):
    with pytest.raises(ContractError):
        build_child_batch(tiny_corpus, len(tiny_corpus) + 1, np.random.default_rng(0))


def test_parent_batch_single_video_all_clips_from_it(tiny_corpus):
    batch = build_parent_batch(tiny_corpus, 1, 16, np.random.default_rng(2))
    assert batch.frames.shape[:2] == (1, 16)
    assert len(batch.video_ids) == 1
    idx = batch.clip_indices[0]
    assert list(idx) == sorted(idx)


def test_parent_batch_diagonal_mask_and_distinct_videos(tiny_corpus):
    batch = build_parent_batch(tiny_corpus, 6, 4, np.random.default_rng(3))
    assert len(set(batch.video_ids)) == 6
    assert (batch.positive_mask == np.eye(6, dtype=bool)).all()


def test_summary_child_batch_groups_same_intent(tiny_corpus):
    batch = build_summary_child_batch(tiny_corpus, 12, np.random.default_rng(4))
    labels = batch.action_labels  # intents in this variant
    same = labels[:, None] == labels[None, :]
    assert (batch.positive_mask == same | np.eye(12, dtype=bool)).all()

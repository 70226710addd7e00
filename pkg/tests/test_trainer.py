import json

import numpy as np
import pytest

from twolevel.corpus import (
    GeneratorConfig,
    build_child_batch,
    build_parent_batch,
    generate_synthetic,
)
from twolevel.errors import ConfigError, ContractError, TrainingAborted
from twolevel.objectives import nce_grouped
from twolevel.trainer import (
    TrainConfig,
    build_state,
    config_hash,
    load_checkpoint,
    run_schedule,
    save_checkpoint,
    train_step_child,
    train_step_parent,
)

TINY_KW = dict(
    child_batch_size=8,
    parent_videos_per_batch=4,
    k_clips=6,
    model_dim=16,
    num_layers=1,
    num_heads=2,
    mlp_dim=32,
    embed_dim=8,
    frame_feature_dim=8,
    sa_layers=1,
    sa_heads=2,
    max_seq_len=8,
)


def _tiny_cfg(mode="joint_sa", **kw):
    merged = {**TINY_KW, "mode": mode, "total_steps": 12, **kw}
    return TrainConfig(**merged)


def _snapshot(params):
    return {k: v.data.copy() for k, v in params.items()}


def _bitwise_equal(a, b):
    return all((a[k] == b[k]).all() for k in a)


def test_mode_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mode="nope")
    with pytest.raises(ConfigError):
        TrainConfig(mode="parent_only")  # needs init_checkpoint
    with pytest.raises(ConfigError):
        TrainConfig(m=0)


def test_smoke_loss_halves_on_noise_free_corpus():
    corpus = generate_synthetic(
        GeneratorConfig(num_videos=24, clips_per_video=6, num_intents=4,
                        actions_per_intent=2, frame_noise=0.0, token_noise=0.0,
                        order_signal=False, frame_feature_dim=8,
                        frames_per_clip=3, latent_dim=4),
        seed=21,
    )
    cfg = _tiny_cfg(mode="child_only", total_steps=50)
    _, metrics = run_schedule(cfg, corpus)
    losses = [m["loss"] for m in metrics]
    assert losses[-1] < 0.5 * losses[0]


def test_child_step_never_touches_aggregator(tiny_corpus):
    state = build_state(_tiny_cfg("joint_sa"))
    before = _snapshot(state.agg_params())
    batch = build_child_batch(tiny_corpus, 8, state.rng)
    train_step_child(state, batch)
    assert _bitwise_equal(before, _snapshot(state.agg_params()))


def test_parent_step_updates_aggregator_and_both_encoders(tiny_corpus):
    state = build_state(_tiny_cfg("joint_sa"))
    before_child = _snapshot(state.child_params())
    before_agg = _snapshot(state.agg_params())
    batch = build_parent_batch(tiny_corpus, 4, 6, state.rng)
    train_step_parent(state, batch)
    after_child = _snapshot(state.child_params())
    after_agg = _snapshot(state.agg_params())
    assert not _bitwise_equal(before_agg, after_agg)
    changed_clip = any(
        not (before_child[k] == after_child[k]).all()
        for k in before_child if k.startswith("clip.")
    )
    changed_text = any(
        not (before_child[k] == after_child[k]).all()
        for k in before_child if k.startswith("text.")
    )
    assert changed_clip and changed_text


def test_video_summary_only_never_encodes_narrations(tiny_corpus, monkeypatch):
    state = build_state(_tiny_cfg("video_summary_only"))
    batch = build_parent_batch(tiny_corpus, 4, 6, state.rng)
    calls = []
    original = type(state.text_encoder).encode_batch

    def spy(self, tokens, valid_len):
        calls.append(np.asarray(tokens).shape[0])
        return original(self, tokens, valid_len)

    monkeypatch.setattr(type(state.text_encoder), "encode_batch", spy)
    train_step_parent(state, batch)
    # only the 4 summaries pass through f_n; the 4*6 narrations never do
    assert calls == [4]


def test_video_summary_only_loss_equals_sv_term(tiny_corpus):
    cfg = _tiny_cfg("video_summary_only")
    state = build_state(cfg)
    batch = build_parent_batch(tiny_corpus, 4, 6, state.rng)
    from twolevel.trainer import _encode_parent_streams

    f_v, _, f_s = _encode_parent_streams(state, batch, False, True)
    expected = nce_grouped(f_v, f_s, batch.positive_mask, cfg.temperature).item()
    state2 = build_state(cfg)
    loss = train_step_parent(state2, batch)
    assert loss == pytest.approx(expected, abs=1e-12)


def test_no_summary_mode_never_encodes_summaries(tiny_corpus, monkeypatch):
    state = build_state(_tiny_cfg("no_summary"))
    batch = build_parent_batch(tiny_corpus, 4, 6, state.rng)
    seen = []
    original = type(state.text_encoder).encode_batch

    def spy(self, tokens, valid_len):
        seen.append(np.asarray(tokens).shape)
        return original(self, tokens, valid_len)

    monkeypatch.setattr(type(state.text_encoder), "encode_batch", spy)
    train_step_parent(state, batch)
    # narrations only: one call of 4*6 rows, none with the 4 summaries
    assert [s[0] for s in seen] == [24]


def test_schedule_pattern_m5(tiny_corpus):
    cfg = _tiny_cfg("joint_sa", m=5, total_steps=18)
    _, metrics = run_schedule(cfg, tiny_corpus)
    trace = "".join("P" if m["level"] == "parent" else "C" for m in metrics)
    assert trace == "CCCCCPCCCCCPCCCCCP"


@pytest.mark.parametrize("total", [7, 12, 23])
def test_parent_step_count_is_floor(total, tiny_corpus):
    cfg = _tiny_cfg("joint_sa", m=5, total_steps=total)
    _, metrics = run_schedule(cfg, tiny_corpus)
    parents = sum(1 for m in metrics if m["level"] == "parent")
    assert parents == total // 6


def test_child_only_has_zero_parent_steps(tiny_corpus):
    cfg = _tiny_cfg("child_only", total_steps=14)
    _, metrics = run_schedule(cfg, tiny_corpus)
    assert all(m["level"] == "child" for m in metrics)


def test_parent_every_epoch_reading(tiny_corpus):
    # 24 videos / batch 8 = 3 child steps per epoch; m=2 epochs -> parent at step 7
    cfg = _tiny_cfg("joint_sa", m=2, total_steps=14, parent_every="epoch")
    _, metrics = run_schedule(cfg, tiny_corpus)
    trace = "".join("P" if m["level"] == "parent" else "C" for m in metrics)
    assert trace == "CCCCCCPCCCCCCP"


def test_flat_summary_mode_runs_summary_child_slots(tiny_corpus):
    cfg = _tiny_cfg("flat_summary", m=2, total_steps=6)
    state, metrics = run_schedule(cfg, tiny_corpus)
    assert all(m["level"] == "child" for m in metrics)
    assert state.aggregator is None
    assert state.eval_aggregator().kind == "average"


def test_strict_determinism_identical_loss_sequences(tiny_corpus):
    cfg = _tiny_cfg("joint_sa", total_steps=12)
    _, m1 = run_schedule(cfg, tiny_corpus)
    _, m2 = run_schedule(cfg, tiny_corpus)
    assert [x["loss"] for x in m1] == [x["loss"] for x in m2]
    assert all(x["wall_ms"] == 0.0 for x in m1)


def test_resume_matches_uninterrupted_run(tmp_path, tiny_corpus):
    cfg = _tiny_cfg("joint_sa", total_steps=20, checkpoint_every=10)
    _, full = run_schedule(cfg, tiny_corpus, out_dir=tmp_path / "full")
    _, resumed = run_schedule(
        cfg, tiny_corpus, out_dir=tmp_path / "resumed",
        resume_from=tmp_path / "full" / "checkpoint_000010.bin",
    )
    assert [m["loss"] for m in resumed] == [m["loss"] for m in full[10:]]
    assert resumed[-1]["step"] == 20


def test_resume_refuses_config_mismatch(tmp_path, tiny_corpus):
    cfg = _tiny_cfg("joint_sa", total_steps=10, checkpoint_every=5)
    run_schedule(cfg, tiny_corpus, out_dir=tmp_path)
    other = _tiny_cfg("joint_sa", total_steps=10, checkpoint_every=5, lr=5e-4)
    with pytest.raises(ContractError, match="hash"):
        run_schedule(other, tiny_corpus, resume_from=tmp_path / "checkpoint_000005.bin")


def test_checkpoint_save_load_save_byte_identical(tmp_path, tiny_corpus):
    cfg = _tiny_cfg("joint_sa", total_steps=6)
    state, _ = run_schedule(cfg, tiny_corpus)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(p1, state)
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_restores_mode_and_params(tmp_path, tiny_corpus):
    cfg = _tiny_cfg("joint_avg", total_steps=6)
    state, _ = run_schedule(cfg, tiny_corpus)
    save_checkpoint(tmp_path / "c.bin", state)
    loaded = load_checkpoint(tmp_path / "c.bin")
    assert loaded.config.mode == "joint_avg"
    assert loaded.step == 6
    for k, v in state.named_params().items():
        np.testing.assert_array_equal(loaded.named_params()[k].data, v.data)
    assert loaded.eval_aggregator().kind == "average"


def test_init_checkpoint_adopts_encoder_weights(tmp_path, tiny_corpus):
    child_cfg = _tiny_cfg("child_only", total_steps=6)
    child_state, _ = run_schedule(child_cfg, tiny_corpus)
    save_checkpoint(tmp_path / "child.bin", child_state)
    parent_cfg = _tiny_cfg(
        "parent_only", total_steps=2, init_checkpoint=str(tmp_path / "child.bin")
    )
    state = build_state(parent_cfg)
    for k, v in child_state.child_params().items():
        np.testing.assert_array_equal(state.child_params()[k].data, v.data)
    assert state.agg_params()  # fresh aggregator exists


def test_nonfinite_forward_raises_numeric_error(tiny_corpus):
    from twolevel.errors import NumericError

    state = build_state(_tiny_cfg("child_only", total_steps=4))
    state.clip_encoder.w_in.data *= 1e203  # overflows the forward pass
    batch = build_child_batch(tiny_corpus, 8, state.rng)
    with pytest.raises(NumericError):
        train_step_child(state, batch)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_schedule_wraps_blowup_in_training_aborted(tiny_corpus):
    # an absurd lr drives parameters to overflow within a couple of steps
    cfg = _tiny_cfg("child_only", total_steps=6, lr=1e200)
    with pytest.raises(TrainingAborted) as info:
        run_schedule(cfg, tiny_corpus)
    assert info.value.step >= 1
    assert isinstance(info.value.loss_history, list)


def test_metrics_jsonl_schema(tmp_path, tiny_corpus):
    cfg = _tiny_cfg("joint_sa", total_steps=7)
    run_schedule(cfg, tiny_corpus, out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 7
    for i, line in enumerate(lines, start=1):
        rec = json.loads(line)
        assert rec["step"] == i
        assert rec["level"] in ("child", "parent")
        assert set(rec) == {"step", "level", "loss", "lr", "wall_ms"}


def test_config_hash_stable_and_sensitive():
    a = _tiny_cfg("joint_sa")
    b = _tiny_cfg("joint_sa")
    c = _tiny_cfg("joint_sa", lr=2e-3)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)

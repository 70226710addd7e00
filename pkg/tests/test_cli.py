import json

import pytest

from twolevel.cli import main

TINY_TRAIN_SETS = [
    "--set", "child_batch_size=6",
    "--set", "parent_videos_per_batch=3",
    "--set", "k_clips=4",
    "--set", "model_dim=16",
    "--set", "num_layers=1",
    "--set", "num_heads=2",
    "--set", "mlp_dim=32",
    "--set", "embed_dim=8",
    "--set", "frame_feature_dim=8",
    "--set", "sa_layers=1",
    "--set", "sa_heads=2",
]

TINY_GEN_SETS = [
    "--set", "num_videos=12",
    "--set", "clips_per_video=6",
    "--set", "num_intents=4",
    "--set", "actions_per_intent=2",
    "--set", "frames_per_clip=2",
    "--set", "frame_feature_dim=8",
    "--set", "latent_dim=4",
]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = main(["generate", "--out", str(out), "--seed", "5",
                 "--set", "eval_videos=8", *TINY_GEN_SETS])
    assert code == 0
    return out


def test_generate_writes_both_splits_and_config(corpus_dir):
    assert (corpus_dir / "train.jsonl").exists()
    assert (corpus_dir / "train.manifest.json").exists()
    assert (corpus_dir / "eval.jsonl").exists()
    effective = json.loads((corpus_dir / "effective_config.json").read_text())
    assert effective["config_version"] == 1
    assert effective["generator"]["num_videos"] == 12
    assert effective["seed"] == 5


def test_config_file_with_cli_override(tmp_path):
    cfg_file = tmp_path / "gen.json"
    cfg_file.write_text(json.dumps({
        "num_videos": 6, "clips_per_video": 3, "num_intents": 2,
        "actions_per_intent": 2, "frames_per_clip": 2,
        "frame_feature_dim": 4, "latent_dim": 2,
    }))
    out = tmp_path / "c"
    code = main(["generate", "--out", str(out), "--config", str(cfg_file),
                 "--set", "num_videos=8", "--set", "eval_videos=5"])
    assert code == 0
    effective = json.loads((out / "effective_config.json").read_text())
    assert effective["generator"]["num_videos"] == 8  # override wins
    assert effective["generator"]["clips_per_video"] == 3


def test_toml_config_accepted(tmp_path):
    cfg_file = tmp_path / "gen.toml"
    cfg_file.write_text(
        "num_videos = 6\nclips_per_video = 3\nnum_intents = 2\n"
        "actions_per_intent = 2\nframes_per_clip = 2\n"
        "frame_feature_dim = 4\nlatent_dim = 2\neval_videos = 5\n"
    )
    assert main(["generate", "--out", str(tmp_path / "t"), "--config", str(cfg_file)]) == 0


def test_train_eval_export_round_trip(tmp_path, corpus_dir, capsys):
    run_dir = tmp_path / "run"
    code = main(["train", "--corpus", str(corpus_dir / "train"),
                 "--out", str(run_dir), "--mode", "joint_sa", "--steps", "8",
                 "--seed", "1", *TINY_TRAIN_SETS])
    assert code == 0
    assert (run_dir / "checkpoint_final.bin").exists()
    assert (run_dir / "metrics.jsonl").exists()
    effective = json.loads((run_dir / "effective_config.json").read_text())
    assert effective["train"]["mode"] == "joint_sa"
    assert effective["train"]["total_steps"] == 8
    assert len(effective["corpus_manifest_sha256"]) == 64

    eval_dir = tmp_path / "eval"
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint_final.bin"),
                 "--eval-corpus", str(corpus_dir / "eval"),
                 "--train-corpus", str(corpus_dir / "train"),
                 "--out", str(eval_dir), "--items", "25", "--seed", "3"])
    assert code == 0
    report = json.loads((eval_dir / "eval_report.json").read_text())
    for task in ("childMCQ-inter", "childMCQ-intra", "summaryMCQ", "shuffleMCQ",
                 "retrieval", "linear-probe"):
        assert task in report
    assert report["childMCQ-inter"]["chance"] == 20.0
    assert report["childMCQ-inter"]["item_count"] == 25

    out_file = tmp_path / "emb.jsonl"
    code = main(["export", "--checkpoint", str(run_dir / "checkpoint_final.bin"),
                 "--corpus", str(corpus_dir / "eval"), "--level", "child",
                 "--out", str(out_file)])
    assert code == 0
    rows = [json.loads(line) for line in out_file.read_text().splitlines()]
    assert len(rows) == 8 * 6  # eval videos x clips


def test_train_resume_smoke(tmp_path, corpus_dir):
    run_dir = tmp_path / "run"
    assert main(["train", "--corpus", str(corpus_dir / "train"),
                 "--out", str(run_dir), "--mode", "child_only", "--steps", "6",
                 "--set", "checkpoint_every=3", *TINY_TRAIN_SETS]) == 0
    resumed = tmp_path / "resumed"
    assert main(["train", "--corpus", str(corpus_dir / "train"),
                 "--out", str(resumed), "--mode", "child_only", "--steps", "6",
                 "--set", "checkpoint_every=3",
                 "--resume", str(run_dir / "checkpoint_000003.bin"),
                 *TINY_TRAIN_SETS]) == 0
    final = json.loads((resumed / "metrics.jsonl").read_text().splitlines()[-1])
    assert final["step"] == 6


def test_missing_corpus_is_path_error(tmp_path, capsys):
    code = main(["train", "--corpus", str(tmp_path / "absent"),
                 "--out", str(tmp_path / "o")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_inconsistent_generator_config_fails(tmp_path, capsys):
    code = main(["generate", "--out", str(tmp_path / "bad"),
                 "--set", "num_intents=40", "--set", "actions_per_intent=10"])
    assert code == 1
    err = capsys.readouterr().err
    assert "error: ConfigError" in err


def test_unknown_config_key_fails(tmp_path, capsys):
    code = main(["generate", "--out", str(tmp_path / "bad"),
                 "--set", "not_a_knob=3"])
    assert code == 1
    assert "unknown generator config keys" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--nonsense"])
    assert info.value.code == 2


def test_gradcheck_exit_codes(monkeypatch, tmp_path, capsys):
    from twolevel import cli

    def fake_ok(seed=0):
        return {"op.add": {"max_rel_err": 1e-9, "passed": True}}

    monkeypatch.setattr(cli.gradcheck, "run_all", fake_ok)
    json_out = tmp_path / "g.json"
    assert main(["gradcheck", "--json-out", str(json_out)]) == 0
    assert json.loads(json_out.read_text())["op.add"]["passed"]

    def fake_bad(seed=0):
        return {"op.add": {"max_rel_err": 0.5, "passed": False}}

    monkeypatch.setattr(cli.gradcheck, "run_all", fake_bad)
    assert main(["gradcheck"]) == 1


@pytest.fixture(scope="module")
def reproduce_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("repro")
    code = main(["reproduce", "--out", str(out), "--corpus", str(corpus_dir),
                 "--seed", "2", "--steps", "12", "--items", "20",
                 *TINY_TRAIN_SETS])
    assert code == 0
    return out


def test_reproduce_table_structure(reproduce_dir):
    table = json.loads((reproduce_dir / "table.json").read_text())
    assert table["columns"] == ["childMCQ-inter", "childMCQ-intra",
                                "summaryMCQ", "shuffleMCQ"]
    assert len(table["rows"]) == 7
    modes = [r["mode"] for r in table["rows"]]
    assert modes == ["child_only", "joint_avg", "joint_sa", "parent_only",
                     "flat_summary", "no_summary", "video_summary_only"]
    for row in table["rows"]:
        for col in table["columns"]:
            assert 0.0 <= row[col] <= 100.0
    text = (reproduce_dir / "table.txt").read_text()
    assert text.count("\n") == 9  # header + rule + 7 rows


def test_reproduce_is_deterministic(tmp_path, corpus_dir, reproduce_dir):
    out2 = tmp_path / "again"
    code = main(["reproduce", "--out", str(out2), "--corpus", str(corpus_dir),
                 "--seed", "2", "--steps", "12", "--items", "20",
                 *TINY_TRAIN_SETS])
    assert code == 0
    assert (out2 / "table.json").read_bytes() == (reproduce_dir / "table.json").read_bytes()
    assert (out2 / "table.txt").read_bytes() == (reproduce_dir / "table.txt").read_bytes()


def test_reproduce_budget_exceeded(tmp_path, corpus_dir, capsys):
    code = main(["reproduce", "--out", str(tmp_path / "b"), "--corpus", str(corpus_dir),
                 "--steps", "12", "--items", "10", "--budget-minutes", "0.0001",
                 *TINY_TRAIN_SETS])
    assert code == 1
    assert "budget" in capsys.readouterr().err

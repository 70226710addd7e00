"""Command-line entry point: generate | train | eval | gradcheck | export | reproduce.

Every run directory receives the effective configuration (file values merged
with CLI overrides) so it can be re-executed from the directory alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from . import evalsuite, gradcheck
from .corpus import GeneratorConfig, generate_synthetic, load_corpus, save_corpus
from .errors import TwoLevelError
from .trainer import (
    MODES,
    TrainConfig,
    load_checkpoint,
    run_schedule,
)

CONFIG_VERSION = 1

TABLE_COLUMNS = ("childMCQ-inter", "childMCQ-intra", "summaryMCQ", "shuffleMCQ")
# row order of the mode-comparison table
TABLE_MODES = (
    "child_only",
    "joint_avg",
    "joint_sa",
    "parent_only",
    "flat_summary",
    "no_summary",
    "video_summary_only",
)
# the no-joint row trains parent-only from the child_only checkpoint; a higher
# learning rate makes the forgetting effect decisive at desk scale
PARENT_ONLY_LR = 2e-3


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {path} not found")
    if p.suffix == ".toml":
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    else:
        with open(p) as fh:
            data = json.load(fh)
    if not isinstance(data, dict):
        raise TwoLevelError(f"config file {path} must hold a key-value table")
    data.pop("config_version", None)
    return data


def _merge_config(file_path: str | None, sets: list[str], **direct) -> dict:
    """file values < --set overrides < direct flags; later wins."""
    merged: dict = {}
    if file_path:
        merged.update(_load_config_file(file_path))
    for item in sets or []:
        if "=" not in item:
            raise TwoLevelError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        merged[key.strip()] = _parse_value(value.strip())
    for key, value in direct.items():
        if value is not None:
            merged[key] = value
    return merged


def _echo_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"config_version": CONFIG_VERSION, **payload}
    with open(out_dir / "effective_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest_hash(corpus_prefix) -> str:
    """Content hash of the corpus manifest, tying a run to its exact corpus."""
    from .corpus import corpus_paths

    _, manifest_path = corpus_paths(corpus_prefix)
    return hashlib.sha256(manifest_path.read_bytes()).hexdigest()


def _split_known(merged: dict, cls) -> tuple[dict, dict]:
    fields = set(cls.__dataclass_fields__)
    known = {k: v for k, v in merged.items() if k in fields}
    unknown = {k: v for k, v in merged.items() if k not in fields}
    return known, unknown


# -- subcommands ---------------------------------------------------------------------


def cmd_generate(args) -> int:
    merged = _merge_config(args.config, args.set, seed=args.seed)
    train_videos = merged.pop("train_videos", None)
    eval_videos = merged.pop("eval_videos", 40)
    seed = merged.pop("seed", 0)
    gen_kwargs, unknown = _split_known(merged, GeneratorConfig)
    if unknown:
        raise TwoLevelError(f"unknown generator config keys: {sorted(unknown)}")
    if train_videos is not None:
        gen_kwargs["num_videos"] = train_videos
    gen = GeneratorConfig(**gen_kwargs)
    out = Path(args.out)
    train_corpus = generate_synthetic(gen, seed=seed, split="train")
    save_corpus(train_corpus, out / "train")
    eval_gen = replace(gen, num_videos=eval_videos)
    eval_corpus = generate_synthetic(eval_gen, seed=seed + 1, split="eval")
    save_corpus(eval_corpus, out / "eval")
    _echo_config(out, {"command": "generate", "seed": seed,
                       "eval_videos": eval_videos, "generator": asdict(gen)})
    print(f"wrote {len(train_corpus)} train videos and {len(eval_corpus)} eval videos under {out}")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    merged = _merge_config(
        args.config,
        args.set,
        mode=args.mode,
        total_steps=args.steps,
        seed=args.seed,
        init_checkpoint=args.init_checkpoint,
        one_sided=args.one_sided,
        parent_every=args.parent_every,
    )
    known, unknown = _split_known(merged, TrainConfig)
    if unknown:
        raise TwoLevelError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**known)


def cmd_train(args) -> int:
    config = _train_config_from_args(args)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    _echo_config(out, {"command": "train", "corpus": str(args.corpus),
                       "corpus_manifest_sha256": _manifest_hash(args.corpus),
                       "train": config.to_dict()})
    state, metrics = run_schedule(config, corpus, out_dir=out, resume_from=args.resume)
    final_loss = metrics[-1]["loss"] if metrics else float("nan")
    print(f"trained {config.mode} to step {state.step}; final loss {final_loss:.4f}; "
          f"checkpoint at {out / 'checkpoint_final.bin'}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    eval_corpus = load_corpus(args.eval_corpus)
    train_corpus = load_corpus(args.train_corpus) if args.train_corpus else None
    reports = evalsuite.standard_eval(
        eval_corpus,
        state.clip_encoder,
        state.text_encoder,
        state.eval_aggregator(),
        n_items=args.items,
        seed=args.seed,
        k=state.config.k_clips,
        train_corpus=train_corpus,
    )
    out = Path(args.out)
    _echo_config(out, {"command": "eval", "checkpoint": str(args.checkpoint),
                       "eval_corpus": str(args.eval_corpus),
                       "corpus_manifest_sha256": _manifest_hash(args.eval_corpus),
                       "items": args.items,
                       "seed": args.seed, "mode": state.config.mode})
    payload = {name: rep.to_dict() for name, rep in reports.items()}
    with open(out / "eval_report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name in sorted(reports):
        rep = reports[name]
        if name == "retrieval":
            print(f"{name:16s} mAP={rep.extras['mAP']:.4f} nDCG={rep.extras['nDCG']:.4f}")
        else:
            print(f"{name:16s} acc={rep.accuracy:6.2f}%  n={rep.item_count}  ties={rep.tie_count}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_all(seed=args.seed)
    payload = {name: r for name, r in sorted(report.items())}
    if args.json_out:
        path = Path(args.json_out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    failed = [name for name, r in report.items() if not r["passed"]]
    for name, r in payload.items():
        mark = "ok  " if r["passed"] else "FAIL"
        print(f"{mark} {name:32s} max_rel_err={r['max_rel_err']:.3e}")
    if failed:
        print(f"error: gradcheck failed for {failed}", file=sys.stderr)
        return 1
    print(f"gradcheck passed: {len(report)} components within rel {gradcheck.REL_TOL}")
    return 0


def cmd_export(args) -> int:
    state = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    count = evalsuite.export_embeddings(
        corpus,
        state.clip_encoder,
        state.text_encoder,
        state.eval_aggregator(),
        args.level,
        args.out,
        k=state.config.k_clips,
    )
    print(f"exported {count} {args.level}-level embeddings to {args.out}")
    return 0


# -- reproduce -------------------------------------------------------------------------


def _mode_config(base: TrainConfig, mode: str, child_ckpt: str | None) -> TrainConfig:
    if mode == "parent_only":
        return replace(base, mode=mode, lr=PARENT_ONLY_LR, init_checkpoint=child_ckpt)
    return replace(base, mode=mode)


def _reproduce_one(payload: tuple) -> tuple[str, dict]:
    """Train and evaluate one mode (runs in a worker process)."""
    mode, config_dict, train_prefix, eval_prefix, run_dir, items, eval_seed = payload
    config = TrainConfig(**config_dict)
    train_corpus = load_corpus(train_prefix)
    eval_corpus = load_corpus(eval_prefix)
    state, _ = run_schedule(config, train_corpus, out_dir=run_dir)
    reports = evalsuite.standard_eval(
        eval_corpus,
        state.clip_encoder,
        state.text_encoder,
        state.eval_aggregator(),
        n_items=items,
        seed=eval_seed,
        k=config.k_clips,
    )
    row = {"mode": mode}
    for column in TABLE_COLUMNS:
        row[column] = round(reports[column].accuracy, 2)
    row["shuffle_ties"] = reports["shuffleMCQ"].tie_count
    return mode, row


def format_table(rows: list[dict]) -> str:
    headers = ["mode", *TABLE_COLUMNS, "shuffle_ties"]
    widths = [max(len(h), max(len(str(r[h])) for r in rows)) for h in headers]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(r[h]).ljust(w) for h, w in zip(headers, widths)))
    return "\n".join(lines) + "\n"


def cmd_reproduce(args) -> int:
    started = time.monotonic()
    budget_s = args.budget_minutes * 60.0

    def check_budget(stage: str) -> None:
        if time.monotonic() - started > budget_s:
            raise TwoLevelError(
                f"budget of {args.budget_minutes} min exceeded after {stage}"
            )

    out = Path(args.out)
    merged = _merge_config(args.config, args.set, seed=args.seed,
                           total_steps=args.steps)
    known, unknown = _split_known(merged, TrainConfig)
    if unknown:
        raise TwoLevelError(f"unknown train config keys: {sorted(unknown)}")
    base = TrainConfig(**known)

    if args.corpus:
        corpus_dir = Path(args.corpus)
    else:
        corpus_dir = out / "corpus"
        gen = GeneratorConfig()
        save_corpus(generate_synthetic(gen, seed=base.seed, split="train"),
                    corpus_dir / "train")
        save_corpus(
            generate_synthetic(replace(gen, num_videos=40), seed=base.seed + 1, split="eval"),
            corpus_dir / "eval",
        )
    train_prefix, eval_prefix = str(corpus_dir / "train"), str(corpus_dir / "eval")

    _echo_config(out, {"command": "reproduce", "train": base.to_dict(),
                       "corpus": str(corpus_dir),
                       "corpus_manifest_sha256": _manifest_hash(train_prefix),
                       "parent_only_lr": PARENT_ONLY_LR,
                       "items": args.items,
                       "jobs": args.jobs, "budget_minutes": args.budget_minutes})

    # the no-joint row initializes from the child_only run, so that trains first
    child_cfg = _mode_config(base, "child_only", None)
    mode, child_row = _reproduce_one(
        ("child_only", child_cfg.to_dict(), train_prefix, eval_prefix,
         str(out / "runs" / "child_only"), args.items, base.seed + 99)
    )
    rows_by_mode = {mode: child_row}
    print(f"[reproduce] child_only done ({time.monotonic() - started:.0f}s)")
    check_budget("child_only")

    child_ckpt = str(out / "runs" / "child_only" / "checkpoint_final.bin")
    remaining = [m for m in TABLE_MODES if m != "child_only"]
    payloads = [
        (m, _mode_config(base, m, child_ckpt).to_dict(), train_prefix, eval_prefix,
         str(out / "runs" / m), args.items, base.seed + 99)
        for m in remaining
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for mode, row in pool.map(_reproduce_one, payloads):
                rows_by_mode[mode] = row
                print(f"[reproduce] {mode} done ({time.monotonic() - started:.0f}s)")
    else:
        for payload in payloads:
            mode, row = _reproduce_one(payload)
            rows_by_mode[mode] = row
            print(f"[reproduce] {mode} done ({time.monotonic() - started:.0f}s)")
            check_budget(mode)

    rows = [rows_by_mode[m] for m in TABLE_MODES]
    table = format_table(rows)
    with open(out / "table.txt", "w") as fh:
        fh.write(table)
    with open(out / "table.json", "w") as fh:
        json.dump({"columns": list(TABLE_COLUMNS), "rows": rows}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    print(table, end="")
    return 0


# -- argument parsing ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twolevel",
        description="Two-level contrastive video-language embeddings at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic train/eval corpus pair")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON or TOML generator config")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--corpus", required=True, help="corpus prefix (without .jsonl)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON or TOML train config")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--steps", type=int, dest="steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--init-checkpoint")
    p.add_argument("--resume", help="checkpoint to resume from (same config)")
    p.add_argument("--one-sided", action="store_true", default=None,
                   help="child loss in the clip-anchored direction only")
    p.add_argument("--parent-every", choices=("step", "epoch"),
                   help="parent step after m child STEPS (default) or m epochs")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the evaluation suite on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-corpus", required=True)
    p.add_argument("--train-corpus", help="enables the linear probe")
    p.add_argument("--out", required=True)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all components")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="export embeddings as JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--level", choices=("child", "parent"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("reproduce", help="train all 7 modes and emit the comparison table")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="existing corpus dir (default: generate)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--budget-minutes", type=float, default=30.0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: path: {exc}", file=sys.stderr)
        return 1
    except TwoLevelError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

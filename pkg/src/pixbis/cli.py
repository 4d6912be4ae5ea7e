"""Command-line entry point: generate, train, score, evaluate, cross, baseline.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import baselines
from . import metrics as M
from .config import ConfigError, RunConfig
from .data import (
    DataError,
    Manifest,
    apply_protocol,
    corpus_hash,
    generate_dataset,
    group_videos,
    load_frames,
    select_frames,
    summarize,
)
from .model import Model, frame_score
from .training import CheckpointError, TrainingError, load_checkpoint, save_checkpoint, train_new, write_loss_log

logger = logging.getLogger("pixbis")

SCORE_BATCH = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


# -- scoring helpers -------------------------------------------------------------------

def score_samples(model: Model, manifest: Manifest, samples, n_frames: int) -> list:
    """Frame-level ScoreRecords for ``n_frames`` uniformly chosen frames per video."""
    chosen = []
    for frames in group_videos(samples).values():
        chosen.extend(select_frames(frames, n_frames))
    model.eval()
    records = []
    for b0 in range(0, len(chosen), SCORE_BATCH):
        batch = chosen[b0:b0 + SCORE_BATCH]
        x = load_frames(manifest, batch, model.config.input_size)
        with ad.no_grad():
            pmap, _ = model(x)
        for s, v in zip(batch, frame_score(pmap)):
            # quantize now so in-memory and on-disk scores agree exactly
            records.append(M.ScoreRecord(s.video_id, s.label, s.pai, float(M.format_score(v)), s.frame_index))
    return records


def _write_split_scores(records, out: Path, prefix: str):
    frame_path = out / f"{prefix}_frame_scores.csv"
    video_path = out / f"{prefix}_video_scores.csv"
    M.write_scores(records, frame_path)
    videos = M.aggregate_video_scores(records)
    videos = [M.ScoreRecord(r.video_id, r.label, r.pai, float(M.format_score(r.score))) for r in videos]
    M.write_scores(videos, video_path)
    return videos


def _load_model(path, cfg: RunConfig) -> Model:
    ckpt = load_checkpoint(path)
    if cfg.model_keys_set() and cfg.model() != ckpt.model_config:
        raise CheckpointError(f"{path}: checkpoint model config does not match the run config")
    return ckpt.model().eval()


# -- commands --------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> int:
    out = _out_dir(args.out)
    manifest = generate_dataset(cfg.generator(), out)
    summary = summarize(manifest)
    pais = sorted({s.pai for s in manifest.samples if s.pai != "none"})
    print(f"dataset: {manifest.name} ({len(manifest)} frames) -> {out}")
    for split in ("train", "dev", "eval"):
        parts = ", ".join(f"{pai}={d['videos']}v/{d['frames']}f" for pai, d in summary.get(split, {}).items())
        print(f"  {split}: {parts}")
    print(f"pai categories: {len(pais)} ({', '.join(pais)})")
    print(f"config hash: {manifest.config_hash}")
    print(f"manifest hash: {corpus_hash(manifest)}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    manifest = Manifest.read(args.data)
    splits = apply_protocol(manifest, cfg.protocol)
    out = _out_dir(args.out)
    model, log, ckpt = train_new(cfg.model(), manifest, cfg.train(), out / "checkpoints", cfg.protocol)
    save_checkpoint(ckpt, out / "model.pixbis")
    write_loss_log(log, out / "loss_log.csv")
    (out / "run_config.txt").write_text(cfg.dump())
    print(f"trained {len(log)} epoch(s) on {len(splits['train'])} frames ({cfg.protocol})")
    if log:
        print(f"final combined loss: {log[-1][1]:.4f}")
    print(f"checkpoint: {out / 'model.pixbis'}")
    return 0


def cmd_score(cfg: RunConfig, args) -> int:
    model = _load_model(args.model, cfg)
    manifest = Manifest.read(args.data)
    samples = apply_protocol(manifest, cfg.protocol)[args.split]
    out = _out_dir(args.out)
    records = score_samples(model, manifest, samples, args.frames)
    videos = _write_split_scores(records, out, args.split)
    print(f"scored {len(records)} frames / {len(videos)} videos of {manifest.name}:{args.split} -> {out}")
    return 0


def _evaluate_and_write(dev, evl, out: Path, stem: str, title: str, notes=()):
    report = M.evaluate(dev, evl)
    M.write_report(report, out / stem, title, notes)
    M.write_roc(M.roc_points(evl), out / f"{stem}_roc.csv")
    print(M.format_report(report, title, notes), end="")
    return report


def cmd_evaluate(cfg: RunConfig, args) -> int:
    dev = M.read_scores(args.dev)
    evl = M.read_scores(args.eval)
    out = _out_dir(args.out)
    _evaluate_and_write(dev, evl, out, "report", f"dev={args.dev} eval={args.eval}")
    return 0


def cmd_cross(cfg: RunConfig, args) -> int:
    model = _load_model(args.model, cfg)
    source = args.dev_source or cfg.threshold_source
    man_b = Manifest.read(args.data_b)
    man_a = Manifest.read(args.data_a) if args.data_a else None
    if source == "A" and man_a is None:
        raise UsageError("--data-a is required when the threshold comes from the source dataset")
    name_a = man_a.name if man_a is not None else "A"
    direction = f"{name_a}->{man_b.name}"
    out = _out_dir(args.out)
    tag = f"cross_{name_a}_to_{man_b.name}"
    dev_man = man_a if source == "A" else man_b
    dev_samples = apply_protocol(dev_man, cfg.protocol)["dev"]
    eval_samples = apply_protocol(man_b, cfg.protocol)["eval"]
    dev = _write_split_scores(score_samples(model, dev_man, dev_samples, args.frames), out, f"{tag}_dev")
    evl = _write_split_scores(score_samples(model, man_b, eval_samples, args.frames), out, f"{tag}_eval")
    notes = (f"trained on: {name_a}", f"tested on: {man_b.name}",
             f"threshold: dev EER of {dev_man.name} ({'source' if source == 'A' else 'target'})")
    _evaluate_and_write(dev, evl, out, tag, f"cross-dataset {direction}", notes)
    return 0


def cmd_baseline(cfg: RunConfig, args) -> int:
    manifest = Manifest.read(args.data)
    splits = apply_protocol(manifest, cfg.protocol)
    out = _out_dir(args.out)
    target = (cfg.input_size, cfg.input_size)

    def features(samples):
        rows = []
        for b0 in range(0, len(samples), 256):
            batch = samples[b0:b0 + 256]
            for s, img in zip(batch, load_frames(manifest, batch, target)):
                rows.append(baselines.extract(args.kind, img))
        return np.array(rows)

    train_samples = splits["train"]
    x_train = features(train_samples)
    y_train = np.array([s.y for s in train_samples])
    lm = baselines.linear_train(x_train, y_train, cfg.baseline_l2, cfg.baseline_epochs, cfg.baseline_lr, cfg.seed)

    def score(split):
        chosen = []
        for frames in group_videos(splits[split]).values():
            chosen.extend(select_frames(frames, cfg.score_frames))
        feats = features(chosen)
        if args.dump_features:
            baselines.write_features(
                ((s.video_id, s.frame_index, f) for s, f in zip(chosen, feats)),
                out / f"{split}_{args.kind}_features.csv",
            )
        sc = baselines.linear_score(lm, feats)
        recs = [M.ScoreRecord(s.video_id, s.label, s.pai, float(M.format_score(v)), s.frame_index)
                for s, v in zip(chosen, sc)]
        return _write_split_scores(recs, out, split)

    dev, evl = score("dev"), score("eval")
    notes = (baselines.IQM_DISCLAIMER,) if args.kind == "iqm" else ()
    _evaluate_and_write(dev, evl, out, "report", f"{args.kind} baseline on {manifest.name} ({cfg.protocol})", notes)
    return 0


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pixbis", description="Pixel-wise binary supervision for face PAD.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", parents=[common], help="write a synthetic corpus")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--protocol")

    p = sub.add_parser("score", parents=[common], help="score one split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True, choices=["train", "dev", "eval"])
    p.add_argument("--frames", type=int)
    p.add_argument("--protocol")

    p = sub.add_parser("evaluate", parents=[common], help="threshold on dev, report on eval")
    p.add_argument("--dev", required=True, help="dev video score CSV")
    p.add_argument("--eval", required=True, help="eval video score CSV")

    p = sub.add_parser("cross", parents=[common], help="cross-dataset test")
    p.add_argument("--model", required=True)
    p.add_argument("--data-a", help="source corpus (needed for a source-side threshold)")
    p.add_argument("--data-b", required=True, help="target corpus")
    p.add_argument("--dev-source", choices=["A", "B"])
    p.add_argument("--frames", type=int)
    p.add_argument("--protocol")

    p = sub.add_parser("baseline", parents=[common], help="handcrafted-feature baseline")
    p.add_argument("--kind", required=True, choices=["lbp", "iqm"])
    p.add_argument("--data", required=True)
    p.add_argument("--protocol")
    p.add_argument("--dump-features", action="store_true")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "cross": cmd_cross,
    "baseline": cmd_baseline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {"seed": args.seed}
    for attr, key in (("epochs", "epochs"), ("protocol", "protocol")):
        overrides[key] = getattr(args, attr, None)
    try:
        cfg = RunConfig.load(args.config, overrides)
        if getattr(args, "frames", None) is None and hasattr(args, "frames"):
            args.frames = cfg.score_frames
        if getattr(args, "frames", 1) < 1:
            raise UsageError("--frames must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"pixbis: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, M.MetricsError, CheckpointError, TrainingError, OSError, ValueError) as exc:
        print(f"pixbis: error: {exc}", file=sys.stderr)
        return 2


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

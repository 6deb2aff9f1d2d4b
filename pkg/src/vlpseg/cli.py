"""``vlpseg`` command line: gen-data, train, eval, predict, plot.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure during training.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from .backbones import make_backbones
from .config import SEED_ENV, RunConfig, build_config
from .episodes import (
    Episode,
    ManifestEntry,
    generate_episode,
    load_manifest,
    make_folds,
    read_image,
    sample_test_pairs,
    save_image,
    save_index_mask,
    text_for,
    write_manifest,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    EmptyMaskError,
    FoldError,
    NonFiniteLossError,
    UnknownLabelError,
)
from .objectives import IoUReport
from .trainer import (
    ManifestEpisodeSource,
    SyntheticEpisodeSource,
    TrainLog,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .vlp_encoder import MODES, WITH_TEXT, forward

log = logging.getLogger("vlpseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.pt"
TRAIN_LOG_NAME = "train_log.jsonl"
REPORT_NAME = "report.txt"


class UsageError(Exception):
    pass


def _parallel_map(fn, items, workers: int):
    """Order-preserving map; results do not depend on ``workers``."""
    items = list(items)
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _overrides(args, mapping: dict[str, str]) -> dict[str, object]:
    out = {}
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    return out


# ---------------------------------------------------------------- gen-data

def _render(item, n_classes: int, image_size: int, signature_seed: int):
    seed, class_id = item
    ep = generate_episode(seed, class_id, n_classes, image_size, signature_seed=signature_seed)
    return ep.target_image, ep.target_labels


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else _env_seed()
    cfg = build_config(args.config, _overrides(args, {"classes": "data.n_classes", "image_size": "data.image_size"}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_classes = cfg.data.n_classes
    seeds = np.random.SeedSequence(seed).generate_state(args.n, dtype=np.uint32) if args.n else []
    items = [(int(s), i % n_classes) for i, s in enumerate(seeds)]
    fn = partial(_render, n_classes=n_classes, image_size=cfg.data.image_size,
                 signature_seed=cfg.data.signature_seed)
    entries = []
    for i, ((image, labels), (_, cid)) in enumerate(zip(_parallel_map(fn, items, args.workers), items)):
        save_image(image, out / f"image_{i:05d}.png")
        save_index_mask(labels, out / f"mask_{i:05d}.png")
        entries.append(ManifestEntry(f"image_{i:05d}.png", f"mask_{i:05d}.png", cid))
    vocab = {i: f"class{i}" for i in range(n_classes)}
    write_manifest(out / "manifest.tsv", entries, vocab)
    cfg.write(out)
    print(f"wrote {len(entries)} image/mask pairs and {out / 'manifest.tsv'}")
    return EXIT_OK


def _env_seed() -> int:
    import os

    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------- train

def _vocabulary(cfg: RunConfig):
    if cfg.data.manifest:
        manifest = load_manifest(cfg.data.manifest)
        return manifest, manifest.vocabulary
    return None, {i: f"class{i}" for i in range(cfg.data.n_classes)}


def cmd_train(args) -> int:
    cfg = build_config(args.config, _overrides(args, {
        "fold": "train.fold_index", "mode": "train.mode", "seed": "train.seed", "epochs": "train.epochs",
        "episodes_per_epoch": "train.episodes_per_epoch", "lr": "train.learning_rate", "manifest": "data.manifest",
    }))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    manifest, vocab = _vocabulary(cfg)
    folds = make_folds(vocab, cfg.data.n_folds)
    if not 0 <= cfg.train.fold_index < len(folds):
        raise UsageError(f"train.fold_index must be in [0, {len(folds)}), got {cfg.train.fold_index}")
    fold = folds[cfg.train.fold_index]
    bundle = make_backbones(cfg.backbone, vocabulary=vocab, signature_seed=cfg.data.signature_seed)
    if manifest is not None:
        source = ManifestEpisodeSource(manifest, fold.train_classes, cfg.train.seed, cfg.data.image_size)
    else:
        source = SyntheticEpisodeSource(fold.train_classes, len(vocab), cfg.train.seed, cfg.data.image_size,
                                        signature_seed=cfg.data.signature_seed)
    log_path = out / TRAIN_LOG_NAME
    log_path.unlink(missing_ok=True)
    train_log = TrainLog(path=log_path)
    eval_kwargs = {"seed": cfg.eval.seed, "n_classes": len(vocab), "image_size": cfg.data.image_size,
                   "signature_seed": cfg.data.signature_seed}
    encoder, train_log, optimizer = train(cfg.train, source, bundle, cfg.model, train_log=train_log,
                                          eval_fold=fold, eval_kwargs=eval_kwargs)
    step = len(train_log.losses())
    save_checkpoint(out / CHECKPOINT_NAME, encoder, bundle, cfg.train, optimizer, step,
                    run_config={k: str(v) for k, v in cfg.flat().items()})
    losses = train_log.losses()
    if losses:
        print(f"trained {step} steps: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _sample(k_seed, fold, n_classes, image_size, signature_seed):
    k, seed = k_seed
    return generate_episode(seed, fold.test_classes[k % len(fold.test_classes)], n_classes, image_size,
                            signature_seed=signature_seed)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bundle = ckpt.build_bundle()
    encoder = ckpt.build_encoder()
    run = ckpt.run_config or {}
    image_size = int(run.get("data.image_size", 64))
    signature_seed = int(run.get("data.signature_seed", 0))
    n_folds = int(run.get("data.n_folds", 4))
    seed = args.seed if args.seed is not None else _env_seed()
    fold_index = ckpt.fold_index if args.fold is None else args.fold
    folds = make_folds(ckpt.vocabulary, n_folds)
    if not 0 <= fold_index < len(folds):
        raise UsageError(f"--fold must be in [0, {len(folds)}), got {fold_index}")
    if fold_index != ckpt.fold_index and not args.allow_seen:
        print(f"warning: checkpoint was trained on fold {ckpt.fold_index}; evaluating fold {fold_index} "
              "tests on classes seen during training (pass --allow-seen to silence)", file=sys.stderr)
    fold = folds[fold_index]
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(args.n_pairs, dtype=np.uint32)]
    fn = partial(_sample, fold=fold, n_classes=len(ckpt.vocabulary), image_size=image_size,
                 signature_seed=signature_seed)
    episodes = _parallel_map(fn, list(enumerate(seeds)), args.workers)
    report = evaluate(encoder, fold, args.n_pairs, bundle, seed=seed, episodes=episodes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = report.save(out / REPORT_NAME)
    _write_resolved(out, {"checkpoint": args.checkpoint, "fold": fold_index, "n_pairs": args.n_pairs,
                          "seed": seed, "allow_seen": args.allow_seen})
    print(f"miou {report.miou:.4f} over {report.n_episodes} episodes -> {path}")
    return EXIT_OK


def _write_resolved(out: Path, values: dict) -> None:
    lines = ["# resolved vlpseg command configuration"] + [f"{k} = {v}" for k, v in values.items()]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- predict

def _read_binary_mask(path) -> np.ndarray:
    from PIL import Image

    try:
        img = Image.open(path)
    except (OSError, FileNotFoundError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from None
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr.max(-1)
    return (arr > 0).astype(np.uint8)


def _overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    tint = np.array([1.0, 0.1, 0.1], dtype=np.float32)
    out = image.copy()
    out[mask > 0] = (1 - alpha) * out[mask > 0] + alpha * tint
    return out


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.mode == WITH_TEXT and not args.label:
        raise UsageError("this checkpoint was trained with text: --label is required")
    bundle = ckpt.build_bundle()
    encoder = ckpt.build_encoder()
    target = read_image(args.target)
    reference = read_image(args.reference)
    ref_mask = _read_binary_mask(args.ref_mask)
    if ref_mask.shape != reference.shape[:2]:
        raise DataError(f"reference mask {ref_mask.shape} does not match reference image {reference.shape[:2]}")
    if not ref_mask.any():
        raise EmptyMaskError(f"reference mask {args.ref_mask} has no foreground pixels")
    label = args.label or ""
    if label:
        bundle.vlm.label_id(label)  # fail early on labels outside the vocabulary
    class_id = bundle.vlm.label_id(label) if label else -1
    ep = Episode(target, reference, ref_mask, class_id, text_for(label) if label else "",
                 np.zeros(target.shape[:2], dtype=np.uint8))
    logits = forward(ep, bundle, encoder).detach().numpy()
    mask = (1 / (1 + np.exp(-logits)) > args.threshold).astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    Image.fromarray(mask * 255, mode="L").save(out / "mask.png")
    save_image(_overlay(target, mask), out / "overlay.png")
    _write_resolved(out, {"checkpoint": args.checkpoint, "target": args.target, "reference": args.reference,
                          "ref_mask": args.ref_mask, "label": label, "threshold": args.threshold})
    print(f"foreground fraction {mask.mean():.3f} -> {out / 'mask.png'}")
    return EXIT_OK


# ---------------------------------------------------------------- plot

def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = [(Path(p), IoUReport.load(p)) for p in args.reports or []]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    by_mode: dict[str, dict[int, float]] = {}
    for path, rep in reports:
        mode = rep.meta.get("mode", "unknown")
        fold = int(rep.meta.get("fold", len(by_mode.get(mode, {}))))
        by_mode.setdefault(mode, {})[fold] = rep.miou

    for mode, per_fold in by_mode.items():
        folds = sorted(per_fold)
        values = [per_fold[f] for f in folds]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar([f"fold {f}" for f in folds], values, color="tab:blue")
        ax.axhline(float(np.mean(values)), color="tab:red", linestyle="--", label=f"mean {np.mean(values):.3f}")
        ax.set_ylim(0, 1)
        ax.set_ylabel("mIoU")
        ax.set_title(f"per-fold mIoU ({mode})")
        ax.legend()
        fig.tight_layout()
        path = out / f"fold_miou_{mode}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

    modes = [m for m in MODES if m in by_mode]
    if len(modes) == 2:
        folds = sorted(set(by_mode[modes[0]]) | set(by_mode[modes[1]]))
        x = np.arange(len(folds))
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for k, mode in enumerate(modes):
            vals = [by_mode[mode].get(f, np.nan) for f in folds]
            ax.bar(x + (k - 0.5) * 0.38, vals, width=0.38, label=mode)
        ax.set_xticks(x, [f"fold {f}" for f in folds])
        ax.set_ylim(0, 1)
        ax.set_ylabel("mIoU")
        ax.set_title("with text vs text-free")
        ax.legend()
        fig.tight_layout()
        path = out / "mode_comparison.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

    if args.logs:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for p in args.logs:
            losses = TrainLog.read(p).losses()
            ax.plot(np.arange(1, len(losses) + 1), losses, label=Path(p).parent.name or Path(p).name)
        ax.set_xlabel("step")
        ax.set_ylabel("total loss")
        ax.set_title("training loss")
        ax.legend()
        fig.tight_layout()
        path = out / "loss_curves.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    if not written:
        raise UsageError("nothing to plot: pass --reports and/or --logs")
    _write_resolved(out, {"reports": " ".join(map(str, args.reports or [])), "logs": " ".join(args.logs or [])})
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlpseg", description="Few-shot segmentation with VLM-derived SAM prompts")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--workers", type=int, default=1, help="parallel episode workers (default 1)")
        if config:
            p.add_argument("--config", help="flat 'section.key = value' config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("gen-data", help="render synthetic images, masks and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, help="vocabulary size (default data.n_classes)")
    p.add_argument("--n", type=int, default=40, help="number of image/mask pairs")
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the prompt encoder on one fold")
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, help="held-out fold index")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes-per-epoch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--manifest", help="train on episodes from a manifest instead of the generator")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU of a checkpoint on sampled test pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, help="test fold (default: the checkpoint's training fold)")
    p.add_argument("--n-pairs", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--allow-seen", action="store_true", help="evaluate on a fold other than the training fold")
    common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one target image given a reference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--ref-mask", required=True, help="reference mask image, nonzero = object")
    p.add_argument("--label", help="class label, required for with-text checkpoints")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    common(p, config=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plot", help="charts from IoU reports and training logs")
    p.add_argument("--reports", nargs="*", help="IoU report files written by eval")
    p.add_argument("--logs", nargs="*", help="train_log.jsonl files for loss curves")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FoldError, EmptyMaskError, UnknownLabelError, DimensionError, CheckpointError,
            FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, UnknownLabelError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

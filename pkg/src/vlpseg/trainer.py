"""Episodic training loop, evaluation, checkpoints and the training log."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbones import BackboneBundle, BackboneConfig, make_backbones, module_fingerprint
from .episodes import Difficulty, FoldSpec, episode_from_manifest, generate_episode, sample_test_pairs
from .errors import (
    CorruptCheckpointError,
    FingerprintMismatchError,
    ModeMismatchError,
    NonFiniteLossError,
    VersionMismatchError,
)
from .objectives import IoUReport, episode_iou, fold_miou, total_loss
from .vlp_encoder import ModelConfig, VlpEncoder, downsample_mask, encode_episodes, forward_encoded

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vlpseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 20
    fold_index: int = 0
    mode: str = "with-text"
    seed: int = 0
    eval_interval: int = 0  # steps; 0 disables periodic evaluation
    episodes_per_epoch: int = 512
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    eval_pairs: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def _append(self, record: dict) -> None:
        last = next((r["step"] for r in reversed(self.records) if r["kind"] == record["kind"]), None)
        if last is not None and record["step"] <= last:
            raise ValueError(f"{record['kind']} step {record['step']} does not follow {last}")
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def add_step(self, step: int, total: float, bce: float, dice: float, skipped: int = 0) -> None:
        self._append({"kind": "step", "step": step, "total": total, "bce": bce, "dice": dice, "skipped": skipped})

    def add_eval(self, step: int, report: IoUReport) -> None:
        self._append({
            "kind": "eval", "step": step, "miou": report.miou,
            "per_class": {str(k): v for k, v in report.per_class.items()},
            "n_episodes": report.n_episodes, "skipped": report.skipped,
        })

    def losses(self) -> list[float]:
        return [r["total"] for r in self.records if r["kind"] == "step"]

    @classmethod
    def read(cls, path) -> "TrainLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


class SyntheticEpisodeSource:
    """Seeded stream of synthetic training episodes restricted to ``classes``.

    Distractor objects are drawn from the same class list so that held-out
    classes never appear during training.
    """

    def __init__(self, classes, n_classes: int = 20, seed: int = 0, image_size: int = 64,
                 difficulty: Difficulty | None = None, signature_seed: int = 0):
        self.classes = tuple(classes)
        if not self.classes:
            raise ValueError("training fold has no classes")
        self.n_classes = n_classes
        self.seed = seed
        self.image_size = image_size
        self.difficulty = difficulty
        self.signature_seed = signature_seed

    def episodes(self, epoch: int, n: int):
        rng = np.random.default_rng([self.seed, epoch])
        for _ in range(n):
            cid = int(rng.choice(self.classes))
            yield generate_episode(int(rng.integers(2**31)), cid, self.n_classes, self.image_size,
                                   self.difficulty, distractor_classes=self.classes,
                                   signature_seed=self.signature_seed)


class ManifestEpisodeSource:
    """Random reference/target pairs of the same class from a manifest."""

    def __init__(self, manifest, classes, seed: int = 0, image_size: int = 64):
        self.manifest = manifest
        self.seed = seed
        self.image_size = image_size
        self.by_class = {}
        for idx, e in enumerate(manifest.entries):
            if e.class_id in classes:
                self.by_class.setdefault(e.class_id, []).append(idx)
        self.by_class = {c: v for c, v in self.by_class.items() if len(v) >= 2}
        if not self.by_class:
            raise ValueError("manifest has no class with two or more entries in the training fold")

    def episodes(self, epoch: int, n: int):
        rng = np.random.default_rng([self.seed, epoch])
        classes = sorted(self.by_class)
        for _ in range(n):
            cid = classes[int(rng.integers(len(classes)))]
            ref, tgt = rng.choice(self.by_class[cid], size=2, replace=False)
            yield episode_from_manifest(self.manifest, int(ref), int(tgt), cid, self.image_size)


def _usable(ep, patch_size: int) -> bool:
    return bool(downsample_mask(ep.reference_mask, patch_size).any())


def _batches(episodes, size: int):
    batch = []
    for ep in episodes:
        batch.append(ep)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def train(config: TrainConfig, source, bundle: BackboneBundle, model_config: ModelConfig | None = None,
          encoder: VlpEncoder | None = None, train_log: TrainLog | None = None,
          eval_fold: FoldSpec | None = None, eval_kwargs: dict | None = None):
    """Optimise the prompt encoder only; the backbone bundle is checked to stay bit-identical.

    Returns ``(encoder, train_log, optimizer)``.
    """
    if not all(bundle.frozen.values()):
        raise RuntimeError(f"backbone bundle is not frozen: {bundle.frozen}")
    model_config = model_config or ModelConfig()
    if model_config.mode != config.mode:
        model_config = ModelConfig(**{**asdict(model_config), "mode": config.mode})
    if encoder is None:
        encoder = VlpEncoder(bundle.vlm.c_vlm, bundle.sam_decoder.c_sam, model_config, seed=config.seed)
    log.info("prompt encoder: %d learnable parameters", encoder.parameter_count())
    train_log = train_log if train_log is not None else TrainLog()
    optimizer = torch.optim.AdamW(encoder.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    reference_fp = bundle.fingerprints()
    step = 0
    skipped_total = 0
    encoder.train()
    for epoch in range(config.epochs):
        for batch in _batches(source.episodes(epoch, config.episodes_per_epoch), config.batch_size):
            usable = [ep for ep in batch if _usable(ep, bundle.patch_size)]
            skipped = len(batch) - len(usable)
            skipped_total += skipped
            if not usable:
                continue
            enc = encode_episodes(usable, bundle, with_text=encoder.with_text)
            logits = forward_encoded(enc, bundle, encoder)
            lv = total_loss(logits, enc.gt_mask.to(logits.dtype))
            loss = lv.total.mean()
            if not torch.isfinite(loss):
                record = {"step": step + 1, "epoch": epoch, "episode_seeds": [ep.seed for ep in usable],
                          "class_ids": enc.class_ids}
                raise NonFiniteLossError(f"non-finite loss at step {step + 1}: {record}", record)
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(encoder.parameters(), config.grad_clip)
            optimizer.step()
            step += 1
            train_log.add_step(step, loss.item(), lv.bce.mean().item(), lv.dice.mean().item(), skipped)
            if config.eval_interval and eval_fold is not None and step % config.eval_interval == 0:
                train_log.add_eval(step, evaluate(encoder, eval_fold, config.eval_pairs, bundle, **(eval_kwargs or {})))
                encoder.train()
        if bundle.fingerprints() != reference_fp:
            raise RuntimeError(f"backbone parameters changed during epoch {epoch}")
    encoder.eval()
    encoder.skipped_episodes = skipped_total
    return encoder, train_log, optimizer


@torch.no_grad()
def evaluate(encoder: VlpEncoder, fold: FoldSpec, n_pairs: int, bundle: BackboneBundle, mode: str | None = None,
             seed: int = 0, batch_size: int = 50, threshold: float = 0.5, episodes=None, **pair_kwargs) -> IoUReport:
    """Class-balanced mIoU on ``n_pairs`` sampled test episodes (or on ``episodes`` if given)."""
    if mode is not None and mode != encoder.mode:
        raise ModeMismatchError(f"encoder trained in {encoder.mode!r} mode cannot be evaluated as {mode!r}")
    was_training = encoder.training
    encoder.eval()
    if episodes is None:
        episodes = sample_test_pairs(fold, n_pairs, seed, **pair_kwargs)
    results, skipped = [], 0
    for batch in _batches(episodes, batch_size):
        usable = [ep for ep in batch if _usable(ep, bundle.patch_size)]
        skipped += len(batch) - len(usable)
        if not usable:
            continue
        enc = encode_episodes(usable, bundle, with_text=encoder.with_text)
        logits = forward_encoded(enc, bundle, encoder)
        for ep, lg in zip(usable, logits):
            results.append((ep.class_id, episode_iou(lg, ep.gt_mask, threshold)))
    encoder.train(was_training)
    report = fold_miou(results, skipped)
    report.meta.update(fold=str(fold.fold_index), mode=encoder.mode, seed=str(seed))
    return report


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: dict
    model_config: ModelConfig
    backbone_config: BackboneConfig
    train_config: dict
    fingerprints: dict
    vocabulary: dict
    class_hues: list
    step: int
    optimizer: dict | None = None
    rng_state: dict | None = None
    run_config: dict | None = None
    c_vlm: int = 32
    c_sam: int = 64

    @property
    def mode(self) -> str:
        return self.model_config.mode

    @property
    def fold_index(self) -> int:
        return int(self.train_config.get("fold_index", 0))

    def build_encoder(self, dtype=torch.float32) -> VlpEncoder:
        enc = VlpEncoder(self.c_vlm, self.c_sam, self.model_config)
        enc.load_state_dict(self.params)
        return enc.to(dtype).eval()

    def build_bundle(self) -> BackboneBundle:
        bundle = make_backbones(self.backbone_config, vocabulary=self.vocabulary, hues=self.class_hues)
        if bundle.fingerprints() != self.fingerprints:
            raise FingerprintMismatchError("rebuilt backbones do not match the checkpoint fingerprints")
        return bundle


def save_checkpoint(path, encoder: VlpEncoder, bundle: BackboneBundle, train_config: TrainConfig | None = None,
                    optimizer=None, step: int = 0, run_config: dict | None = None) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": {k: v.detach().clone() for k, v in encoder.state_dict().items()},
        "model_config": asdict(encoder.config),
        "backbone_config": asdict(bundle.config),
        "train_config": asdict(train_config) if train_config is not None else {},
        "fingerprints": bundle.fingerprints(),
        "vocabulary": {int(k): v for k, v in bundle.vocabulary.items()},
        "class_hues": [float(h) for h in bundle.vlm.class_hues.tolist()],
        "c_vlm": encoder.c_vlm,
        "c_sam": encoder.out_proj.out_features,
        "step": int(step),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": {"torch": torch.get_rng_state()},
        "run_config": dict(run_config or {}),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, bundle: BackboneBundle | None = None, expected_mode: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises a variety of errors on truncated archives
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpointError(f"{path} is not a vlpseg checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path} has checkpoint version {payload.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    ckpt = Checkpoint(
        params=payload["params"],
        model_config=ModelConfig(**payload["model_config"]),
        backbone_config=BackboneConfig(**payload["backbone_config"]),
        train_config=payload["train_config"],
        fingerprints=payload["fingerprints"],
        vocabulary={int(k): v for k, v in payload["vocabulary"].items()},
        class_hues=payload["class_hues"],
        step=payload["step"],
        optimizer=payload["optimizer"],
        rng_state=payload["rng_state"],
        run_config=payload["run_config"],
        c_vlm=payload["c_vlm"],
        c_sam=payload["c_sam"],
    )
    if expected_mode is not None and expected_mode != ckpt.mode:
        raise ModeMismatchError(f"checkpoint was trained in {ckpt.mode!r} mode, requested {expected_mode!r}")
    if bundle is not None and bundle.fingerprints() != ckpt.fingerprints:
        raise FingerprintMismatchError(f"backbone fingerprints of {path} do not match the provided bundle")
    return ckpt


def vlp_fingerprint(encoder: VlpEncoder) -> str:
    return module_fingerprint(encoder)

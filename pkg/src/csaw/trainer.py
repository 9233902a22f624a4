"""Optimisation loop, checkpoints and the image classifier used for evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from safetensors import safe_open
from safetensors.torch import save_file

from . import config as cfgmod
from .backbone import build_backbone
from .data import DatasetManifest
from .jigsaw import apply_jigsaw, load_image, sample_permutation
from .losses import LossReport, LossWeights, barlow_twins, combine, cross_entropy, diversity_loss, reconstruction_loss
from .model import CSaw

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "csaw-checkpoint/1"
# sample-id offset that keeps evaluation jigsaw streams apart from training ones
EVAL_STREAM = 1_000_003


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 2e-4
    warmup_lr: float = 1e-7
    warmup_epochs: int = 1
    batch_size: int = 4
    shots: int = 16
    alpha: float = 0.5
    lambda_bt: float = 5.1e-3
    dm_mode: str = "entropy"
    recon_target: str = "clean"
    grid: int = 4
    exclude_identity: bool = False
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 1

    def __post_init__(self):
        if not self.lr > self.warmup_lr > 0:
            raise ValueError("need lr > warmup_lr > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.recon_target not in ("clean", "jumbled"):
            raise ValueError(f"recon_target must be 'clean' or 'jumbled', got {self.recon_target!r}")
        self.weights  # validates alpha / lambda_bt / dm_mode

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.lambda_bt, self.dm_mode)

    def lr_at(self, epoch: int) -> float:
        """Constant warm-up rate for the first ``warmup_epochs`` (0-based epochs), then ``lr``."""
        return self.warmup_lr if epoch < self.warmup_epochs else self.lr

    @classmethod
    def from_run_config(cls, cfg: dict, seed: int = 1) -> "TrainConfig":
        return cls(
            epochs=cfg["train.epochs"], lr=cfg["train.lr"], warmup_lr=cfg["train.warmup_lr"],
            warmup_epochs=cfg["train.warmup_epochs"], batch_size=cfg["train.batch_size"],
            shots=cfg["train.shots"], alpha=cfg["loss.alpha"], lambda_bt=cfg["loss.lambda_bt"],
            dm_mode=cfg["loss.dm_mode"], recon_target=cfg["recon.target"], grid=cfg["jigsaw.grid"],
            exclude_identity=cfg["jigsaw.exclude_identity"], momentum=cfg["train.momentum"],
            weight_decay=cfg["train.weight_decay"], seed=seed,
        )


def build_model(cfg: dict, backbone=None) -> CSaw:
    if backbone is None:
        backbone = build_backbone(cfg["backbone.name"], cfg["backbone.seed"], cfg["backbone.temperature"])
    model = CSaw(backbone, context_length=cfg["prompt.context_length"], init_text=cfg["prompt.init_text"],
                 reduction=cfg["vat.reduction"], tap_layers=cfg["vat.tap_layers"],
                 seed_shape=cfg["recon.seed_shape"], temperature=cfg["backbone.temperature"],
                 seed=cfg["backbone.seed"])
    if cfg["train.dtype"] == "float64":
        model = model.double()
    return model


# -- data ----------------------------------------------------------------------


@dataclass
class TrainSet:
    """Few-shot training images held in memory.

    ``labels`` index ``class_names``; ``source_classes`` keeps the manifest
    class index of each sample for the new-class audit.
    """

    images: torch.Tensor
    labels: torch.Tensor
    sample_ids: list[int]
    class_names: list[str]
    source_classes: list[int]

    def __len__(self):
        return len(self.sample_ids)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, shots: dict, classes, dtype=torch.float32) -> "TrainSet":
        classes = [int(c) for c in classes]
        local = {c: i for i, c in enumerate(classes)}
        ids = sorted(i for c in classes for i in shots[c])
        for i in ids:
            if manifest.samples[i][1] not in local:
                raise ValueError(f"shot {i} belongs to class {manifest.samples[i][1]}, outside the training classes")
        images = torch.stack([load_image(manifest.path(i)) for i in ids]).to(dtype)
        src = [manifest.samples[i][1] for i in ids]
        labels = torch.tensor([local[c] for c in src], dtype=torch.long)
        return cls(images, labels, ids, [manifest.classes[c] for c in classes], src)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a lone trailing sample cannot be batch-standardized; fold it into the previous batch
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def jumble(images, stream_ids, config: TrainConfig, epoch: int):
    perms = [sample_permutation(config.grid, [int(config.seed), int(epoch), int(s)], config.exclude_identity)
             for s in stream_ids]
    return torch.stack([apply_jigsaw(img, p) for img, p in zip(images, perms)])


# -- one step ------------------------------------------------------------------


def compute_losses(model: CSaw, x, x_jig, labels, class_names, config: TrainConfig):
    """Forward the full pipeline; returns (component tensors, total tensor, outputs)."""
    out = model(x, x_jig, class_names)
    target = x if config.recon_target == "clean" else x_jig
    parts = {
        "ce": cross_entropy(out.probs, labels),
        "ssl": barlow_twins(out.emb_jumbled, out.emb_clean, config.lambda_bt),
        "recon": reconstruction_loss(out.x_hat, target),
        "dm": diversity_loss(out.probs, config.dm_mode),
    }
    total = combine(parts["ce"], parts["ssl"], parts["recon"], parts["dm"], config.alpha)
    return parts, total, out


def train_step(batch, model: CSaw, optimizer, config: TrainConfig, class_names) -> LossReport:
    """One SGD update on the trainable heads; returns the composed loss report."""
    x, x_jig, labels = batch
    model.train()
    optimizer.zero_grad(set_to_none=True)
    parts, total, _ = compute_losses(model, x, x_jig, labels, class_names, config)
    bad = [k for k, v in parts.items() if not torch.isfinite(v)]
    if bad or not torch.isfinite(total):
        raise TrainingAborted(f"non-finite loss in component(s) {bad or ['total']}: "
                              + ", ".join(f"{k}={float(v.detach())}" for k, v in parts.items()))
    total.backward()
    optimizer.step()
    vals = {k: float(v.detach()) for k, v in parts.items()}
    return LossReport(**vals, total=combine(vals["ce"], vals["ssl"], vals["recon"], vals["dm"], config.alpha))


def make_optimizer(model: CSaw, config: TrainConfig):
    return torch.optim.SGD(model.trainable_parameters(), lr=config.lr_at(0), momentum=config.momentum,
                           weight_decay=config.weight_decay)


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    config: dict
    backbone_name: str
    backbone_digest: str
    epoch: int
    class_names: list[str]
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    rng_state: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.config,
            "backbone": {"name": self.backbone_name, "digest": self.backbone_digest},
            "epoch": self.epoch,
            "class_names": self.class_names,
            "extra": self.extra,
        }

    def save(self, path):
        """Atomic write: a safetensors container whose metadata carries the JSON header."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {f"param/{k}": v.detach().contiguous().cpu() for k, v in self.params.items()}
        tensors.update({f"optim/{k}": v.detach().contiguous().cpu() for k, v in self.optimizer_state.items()})
        if self.rng_state is not None:
            tensors["rng/torch"] = self.rng_state
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
        os.close(fd)
        try:
            save_file(tensors, tmp, metadata={"csaw": json.dumps(self.header(), sort_keys=True)})
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no checkpoint at {path}")
        with safe_open(str(path), framework="pt") as f:
            meta = f.metadata() or {}
            if "csaw" not in meta:
                raise ValueError(f"{path} is not a C-SAW checkpoint")
            header = json.loads(meta["csaw"])
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
            params, optim, rng = {}, {}, None
            for key in f.keys():
                kind, _, name = key.partition("/")
                t = f.get_tensor(key)
                if kind == "param":
                    params[name] = t
                elif kind == "optim":
                    optim[name] = t
                elif key == "rng/torch":
                    rng = t
        return cls(params, header["config"], header["backbone"]["name"], header["backbone"]["digest"],
                   header["epoch"], header["class_names"], optim, rng, header.get("extra", {}))

    def apply_to(self, model: CSaw):
        digest = model.backbone.checksum_parameters()
        if digest != self.backbone_digest:
            raise ValueError("backbone digest mismatch: checkpoint was trained against different backbone weights")
        model.load_trainable_state({k: v.to(model.context) for k, v in self.params.items()})


def _optimizer_buffers(model: CSaw, optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in model.named_trainable_parameters():
        buf = optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            out[f"{name}/momentum_buffer"] = buf.detach().clone()
    return out


def _restore_optimizer(model: CSaw, optimizer, state):
    for name, p in model.named_trainable_parameters():
        buf = state.get(f"{name}/momentum_buffer")
        if buf is not None:
            optimizer.state[p]["momentum_buffer"] = buf.to(p).clone()


def snapshot(model, optimizer, run_cfg, epoch, class_names, extra=None) -> Checkpoint:
    return Checkpoint(
        params=model.trainable_state(), config=dict(run_cfg), backbone_name=run_cfg.get("backbone.name", "standin"),
        backbone_digest=model.backbone.checksum_parameters(), epoch=epoch, class_names=list(class_names),
        optimizer_state=_optimizer_buffers(model, optimizer), rng_state=torch.get_rng_state(), extra=extra or {},
    )


# -- fit -------------------------------------------------------------------------


@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: list[dict]


def fit(trainset: TrainSet, model: CSaw, config: TrainConfig, run_cfg: dict | None = None, out_dir=None,
        resume: Checkpoint | None = None, stop_after: int | None = None, extra: dict | None = None) -> FitResult:
    """Train for ``config.epochs`` epochs (or until ``stop_after`` epochs are done).

    Every random choice is derived from ``(config.seed, epoch, sample id)``, so a
    run resumed from an end-of-epoch checkpoint follows exactly the same path as
    an uninterrupted one.
    """
    run_cfg = dict(run_cfg or cfgmod.defaults())
    run_cfg["loss.alpha"] = config.alpha
    extra = dict(extra or {})
    extra.setdefault("seed", config.seed)
    extra.setdefault("alpha", config.alpha)
    dtype = model.context.dtype
    images = trainset.images.to(dtype)
    optimizer = make_optimizer(model, config)
    start = 0
    if resume is not None:
        resume.apply_to(model)
        _restore_optimizer(model, optimizer, resume.optimizer_state)
        start = resume.epoch
    digest_before = model.backbone.checksum_parameters()
    log_path = Path(out_dir) / "log.jsonl" if out_dir else None
    if log_path and start == 0 and log_path.exists():
        log_path.unlink()

    log = []
    seen = set()
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(start, last):
        lr = config.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        reports = []
        for idx in epoch_batches(len(trainset), config.batch_size, config.seed, epoch):
            idx_t = torch.as_tensor(idx)
            x = images[idx_t]
            stream = [trainset.sample_ids[i] for i in idx]
            x_jig = jumble(x, stream, config, epoch)
            seen.update(trainset.source_classes[i] for i in idx)
            reports.append(train_step((x, x_jig, trainset.labels[idx_t]), model, optimizer, config,
                                      trainset.class_names))
        mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("ce", "ssl", "recon", "dm")}
        entry = {
            "epoch": epoch + 1, "lr": lr, "alpha": config.alpha, **mean,
            "total": combine(mean["ce"], mean["ssl"], mean["recon"], mean["dm"], config.alpha),
            "steps": [asdict(r) for r in reports],
            "seen_classes": sorted(seen),
        }
        log.append(entry)
        if log_path:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            with log_path.open("a") as fh:
                fh.write(json.dumps(entry) + "\n")
        logger.info("epoch %d lr=%.2g total=%.4f ce=%.4f ssl=%.4f recon=%.4f dm=%.4f",
                    epoch + 1, lr, entry["total"], mean["ce"], mean["ssl"], mean["recon"], mean["dm"])
        ckpt = snapshot(model, optimizer, run_cfg, epoch + 1, trainset.class_names,
                        {**extra, "seen_classes": sorted(seen)})
        if out_dir:
            ckpt.save(Path(out_dir) / "checkpoint.safetensors")

    if model.backbone.checksum_parameters() != digest_before:
        raise TrainingAborted("backbone parameters changed during training")
    if start >= last:
        ckpt = snapshot(model, optimizer, run_cfg, start, trainset.class_names, extra)
    return FitResult(ckpt, log)


# -- inference -------------------------------------------------------------------


class ImageClassifier:
    """Wraps a trained model for manifest-level top-1 prediction."""

    def __init__(self, model: CSaw, batch_size: int = 32, jumble_eval: bool = False, grid: int = 4, seed: int = 1):
        self.model = model
        self.batch_size = batch_size
        self.jumble_eval = jumble_eval
        self.grid = grid
        self.seed = seed

    def predict(self, manifest: DatasetManifest, indices, class_names) -> np.ndarray:
        preds = []
        dtype = self.model.context.dtype
        self.model.eval()
        for start in range(0, len(indices), self.batch_size):
            chunk = list(indices[start:start + self.batch_size])
            x = torch.stack([load_image(manifest.path(i)) for i in chunk]).to(dtype)
            x_jig = None
            if self.jumble_eval:
                perms = [sample_permutation(self.grid, [self.seed, EVAL_STREAM, i]) for i in chunk]
                x_jig = torch.stack([apply_jigsaw(img, p) for img, p in zip(x, perms)])
            probs = self.model.classify_probs(x, class_names, x_jig)
            preds.append(probs.argmax(dim=1).cpu().numpy())
        return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def top1(classifier, manifest, indices, class_names, labels) -> float:
    if len(indices) == 0:
        return math.nan
    pred = classifier.predict(manifest, indices, class_names)
    return float(np.mean(pred == np.asarray(labels)))

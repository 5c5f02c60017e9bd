"""
Training for every detector variant:
- focal loss on per-window logits
- linear warmup to peak_lr, then decay by plateau_factor after plateau_patience
  epochs without validation MAP improvement
- per-epoch class-balanced subsampling of training sequences
- best checkpoint by validation MAP, JSON-lines training log

Randomness: torch's global generator is seeded with (seed + fold) before the model is
built (weights, then dropout); subsampling draws from default_rng([seed, epoch]);
the validation split from default_rng([seed, 1]).
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from app.core.config import settings
from app.core.errors import ConfigError, ContractError
from app.services.evaluation import average_precision, f1
from app.services.inference import predict_sequences, run_dir
from app.services.models import FusionVariant, GestureDetector, ModelConfig, build_model, save_checkpoint
from app.services.windowing import FoldAssignment, Label, SequenceSample, subsample_epoch, validation_split

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class FocalLossConfig:
    alpha_gesture: float = 0.92
    alpha_neutral: float = 0.08
    gamma: float = 2.0

    def __post_init__(self):
        if self.alpha_gesture < 0 or self.alpha_neutral < 0 or self.gamma < 0:
            raise ConfigError("focal loss alpha and gamma must be non-negative")

    def alpha_tensor(self, dtype=torch.float32) -> torch.Tensor:
        alpha = torch.zeros(2, dtype=dtype)
        alpha[Label.NEUTRAL] = self.alpha_neutral
        alpha[Label.GESTURE] = self.alpha_gesture
        return alpha


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 60
    warmup_epochs: int = 20
    peak_lr: float = 1e-4
    plateau_patience: int = 20
    plateau_factor: float = 0.2
    weight_decay: float = 1e-4
    val_fraction: float = 0.15
    seed: int = 0
    focal: FocalLossConfig = field(default_factory=FocalLossConfig)

    def __post_init__(self):
        if self.batch_size <= 0 or self.max_epochs <= 0:
            raise ConfigError("training.batch_size and max_epochs must be positive")
        if self.warmup_epochs < 0 or self.plateau_patience <= 0:
            raise ConfigError("training.warmup_epochs >= 0 and plateau_patience > 0 required")
        if self.peak_lr <= 0 or not 0 < self.plateau_factor <= 1:
            raise ConfigError("training.peak_lr > 0 and plateau_factor in (0, 1] required")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("training.val_fraction must lie in (0, 1)")


def _check_labels(labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels).long()
    if labels.numel() and ((labels < 0) | (labels > 1)).any():
        raise ContractError("labels must be 0 (neutral) or 1 (gesture)")
    return labels


def focal_loss(probs: torch.Tensor, labels: torch.Tensor, cfg: FocalLossConfig) -> torch.Tensor:
    """Mean over windows of -alpha_y (1 - p_y)^gamma log p_y, with p_y clamped to [1e-7, 1 - 1e-7]."""
    probs = torch.as_tensor(probs)
    labels = _check_labels(labels)
    p = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    alpha = cfg.alpha_tensor(p.dtype).to(p.device)[labels]
    return (-alpha * (1.0 - p) ** cfg.gamma * torch.log(p)).mean()


def focal_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor, cfg: FocalLossConfig) -> torch.Tensor:
    labels = _check_labels(labels)
    log_p = torch.log_softmax(logits, dim=-1).gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    log_p = log_p.clamp(np.log(PROB_CLAMP), np.log1p(-PROB_CLAMP))
    p = log_p.exp()
    alpha = cfg.alpha_tensor(logits.dtype).to(logits.device)[labels]
    return (-alpha * (1.0 - p) ** cfg.gamma * log_p).mean()


@dataclass
class PlateauState:
    best: float = float("-inf")
    stagnant_epochs: int = 0
    n_decays: int = 0

    def update(self, epoch: int, metric: float, cfg: TrainConfig) -> bool:
        """Record one epoch's validation metric; True when it improved on the best so far."""
        improved = metric > self.best
        if improved:
            self.best = metric
            self.stagnant_epochs = 0
        elif epoch > cfg.warmup_epochs:
            self.stagnant_epochs += 1
            if self.stagnant_epochs >= cfg.plateau_patience:
                self.n_decays += 1
                self.stagnant_epochs = 0
                logger.info(f"Epoch {epoch}: no improvement for {cfg.plateau_patience} epochs, "
                            f"lr decayed x{self.n_decays}")
        return improved


def lr_at(epoch: int, state: PlateauState, cfg: TrainConfig) -> float:
    if epoch < 1:
        raise ContractError("epochs are numbered from 1")
    if epoch <= cfg.warmup_epochs:
        return cfg.peak_lr * epoch / cfg.warmup_epochs
    return cfg.peak_lr * cfg.plateau_factor ** state.n_decays


class TrainLog:
    """Append-only JSON-lines record, one object per epoch."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")
        self.last_epoch = 0

    def append(self, record: Dict[str, Any]) -> None:
        epoch = int(record["epoch"])
        if epoch <= self.last_epoch:
            raise ContractError(f"train log epochs must increase ({epoch} after {self.last_epoch})")
        self.last_epoch = epoch
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read(path: str | Path) -> List[Dict[str, Any]]:
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


@dataclass
class FoldResult:
    fold: int
    checkpoint: Path
    best_epoch: int
    best_val_map: float
    log_path: Path


def _train_epoch(model: GestureDetector, optimizer: torch.optim.Optimizer, corpus,
                 batch: Sequence[SequenceSample], buffer_ms: int, cfg: TrainConfig, device: str) -> float:
    model.train()
    need_pose, need_mel = model.cfg.uses_vision, model.cfg.uses_speech_input
    total, n_batches = 0.0, 0
    for i in range(0, len(batch), cfg.batch_size):
        chunk = batch[i:i + cfg.batch_size]
        pose, mel, y = corpus.tensors(chunk, buffer_ms, pose=need_pose, mel=need_mel)
        logits = model(pose.to(device) if pose is not None else None, mel.to(device) if mel is not None else None)
        loss = focal_loss_from_logits(logits.reshape(-1, 2), y.reshape(-1).to(device), cfg.focal)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total += float(loss.item())
        n_batches += 1
    return total / max(n_batches, 1)


def train_fold(corpus, folds: FoldAssignment, fold: int, model_cfg: ModelConfig, train_cfg: TrainConfig,
               buffer_ms: int, output_dir: str | Path, device: Optional[str] = None) -> FoldResult:
    device = device or settings.DEVICE
    if settings.TORCH_THREADS > 0:
        torch.set_num_threads(settings.TORCH_THREADS)

    train_dialogues = [d for d in corpus.dialogues() if folds.fold_of(d) != fold]
    if not train_dialogues or not corpus.sequences_for(train_dialogues):
        raise ConfigError(f"fold {fold}: training fold is empty")
    fit_dialogues, val_dialogues = validation_split(train_dialogues, train_cfg.val_fraction, train_cfg.seed)
    fit_sequences = corpus.sequences_for(fit_dialogues)
    val_sequences = corpus.sequences_for(val_dialogues)
    if not fit_sequences:
        raise ConfigError(f"fold {fold}: no training sequences after holding out validation dialogues")

    out = run_dir(output_dir, model_cfg.variant, buffer_ms, fold)
    out.mkdir(parents=True, exist_ok=True)
    log = TrainLog(out / "train_log.jsonl")
    checkpoint = out / "model.pt"

    torch.manual_seed(train_cfg.seed + fold)
    model = build_model(model_cfg, corpus.adjacency).to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr_at(1, PlateauState(), train_cfg),
                                  weight_decay=train_cfg.weight_decay)
    state = PlateauState()
    best_epoch, best_map = 0, float("-inf")
    logger.info(f"Training {model_cfg.variant.value} fold {fold} (buffer {buffer_ms} ms): "
                f"{len(fit_sequences)} train / {len(val_sequences)} validation sequences")

    for epoch in range(1, train_cfg.max_epochs + 1):
        started = time.time()
        lr = lr_at(epoch, state, train_cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr

        batch = subsample_epoch(fit_sequences, train_cfg.seed, epoch)
        n_gesture = sum(1 for s in batch if s.has_gesture)
        train_loss = _train_epoch(model, optimizer, corpus, batch, buffer_ms, train_cfg, device) if batch else None

        val = predict_sequences(model, corpus, val_sequences, buffer_ms, train_cfg.batch_size, device)
        val_map = average_precision(val) if len(val) else None
        val_f1 = f1(val) if len(val) else None
        metric = val_map if val_map is not None else 0.0

        if state.update(epoch, metric, train_cfg) or best_epoch == 0:
            best_epoch, best_map = epoch, metric
            save_checkpoint(checkpoint, model, {"epoch": epoch, "fold": fold, "buffer_ms": buffer_ms,
                                                "val_map": metric, "seed": train_cfg.seed})

        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": train_loss,
            "val_f1": val_f1,
            "val_map": val_map,
            "n_gesture_sequences": n_gesture,
            "n_neutral_sequences": len(batch) - n_gesture,
            "wall_time_s": round(time.time() - started, 3),
        }
        if model_cfg.variant == FusionVariant.SANITY:
            record["noise_seed"] = model_cfg.noise_seed
        log.append(record)
        logger.info(f"fold {fold} epoch {epoch}: lr={lr:.2e} loss={train_loss if train_loss is None else round(train_loss, 5)} "
                    f"val_map={val_map if val_map is None else round(val_map, 4)}")

    return FoldResult(fold, checkpoint, best_epoch, best_map, log.path)


def train(corpus, folds: FoldAssignment, fold_indices: Sequence[int], model_cfg: ModelConfig,
          train_cfg: TrainConfig, buffer_ms: int, output_dir: str | Path,
          device: Optional[str] = None) -> List[FoldResult]:
    results = []
    for fold in fold_indices:
        if not 0 <= fold < folds.k:
            raise ConfigError(f"fold {fold} outside [0, {folds.k})")
        results.append(train_fold(corpus, folds, fold, model_cfg, train_cfg, buffer_ms, output_dir, device))
    return results

"""Adam training loop, evaluation and batching helpers."""
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evalkit
from .checkpoint import save_checkpoint
from .losses import SupervisionConfig, combine_terms, loss_terms
from .network import MFDSNet, ModelConfig, forward_full

logger = logging.getLogger(__name__)

BEST_NAME = "best.safetensors"
LAST_NAME = "last.safetensors"
LOG_NAME = "train_log.jsonl"


class NonFiniteLossError(RuntimeError):
    def __init__(self, term, epoch, step, value):
        super().__init__(f"non-finite loss term '{term}' ({value}) at epoch {epoch}, step {step}")
        self.term = term
        self.epoch = epoch
        self.step = step


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    val_iou: list = field(default_factory=list)
    best_f1: float = -1.0
    best_epoch: int = -1
    steps: int = 0
    best_path: str = None
    last_path: str = None


def build_model(config: ModelConfig = None, seed: int = 0) -> MFDSNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MFDSNet(config)


def to_tensors(samples, dtype=torch.float32):
    """Stack SamplePairs into (image_a, image_b, gt) tensors, images scaled to [0, 1]."""
    a = np.stack([s.image_a for s in samples]).astype(np.float32) / 255.0
    b = np.stack([s.image_b for s in samples]).astype(np.float32) / 255.0
    gt = np.stack([s.gt for s in samples]).astype(np.float32)
    a = torch.from_numpy(a).permute(0, 3, 1, 2).to(dtype)
    b = torch.from_numpy(b).permute(0, 3, 1, 2).to(dtype)
    return a, b, torch.from_numpy(gt)[:, None].to(dtype)


def iter_batches(samples, batch_size):
    for i in range(0, len(samples), batch_size):
        yield [samples[j] for j in range(i, min(i + batch_size, len(samples)))]


@torch.no_grad()
def predict_logits(model, samples, batch_size=4):
    model.eval()
    out = []
    for batch in iter_batches(samples, batch_size):
        a, b, _ = to_tensors(batch)
        out.append(forward_full(a, b, model).final_logits[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0,))


@torch.no_grad()
def evaluate(model, samples, threshold=0.5, batch_size=4):
    """Pooled confusion counts and metrics over ``samples``."""
    model.eval()
    counts = evalkit.ConfusionCounts()
    for batch in iter_batches(samples, batch_size):
        a, b, _ = to_tensors(batch)
        logits = forward_full(a, b, model).final_logits[:, 0]
        pred = evalkit.binarize(logits, threshold)
        for p, s in zip(pred, batch):
            counts = evalkit.accumulate(p, s.gt, counts)
    return counts, evalkit.compute_metrics(counts)


def _check_terms(terms, epoch, step):
    for name, value in terms.items():
        v = float(value.detach())
        if not math.isfinite(v):
            raise NonFiniteLossError(name, epoch, step, v)


def train(dataset, cfg: SupervisionConfig, model: MFDSNet = None, val_dataset=None, out_dir=None,
          threshold=0.5, start_epoch=0, optimizer=None, model_config=None, best_f1=-1.0,
          validate=True):
    """Train with Adam; keeps the best-F1 checkpoint when ``out_dir`` is given.

    When ``val_dataset`` is None the training set doubles as validation set.
    ``start_epoch`` and ``optimizer`` allow resuming from a saved run.
    ``validate=False`` skips the per-epoch evaluation (and best-checkpoint
    tracking); val_f1/val_iou are then logged as None.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if model is None:
        model = build_model(model_config, cfg.seed)
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    val = val_dataset if val_dataset is not None else dataset
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    report = TrainReport(best_f1=best_f1)
    n = len(dataset)
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.time()
        gen = torch.Generator().manual_seed(cfg.seed * 100003 + epoch)
        order = torch.randperm(n, generator=gen).tolist()
        model.train()
        running = []
        for bi in range(0, n, cfg.batch_size):
            if cfg.max_steps and report.steps >= cfg.max_steps:
                break
            batch = [dataset[j] for j in order[bi:bi + cfg.batch_size]]
            a, b, gt = to_tensors(batch)
            terms = loss_terms(forward_full(a, b, model), gt)
            _check_terms(terms, epoch, report.steps)
            loss = combine_terms(terms, cfg)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            running.append(float(loss.detach()))
            report.steps += 1
        if not running:
            break
        report.step_losses.extend(running)
        epoch_loss = float(np.mean(running))
        report.epoch_losses.append(epoch_loss)
        metrics = evaluate(model, val, threshold)[1] if validate else None
        report.val_f1.append(metrics.f1 if metrics else None)
        report.val_iou.append(metrics.iou if metrics else None)
        if metrics is not None and metrics.f1 > report.best_f1:
            report.best_f1, report.best_epoch = metrics.f1, epoch
            if out is not None:
                report.best_path = str(out / BEST_NAME)
                save_checkpoint(report.best_path, model, cfg, epoch=epoch, best_f1=metrics.f1)
        if out is not None:
            report.last_path = str(out / LAST_NAME)
            save_checkpoint(report.last_path, model, cfg, epoch=epoch, best_f1=report.best_f1,
                            optimizer=optimizer)
            record = {"epoch": epoch, "train_loss": epoch_loss, "val_f1": report.val_f1[-1],
                      "val_iou": report.val_iou[-1], "wall_seconds": round(time.time() - t0, 3)}
            with open(out / LOG_NAME, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        logger.info("epoch %d loss %.6f val_f1 %s", epoch, epoch_loss, report.val_f1[-1])
    return model, report

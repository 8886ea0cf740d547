"""Training loop: 1-vs-all batches, joint loss, Adam, validation-based checkpointing."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import TripleStore, build_filter, build_targets, multi_hot
from .evaluation import MetricsReport, evaluate
from .model import Batch, IMFModel
from .tensor import Tape

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """A non-finite loss stopped training; the best checkpoint so far is kept."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 1
    patience: int = 10
    eval_batch: int = 256

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1 or self.lr <= 0 or self.eval_every < 1 or self.patience < 1:
            raise ValueError("batch_size, lr, eval_every and patience must be positive")


@dataclass
class TrainResult:
    model: IMFModel
    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid: MetricsReport | None = None
    checkpoint: Path | None = None

    @property
    def best_mrr(self) -> float:
        return self.best_valid.mrr if self.best_valid is not None else float("nan")


def training_queries(store: TripleStore, num_relations: int):
    """Tail and head queries of the training split with their answer lists."""
    return build_targets(store.train).queries(num_relations)


def train(
    model: IMFModel,
    store: TripleStore,
    config: TrainConfig | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Optimise ``model`` in place and return the run summary.

    When a validation split exists, the parameters with the best validation
    MRR are restored at the end (early stopping after ``patience``
    evaluations without improvement). With ``out_dir`` the best checkpoint,
    a JSON-lines metrics log and a CSV curve are written there.
    """
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed)
    R, E = model.num_relations, model.num_entities
    anchors, relations, answers = training_queries(store, R)
    filter_index = build_filter(store.train, store.valid, store.test)
    opt = T.Adam(lr=config.lr)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")
        ckpt = out / "checkpoint.npz"
    else:
        log_fh, ckpt = None, None

    def log(record):
        if log_fh is not None:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()

    def batch_of(idx):
        return Batch(anchors[idx], relations[idx], multi_hot([answers[i] for i in idx], E))

    probe = np.arange(min(len(anchors), config.batch_size))
    initial = float(model.forward(batch_of(probe)).loss.data) if len(anchors) else float("nan")
    result = TrainResult(model, initial, checkpoint=ckpt)
    has_valid = len(store.valid) > 0
    best_params = model.state_dict()
    stale = 0

    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(anchors))
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                try:
                    with Tape() as tape:
                        loss = model.forward(batch_of(idx)).loss
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"{exc} at epoch {epoch}, batch offset {start}") from exc
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"loss {float(loss.data)} at epoch {epoch}, batch offset {start}")
                grads = tape.backward(loss)
                model.params = opt.step(model.params, {n: grads[p] for n, p in model.params.items()})
                total += float(loss.data) * len(idx)
            epoch_loss = total / max(len(order), 1)
            result.epoch_losses.append(epoch_loss)
            record = {"epoch": epoch, "split": "train", "loss": epoch_loss}
            result.history.append(record)
            log(record)

            if has_valid and (epoch % config.eval_every == 0 or epoch == config.epochs):
                report = evaluate(
                    model.scorer_fn(), store.valid, filter_index, R, seed=config.seed, batch_size=config.eval_batch
                )
                record = {"epoch": epoch, "split": "valid", "loss": epoch_loss, **report["both"]}
                result.history.append(record)
                log(record)
                logger.info("epoch %d loss %.5f valid MRR %.4f", epoch, epoch_loss, report.mrr)
                if result.best_valid is None or report.mrr > result.best_valid.mrr:
                    result.best_valid, result.best_epoch = report, epoch
                    best_params = model.state_dict()
                    stale = 0
                    if ckpt is not None:
                        model.save(ckpt, {"epoch": epoch, "valid": report.to_dict()})
                else:
                    stale += 1
                    if stale >= config.patience:
                        logger.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                        break
            else:
                logger.info("epoch %d loss %.5f", epoch, epoch_loss)
    finally:
        if log_fh is not None:
            log_fh.close()

    if has_valid and result.best_valid is not None:
        model.params = T.parameters(best_params.keys(), best_params.values())
    else:
        result.best_epoch = config.epochs
        if ckpt is not None:
            model.save(ckpt, {"epoch": config.epochs})
    if out is not None:
        write_curves(out / "curves.csv", result.history)
    return result


def write_curves(path: str | Path, history: list[dict]) -> None:
    """Per-epoch training loss and validation MRR as CSV."""
    rows: dict[int, dict] = {}
    for rec in history:
        row = rows.setdefault(rec["epoch"], {"epoch": rec["epoch"], "loss": rec["loss"], "valid_mrr": ""})
        if rec["split"] == "valid":
            row["valid_mrr"] = rec["MRR"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "valid_mrr"])
        writer.writeheader()
        for epoch in sorted(rows):
            writer.writerow(rows[epoch])

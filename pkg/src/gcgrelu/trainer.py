"""Mini-batch SGD with the GReLU freeze schedule and selective weight decay."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .data import Dataset, batches
from .errors import ConfigError, NumericalError
from .gcnet import GCNet, gcnet_backward, gcnet_forward
from .grelu import grelu_apply_update
from .kernels import softmax_xent
from .layers import GReLU

logger = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "train_loss", "train_err", "test_err", "seconds")


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 50
    batch_size: int = 64
    freeze_epochs: int = 3
    weight_decay: float = 5e-4
    seed: int = 0
    eval_every: int = 1
    momentum: float = 0.0
    lr_milestones: tuple[int, ...] = (30, 40)
    lr_gamma: float = 0.1
    deterministic: bool = False

    def validate(self):
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.epochs < 0 or self.freeze_epochs < 0:
            raise ConfigError("epochs and freeze_epochs must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_error_rate: float
    test_error_rate: float
    wall_seconds: float
    grelu: list[dict] = field(default_factory=list)

    def csv_row(self, with_time: bool = True) -> list[str]:
        return [str(self.epoch), f"{self.train_loss:.10f}", f"{self.train_error_rate:.6f}",
                f"{self.test_error_rate:.6f}", f"{self.wall_seconds if with_time else 0.0:.3f}"]


def grelu_snapshot(net: GCNet) -> list[dict]:
    out = []
    for name, layer in net.named_layers():
        if isinstance(layer, GReLU):
            for p in layer.sets:
                out.append({"layer": name, "endpoints": p.endpoints.tolist(),
                            "slopes": p.slopes.tolist()})
    return out


def sgd_step(net: GCNet, lr: float, weight_decay: float = 0.0, momentum: float = 0.0,
             velocity: dict | None = None) -> None:
    """One update from the gradients currently stored in the layers.

    Weights: ``w <- w - lr * (dL/dw + weight_decay * w)`` (with optional
    heavy-ball momentum).  GReLU scalars: ``o <- o - lr * dL/do`` without
    decay or momentum, then the endpoint ordering projection; frozen GReLU
    layers are skipped.
    """
    for name, layer in net.named_layers():
        if isinstance(layer, GReLU):
            if layer.frozen or not layer.grads:
                continue
            for p, g in zip(layer.sets, layer.grad_sets()):
                grelu_apply_update(p, g, lr, layer.endpoint_mask, layer.slope_mask)
            continue
        for key, w in layer.params.items():
            g = layer.grads[key]
            if weight_decay:
                g = g + weight_decay * w
            if momentum:
                v = velocity.setdefault((name, key), np.zeros_like(w))
                v *= momentum
                v += g
                g = v
            w -= lr * g


def evaluate(net: GCNet, dataset: Dataset, batch_size: int = 250) -> tuple[float, float]:
    """``(error_rate, mean_loss)`` with batch norm in eval mode; no state changes."""
    n = len(dataset)
    if n == 0:
        return 0.0, 0.0
    wrong, loss_sum = 0, 0.0
    for i in range(0, n, batch_size):
        x, y = dataset.images[i:i + batch_size], dataset.labels[i:i + batch_size]
        logits, _ = gcnet_forward(net, x, train=False)
        loss, _ = softmax_xent(logits, y)
        loss_sum += loss * len(y)
        wrong += int(np.sum(logits.argmax(axis=1) != y))
    return wrong / n, loss_sum / n


def first_nonfinite(net: GCNet, x) -> str:
    """Name of the first parameter or layer output that is not finite."""
    for name, layer in net.named_layers():
        for key, w in layer.params.items():
            if not np.all(np.isfinite(w)):
                return f"{name}.{key}"
    h = x
    for i, block in enumerate(net.blocks):
        for j, layer in enumerate(block.layers):
            h = layer.forward(h, train=True)
            if not np.all(np.isfinite(h)):
                return f"{block.name}.{j}.{layer.kind} (output)"
        if i + 1 < len(net.blocks):
            h = block.link_forward(h)
    return "classifier (output)"


class MetricsWriter:
    """Appends records to ``metrics.csv`` and ``metrics.jsonl`` in ``out_dir``."""

    def __init__(self, out_dir: str, with_time: bool = True):
        os.makedirs(out_dir, exist_ok=True)
        self.csv_path = os.path.join(out_dir, "metrics.csv")
        self.jsonl_path = os.path.join(out_dir, "metrics.jsonl")
        self.with_time = with_time
        with open(self.csv_path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(CSV_HEADER)
        open(self.jsonl_path, "w").close()

    def write(self, rec: MetricsRecord):
        with open(self.csv_path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(rec.csv_row(self.with_time))
        row = asdict(rec)
        if not self.with_time:
            row["wall_seconds"] = 0.0
        with open(self.jsonl_path, "a") as f:
            f.write(json.dumps(row) + "\n")


def train(net: GCNet, train_set: Dataset, test_set: Dataset | None, config: TrainConfig,
          out_dir: str | None = None, on_record=None) -> tuple[GCNet, list[MetricsRecord]]:
    """Train ``net`` in place and return it with the metrics history.

    Every ``eval_every`` epochs (and after the last) a :class:`MetricsRecord`
    is appended; with ``out_dir`` it is also written to CSV/JSONL and a
    checkpoint is saved.  In deterministic mode the CSV timing column is
    written as zero so identical runs give identical files.
    """
    config.validate()
    writer = MetricsWriter(out_dir, with_time=not config.deterministic) if out_dir else None
    velocity: dict = {}
    records: list[MetricsRecord] = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        net.set_frozen(epoch < config.freeze_epochs)
        lr = config.lr_at(epoch)
        loss_sum, wrong, seen = 0.0, 0, 0
        for idx in batches(train_set, config.batch_size, config.seed, epoch):
            x, y = train_set.images[idx], train_set.labels[idx]
            logits, cache = gcnet_forward(net, x, train=True)
            loss, grad = softmax_xent(logits, y)
            if not np.isfinite(loss):
                where = first_nonfinite(net, x)
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}; first non-finite "
                                     f"value in {where}")
            gcnet_backward(net, cache, grad)
            sgd_step(net, lr, config.weight_decay, config.momentum, velocity)
            loss_sum += loss * len(y)
            wrong += int(np.sum(logits.argmax(axis=1) != y))
            seen += len(y)
        last = epoch + 1 == config.epochs
        if (epoch + 1) % config.eval_every and not last:
            continue
        test_err = evaluate(net, test_set)[0] if test_set is not None else float("nan")
        rec = MetricsRecord(epoch + 1, loss_sum / max(seen, 1), wrong / max(seen, 1), test_err,
                            time.perf_counter() - start, grelu_snapshot(net))
        records.append(rec)
        logger.info("epoch %d lr %.4g loss %.4f train_err %.4f test_err %.4f (%.0fs)",
                    rec.epoch, lr, rec.train_loss, rec.train_error_rate, rec.test_error_rate,
                    rec.wall_seconds)
        if writer:
            writer.write(rec)
            save_checkpoint(net, os.path.join(out_dir, "checkpoint.bin"),
                            {"epoch": rec.epoch, "seed": config.seed})
        if on_record:
            on_record(rec)
    return net, records

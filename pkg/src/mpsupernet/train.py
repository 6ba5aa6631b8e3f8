"""Progressive supernet training and subnet evaluation.

Phase 1 trains the base weights and quantizers at a reduced resolution cap.
At the phase boundary LoRA banks are attached, the base weights frozen and
the cap raised; phase 2 then trains only adapters and quantizers.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .data import Dataset, resize_batch
from .model import ElasticViT, LoRASpec
from .space import SubnetConfig, sample_uniform, to_string
from .tensor import DTYPE, Tensor, cross_entropy, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    total_steps: int = 300
    phase1_steps: int | None = None
    phase1_max_res: int = 48
    phase2_max_res: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    subnets_per_step: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.phase1_steps is None:
            object.__setattr__(self, "phase1_steps", self.total_steps // 2)
        if not 0 <= self.phase1_steps <= self.total_steps:
            raise ValueError("phase1_steps must lie in [0, total_steps]")
        if self.phase2_max_res < self.phase1_max_res:
            raise ValueError("phase2_max_res must be >= phase1_max_res")
        if self.subnets_per_step < 1 or self.batch_size < 1:
            raise ValueError("batch_size and subnets_per_step must be >= 1")

    def phase(self, step: int) -> int:
        return 1 if step < self.phase1_steps else 2

    def max_res(self, step: int) -> int:
        return self.phase1_max_res if self.phase(step) == 1 else self.phase2_max_res

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Adam with decoupled weight decay; parameters without a gradient this
    step are left untouched (no decay, no moment update)."""

    def __init__(self, lr: float = 1e-3, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.state: dict[str, dict] = {}

    def step(self, params: dict[str, Tensor], decay: Callable[[str, Tensor], bool]) -> None:
        b1, b2 = DTYPE(self.b1), DTYPE(self.b2)
        for name, p in params.items():
            if p.grad is None or not p.requires_grad:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            st["t"] += 1
            g = p.grad.astype(DTYPE)
            st["m"] = b1 * st["m"] + (DTYPE(1) - b1) * g
            st["v"] = b2 * st["v"] + (DTYPE(1) - b2) * g * g
            mhat = st["m"] / DTYPE(1 - self.b1 ** st["t"])
            vhat = st["v"] / DTYPE(1 - self.b2 ** st["t"])
            data = p.data
            if self.weight_decay and decay(name, p):
                data = data * DTYPE(1 - self.lr * self.weight_decay)
            p.data = (data - DTYPE(self.lr) * mhat / (np.sqrt(vhat) + DTYPE(self.eps))).astype(DTYPE)


def _decays(name: str, p: Tensor) -> bool:
    return p.ndim >= 2 and not name.startswith("quant/")


class Trainer:
    """Stateful training loop so a run can be checkpointed mid-way and
    resumed step-for-step."""

    def __init__(self, model: ElasticViT, data: Dataset, schedule: TrainSchedule,
                 lora_spec: LoRASpec = LoRASpec()):
        self.model = model
        self.data = data
        self.schedule = schedule
        self.lora_spec = lora_spec
        self.opt = AdamW(schedule.lr, schedule.weight_decay)
        self.rng = np.random.default_rng([schedule.seed, 1])
        self.step = 0
        self.history: list[dict] = []

    @property
    def phase(self) -> int:
        return self.schedule.phase(self.step)

    def enter_phase2(self) -> None:
        self.model.attach_lora(self.lora_spec, seed=self.schedule.seed)
        self.model.freeze_base(True)
        log.info("step %d: LoRA attached, base frozen", self.step)

    def sample_batch(self, cfg: SubnetConfig):
        idx = self.rng.integers(0, len(self.data), size=self.schedule.batch_size)
        return resize_batch(self.data.images[idx], self.data.labels[idx], cfg.resolution)

    def train_step(self) -> dict:
        sch = self.schedule
        if self.phase == 2 and not self.model.lora:
            self.enter_phase2()
        space = self.model.space.capped(sch.max_res(self.step))
        self.model.zero_grad()
        total = 0.0
        cfgs = []
        for _ in range(sch.subnets_per_step):
            cfg = sample_uniform(space, self.rng)
            cfgs.append(cfg)
            images, labels = self.sample_batch(cfg)
            loss = cross_entropy(self.model(cfg, images), labels)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss {loss.item()} at step {self.step} "
                                    f"for subnet {to_string(cfg)}")
            if sch.subnets_per_step > 1:
                loss = loss * DTYPE(1.0 / sch.subnets_per_step)
            loss.backward()
            total += loss.item()
        self.opt.step(self.model.named_parameters(), _decays)
        self.model.quant.project()
        row = {"step": self.step, "phase": self.phase,
               "config": " | ".join(to_string(c) for c in cfgs),
               "loss": total, "lr": sch.lr}
        self.history.append(row)
        self.step += 1
        return row

    def run(self, until: int | None = None, metrics: "MetricsWriter | None" = None,
            log_every: int = 50) -> list[dict]:
        until = self.schedule.total_steps if until is None else min(until, self.schedule.total_steps)
        rows = []
        while self.step < until:
            row = self.train_step()
            rows.append(row)
            if metrics is not None:
                metrics.write(row)
            if log_every and row["step"] % log_every == 0:
                log.info("step %d phase %d loss %.4f", row["step"], row["phase"], row["loss"])
        return rows


def train_supernet(model: ElasticViT, data: Dataset, schedule: TrainSchedule,
                   lora_spec: LoRASpec = LoRASpec(), metrics_path=None) -> Trainer:
    trainer = Trainer(model, data, schedule, lora_spec)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    try:
        trainer.run(metrics=writer)
    finally:
        if writer:
            writer.close()
    return trainer


class MetricsWriter:
    FIELDS = ("step", "phase", "config", "loss", "lr")

    def __init__(self, path, append: bool = False):
        new = not append
        self.fh = open(path, "a" if append else "w", newline="")
        self.w = csv.DictWriter(self.fh, fieldnames=self.FIELDS)
        if new:
            self.w.writeheader()

    def write(self, row: dict) -> None:
        self.w.writerow({k: row[k] for k in self.FIELDS})
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def smoothed(losses, window: int = 20) -> tuple[float, float]:
    """Mean of the first and last ``window`` losses."""
    losses = np.asarray(losses, dtype=np.float64)
    w = max(1, min(window, len(losses)))
    return float(losses[:w].mean()), float(losses[-w:].mean())


# -- evaluation ---------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    loss: float
    pixel_acc: float
    miou: float


def segmentation_metrics(logits: np.ndarray, labels: np.ndarray, classes: int):
    """Returns (sum of pixel losses, pixel count, confusion matrix)."""
    flat = logits.reshape(-1, classes).astype(np.float64)
    lab = labels.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss_sum = float(-logp[np.arange(len(lab)), lab].sum())
    pred = flat.argmax(axis=1)
    conf = np.bincount(lab * classes + pred, minlength=classes * classes).reshape(classes, classes)
    return loss_sum, len(lab), conf


def summarize(loss_sum: float, count: int, conf: np.ndarray) -> EvalResult:
    acc = float(np.trace(conf) / conf.sum())
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    miou = float((inter[present] / union[present]).mean()) if present.any() else 0.0
    return EvalResult(loss_sum / count, acc, miou)


def evaluate(model: ElasticViT, cfg: SubnetConfig, data: Dataset, batch_size: int = 16) -> EvalResult:
    """Loss, pixel accuracy and mIoU of one subnet with merged adapters."""
    if len(data) == 0:
        raise ValueError("empty validation set")
    classes = model.space.classes
    loss_sum, count = 0.0, 0
    conf = np.zeros((classes, classes), np.int64)
    with no_grad():
        for start in range(0, len(data), batch_size):
            images, labels = resize_batch(data.images[start:start + batch_size],
                                          data.labels[start:start + batch_size], cfg.resolution)
            logits = model.forward(cfg, images, merged=True).data
            ls, n, c = segmentation_metrics(logits, labels, classes)
            loss_sum += ls
            count += n
            conf += c
    return summarize(loss_sum, count, conf)

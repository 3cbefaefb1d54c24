"""Two-stage training: CE baseline, then CFA fine-tuning on original/variant pairs."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from cfa.chipforge import Dataset, stack
from cfa.losses import cross_entropy, total_loss
from cfa.tinynet import ArchSpec, TinyNet, forward, init_model, predict_batch
from cfa.variantgen import VariantPolicy, make_variant_batch

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "ce_orig", "ce_var", "cwmse", "total", "train_acc", "test_acc", "seconds")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class PrerequisiteError(RuntimeError):
    """A stage was started without what it depends on."""


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    stage: Literal["baseline", "cfa"] = "baseline"
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.01, gt=0)
    milestones: tuple[float, ...] = (0.5, 0.8)
    gamma: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    grad_clip: float | None = Field(None, gt=0)
    lam: float = Field(1.0, ge=0, alias="lambda")
    variant_policy: VariantPolicy = VariantPolicy()
    alignment: Literal["cwmse", "mse"] = "cwmse"
    differentiable_weights: bool = False
    hook: str | None = None
    cold_start: bool = False
    seed: int = Field(0, ge=0)
    arch: ArchSpec | None = None
    double: bool = False
    eval_test: bool = True

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.double else torch.float32


@dataclass
class EpochRecord:
    epoch: int
    ce_orig: float
    ce_var: float
    cwmse: float
    total: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [r.epoch]
                    + [f"{getattr(r, k):.6f}" for k in ("ce_orig", "ce_var", "cwmse", "total", "train_acc", "test_acc")]
                    + [f"{r.seconds:.3f}"]
                )


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *tags])))


def _optimizer(model: TinyNet, config: TrainConfig):
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    steps = sorted({int(round(m * config.epochs)) for m in config.milestones if 0 < m < 1})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=steps, gamma=config.gamma)
    return opt, sched


def _clip(model: TinyNet, config: TrainConfig) -> None:
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)


def _test_accuracy(model: TinyNet, ds: Dataset, enabled: bool) -> float:
    if not enabled or not ds.test:
        return float("nan")
    images, _, labels = stack(ds.test)
    return float((predict_batch(model, images).argmax(1) == labels).mean() * 100.0)


def _check_finite(loss: torch.Tensor, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {float(loss)} at epoch {epoch}, step {step}")


def train_baseline(dataset: Dataset, config: TrainConfig) -> tuple[TinyNet, TrainLog]:
    if config.stage != "baseline":
        raise ValueError("train_baseline needs stage='baseline'")
    if not dataset.train:
        raise ValueError("empty training set")
    arch = config.arch or ArchSpec(in_size=dataset.spec.chip_size, n_classes=dataset.spec.n_classes)
    if arch.in_size != dataset.spec.chip_size or arch.n_classes != dataset.spec.n_classes:
        raise ValueError("architecture does not match the dataset")
    torch.manual_seed(config.seed)
    model = init_model(arch, config.seed, dtype=config.dtype)
    model.stage = "baseline"
    images, _, labels = stack(dataset.train)
    x_all = torch.as_tensor(images, dtype=config.dtype)
    y_all = torch.as_tensor(labels)
    opt, sched = _optimizer(model, config)
    rng = _rng(config.seed, 1)
    history = TrainLog()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(images))
        ce_sum = correct = 0.0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            idx = torch.as_tensor(order[start : start + config.batch_size])
            x, y = x_all[idx], y_all[idx]
            logits = forward(model, x).logits
            loss = cross_entropy(logits, y)
            _check_finite(loss, epoch, step)
            opt.zero_grad()
            loss.backward()
            _clip(model, config)
            opt.step()
            ce_sum += loss.item() * len(idx)
            correct += float((logits.argmax(1) == y).sum())
        sched.step()
        n = len(order)
        rec = EpochRecord(
            epoch + 1, ce_sum / n, float("nan"), float("nan"), ce_sum / n,
            correct / n * 100.0, _test_accuracy(model, dataset, config.eval_test), time.perf_counter() - t0,
        )
        history.records.append(rec)
        log.info("baseline epoch %d ce=%.4f train=%.1f test=%.1f", rec.epoch, rec.ce_orig, rec.train_acc, rec.test_acc)
    return model, history


def train_cfa(baseline: TinyNet | None, dataset: Dataset, config: TrainConfig) -> tuple[TinyNet, TrainLog]:
    """Fine-tune ``baseline`` with the joint CE + feature-alignment objective.

    Every epoch draws one fresh variant per training chip; the variant batch is
    index-aligned with the original batch and shares its labels.
    """
    if config.stage != "cfa":
        raise ValueError("train_cfa needs stage='cfa'")
    if not dataset.train:
        raise ValueError("empty training set")
    if baseline is None:
        if not config.cold_start:
            raise PrerequisiteError("CFA training needs a trained baseline (set cold_start to override)")
        arch = config.arch or ArchSpec(in_size=dataset.spec.chip_size, n_classes=dataset.spec.n_classes)
        model = init_model(arch, config.seed, dtype=config.dtype)
    else:
        if config.arch is not None and config.arch != baseline.arch:
            raise ValueError("config arch does not match the baseline checkpoint")
        model = TinyNet(baseline.arch)
        model.load_state_dict(baseline.state_dict())
        model = model.to(config.dtype)
        model.init_seed = baseline.init_seed
    arch = model.arch
    if arch.in_size != dataset.spec.chip_size or arch.n_classes != dataset.spec.n_classes:
        raise ValueError("architecture does not match the dataset")
    hook = config.hook or arch.hook_names[-1]
    if hook not in arch.hook_names:
        raise ValueError(f"unknown hook {hook!r}")
    model.stage = "cfa"
    torch.manual_seed(config.seed)

    images, codes, labels = stack(dataset.train)
    clutter = codes == 0
    y_all = torch.as_tensor(labels)
    opt, sched = _optimizer(model, config)
    order_rng = _rng(config.seed, 2)
    history = TrainLog()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        variant_rng = _rng(config.seed, 3, epoch)
        variants = make_variant_batch(images, clutter, config.variant_policy, variant_rng)
        x_all = torch.as_tensor(images, dtype=config.dtype)
        v_all = torch.as_tensor(variants, dtype=config.dtype)
        order = order_rng.permutation(len(images))
        sums = dict(ce_orig=0.0, ce_var=0.0, cwmse=0.0, total=0.0)
        correct = 0.0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            idx = torch.as_tensor(order[start : start + config.batch_size])
            b = len(idx)
            out = forward(model, torch.cat([x_all[idx], v_all[idx]]))
            feats = out.features[hook]
            parts = total_loss(
                out.logits[:b], out.logits[b:], y_all[idx], feats[:b], feats[b:], config.lam,
                weighted=config.alignment == "cwmse", detach_weights=not config.differentiable_weights,
            )
            _check_finite(parts.total, epoch, step)
            opt.zero_grad()
            parts.total.backward()
            _clip(model, config)
            opt.step()
            for k, v in parts.as_floats().items():
                sums[k] += v * b
            correct += float((out.logits[:b].argmax(1) == y_all[idx]).sum())
        sched.step()
        n = len(order)
        rec = EpochRecord(
            epoch + 1, sums["ce_orig"] / n, sums["ce_var"] / n, sums["cwmse"] / n, sums["total"] / n,
            correct / n * 100.0, _test_accuracy(model, dataset, config.eval_test), time.perf_counter() - t0,
        )
        history.records.append(rec)
        log.info(
            "cfa epoch %d total=%.4f cwmse=%.5f train=%.1f test=%.1f",
            rec.epoch, rec.total, rec.cwmse, rec.train_acc, rec.test_acc,
        )
    return model, history

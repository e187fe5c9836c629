"""Supervision regimes, epoch loops, and the stage-1 / stage-2 schedules."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .data import UtteranceRecord, infer_K
from .errors import IncompatibleCheckpointError, MissingLabelError, TrainingDivergedError, ValidationError
from .model import Checkpoint, GoptModel, ModelConfig, Pooling, make_batch

log = logging.getLogger(__name__)

STAGE1_EPOCHS = 100
SCRATCH_EPOCHS = 60
FINETUNE_EPOCHS = 30
BATCH_SIZE = 25
LEARNING_RATE = 1e-3


class SupervisionRegime(str, enum.Enum):
    UWP = "UWP"
    P = "P"
    W = "W"
    UW = "UW"
    U = "U"

    @property
    def use_utt(self) -> bool:
        return "U" in self.value

    @property
    def use_word(self) -> bool:
        return "W" in self.value

    @property
    def use_phone(self) -> bool:
        return "P" in self.value

    @property
    def levels(self) -> list[str]:
        return [lvl for lvl, on in (("phone", self.use_phone), ("word", self.use_word),
                                    ("utterance", self.use_utt)) if on]

    @classmethod
    def parse(cls, value) -> "SupervisionRegime":
        if isinstance(value, SupervisionRegime):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValidationError(f"unknown regime {value!r}; expected one of UWP, P, W, UW, U") from None


@dataclass(frozen=True)
class TrainPlan:
    regime: SupervisionRegime = SupervisionRegime.U
    pooling: Pooling = Pooling.ATTN
    epochs: int = STAGE1_EPOCHS
    batch_size: int = BATCH_SIZE
    lr: float = LEARNING_RATE
    seed: int = 0
    select_best_dev: bool = False

    def __post_init__(self):
        object.__setattr__(self, "regime", SupervisionRegime.parse(self.regime))
        object.__setattr__(self, "pooling", Pooling.parse(self.pooling))
        if self.epochs <= 0:
            raise ValidationError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size <= 0:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr < 0:
            raise ValidationError(f"lr must be non-negative, got {self.lr}")

    def to_dict(self) -> dict:
        return {"regime": self.regime.value, "pooling": self.pooling.value, "epochs": self.epochs,
                "batch_size": self.batch_size, "lr": self.lr, "seed": self.seed,
                "select_best_dev": self.select_best_dev}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[tuple[int, float]] = field(default_factory=list)

    def trace_table(self) -> str:
        return "epoch\tloss\n" + "".join(f"{e}\t{loss!r}\n" for e, loss in self.trace)


def check_labels(records: Sequence[UtteranceRecord], regime: SupervisionRegime) -> None:
    for rec in records:
        if regime.use_phone and not rec.has_phone_labels:
            raise MissingLabelError(rec.utt_id, "phone")
        if regime.use_word and rec.word_labels is None:
            raise MissingLabelError(rec.utt_id, "word")
        if regime.use_utt and rec.utt_label is None:
            raise MissingLabelError(rec.utt_id, "utterance")


def dataset_loss(model: GoptModel, records: Sequence[UtteranceRecord], regime,
                 batch_size: int = 64) -> float:
    """Item-weighted mean of batch losses, forward only."""
    total, count = 0.0, 0
    for i in range(0, len(records), batch_size):
        chunk = list(records[i:i + batch_size])
        batch = make_batch(chunk, model.config, pad_to=max(r.n_phones for r in chunk))
        total += model.loss(model.forward(batch), batch, regime).item() * len(chunk)
        count += len(chunk)
    return total / count


def _run(model: GoptModel, records: Sequence[UtteranceRecord], plan: TrainPlan,
         dev_records: Sequence[UtteranceRecord] | None,
         callback=None) -> tuple[list[tuple[int, float]], dict | None]:
    if not records:
        raise ValidationError("no training records")
    check_labels(records, plan.regime)
    for rec in records:
        if rec.n_phones > model.config.max_seq_len:
            raise ValidationError(f"{rec.n_phones} phones exceeds max_seq_len", utt_id=rec.utt_id)
    if plan.select_best_dev and not dev_records:
        raise ValidationError("select_best_dev needs dev records")
    state = nn.AdamState(lr=plan.lr)
    params = model.params
    arrays = {k: p.data for k, p in params.items()}
    drop_rng = np.random.default_rng([plan.seed, 1]) if model.config.dropout > 0 else None
    records = list(records)
    trace = []
    best, best_loss = None, math.inf
    for epoch in range(1, plan.epochs + 1):
        order = np.random.default_rng(plan.seed + epoch).permutation(len(records))
        total = 0.0
        for step, start in enumerate(range(0, len(records), plan.batch_size)):
            chunk = [records[i] for i in order[start:start + plan.batch_size]]
            batch = make_batch(chunk, model.config, pad_to=max(r.n_phones for r in chunk))
            loss = model.loss(model.forward(batch, rng=drop_rng), batch, plan.regime)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            nn.zero_grad(params)
            nn.backward(loss)
            nn.adam_step(arrays, {k: p.grad for k, p in params.items()}, state)
            total += value * len(chunk)
        trace.append((epoch, total / len(records)))
        if plan.select_best_dev:
            dev_loss = dataset_loss(model, dev_records, plan.regime)
            if dev_loss < best_loss:
                best_loss, best = dev_loss, {k: v.copy() for k, v in arrays.items()}
        log.debug("epoch %d loss %.6f", epoch, trace[-1][1])
        if callback is not None:
            callback(epoch, model)
    nn.zero_grad(params)
    return trace, best


def _finish(model, plan, trace, best, prior_meta, n_records, stage) -> TrainResult:
    if best is not None:
        for k, v in best.items():
            model.params[k].data[...] = v
    meta = dict(prior_meta)
    levels = set(meta.get("trained_levels", [])) | set(plan.regime.levels)
    meta["trained_levels"] = sorted(levels)
    meta["history"] = list(meta.get("history", [])) + [
        {"stage": stage, "plan": plan.to_dict(), "n_records": n_records}]
    meta["trace"] = [[e, loss] for e, loss in trace]
    return TrainResult(Checkpoint.from_model(model, seed=plan.seed, meta=meta), trace)


def train(records: Sequence[UtteranceRecord], plan: TrainPlan, config: ModelConfig | None = None,
          dev_records: Sequence[UtteranceRecord] | None = None, callback=None) -> TrainResult:
    """Train a freshly initialised model (seeded by ``plan.seed``)."""
    if config is None:
        config = ModelConfig(K=infer_K(records), pooling=plan.pooling, seed=plan.seed)
    else:
        config = replace(config, pooling=plan.pooling, seed=plan.seed)
    model = GoptModel(config)
    trace, best = _run(model, records, plan, dev_records, callback)
    return _finish(model, plan, trace, best, {}, len(records), "train")


def finetune(checkpoint: Checkpoint, records: Sequence[UtteranceRecord], plan: TrainPlan,
             dev_records: Sequence[UtteranceRecord] | None = None, callback=None) -> TrainResult:
    """Continue training every parameter of ``checkpoint`` with a fresh optimiser."""
    cfg = checkpoint.config
    if plan.pooling is not cfg.pooling:
        raise IncompatibleCheckpointError(
            f"checkpoint pooling {cfg.pooling.value!r} but plan asks for {plan.pooling.value!r}")
    if records and infer_K(records) != cfg.K:
        raise IncompatibleCheckpointError(f"checkpoint K={cfg.K} but records have K={infer_K(records)}")
    model = checkpoint.model()
    trace, best = _run(model, records, plan, dev_records, callback)
    return _finish(model, plan, trace, best, checkpoint.meta, len(records), "finetune")

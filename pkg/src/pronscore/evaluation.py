"""PCC/MSE per level, speaker-clustered bootstrap and pooled confidence intervals.

Percentiles use linear interpolation between closest ranks (numpy's default
``"linear"`` method): the p-th percentile of n sorted values sits at
fractional rank ``(n - 1) * p / 100``.  The reported interval half-width is
the larger of the distances from the pooled mean to the 2.5th and 97.5th
percentiles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import UtteranceRecord
from .errors import EmptyReductionError, InsufficientDataError, ShapeError, UndefinedCorrelationError, ValidationError
from .gop import gop_from_features
from .model import Checkpoint, Pooling

LEVELS = ("phone", "word", "utterance")
N_BOOT = 1000


@dataclass(frozen=True)
class ScoredItem:
    level: str
    speaker_id: str
    prediction: float
    label: float

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValidationError(f"unknown level {self.level!r}")
        if not 0.0 <= self.label <= 2.0:
            raise ValidationError(f"label {self.label!r} outside [0, 2]")


@dataclass
class ScoredSet:
    """Column-wise view of the scored items of one level."""

    level: str
    speakers: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_items(cls, items: Sequence[ScoredItem]) -> "ScoredSet":
        levels = {it.level for it in items}
        if len(levels) > 1:
            raise ValidationError(f"mixed levels {sorted(levels)}")
        return cls(levels.pop() if levels else "phone",
                   np.array([it.speaker_id for it in items], dtype=object),
                   np.array([it.prediction for it in items], dtype=np.float64),
                   np.array([it.label for it in items], dtype=np.float64))

    def __len__(self):
        return len(self.predictions)


def pcc(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"pcc: shapes {x.shape} and {y.shape}")
    if len(x) < 2:
        raise UndefinedCorrelationError("pcc needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("pcc undefined for constant input")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def mse(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"mse: shapes {x.shape} and {y.shape}")
    if x.size == 0:
        raise EmptyReductionError("mse of empty vectors")
    d = x - y
    return float(d @ d / d.size)


METRICS: dict[str, Callable] = {"pcc": pcc, "mse": mse}


@dataclass
class BootstrapResult:
    values: np.ndarray
    n_undefined: int = 0


def _speaker_index(speakers: np.ndarray) -> list[np.ndarray]:
    uniq = sorted(set(speakers.tolist()))
    return [np.flatnonzero(speakers == s) for s in uniq]


def bootstrap_by_speaker(items: ScoredSet | Sequence[ScoredItem], metric: Callable | str = "pcc",
                         n_boot: int = N_BOOT, seed: int = 0) -> BootstrapResult:
    """Resample speakers with replacement, keeping all of each speaker's items.

    Resample ``i`` draws from its own generator spawned from ``seed``, so any
    subset of resamples can be recomputed independently.  Resamples where
    the metric is undefined are dropped and counted.
    """
    if not isinstance(items, ScoredSet):
        items = ScoredSet.from_items(items)
    fn = METRICS[metric] if isinstance(metric, str) else metric
    groups = _speaker_index(items.speakers)
    S = len(groups)
    if S < 2:
        raise InsufficientDataError(f"bootstrap needs at least 2 speakers, got {S}")
    values, undefined = [], 0
    for child in np.random.SeedSequence(seed).spawn(n_boot):
        drawn = np.random.default_rng(child).integers(0, S, size=S)
        idx = np.concatenate([groups[s] for s in drawn])
        try:
            values.append(fn(items.predictions[idx], items.labels[idx]))
        except UndefinedCorrelationError:
            undefined += 1
    return BootstrapResult(np.array(values, dtype=np.float64), undefined)


@dataclass(frozen=True)
class Interval:
    mean: float
    ci: float
    p_low: float
    p_high: float
    n: int


def pool_and_interval(values: Iterable[float]) -> Interval:
    v = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
    if v.size == 0:
        raise EmptyReductionError("no values to pool")
    mean = float(v.mean())
    lo, hi = (float(p) for p in np.percentile(v, [2.5, 97.5], method="linear"))
    return Interval(mean, max(abs(mean - lo), abs(mean - hi)), lo, hi, int(v.size))


# ---------------------------------------------------------------------------
# Reports


@dataclass
class LevelReport:
    pcc_mean: float | None
    pcc_ci: float | None
    mse_mean: float | None
    mse_ci: float | None
    n_items: int
    n_speakers: int
    n_seeds: int
    n_draws: int
    n_boot: int
    n_undefined: int = 0
    pcc_values: list[float] = field(default_factory=list, repr=False)
    mse_values: list[float] = field(default_factory=list, repr=False)

    def to_dict(self, with_values: bool = True) -> dict:
        d = {k: getattr(self, k) for k in ("pcc_mean", "pcc_ci", "mse_mean", "mse_ci", "n_items",
                                            "n_speakers", "n_seeds", "n_draws", "n_boot", "n_undefined")}
        if with_values:
            d["pcc_values"] = list(self.pcc_values)
            d["mse_values"] = list(self.mse_values)
        return d


@dataclass
class EvalReport:
    levels: dict[str, LevelReport | None]
    meta: dict = field(default_factory=dict)

    def to_dict(self, with_values: bool = True) -> dict:
        return {"levels": {k: (None if v is None else v.to_dict(with_values)) for k, v in self.levels.items()},
                "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls({k: (None if v is None else LevelReport(**v)) for k, v in d["levels"].items()},
                   d.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def items_from_outputs(records: Sequence[UtteranceRecord], outputs, level: str) -> ScoredSet:
    spk, pred, lab = [], [], []
    for rec, out in zip(records, outputs):
        if level == "phone":
            labels = rec.phone_labels()
            keep = ~np.isnan(labels)
            spk += [rec.speaker_id] * int(keep.sum())
            pred += list(out.phone_scores[keep])
            lab += list(labels[keep])
        elif level == "word":
            if rec.word_labels is None:
                continue
            spk += [rec.speaker_id] * len(rec.word_labels)
            pred += list(out.word_scores)
            lab += list(rec.word_labels)
        elif rec.utt_label is not None:
            spk.append(rec.speaker_id)
            pred.append(out.utt_score)
            lab.append(rec.utt_label)
    return ScoredSet(level, np.array(spk, dtype=object), np.array(pred, dtype=np.float64),
                     np.array(lab, dtype=np.float64))


def gop_baseline_items(records: Sequence[UtteranceRecord]) -> ScoredSet:
    """Phone items scored by the raw GOP value stored in each feature vector."""
    spk, pred, lab = [], [], []
    for rec in records:
        for ph in rec.phones:
            if ph.phone_label is None:
                continue
            spk.append(rec.speaker_id)
            pred.append(gop_from_features(ph.gop_features, ph.phone_id))
            lab.append(ph.phone_label)
    return ScoredSet("phone", np.array(spk, dtype=object), np.array(pred, dtype=np.float64),
                     np.array(lab, dtype=np.float64))


def level_available(ckpt: Checkpoint, level: str) -> bool:
    """BASE heads without any training signal produce no usable scores."""
    if ckpt.config.pooling is not Pooling.BASE:
        return True
    return level in ckpt.meta.get("trained_levels", LEVELS)


def evaluate_sets(runs: Sequence[ScoredSet], n_boot: int = N_BOOT, seed: int = 0,
                  with_mse: bool = True, n_seeds: int | None = None, n_draws: int = 1) -> LevelReport:
    """Bootstrap each run's items with the same seed and pool all values."""
    pccs, mses, undefined = [], [], 0
    for items in runs:
        if len(items) == 0:
            raise InsufficientDataError(f"no labelled items at level {items.level!r}")
        r = bootstrap_by_speaker(items, "pcc", n_boot, seed)
        pccs.append(r.values)
        undefined += r.n_undefined
        if with_mse:
            mses.append(bootstrap_by_speaker(items, "mse", n_boot, seed).values)
    pv = np.concatenate(pccs)
    p = pool_and_interval(pv) if pv.size else None
    m = pool_and_interval(np.concatenate(mses)) if with_mse else None
    first = runs[0]
    return LevelReport(
        pcc_mean=None if p is None else p.mean, pcc_ci=None if p is None else p.ci,
        mse_mean=None if m is None else m.mean, mse_ci=None if m is None else m.ci,
        n_items=len(first), n_speakers=len(set(first.speakers.tolist())),
        n_seeds=len(runs) if n_seeds is None else n_seeds, n_draws=n_draws, n_boot=n_boot,
        n_undefined=undefined, pcc_values=pv.tolist(),
        mse_values=np.concatenate(mses).tolist() if with_mse else [])


def evaluate(checkpoints: Checkpoint | Sequence[Checkpoint], records: Sequence[UtteranceRecord],
             levels: Sequence[str] = LEVELS, n_boot: int = N_BOOT, seed: int = 0) -> EvalReport:
    """Score ``records`` with every checkpoint and pool bootstrap metrics per level.

    Checkpoints are the seeds (and subset draws, via ``meta["draw"]``) of one
    configuration; their bootstrap values are pooled before the interval is
    computed.  A level is reported as ``None`` when the architecture has no
    trained predictor for it.
    """
    if isinstance(checkpoints, Checkpoint):
        checkpoints = [checkpoints]
    if not checkpoints:
        raise ValidationError("no checkpoints to evaluate")
    outputs = [ck.model().predict(records) for ck in checkpoints]
    seeds = {ck.seed for ck in checkpoints}
    draws = {ck.meta.get("draw", 0) for ck in checkpoints}
    report: dict[str, LevelReport | None] = {}
    for level in levels:
        usable = [i for i, ck in enumerate(checkpoints) if level_available(ck, level)]
        if not usable:
            report[level] = None
            continue
        runs = [items_from_outputs(records, outputs[i], level) for i in usable]
        report[level] = evaluate_sets(runs, n_boot, seed, n_seeds=len(seeds), n_draws=len(draws))
    return EvalReport(report, {"n_checkpoints": len(checkpoints), "eval_seed": seed})


def evaluate_gop_baseline(records: Sequence[UtteranceRecord], n_boot: int = N_BOOT,
                          seed: int = 0) -> EvalReport:
    """Raw GOP as the phone prediction; MSE is not meaningful on this scale."""
    rep = evaluate_sets([gop_baseline_items(records)], n_boot, seed, with_mse=False, n_seeds=0)
    return EvalReport({"phone": rep, "word": None, "utterance": None},
                      {"system": "gop", "eval_seed": seed})


def pool_reports(reports: Sequence[EvalReport], level: str = "phone") -> dict:
    """Pool stored bootstrap values from several reports (seeds, draws) at one level."""
    reps = [r.levels.get(level) for r in reports]
    reps = [r for r in reps if r is not None]
    if not reps:
        raise InsufficientDataError(f"no report carries level {level!r}")
    p = pool_and_interval(np.concatenate([r.pcc_values for r in reps]))
    mv = [np.asarray(r.mse_values) for r in reps if r.mse_values]
    m = pool_and_interval(np.concatenate(mv)) if mv else None
    return {"pcc_mean": p.mean, "pcc_ci": p.ci,
            "mse_mean": None if m is None else m.mean, "mse_ci": None if m is None else m.ci,
            "n_reports": len(reps), "n_values": p.n}

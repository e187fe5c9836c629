"""Stage-2 subset selection: random or smallest-AE, optionally balanced by score bins."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import UtteranceRecord
from .errors import InsufficientPoolError, MissingLabelError, ValidationError
from .model import Checkpoint

LABEL_MAX = 2.0


class Strategy(str, enum.Enum):
    RANDOM = "random"
    BEST = "best"


@dataclass(frozen=True)
class SelectionSpec:
    n: int
    strategy: Strategy = Strategy.RANDOM
    balanced: bool = False
    B: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(str(getattr(self.strategy, "value", self.strategy)).lower()))
        if self.n < 1:
            raise ValidationError(f"n must be at least 1, got {self.n}")
        if self.B < 1:
            raise ValidationError(f"B must be at least 1, got {self.B}")

    def to_dict(self) -> dict:
        return {"n": self.n, "strategy": self.strategy.value, "balanced": self.balanced,
                "B": self.B, "seed": self.seed}


@dataclass(frozen=True)
class PoolItem:
    utt_id: str
    utt_label: float
    ae: float = 0.0


def absolute_errors(checkpoint: Checkpoint, records: Sequence[UtteranceRecord]) -> dict[str, float]:
    """``|predicted utterance score - utterance label|`` per utterance."""
    for rec in records:
        if rec.utt_label is None:
            raise MissingLabelError(rec.utt_id, "utterance")
    outputs = checkpoint.model().predict(records)
    return {rec.utt_id: abs(out.utt_score - rec.utt_label) for rec, out in zip(records, outputs)}


def make_pool(records: Sequence[UtteranceRecord], errors: Mapping[str, float] | None = None) -> list[PoolItem]:
    pool = []
    for rec in records:
        if rec.utt_label is None:
            raise MissingLabelError(rec.utt_id, "utterance")
        pool.append(PoolItem(rec.utt_id, rec.utt_label, 0.0 if errors is None else errors[rec.utt_id]))
    return pool


def bin_index(label: float, B: int) -> int:
    """Equal-width bins over [0, 2]; the last bin is closed on the right."""
    return min(int(np.floor(label * B / LABEL_MAX)), B - 1)


def bin_quotas(sizes: Sequence[int], n: int) -> list[int]:
    """Per-bin counts: floor(n/B) each, one extra for the first n mod B non-empty
    bins, then any shortfall of under-populated bins handed out one at a time,
    round-robin in ascending bin order, to bins with items left."""
    B = len(sizes)
    quotas = [n // B] * B
    extra = n % B
    for b in range(B):
        if extra and sizes[b] > 0:
            quotas[b] += 1
            extra -= 1
    deficit = extra
    for b in range(B):
        if quotas[b] > sizes[b]:
            deficit += quotas[b] - sizes[b]
            quotas[b] = sizes[b]
    while deficit:
        moved = False
        for b in range(B):
            if deficit and quotas[b] < sizes[b]:
                quotas[b] += 1
                deficit -= 1
                moved = True
        if not moved:
            break
    return quotas


def select(pool: Sequence[PoolItem], spec: SelectionSpec) -> list[str]:
    """Selected utt_ids, sorted.  Unbalanced selection is the single-bin case."""
    if spec.n > len(pool):
        raise InsufficientPoolError(f"asked for {spec.n} utterances from a pool of {len(pool)}")
    ids = [p.utt_id for p in pool]
    if len(set(ids)) != len(ids):
        raise ValidationError("pool contains duplicate utt_ids")
    B = spec.B if spec.balanced else 1
    items = sorted(pool, key=lambda p: p.utt_id)
    bins: list[list[PoolItem]] = [[] for _ in range(B)]
    for it in items:
        bins[bin_index(it.utt_label, B)].append(it)
    rng = np.random.default_rng(spec.seed)
    ordered = []
    for members in bins:
        if spec.strategy is Strategy.RANDOM:
            ordered.append([members[i] for i in rng.permutation(len(members))])
        else:
            ordered.append(sorted(members, key=lambda p: (p.ae, p.utt_id)))
    quotas = bin_quotas([len(m) for m in bins], spec.n)
    chosen = [it.utt_id for members, q in zip(ordered, quotas) for it in members[:q]]
    return sorted(chosen)


def bin_counts(pool: Sequence[PoolItem], selected: Sequence[str], B: int) -> list[int]:
    labels = {p.utt_id: p.utt_label for p in pool}
    counts = [0] * B
    for uid in selected:
        counts[bin_index(labels[uid], B)] += 1
    return counts


def write_selection(path, utt_ids: Sequence[str], meta: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        for uid in utt_ids:
            f.write(uid + "\n")


def read_selection(path) -> tuple[list[str], dict]:
    meta, ids = {}, []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                meta = json.loads(line[1:])
            else:
                ids.append(line)
    return ids, meta

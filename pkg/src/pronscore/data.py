"""Corpus data model: records, manifest I/O, speaker splits and a synthetic corpus."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    InsufficientDataError,
    LengthError,
    ManifestParseError,
    RangeError,
    ValidationError,
)

MANIFEST_VERSION = 1
LABEL_RANGE = "0-2"
DEFAULT_K = 42
LABEL_MAX = 2.0


@dataclass(frozen=True)
class PhoneEntry:
    phone_id: int
    word_index: int
    gop_features: tuple[float, ...]
    phone_label: float | None = None


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    phones: tuple[PhoneEntry, ...]
    word_labels: tuple[float, ...] | None = None
    utt_label: float | None = None

    @property
    def n_phones(self) -> int:
        return len(self.phones)

    @property
    def n_words(self) -> int:
        return 1 + max(p.word_index for p in self.phones)

    @cached_property
    def gop_matrix(self) -> np.ndarray:
        """(n_phones, 2K) feature matrix, cached for batching."""
        arr = np.array([p.gop_features for p in self.phones], dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def phone_ids(self) -> np.ndarray:
        return np.array([p.phone_id for p in self.phones], dtype=np.int64)

    @cached_property
    def word_indices(self) -> np.ndarray:
        return np.array([p.word_index for p in self.phones], dtype=np.int64)

    @property
    def has_phone_labels(self) -> bool:
        return all(p.phone_label is not None for p in self.phones)

    def phone_labels(self) -> np.ndarray:
        return np.array([np.nan if p.phone_label is None else p.phone_label
                         for p in self.phones], dtype=np.float64)


@dataclass
class DatasetSplit:
    train: list[UtteranceRecord]
    dev: list[UtteranceRecord]
    test: list[UtteranceRecord]

    def speakers(self, name: str) -> set[str]:
        return {r.speaker_id for r in getattr(self, name)}


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic corpus.

    Phone labels are drawn around a per-speaker proficiency level with a
    per-word offset; word and utterance labels are the means of their phone
    labels plus Gaussian noise, clipped to [0, 2].  Each phone's LPP block has
    ``feature_snr * (label - 1)`` plus unit noise at the target coordinate and
    unit noise elsewhere; the GOP feature vector is built from that block.

    ``phone_bias`` scales a fixed per-phone offset added to the target
    coordinate (GOP is not comparable across phones), and ``phone_difficulty``
    a per-phone shift of the phone labels.  Both are drawn once per corpus.
    """

    n_speakers: int = 70
    utts_per_speaker: int = 10
    words_per_utt: tuple[int, int] = (2, 6)
    phones_per_word: tuple[int, int] = (2, 5)
    K: int = 42
    noise_phone: float = 0.35
    noise_word: float = 0.05
    noise_utt: float = 0.05
    feature_snr: float = 2.0
    seed: int = 0
    level_range: tuple[float, float] = (0.6, 1.9)
    word_spread: float = 0.25
    phone_bias: float = 2.0
    phone_difficulty: float = 0.2

    def validate(self) -> None:
        for name in ("n_speakers", "utts_per_speaker", "K"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive", field=name)
        for name in ("words_per_utt", "phones_per_word"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValidationError(f"{name} must be a non-empty positive range", field=name)
        for name in ("noise_phone", "noise_word", "noise_utt", "feature_snr", "word_spread",
                     "phone_bias", "phone_difficulty"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative", field=name)
        lo, hi = self.level_range
        if not 0.0 <= lo <= hi <= LABEL_MAX:
            raise ValidationError("level_range must lie inside [0, 2]", field="level_range")

    def to_dict(self) -> dict:
        return {
            "n_speakers": self.n_speakers,
            "utts_per_speaker": self.utts_per_speaker,
            "words_per_utt": list(self.words_per_utt),
            "phones_per_word": list(self.phones_per_word),
            "K": self.K,
            "noise_phone": self.noise_phone,
            "noise_word": self.noise_word,
            "noise_utt": self.noise_utt,
            "feature_snr": self.feature_snr,
            "seed": self.seed,
            "level_range": list(self.level_range),
            "word_spread": self.word_spread,
            "phone_bias": self.phone_bias,
            "phone_difficulty": self.phone_difficulty,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("words_per_utt", "phones_per_word", "level_range"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**d)


def rescale_labels(raw_word_or_utt_score: float) -> float:
    """Map a 0-10 word/utterance score onto the 0-2 phone-score range."""
    x = float(raw_word_or_utt_score)
    if not (0.0 <= x <= 10.0):
        raise RangeError(f"score {raw_word_or_utt_score!r} outside [0, 10]")
    return x / 5


def _check_label(value, utt_id, field_name):
    if value is None:
        return
    if not isinstance(value, (int, float)) or isinstance(value, bool) or math.isnan(value):
        raise ValidationError(f"label {value!r} is not a real number", utt_id=utt_id, field=field_name)
    if not 0.0 <= value <= LABEL_MAX:
        raise ValidationError(f"label {value!r} outside [0, 2]", utt_id=utt_id, field=field_name)


def validate_record(rec: UtteranceRecord, K: int, max_seq_len: int | None = None) -> None:
    """Check every UtteranceRecord/PhoneEntry invariant, naming the offender."""
    uid = rec.utt_id
    if not rec.phones:
        raise ValidationError("utterance has no phones", utt_id=uid, field="phones")
    if max_seq_len is not None and len(rec.phones) > max_seq_len:
        raise LengthError(f"{len(rec.phones)} phones exceeds max_seq_len={max_seq_len}",
                          utt_id=uid, field="phones")
    prev_word = 0
    for i, ph in enumerate(rec.phones):
        if not 0 <= ph.phone_id < K:
            raise ValidationError(f"phone {i}: phone_id {ph.phone_id} outside [0, {K})",
                                  utt_id=uid, field="phone_id")
        if len(ph.gop_features) != 2 * K:
            raise ValidationError(f"phone {i}: gop has {len(ph.gop_features)} values, expected {2 * K}",
                                  utt_id=uid, field="gop")
        if i == 0 and ph.word_index != 0:
            raise ValidationError("word_index must start at 0", utt_id=uid, field="word_index")
        if ph.word_index < prev_word:
            raise ValidationError(f"phone {i}: word_index decreases", utt_id=uid, field="word_index")
        if ph.word_index > prev_word + 1:
            raise ValidationError(f"phone {i}: word {prev_word + 1} has no phones",
                                  utt_id=uid, field="word_index")
        prev_word = ph.word_index
        _check_label(ph.phone_label, uid, "phone_label")
    if rec.word_labels is not None:
        if len(rec.word_labels) != rec.n_words:
            raise ValidationError(f"{len(rec.word_labels)} word labels for {rec.n_words} words",
                                  utt_id=uid, field="word_labels")
        for w in rec.word_labels:
            _check_label(w, uid, "word_labels")
    _check_label(rec.utt_label, uid, "utt_label")


# ---------------------------------------------------------------------------
# Manifest I/O


def _record_to_obj(rec: UtteranceRecord) -> dict:
    obj: dict = {"utt_id": rec.utt_id, "speaker_id": rec.speaker_id}
    if rec.utt_label is not None:
        obj["utt_label"] = rec.utt_label
    if rec.word_labels is not None:
        obj["word_labels"] = list(rec.word_labels)
    phones = []
    for ph in rec.phones:
        p: dict = {"phone_id": ph.phone_id, "word_index": ph.word_index}
        if ph.phone_label is not None:
            p["phone_label"] = ph.phone_label
        p["gop"] = list(ph.gop_features)
        phones.append(p)
    obj["phones"] = phones
    return obj


def _num(value, line_number, what):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ManifestParseError(f"{what} is not a number: {value!r}", line_number)
    return float(value)


def _int(value, line_number, what):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ManifestParseError(f"{what} is not an integer: {value!r}", line_number)
    return value


def _obj_to_record(obj, line_number) -> UtteranceRecord:
    if not isinstance(obj, dict):
        raise ManifestParseError("record is not an object", line_number)
    try:
        utt_id = obj["utt_id"]
        speaker_id = obj["speaker_id"]
        raw_phones = obj["phones"]
    except KeyError as exc:
        raise ManifestParseError(f"missing field {exc.args[0]!r}", line_number) from None
    if not isinstance(utt_id, str) or not isinstance(speaker_id, str):
        raise ManifestParseError("utt_id and speaker_id must be strings", line_number)
    if not isinstance(raw_phones, list):
        raise ManifestParseError("phones must be a list", line_number)
    phones = []
    for p in raw_phones:
        if not isinstance(p, dict) or "phone_id" not in p or "word_index" not in p or "gop" not in p:
            raise ManifestParseError("phone entry needs phone_id, word_index and gop", line_number)
        if not isinstance(p["gop"], list):
            raise ManifestParseError("gop must be a list", line_number)
        label = p.get("phone_label")
        phones.append(PhoneEntry(
            phone_id=_int(p["phone_id"], line_number, "phone_id"),
            word_index=_int(p["word_index"], line_number, "word_index"),
            gop_features=tuple(_num(v, line_number, "gop value") for v in p["gop"]),
            phone_label=None if label is None else _num(label, line_number, "phone_label"),
        ))
    word_labels = obj.get("word_labels")
    if word_labels is not None:
        if not isinstance(word_labels, list):
            raise ManifestParseError("word_labels must be a list", line_number)
        word_labels = tuple(_num(v, line_number, "word label") for v in word_labels)
    utt_label = obj.get("utt_label")
    if utt_label is not None:
        utt_label = _num(utt_label, line_number, "utt_label")
    return UtteranceRecord(utt_id, speaker_id, tuple(phones), word_labels, utt_label)


def write_manifest(path, records: Iterable[UtteranceRecord], K: int, meta: dict | None = None) -> None:
    header: dict = {"version": MANIFEST_VERSION, "K": K, "label_range": LABEL_RANGE}
    if meta is not None:
        header["meta"] = meta
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(_record_to_obj(rec)) + "\n")


def read_manifest(path, max_seq_len: int | None = None) -> tuple[dict, list[UtteranceRecord]]:
    """Parse a manifest, returning its header and validated records."""
    records = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ManifestParseError("empty manifest, header line missing", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"bad header: {exc.msg}", 1) from None
    if not isinstance(header, dict) or header.get("version") != MANIFEST_VERSION:
        raise ManifestParseError(f"unsupported header {lines[0][:80]!r}", 1)
    if header.get("label_range") != LABEL_RANGE:
        raise ManifestParseError(f"label_range must be {LABEL_RANGE!r}, got {header.get('label_range')!r}", 1)
    K = header.get("K", DEFAULT_K)
    if isinstance(K, bool) or not isinstance(K, int) or K <= 0:
        raise ManifestParseError(f"bad K {K!r}", 1)
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(exc.msg, i) from None
        rec = _obj_to_record(obj, i)
        if rec.utt_id in seen:
            raise ValidationError("duplicate utt_id", utt_id=rec.utt_id, field="utt_id")
        seen.add(rec.utt_id)
        validate_record(rec, K, max_seq_len)
        records.append(rec)
    return header, records


def load_manifest(path, max_seq_len: int | None = None) -> list[UtteranceRecord]:
    return read_manifest(path, max_seq_len)[1]


def infer_K(records: Sequence[UtteranceRecord]) -> int:
    return len(records[0].phones[0].gop_features) // 2


# ---------------------------------------------------------------------------
# Splitting


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    quotas = [f * total for f in fractions]
    counts = [math.floor(q) for q in quotas]
    left = total - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def split_by_speaker(records: Sequence[UtteranceRecord], fractions: Sequence[float],
                     seed: int) -> DatasetSplit:
    """Randomly assign whole speakers to train/dev/test.

    Split sizes (in speakers) use largest-remainder rounding of
    ``fractions * n_speakers``; ties go to the earlier split.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be three non-negative reals summing to 1, got {fractions!r}")
    speakers = sorted({r.speaker_id for r in records})
    if len(speakers) < 3:
        raise InsufficientDataError(f"need at least 3 speakers, got {len(speakers)}")
    counts = _largest_remainder(len(speakers), fractions)
    perm = np.random.default_rng(seed).permutation(len(speakers))
    shuffled = [speakers[i] for i in perm]
    bounds = np.cumsum([0] + counts)
    assign = {}
    for split_idx in range(3):
        for spk in shuffled[bounds[split_idx]:bounds[split_idx + 1]]:
            assign[spk] = split_idx
    parts: list[list[UtteranceRecord]] = [[], [], []]
    for rec in records:
        parts[assign[rec.speaker_id]].append(rec)
    return DatasetSplit(*parts)


# ---------------------------------------------------------------------------
# Synthetic corpus


def generate_synthetic(spec: SynthSpec) -> list[UtteranceRecord]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    K = spec.K
    gop_offset = spec.phone_bias * rng.standard_normal(K)
    difficulty = spec.phone_difficulty * rng.standard_normal(K)
    records = []
    for s in range(spec.n_speakers):
        speaker_id = f"spk{s:03d}"
        level = rng.uniform(*spec.level_range)
        for u in range(spec.utts_per_speaker):
            n_words = int(rng.integers(spec.words_per_utt[0], spec.words_per_utt[1] + 1))
            phones = []
            labels_by_word = []
            for w in range(n_words):
                n_ph = int(rng.integers(spec.phones_per_word[0], spec.phones_per_word[1] + 1))
                offset = spec.word_spread * rng.standard_normal()
                ids = rng.integers(0, K, size=n_ph)
                labels = np.clip(level + offset + difficulty[ids]
                                 + spec.noise_phone * rng.standard_normal(n_ph), 0.0, LABEL_MAX)
                labels_by_word.append(labels)
                for pid, lab in zip(ids, labels):
                    lpp = rng.standard_normal(K)
                    lpp[pid] += spec.feature_snr * (lab - 1.0) + gop_offset[pid]
                    gop = np.concatenate([lpp, lpp[pid] - lpp])
                    gop[K + pid] = 0.0
                    phones.append(PhoneEntry(int(pid), w, tuple(float(v) for v in gop), float(lab)))
            word_labels = tuple(
                float(np.clip(np.mean(lab) + spec.noise_word * rng.standard_normal(), 0.0, LABEL_MAX))
                for lab in labels_by_word)
            all_labels = np.concatenate(labels_by_word)
            utt_label = float(np.clip(np.mean(all_labels) + spec.noise_utt * rng.standard_normal(),
                                      0.0, LABEL_MAX))
            records.append(UtteranceRecord(f"{speaker_id}_u{u:03d}", speaker_id, tuple(phones),
                                           word_labels, utt_label))
    return records

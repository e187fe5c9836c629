"""GOP scores and GOP feature vectors from frame-level phone posteriors.

All logarithms are natural.  Exact zeros in a posterior matrix are an error
here; flooring is the job of the ingestion step (:func:`read_posteriors`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PhoneEntry, UtteranceRecord, rescale_labels
from .errors import DomainError, ManifestParseError, ValidationError

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class PosteriorMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise ValidationError(f"posterior matrix must be T×K with T, K > 0, got shape {v.shape}")
        if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
            raise ValidationError("posterior entries must lie in [0, 1]")
        sums = v.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            raise ValidationError(f"row {bad[0]} sums to {sums[bad[0]]!r}, not 1")
        object.__setattr__(self, "values", v)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PhoneSegment:
    phone_id: int
    t_start: int
    t_end: int


def _check_segment(post: PosteriorMatrix, seg: PhoneSegment) -> None:
    if not 0 <= seg.t_start <= seg.t_end < post.T:
        raise IndexError(f"segment [{seg.t_start}, {seg.t_end}] outside frames [0, {post.T})")
    if not 0 <= seg.phone_id < post.K:
        raise IndexError(f"phone_id {seg.phone_id} outside [0, {post.K})")


def lpp_vector(post: PosteriorMatrix, seg: PhoneSegment) -> np.ndarray:
    """Average log posterior of every phone over the segment's frames."""
    _check_segment(post, seg)
    block = post.values[seg.t_start:seg.t_end + 1]
    zeros = np.argwhere(block == 0.0)
    if zeros.size:
        t, q = zeros[0]
        raise DomainError(f"log of zero posterior at frame {seg.t_start + t}, phone {q}")
    return np.log(block).mean(axis=0)


def gop_score(post: PosteriorMatrix, seg: PhoneSegment) -> float:
    return float(lpp_vector(post, seg)[seg.phone_id])


def gop_feature_vector(post: PosteriorMatrix, seg: PhoneSegment) -> np.ndarray:
    """``[LPP(q) for all q] + [LPP(target) - LPP(q) for all q]`` (length 2K)."""
    lpp = lpp_vector(post, seg)
    diff = lpp[seg.phone_id] - lpp
    diff[seg.phone_id] = 0.0
    return np.concatenate([lpp, diff])


def gop_from_features(features, phone_id: int) -> float:
    """Recover the GOP score (target LPP) stored in a feature vector."""
    return float(features[phone_id])


# ---------------------------------------------------------------------------
# Ingestion


def floor_posteriors(values: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    """Floor entries at ``eps`` and renormalise rows."""
    v = np.maximum(np.asarray(values, dtype=np.float64), eps)
    return v / v.sum(axis=1, keepdims=True)


def read_posteriors(path, eps: float | None = 1e-10) -> PosteriorMatrix:
    """Read a dense posterior file.

    Text files (``.txt``) start with a ``T K`` line followed by T rows of K
    whitespace-separated reals.  Binary files (``.bin``) start with two
    little-endian int64 values T and K followed by T*K little-endian float64
    values in row-major order.
    """
    path = Path(path)
    if path.suffix == ".bin":
        raw = path.read_bytes()
        if len(raw) < 16:
            raise ManifestParseError(f"{path}: truncated header")
        T, K = struct.unpack("<qq", raw[:16])
        values = np.frombuffer(raw[16:], dtype="<f8")
        if values.size != T * K:
            raise ManifestParseError(f"{path}: expected {T * K} values, found {values.size}")
        values = values.reshape(T, K).astype(np.float64)
    else:
        lines = path.read_text().split("\n")
        try:
            T, K = (int(x) for x in lines[0].split())
        except ValueError:
            raise ManifestParseError(f"{path}: bad header {lines[0]!r}", 1) from None
        rows = []
        for i, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                row = [float(x) for x in line.split()]
            except ValueError:
                raise ManifestParseError(f"{path}: non-numeric value", i) from None
            if len(row) != K:
                raise ManifestParseError(f"{path}: expected {K} values, found {len(row)}", i)
            rows.append(row)
        if len(rows) != T:
            raise ManifestParseError(f"{path}: expected {T} rows, found {len(rows)}")
        values = np.array(rows, dtype=np.float64).reshape(T, K)
    if eps is not None:
        values = floor_posteriors(values, eps)
    return PosteriorMatrix(values)


def write_posteriors(path, values: np.ndarray) -> None:
    path = Path(path)
    values = np.asarray(values, dtype=np.float64)
    T, K = values.shape
    if path.suffix == ".bin":
        path.write_bytes(struct.pack("<qq", T, K) + values.astype("<f8").tobytes())
    else:
        body = "\n".join(" ".join(repr(float(x)) for x in row) for row in values)
        path.write_text(f"{T} {K}\n{body}\n")


def read_alignments(path) -> dict[str, list[tuple[PhoneSegment, int]]]:
    """Parse ``utt_id phone_id t_start t_end word_index`` lines, grouped by utterance."""
    out: dict[str, list[tuple[PhoneSegment, int]]] = {}
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 5:
                raise ManifestParseError(f"expected 5 fields, found {len(parts)}", i)
            try:
                pid, ts, te, wi = (int(x) for x in parts[1:])
            except ValueError:
                raise ManifestParseError("non-integer field", i) from None
            out.setdefault(parts[0], []).append((PhoneSegment(pid, ts, te), wi))
    return out


def build_records(posteriors: dict[str, PosteriorMatrix],
                  alignments: dict[str, list[tuple[PhoneSegment, int]]],
                  utt2spk: dict[str, str] | None = None,
                  labels: dict[str, dict] | None = None) -> list[UtteranceRecord]:
    """Turn posteriors + alignments (+ optional raw labels) into manifest records.

    Raw labels use the corpus scales: word and utterance scores on 0-10
    (rescaled here), phone scores already on 0-2.
    """
    records = []
    for utt_id in sorted(alignments):
        if utt_id not in posteriors:
            raise ValidationError("no posterior file for utterance", utt_id=utt_id)
        post = posteriors[utt_id]
        lab = (labels or {}).get(utt_id, {})
        phone_labels = lab.get("phone_labels")
        segs = alignments[utt_id]
        if phone_labels is not None and len(phone_labels) != len(segs):
            raise ValidationError("phone_labels length differs from alignment", utt_id=utt_id,
                                  field="phone_labels")
        phones = []
        for j, (seg, word_index) in enumerate(segs):
            feats = gop_feature_vector(post, seg)
            pl = None if phone_labels is None else float(phone_labels[j])
            phones.append(PhoneEntry(seg.phone_id, word_index, tuple(float(x) for x in feats), pl))
        word_labels = lab.get("word_labels")
        if word_labels is not None:
            word_labels = tuple(rescale_labels(w) for w in word_labels)
        utt_label = lab.get("utt_label")
        if utt_label is not None:
            utt_label = rescale_labels(utt_label)
        speaker = (utt2spk or {}).get(utt_id, utt_id)
        records.append(UtteranceRecord(utt_id, speaker, tuple(phones), word_labels, utt_label))
    return records

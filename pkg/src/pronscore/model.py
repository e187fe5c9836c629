"""Transformer pronunciation scorer with phone-level heads and pooled higher levels.

Inputs per phone are a linear projection of its 2K GOP features plus a
canonical-phone embedding and a learned positional embedding; a trainable
CLS vector is prepended and the sequence is run through a pre-norm encoder.

Pooling strategies:

* ``BASE``: utterance score from a head on the CLS output; a word head emits
  one score per phone and the word score is the mean over the word's phones;
  a separate phone head emits phone scores.
* ``MEAN``: one phone head; word and utterance scores are the arithmetic mean
  of phone scores within the unit.
* ``ATTN``: as MEAN but weighted by a softmax over the unit's phones of a
  scalar produced from each phone's hidden state (one scorer per level).
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .data import UtteranceRecord
from .errors import IncompatibleCheckpointError, LengthError, MissingLabelError, ValidationError

__all__ = [
    "Pooling", "ModelConfig", "ModelOutput", "Batch", "GoptModel", "Checkpoint",
    "make_batch", "load_checkpoint",
]


class Pooling(str, enum.Enum):
    BASE = "base"
    MEAN = "mean"
    ATTN = "attn"

    @classmethod
    def parse(cls, value) -> "Pooling":
        if isinstance(value, Pooling):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"unknown pooling {value!r}; expected base, mean or attn") from None


@dataclass(frozen=True)
class ModelConfig:
    K: int
    d_model: int = 24
    depth: int = 3
    n_heads: int = 1
    max_seq_len: int = 50
    pooling: Pooling = Pooling.ATTN
    dropout: float = 0.3
    seed: int = 0
    ff_mult: int = 4

    def __post_init__(self):
        object.__setattr__(self, "pooling", Pooling.parse(self.pooling))
        if self.d_model % self.n_heads:
            raise ValidationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout {self.dropout} outside [0, 1)")
        if self.K <= 0 or self.depth < 0 or self.max_seq_len <= 0:
            raise ValidationError("K and max_seq_len must be positive, depth non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pooling"] = self.pooling.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelOutput:
    phone_scores: np.ndarray
    word_scores: np.ndarray
    utt_score: float
    attn_weights: dict[str, list[np.ndarray] | np.ndarray] | None = None


@dataclass
class Batch:
    """Padded arrays for a list of records; position 0 of every row is CLS."""

    records: list[UtteranceRecord]
    gop: np.ndarray            # (B, L, 2K)
    phone_ids: np.ndarray      # (B, L)
    seq_mask: np.ndarray       # (B, L+1), CLS included
    phone_mask: np.ndarray     # (B, L+1), CLS excluded
    word_member: np.ndarray    # (W, L+1) membership of each flat word
    word_utt: np.ndarray       # (W,) row of each flat word
    word_start: np.ndarray     # (B+1,) offsets into the flat word axis
    phone_labels: np.ndarray   # (B, L+1), nan where absent
    word_labels: np.ndarray    # (W,), nan where absent
    word_label_per_phone: np.ndarray  # (B, L+1)
    utt_labels: np.ndarray     # (B,), nan where absent

    @property
    def size(self) -> int:
        return len(self.records)


def make_batch(records: Sequence[UtteranceRecord], config: ModelConfig,
               pad_to: int | None = None) -> Batch:
    """Pad records to ``pad_to`` phones (default ``max_seq_len``) and build masks."""
    L = config.max_seq_len if pad_to is None else pad_to
    for rec in records:
        if rec.n_phones > config.max_seq_len:
            raise LengthError(f"{rec.n_phones} phones exceeds max_seq_len={config.max_seq_len}",
                              utt_id=rec.utt_id, field="phones")
    L = max([L] + [r.n_phones for r in records])
    B = len(records)
    F = 2 * config.K
    gop = np.zeros((B, L, F))
    ids = np.zeros((B, L), dtype=np.int64)
    seq_mask = np.zeros((B, L + 1))
    phone_labels = np.full((B, L + 1), np.nan)
    wlpp = np.full((B, L + 1), np.nan)
    utt_labels = np.full(B, np.nan)
    members, word_utt, word_labels, starts = [], [], [], [0]
    for b, rec in enumerate(records):
        n = rec.n_phones
        if rec.gop_matrix.shape[1] != F:
            raise ValidationError(f"gop width {rec.gop_matrix.shape[1]} != 2K={F}",
                                  utt_id=rec.utt_id, field="gop")
        gop[b, :n] = rec.gop_matrix
        ids[b, :n] = rec.phone_ids
        seq_mask[b, :n + 1] = 1.0
        phone_labels[b, 1:n + 1] = rec.phone_labels()
        if rec.utt_label is not None:
            utt_labels[b] = rec.utt_label
        widx = rec.word_indices
        for w in range(rec.n_words):
            row = np.zeros(L + 1)
            row[1:n + 1] = widx == w
            if not row.any():
                raise ValidationError(f"word {w} has no phones", utt_id=rec.utt_id, field="word_index")
            members.append(row)
            word_utt.append(b)
            word_labels.append(np.nan if rec.word_labels is None else rec.word_labels[w])
        if rec.word_labels is not None:
            wlpp[b, 1:n + 1] = np.asarray(rec.word_labels)[widx]
        starts.append(len(word_utt))
    phone_mask = seq_mask.copy()
    phone_mask[:, 0] = 0.0
    return Batch(list(records), gop, ids, seq_mask, phone_mask,
                 np.array(members).reshape(-1, L + 1), np.array(word_utt, dtype=np.int64),
                 np.array(starts, dtype=np.int64), phone_labels, np.array(word_labels, dtype=np.float64),
                 wlpp, utt_labels)


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every parameter, in a fixed order."""
    d, F, ff = cfg.d_model, 2 * cfg.K, cfg.ff_mult * cfg.d_model
    spec = [
        ("in_proj.W", (F, d), f"uniform:{F}"),
        ("in_proj.b", (d,), f"uniform:{F}"),
        ("phone_emb", (cfg.K, d), "embed"),
        ("pos_emb", (cfg.max_seq_len + 1, d), "embed"),
        ("cls", (d,), "embed"),
    ]
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        spec += [(p + "ln1.g", (d,), "ones"), (p + "ln1.b", (d,), "zeros")]
        for name in "qkvo":
            spec += [(p + f"attn.{name}.W", (d, d), f"uniform:{d}"),
                     (p + f"attn.{name}.b", (d,), f"uniform:{d}")]
        spec += [(p + "ln2.g", (d,), "ones"), (p + "ln2.b", (d,), "zeros"),
                 (p + "ff1.W", (d, ff), f"uniform:{d}"), (p + "ff1.b", (ff,), f"uniform:{d}"),
                 (p + "ff2.W", (ff, d), f"uniform:{ff}"), (p + "ff2.b", (d,), f"uniform:{ff}")]

    def head(name):
        return [(f"{name}.ln.g", (d,), "ones"), (f"{name}.ln.b", (d,), "zeros"),
                (f"{name}.W", (d, 1), f"uniform:{d}"), (f"{name}.b", (1,), f"uniform:{d}")]

    spec += head("phone_head")
    if cfg.pooling is Pooling.BASE:
        spec += head("word_head") + head("utt_head")
    elif cfg.pooling is Pooling.ATTN:
        # zero scorers: attention starts uniform, i.e. as MEAN pooling
        for name in ("word_attn", "utt_attn"):
            spec += [(f"{name}.W", (d, 1), "zeros"), (f"{name}.b", (1,), f"uniform:{d}")]
    return spec


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for name, shape, kind in _param_shapes(cfg):
        if kind == "ones":
            out[name] = np.ones(shape)
        elif kind == "zeros":
            out[name] = np.zeros(shape)
        elif kind == "embed":
            out[name] = 0.02 * rng.standard_normal(shape)
        else:
            bound = 1.0 / np.sqrt(int(kind.split(":")[1]))
            out[name] = rng.uniform(-bound, bound, size=shape)
    return out


class GoptModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        arrays = init_params(config) if params is None else params
        expected = {name: shape for name, shape, _ in _param_shapes(config)}
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise IncompatibleCheckpointError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        self.params: dict[str, nn.Tensor] = {}
        for name, arr in arrays.items():
            arr = np.array(arr, dtype=np.float64)
            if arr.shape != expected[name]:
                raise IncompatibleCheckpointError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            self.params[name] = nn.Tensor(arr, requires_grad=True, name=name)

    @property
    def pooling(self) -> Pooling:
        return self.config.pooling

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    # -- forward ---------------------------------------------------------

    def embed(self, batch: Batch) -> nn.Tensor:
        P = self.params
        B, L, _ = batch.gop.shape
        d = self.config.d_model
        phones = nn.add(nn.linear(batch.gop, P["in_proj.W"], P["in_proj.b"]),
                        nn.embedding_lookup(P["phone_emb"], batch.phone_ids))
        cls = nn.add(np.zeros((B, 1, d)), nn.reshape(P["cls"], (1, 1, d)))
        seq = nn.concat([cls, phones], axis=1)
        pos = nn.take(P["pos_emb"], np.arange(L + 1), axis=0)
        return nn.add(seq, pos)

    def encode(self, x: nn.Tensor, seq_mask: np.ndarray, rng=None) -> nn.Tensor:
        P, cfg = self.params, self.config
        for i in range(cfg.depth):
            p = f"blocks.{i}."
            h = nn.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            h = nn.multi_head_self_attention(h, seq_mask, P, cfg.n_heads, prefix=p + "attn.")
            x = nn.add(x, nn.dropout(h, cfg.dropout, rng))
            h = nn.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            h = nn.linear(nn.gelu(nn.linear(h, P[p + "ff1.W"], P[p + "ff1.b"])), P[p + "ff2.W"], P[p + "ff2.b"])
            x = nn.add(x, nn.dropout(h, cfg.dropout, rng))
        return x

    def _head(self, name: str, h: nn.Tensor) -> nn.Tensor:
        P = self.params
        z = nn.layer_norm(h, P[f"{name}.ln.g"], P[f"{name}.ln.b"])
        return nn.select_last(nn.linear(z, P[f"{name}.W"], P[f"{name}.b"]), 0)

    def forward(self, batch: Batch, rng=None) -> dict[str, nn.Tensor]:
        """Score tensors for a batch.

        Keys: ``phone`` (B, L+1) and, for BASE, ``word_head`` (B, L+1);
        ``word`` (W,) and ``utt`` (B,); ATTN adds ``word_weights`` (W, L+1)
        and ``utt_weights`` (B, L+1).  Padded and CLS columns of the
        per-position tensors carry arbitrary values and must be masked.
        """
        h = self.encode(self.embed(batch), batch.seq_mask, rng)
        out = {"phone": self._head("phone_head", h)}
        pooling = self.config.pooling
        if pooling is Pooling.BASE:
            wh = self._head("word_head", h)
            out["word_head"] = wh
            out["word"] = nn.masked_mean(nn.take(wh, batch.word_utt, axis=0), batch.word_member)
            cls_h = nn.take(h, np.array([0]), axis=1)
            out["utt"] = nn.reshape(self._head("utt_head", cls_h), (batch.size,))
            return out
        phone = out["phone"]
        phone_rows = nn.take(phone, batch.word_utt, axis=0)
        if pooling is Pooling.MEAN:
            out["word"] = nn.masked_mean(phone_rows, batch.word_member)
            out["utt"] = nn.masked_mean(phone, batch.phone_mask)
            return out
        P = self.params
        wl = nn.select_last(nn.linear(h, P["word_attn.W"], P["word_attn.b"]), 0)
        ww = nn.softmax(nn.take(wl, batch.word_utt, axis=0), axis=-1, mask=batch.word_member)
        ul = nn.select_last(nn.linear(h, P["utt_attn.W"], P["utt_attn.b"]), 0)
        uw = nn.softmax(ul, axis=-1, mask=batch.phone_mask)
        out["word_weights"], out["utt_weights"] = ww, uw
        out["word"] = nn.masked_weighted_sum(phone_rows, ww, batch.word_member)
        out["utt"] = nn.masked_weighted_sum(phone, uw, batch.phone_mask)
        return out

    def loss(self, out: dict[str, nn.Tensor], batch: Batch, regime) -> nn.Tensor:
        """Sum of the masked MSE terms switched on by ``regime``."""
        terms = []
        if regime.use_phone:
            self._require(batch, "phone")
            terms.append(nn.mse_masked(out["phone"], batch.phone_labels, batch.phone_mask))
        if regime.use_word:
            self._require(batch, "word")
            if self.config.pooling is Pooling.BASE:
                terms.append(nn.mse_masked(out["word_head"], batch.word_label_per_phone, batch.phone_mask))
            else:
                terms.append(nn.mse_masked(out["word"], batch.word_labels, np.ones(len(batch.word_labels))))
        if regime.use_utt:
            self._require(batch, "utterance")
            terms.append(nn.mse_masked(out["utt"], batch.utt_labels, np.ones(batch.size)))
        if not terms:
            raise ValidationError("regime enables no loss term")
        total = terms[0]
        for t in terms[1:]:
            total = nn.add(total, t)
        return total

    @staticmethod
    def _require(batch: Batch, level: str) -> None:
        for b, rec in enumerate(batch.records):
            if level == "phone" and not rec.has_phone_labels:
                raise MissingLabelError(rec.utt_id, level)
            if level == "word" and rec.word_labels is None:
                raise MissingLabelError(rec.utt_id, level)
            if level == "utterance" and rec.utt_label is None:
                raise MissingLabelError(rec.utt_id, level)

    # -- inference -------------------------------------------------------

    def predict(self, records: Sequence[UtteranceRecord], batch_size: int = 64) -> list[ModelOutput]:
        results = []
        for i in range(0, len(records), batch_size):
            chunk = list(records[i:i + batch_size])
            batch = make_batch(chunk, self.config, pad_to=max(r.n_phones for r in chunk))
            out = self.forward(batch)
            phone = out["phone"].data
            word = out["word"].data
            utt = out["utt"].data
            for b, rec in enumerate(chunk):
                n = rec.n_phones
                ws, we = batch.word_start[b], batch.word_start[b + 1]
                weights = None
                if self.config.pooling is Pooling.ATTN:
                    weights = {
                        "word": [out["word_weights"].data[w, 1:n + 1][batch.word_member[w, 1:n + 1] > 0]
                                 for w in range(ws, we)],
                        "utt": out["utt_weights"].data[b, 1:n + 1].copy(),
                    }
                results.append(ModelOutput(phone[b, 1:n + 1].copy(), word[ws:we].copy(),
                                           float(utt[b]), weights))
        return results


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def model(self) -> GoptModel:
        return GoptModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @classmethod
    def from_model(cls, model: GoptModel, seed=None, meta=None) -> "Checkpoint":
        return cls(model.config, {k: v.data.copy() for k, v in model.params.items()}, seed, dict(meta or {}))

    def save(self, path) -> None:
        nn.save_tensors(path, self.params, self.config.to_dict(), self.seed,
                        extra={"pooling": self.config.pooling.value, "meta": self.meta})


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint, refusing one whose K or d_model differs from ``expect``."""
    tensors, doc = nn.load_tensors(path)
    cfg = ModelConfig.from_dict(doc["config"])
    if doc.get("pooling") != cfg.pooling.value:
        raise IncompatibleCheckpointError(f"{path}: pooling tag {doc.get('pooling')!r} disagrees with config")
    if expect is not None:
        for key in ("K", "d_model"):
            if getattr(expect, key) != getattr(cfg, key):
                raise IncompatibleCheckpointError(
                    f"{path}: checkpoint {key}={getattr(cfg, key)} but requested {getattr(expect, key)}")
    return Checkpoint(cfg, tensors, doc.get("seed"), doc.get("meta", {}))

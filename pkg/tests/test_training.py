import math
from dataclasses import replace

import numpy as np
import pytest

from helpers import tiny_corpus
from pronscore.errors import IncompatibleCheckpointError, MissingLabelError, TrainingDivergedError, ValidationError
from pronscore.model import ModelConfig, Pooling
from pronscore.training import SupervisionRegime, TrainPlan, dataset_loss, finetune, train

SMALL = dict(K=4, d_model=8, depth=1, max_seq_len=12, dropout=0.0)


def small_train(records, **plan):
    plan = TrainPlan(**{"epochs": 3, "batch_size": 4, **plan})
    return train(records, plan, config=ModelConfig(**SMALL))


@pytest.mark.parametrize("regime, levels", [
    ("UWP", ["phone", "utterance", "word"]), ("P", ["phone"]), ("W", ["word"]),
    ("UW", ["utterance", "word"]), ("U", ["utterance"])])
def test_regime_levels(regime, levels):
    assert sorted(SupervisionRegime.parse(regime).levels) == levels


def test_regime_parse_rejects_unknown():
    with pytest.raises(ValidationError):
        SupervisionRegime.parse("PW")


def test_plan_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lr=-1.0)):
        with pytest.raises(ValidationError):
            TrainPlan(**bad)


def test_training_lowers_loss():
    recs = tiny_corpus()
    result = small_train(recs, regime="UWP", epochs=15, lr=3e-3)
    losses = [loss for _, loss in result.trace]
    assert [e for e, _ in result.trace] == list(range(1, 16))
    assert losses[-1] < losses[0]
    assert result.trace_table().splitlines()[0] == "epoch\tloss"


def test_training_is_deterministic():
    recs = tiny_corpus()
    a = small_train(recs, regime="U", seed=3)
    b = small_train(recs, regime="U", seed=3)
    c = small_train(recs, regime="U", seed=4)
    for k, v in a.checkpoint.params.items():
        assert np.array_equal(v, b.checkpoint.params[k])
    assert a.trace == b.trace
    assert any(not np.array_equal(v, c.checkpoint.params[k]) for k, v in a.checkpoint.params.items())


def test_dropout_is_seeded():
    recs = tiny_corpus()
    cfg = ModelConfig(**{**SMALL, "dropout": 0.1})
    plan = TrainPlan(regime="U", epochs=2, batch_size=4, seed=1)
    a, b = train(recs, plan, config=cfg), train(recs, plan, config=cfg)
    assert a.trace == b.trace


def test_missing_labels_named():
    recs = tiny_corpus()
    recs[2] = replace(recs[2], word_labels=None)
    with pytest.raises(MissingLabelError, match=recs[2].utt_id):
        small_train(recs, regime="W")
    small_train(recs, regime="P")  # word labels are not needed here


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_training_raises():
    with pytest.raises(TrainingDivergedError):
        small_train(tiny_corpus(), regime="U", lr=1e200)


def test_finetune_keeps_history_and_levels():
    recs = tiny_corpus()
    stage1 = small_train(recs, regime="U").checkpoint
    out = finetune(stage1, recs[:5], TrainPlan(regime="P", epochs=2, batch_size=4)).checkpoint
    assert [h["stage"] for h in out.meta["history"]] == ["train", "finetune"]
    assert out.meta["trained_levels"] == ["phone", "utterance"]
    assert out.meta["history"][1]["n_records"] == 5


def test_finetune_pooling_mismatch():
    stage1 = small_train(tiny_corpus(), regime="U").checkpoint
    with pytest.raises(IncompatibleCheckpointError):
        finetune(stage1, tiny_corpus(), TrainPlan(regime="P", pooling=Pooling.MEAN, epochs=1))


def test_finetune_k_mismatch():
    stage1 = small_train(tiny_corpus(), regime="U").checkpoint
    with pytest.raises(IncompatibleCheckpointError):
        finetune(stage1, tiny_corpus(K=5), TrainPlan(regime="P", epochs=1))


def test_select_best_dev_keeps_lowest_dev_loss():
    recs = tiny_corpus(n_speakers=8)
    train_recs, dev = recs[:18], recs[18:]
    seen = []
    result = train(train_recs, TrainPlan(regime="UWP", epochs=6, batch_size=4, lr=1e-2, select_best_dev=True),
                   config=ModelConfig(**SMALL), dev_records=dev,
                   callback=lambda e, m: seen.append(dataset_loss(m, dev, SupervisionRegime.UWP)))
    final = dataset_loss(result.checkpoint.model(), dev, SupervisionRegime.UWP)
    assert math.isclose(final, min(seen), rel_tol=1e-12)


def test_select_best_dev_needs_dev():
    with pytest.raises(ValidationError):
        small_train(tiny_corpus(), regime="U", select_best_dev=True)


def test_too_long_record_rejected():
    recs = tiny_corpus()
    cfg = ModelConfig(**{**SMALL, "max_seq_len": 2})
    with pytest.raises(ValidationError):
        train(recs, TrainPlan(regime="U", epochs=1), config=cfg)

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import tiny_corpus
from pronscore.data import SynthSpec, generate_synthetic, split_by_speaker
from pronscore.errors import InsufficientPoolError, MissingLabelError
from pronscore.model import Checkpoint, GoptModel, ModelConfig
from pronscore.selection import (
    PoolItem,
    SelectionSpec,
    Strategy,
    absolute_errors,
    bin_counts,
    make_pool,
    read_selection,
    select,
    write_selection,
)


def brute_bin(label, B):
    # exact interval test with rationals: bin b holds [2b/B, 2(b+1)/B), last bin closed
    x = Fraction(label)
    for b in range(B):
        lo, hi = Fraction(2 * b, B), Fraction(2 * (b + 1), B)
        if lo <= x < hi or (b == B - 1 and x == hi):
            return b
    raise AssertionError(label)


def brute_quotas(sizes, n):
    B = len(sizes)
    want = [n // B] * B
    given_extra = 0
    for b in range(B):
        if given_extra < n % B and sizes[b]:
            want[b] += 1
            given_extra += 1
    spare = (n % B) - given_extra
    got = [min(w, s) for w, s in zip(want, sizes)]
    spare += sum(w - g for w, g in zip(want, got))
    b = 0
    while spare and any(g < s for g, s in zip(got, sizes)):
        if got[b] < sizes[b]:
            got[b] += 1
            spare -= 1
        b = (b + 1) % B
    return got


def random_pool(rng, size):
    labels = rng.uniform(0, 2, size=size)
    labels[rng.random(size) < 0.1] = 2.0
    return [PoolItem(f"u{i:04d}", float(l), float(a)) for i, (l, a) in
            enumerate(zip(labels, rng.random(size)))]


def test_ae_definition():
    recs = tiny_corpus(K=3)
    ck = Checkpoint.from_model(GoptModel(ModelConfig(K=3, d_model=8, depth=1, max_seq_len=12)))
    errs = absolute_errors(ck, recs)
    preds = ck.model().predict(recs)
    for rec, out in zip(recs, preds):
        assert errs[rec.utt_id] == abs(out.utt_score - rec.utt_label)


def test_ae_needs_utt_labels():
    from dataclasses import replace
    rec = replace(tiny_corpus(K=3)[0], utt_label=None)
    ck = Checkpoint.from_model(GoptModel(ModelConfig(K=3, d_model=8, depth=1, max_seq_len=12)))
    with pytest.raises(MissingLabelError):
        absolute_errors(ck, [rec])


def test_best_hand_example():
    aes = (0.9, 0.1, 0.5, 0.2, 0.8, 0.3)
    pool = [PoolItem(f"u{i}", 1.0, a) for i, a in enumerate(aes)]
    assert select(pool, SelectionSpec(3, Strategy.BEST)) == ["u1", "u3", "u5"]


def test_best_ties_by_utt_id():
    pool = [PoolItem(u, 1.0, 0.5) for u in ("c", "a", "d", "b")]
    assert select(pool, SelectionSpec(2, Strategy.BEST)) == ["a", "b"]


@pytest.mark.parametrize("strategy", list(Strategy))
@pytest.mark.parametrize("balanced", [False, True])
def test_exhaustion(strategy, balanced):
    pool = random_pool(np.random.default_rng(0), 17)
    assert select(pool, SelectionSpec(17, strategy, balanced)) == sorted(p.utt_id for p in pool)


def test_insufficient_pool():
    with pytest.raises(InsufficientPoolError):
        select(random_pool(np.random.default_rng(0), 3), SelectionSpec(4))


def test_bin_edges():
    pool = [PoolItem("a", 0.0), PoolItem("b", 0.4), PoolItem("c", 0.3999), PoolItem("d", 2.0), PoolItem("e", 1.6)]
    assert bin_counts(pool, ["a", "b", "c", "d", "e"], 5) == [2, 1, 0, 0, 2]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(1, 7),
       st.sampled_from(list(Strategy)), st.booleans())
def test_selection_properties(seed, size, B, strategy, balanced):
    rng = np.random.default_rng(seed)
    pool = random_pool(rng, size)
    n = int(rng.integers(1, size + 1))
    spec = SelectionSpec(n, strategy, balanced, B=B, seed=seed % 1000)
    out = select(pool, spec)
    assert out == select(list(reversed(pool)), spec)
    assert len(out) == n == len(set(out))
    assert out == sorted(out)
    assert set(out) <= {p.utt_id for p in pool}
    ae = {p.utt_id: p.ae for p in pool}
    if strategy is Strategy.BEST and not balanced:
        chosen = set(out)
        rest = [ae[p.utt_id] for p in pool if p.utt_id not in chosen]
        assert not rest or max(ae[u] for u in out) <= min(rest)
    if balanced:
        sizes = [0] * B
        for p in pool:
            sizes[brute_bin(p.utt_label, B)] += 1
        counts = [0] * B
        for u in out:
            counts[brute_bin(next(p.utt_label for p in pool if p.utt_id == u), B)] += 1
        assert counts == brute_quotas(sizes, n)
        unbalanced = SelectionSpec(n, strategy, False, B=B, seed=spec.seed)
        one_bin = SelectionSpec(n, strategy, True, B=1, seed=spec.seed)
        assert select(pool, one_bin) == select(pool, unbalanced)


def test_balanced_default_pool_counts():
    records = generate_synthetic(SynthSpec())
    train = split_by_speaker(records, (5 / 7, 1 / 7, 1 / 7), seed=0).train
    pool = make_pool(train)
    out = select(pool, SelectionSpec(100, Strategy.RANDOM, True, B=5, seed=3))
    sizes = [0] * 5
    for p in pool:
        sizes[brute_bin(p.utt_label, 5)] += 1
    counts = [0] * 5
    labels = {p.utt_id: p.utt_label for p in pool}
    for u in out:
        counts[brute_bin(labels[u], 5)] += 1
    assert counts == brute_quotas(sizes, 100)
    assert counts == bin_counts(pool, out, 5)
    # without under-populated bins there is no redistribution
    if all(s >= 21 for s in sizes):
        assert max(counts) - min(counts) <= 1


def test_random_seed_changes_selection():
    pool = random_pool(np.random.default_rng(1), 50)
    assert select(pool, SelectionSpec(10, seed=1)) != select(pool, SelectionSpec(10, seed=2))


def test_selection_file_round_trip(tmp_path):
    pool = random_pool(np.random.default_rng(2), 20)
    spec = SelectionSpec(5, Strategy.RANDOM, True, seed=4)
    ids = select(pool, spec)
    path = tmp_path / "ids.txt"
    write_selection(path, ids, spec.to_dict())
    back, meta = read_selection(path)
    assert back == ids and meta == spec.to_dict()

"""Shared test utilities: finite-difference oracle and tiny corpora."""

import numpy as np

from pronscore import nn
from pronscore.data import PhoneEntry, SynthSpec, UtteranceRecord, generate_synthetic

H = 1e-5


def numeric_grad(f, arrays, index, h=H):
    """Central differences of scalar ``f(arrays)`` with respect to ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(arrays)
        x[i] = old - h
        down = f(arrays)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b, floor=1e-12):
    """Norm-wise relative error; the scale is clamped below at ``floor``.

    Some gradients are exactly zero in exact arithmetic (the attention key bias
    under softmax shift invariance), where finite differences only see rounding.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(build, arrays, h=H):
    """Largest relative error between tape and finite-difference gradients.

    ``build(tensors)`` returns a scalar Tensor from leaf tensors wrapping ``arrays``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [nn.Tensor(a, requires_grad=True) for a in arrays]
    nn.backward(build(leaves))

    def value(arrs):
        return build([nn.Tensor(a) for a in arrs]).item()

    nums = [numeric_grad(value, arrays, k, h) for k in range(len(arrays))]
    anas = [leaf.grad if leaf.grad is not None else np.zeros_like(a) for leaf, a in zip(leaves, arrays)]
    floor = _floor(nums)
    return max(rel_error(a, n, floor) for a, n in zip(anas, nums))


def _floor(nums):
    # 1e-3 of the largest gradient in the same check
    return max(1e-3 * max(np.linalg.norm(n) for n in nums), 1e-12)


def tiny_corpus(n_speakers=6, utts=3, K=4, seed=0, **kw):
    return generate_synthetic(SynthSpec(n_speakers=n_speakers, utts_per_speaker=utts, K=K,
                                        seed=seed, words_per_utt=(1, 3), phones_per_word=(1, 3), **kw))


def make_record(utt_id, speaker, word_layout, K, rng, labels=True):
    """Hand-built record; ``word_layout`` lists the phone count of each word."""
    phones, w_labels = [], []
    for w, count in enumerate(word_layout):
        labs = []
        for _ in range(count):
            lab = float(rng.uniform(0, 2))
            labs.append(lab)
            phones.append(PhoneEntry(int(rng.integers(0, K)), w,
                                     tuple(float(v) for v in rng.normal(size=2 * K)),
                                     lab if labels else None))
        w_labels.append(float(np.mean(labs)))
    all_labels = [p.phone_label for p in phones]
    return UtteranceRecord(utt_id, speaker, tuple(phones),
                           tuple(w_labels) if labels else None,
                           float(np.mean(all_labels)) if labels else None)


def _mask(rng, shape, axis=-1):
    m = (rng.random(shape) > 0.4).astype(float)
    # keep at least one live entry per reduction
    idx = rng.integers(0, shape[axis], size=m.sum(axis=axis).shape)
    np.put_along_axis(m, np.expand_dims(idx, axis), 1.0, axis=axis)
    return m


def op_case(name, rng):
    """Random small instance of op ``name``: returns (build, arrays)."""
    s = tuple(int(v) for v in rng.integers(1, 4, size=2))
    if name in ("add", "sub", "mul"):
        fn = getattr(nn, name)
        b_shape = s if rng.random() < 0.5 else (1, s[1])
        R = rng.normal(size=s)
        return (lambda t: nn.sum_all(nn.mul(fn(t[0], t[1]), R)),
                [rng.normal(size=s), rng.normal(size=b_shape)])
    if name == "matmul":
        n = int(rng.integers(1, 4))
        R = rng.normal(size=(2, s[0], n))
        return (lambda t: nn.sum_all(nn.mul(nn.matmul(t[0], t[1]), R)),
                [rng.normal(size=(2, s[0], s[1])), rng.normal(size=(s[1], n))])
    if name == "reshape":
        R = rng.normal(size=(s[0] * s[1],))
        return lambda t: nn.sum_all(nn.mul(nn.reshape(t[0], (-1,)), R)), [rng.normal(size=s)]
    if name == "transpose":
        R = rng.normal(size=(s[1], 2, s[0]))
        return (lambda t: nn.sum_all(nn.mul(nn.transpose(t[0], (2, 1, 0)), R)),
                [rng.normal(size=(s[0], 2, s[1]))])
    if name == "concat":
        R = rng.normal(size=(s[0], s[1] + 2))
        return (lambda t: nn.sum_all(nn.mul(nn.concat([t[0], t[1]], axis=1), R)),
                [rng.normal(size=s), rng.normal(size=(s[0], 2))])
    if name == "take":
        idx = rng.integers(0, s[0], size=4)
        R = rng.normal(size=(4, s[1]))
        return lambda t: nn.sum_all(nn.mul(nn.take(t[0], idx, axis=0), R)), [rng.normal(size=s)]
    if name == "select_last":
        i = int(rng.integers(0, s[1]))
        R = rng.normal(size=(s[0],))
        return lambda t: nn.sum_all(nn.mul(nn.select_last(t[0], i), R)), [rng.normal(size=s)]
    if name == "sum_all":
        return lambda t: nn.sum_all(t[0]), [rng.normal(size=s)]
    if name == "gelu":
        R = rng.normal(size=s)
        return lambda t: nn.sum_all(nn.mul(nn.gelu(t[0]), R)), [rng.normal(size=s) * 2]
    if name == "dropout":
        R = rng.normal(size=s)
        seed = int(rng.integers(0, 2**31))
        return (lambda t: nn.sum_all(nn.mul(nn.dropout(t[0], 0.3, np.random.default_rng(seed)), R)),
                [rng.normal(size=s)])
    if name == "linear":
        R = rng.normal(size=(s[0], 3))
        return (lambda t: nn.sum_all(nn.mul(nn.linear(t[0], t[1], t[2]), R)),
                [rng.normal(size=(s[0], s[1])), rng.normal(size=(s[1], 3)), rng.normal(size=3)])
    if name == "layer_norm":
        d = int(rng.integers(3, 6))
        R = rng.normal(size=(s[0], d))
        return (lambda t: nn.sum_all(nn.mul(nn.layer_norm(t[0], t[1], t[2]), R)),
                [rng.normal(size=(s[0], d)), rng.normal(size=d), rng.normal(size=d)])
    if name == "softmax":
        shape = (s[0], s[1] + 1)
        m = _mask(rng, shape)
        R = rng.normal(size=shape)
        return lambda t: nn.sum_all(nn.mul(nn.softmax(t[0], axis=-1, mask=m), R)), [rng.normal(size=shape)]
    if name == "embedding_lookup":
        ids = rng.integers(0, s[0], size=(2, 3))
        R = rng.normal(size=(2, 3, s[1]))
        return lambda t: nn.sum_all(nn.mul(nn.embedding_lookup(t[0], ids), R)), [rng.normal(size=s)]
    if name == "masked_mean":
        m = _mask(rng, s)
        R = rng.normal(size=(s[0],))
        return lambda t: nn.sum_all(nn.mul(nn.masked_mean(t[0], m, axis=-1), R)), [rng.normal(size=s)]
    if name == "masked_weighted_sum":
        m = _mask(rng, s)
        R = rng.normal(size=(s[0],))
        return (lambda t: nn.sum_all(nn.mul(nn.masked_weighted_sum(t[0], t[1], m, axis=-1), R)),
                [rng.normal(size=s), rng.normal(size=s)])
    if name == "mse_masked":
        m = _mask(rng, s)
        y = rng.normal(size=s)
        return lambda t: nn.mse_masked(t[0], y, m), [rng.normal(size=s)]
    if name == "attention":
        B, L, d = 2, int(rng.integers(2, 5)), 4
        heads = int(rng.choice([1, 2]))
        mask = _mask(rng, (B, L))
        names = [f"{p}.{k}" for p in "qkvo" for k in "Wb"]
        R = rng.normal(size=(B, L, d))
        arrays = [rng.normal(size=(B, L, d))] + [
            rng.normal(size=(d, d)) * 0.5 if n.endswith("W") else rng.normal(size=d) * 0.1 for n in names]

        def build(t):
            params = dict(zip(names, t[1:]))
            return nn.sum_all(nn.mul(nn.multi_head_self_attention(t[0], mask, params, heads), R))
        return build, arrays
    raise KeyError(name)


OPS = ("add", "sub", "mul", "matmul", "reshape", "transpose", "concat", "take", "select_last",
       "sum_all", "gelu", "dropout", "linear", "layer_norm", "softmax", "embedding_lookup",
       "masked_mean", "masked_weighted_sum", "mse_masked", "attention")


def jittered(model, rng, scale=0.3):
    """Add noise to every parameter so zero-initialised tensors do not hide gradient paths."""
    for p in model.params.values():
        p.data += scale * rng.standard_normal(p.data.shape)
    return model


def model_gradcheck(model, batch, regime, sample=None, rng=None, h=H):
    """Worst relative error over the parameters of ``model.loss``.

    With ``sample`` set, only that many random coordinates per tensor are
    perturbed and compared elementwise; otherwise every coordinate is used.
    """
    nn.zero_grad(model.params)
    nn.backward(model.loss(model.forward(batch), batch, regime))
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in model.params.items()}
    nn.zero_grad(model.params)

    def value():
        return model.loss(model.forward(batch), batch, regime).item()

    pairs = []
    for name, p in model.params.items():
        x = p.data
        if sample is None:
            coords = list(np.ndindex(x.shape))
        else:
            flat = rng.choice(x.size, size=min(sample, x.size), replace=False)
            coords = [np.unravel_index(i, x.shape) for i in flat]
        num = np.zeros(len(coords))
        for j, i in enumerate(coords):
            old = x[i]
            x[i] = old + h
            up = value()
            x[i] = old - h
            down = value()
            x[i] = old
            num[j] = (up - down) / (2 * h)
        pairs.append((np.array([analytic[name][i] for i in coords]), num))
    floor = _floor([n for _, n in pairs])
    return max(rel_error(a, n, floor) for a, n in pairs)

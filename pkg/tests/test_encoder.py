import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ehrdense.encoder import (
    EncoderParams,
    TextEncoder,
    Vocabulary,
    backprop,
    backprop_batch,
    encode,
    encode_batch,
    similarity,
    tokenize,
)


def random_params(rows, dim, seed):
    rng = np.random.default_rng(seed)
    return EncoderParams(rng.normal(size=(rows, dim)), seed)


def cos_of(table, idx1, idx2):
    a = table[idx1].mean(axis=0)
    b = table[idx2].mean(axis=0)
    return a @ b / np.sqrt((a @ a) * (b @ b))


def numeric_grad(table, idx1, idx2, h=1e-4):
    grad = np.zeros_like(table)
    for r in sorted(set(idx1) | set(idx2)):
        for c in range(table.shape[1]):
            t = table.copy()
            t[r, c] += h
            up = cos_of(t, idx1, idx2)
            t[r, c] -= 2 * h
            down = cos_of(t, idx1, idx2)
            grad[r, c] = (up - down) / (2 * h)
    return grad


def test_tokenize():
    vocab = Vocabulary(["acute", "heart", "failure"])
    assert tokenize(vocab, "acute heart failure") == [0, 2, 1]
    unk = tokenize(vocab, "zzz")[0]
    assert unk >= len(vocab) and unk == tokenize(Vocabulary(["acute", "heart", "failure"]), "zzz")[0]
    assert len(tokenize(vocab, " ".join(["heart"] * 600))) == 512
    assert tokenize(vocab, "heart, (failure).") == [2, 1]


def test_encode_examples():
    params = random_params(10, 8, 0)
    e, trace = encode(params, [3])
    assert np.allclose(e, params.table[3] / np.linalg.norm(params.table[3]))
    assert trace.norm > 0
    params.table[5] = -params.table[4]
    with pytest.raises(ValueError, match="degenerate embedding"):
        encode(params, [4, 5])
    with pytest.raises(ValueError, match="degenerate input"):
        encode(params, [])


def test_unit_norm_and_order_invariance():
    params = random_params(50, 16, 1)
    rng = np.random.default_rng(2)
    for _ in range(100):
        idx = rng.integers(0, 50, size=5)
        e, _ = encode(params, idx)
        assert abs(np.linalg.norm(e) - 1) < 1e-9
        assert np.allclose(encode(params, idx[::-1])[0], e, atol=1e-15)


def test_similarity():
    u = encode(random_params(3, 4, 0), [0])[0]
    assert similarity(u, u) == pytest.approx(1.0, abs=1e-12)
    assert similarity(u, -u) == pytest.approx(-1.0, abs=1e-12)
    params = random_params(20, 6, 5)
    a, b = [1, 2, 3], [4, 5]
    assert abs(similarity(encode(params, a)[0], encode(params, b)[0]) - cos_of(params.table, a, b)) < 1e-12


def test_backprop_zero_slope():
    params = random_params(5, 4, 0)
    _, t1 = encode(params, [0])
    _, t2 = encode(params, [1])
    assert not backprop(params, t1, t2, 0.0).any()


@pytest.mark.parametrize("n1, n2, tol", [(1, 1, 1e-6), (10, 3, 1e-5)])
def test_backprop_finite_differences(n1, n2, tol):
    rng = np.random.default_rng(n1)
    for k in range(5):
        params = random_params(12, 6, 10 * n1 + k)
        idx1 = list(rng.integers(0, 12, size=n1))
        idx2 = list(rng.integers(0, 12, size=n2))
        _, t1 = encode(params, idx1)
        _, t2 = encode(params, idx2)
        analytic = backprop(params, t1, t2, 1.0)
        numeric = numeric_grad(params.table, idx1, idx2)
        mask = numeric != 0
        rel = np.abs(analytic - numeric)[mask] / np.maximum(np.abs(numeric[mask]), 1e-8)
        assert rel.max() < tol
        assert not analytic[~mask].any()


def test_backprop_batch_matches_pairwise():
    params = random_params(30, 5, 3)
    rng = np.random.default_rng(3)
    seqs = [list(rng.integers(0, 30, size=n)) for n in (4, 2, 7)]
    other = [list(rng.integers(0, 30, size=3)) for _ in range(3)]
    trace = encode_batch(params, seqs)
    otrace = encode_batch(params, other)
    # gradient of sum_i S(seq_i, other_i) w.r.t. the seq side only
    expected = np.zeros_like(params.table)
    for s, o in zip(seqs, other):
        _, t1 = encode(params, s)
        _, t2 = encode(params, o)
        u, v = t1.mean / t1.norm, t2.mean / t2.norm
        dm = (v - (u @ v) * u) / t1.norm
        np.add.at(expected, t1.indices, dm / len(s))
    got = backprop_batch(params, trace, otrace.units)
    assert np.allclose(got, expected, atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(c=st.floats(0.01, 100), seed=st.integers(0, 1000))
def test_scale_invariance(c, seed):
    params = random_params(20, 4, seed)
    scaled = EncoderParams(params.table * c, seed)
    a, b = [1, 2, 3], [4, 5, 6, 7]
    s1 = similarity(encode(params, a)[0], encode(params, b)[0])
    s2 = similarity(encode(scaled, a)[0], encode(scaled, b)[0])
    assert abs(s1 - s2) < 1e-12


def test_save_load_bit_exact(tmp_path):
    vocab = Vocabulary.from_texts(["a b c", "d"], oov_buckets=7)
    enc = TextEncoder.create(vocab, dim=5, seed=9)
    p = tmp_path / "enc.bin"
    enc.save(p)
    back = TextEncoder.load(p)
    assert back.vocab == vocab and back.params.seed == 9
    assert back.params.table.tobytes() == enc.params.table.tobytes()


def test_init_range_and_determinism():
    a = EncoderParams.init(100, 64, seed=4)
    b = EncoderParams.init(100, 64, seed=4)
    assert np.array_equal(a.table, b.table)
    assert np.abs(a.table).max() <= 0.05


def test_empty_text_falls_back_to_oov():
    enc = TextEncoder.create(Vocabulary(["a"]), dim=4)
    assert enc.embed_queries(["!!"]).shape == (1, 4)

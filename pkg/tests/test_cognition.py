import math
import threading
import time

import numpy as np
import pytest

from streamgate import numerics as nx
from streamgate.cognition import (EOS, SPECIALS, CognitionContext, ContextOverflowError, HttpCognitionBackend, Vocab,
                                  VocabularyError, decode_response, make_backend_server, sequence_nll, token_nlls,
                                  ToyDecoder)
from streamgate.features import class_anchor

CAPS = ["red ball rolls", "blue cube falls", "green cone spins"]


def vocab():
    return Vocab.build(CAPS + ["describe"])


def tiny(v=None, **kw):
    kw = {"d_model": 32, "n_layers": 2, "n_heads": 2, "d_percep": 8, **kw}
    return ToyDecoder(v or vocab(), **kw)


def ctx(vecs=(), prompt=("describe",), turns=()):
    return CognitionContext(list(prompt), [np.asarray(v, float) for v in vecs], [list(t) for t in turns])


def test_vocab_specials_and_roundtrip(tmp_path):
    v = vocab()
    assert tuple(v.tokens[:4]) == SPECIALS
    assert len(set(v.tokens)) == len(v)
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt").tokens == v.tokens
    with pytest.raises(ValueError):
        Vocab(["a"] + list(SPECIALS))


def test_uniform_logits_give_ln_v():
    v = Vocab(list(SPECIALS) + ["a", "b", "c", "d"])
    m = tiny(v)
    m.lm_head.data[:] = 0.0
    assert sequence_nll(m, ctx(prompt=["a"]), ["b", "c", "d"]) == pytest.approx(math.log(8), abs=1e-12)


def test_unknown_reference_token_named():
    with pytest.raises(VocabularyError, match="zebra"):
        sequence_nll(tiny(), ctx(), ["zebra"])


def test_max_len_one_and_determinism():
    m = tiny()
    c = ctx([np.ones(8)])
    out = decode_response(m, c, 1)
    assert len(out) == 1
    assert decode_response(m, c, 5) == decode_response(m, c, 5)


def test_invalid_inputs():
    m = tiny()
    with pytest.raises(ValueError):
        decode_response(m, ctx(), 0)
    with pytest.raises(ValueError):
        decode_response(m, ctx(prompt=()), 3)
    with pytest.raises(ValueError):
        sequence_nll(m, ctx(), [])
    with pytest.raises(ValueError):
        CognitionContext(["x"], [np.zeros(2)] * 5, capacity=4)


def test_overflow():
    m = tiny(max_seq_len=10)
    with pytest.raises(ContextOverflowError):
        decode_response(m, ctx([np.zeros(8)] * 6), 4)


def test_appending_never_decreases_total_nll():
    m = tiny()
    ref = ["red", "ball", "rolls", EOS]
    per = token_nlls(m, ctx([np.ones(8)]), ref)
    assert np.all(per >= 0)
    totals = [token_nlls(m, ctx([np.ones(8)]), ref[:k]).sum() for k in range(1, 5)]
    assert all(a <= b + 1e-12 for a, b in zip(totals, totals[1:]))


def test_causality(rng):
    m = tiny()
    c = ctx([rng.normal(size=8)])
    a = token_nlls(m, c, ["red", "ball", "rolls", "spins"])
    b = token_nlls(m, c, ["red", "ball", "cube", "spins"])
    np.testing.assert_array_equal(a[:2], b[:2])
    assert a[2] != b[2]


def test_prior_turns_are_truncated():
    m = tiny(max_turns=1)
    few = m.layout(ctx(turns=[["red"]]))[0]
    many = m.layout(ctx(turns=[["blue", "cube"], ["green"], ["red"]]))[0]
    assert few.turn_ids == many.turn_ids


def test_gradient_check_two_block_decoder(rng):
    v = vocab()
    for seed in range(3):
        m = ToyDecoder(v, d_model=32, n_layers=2, n_heads=2, d_percep=4, seed=seed)
        lay, vecs = m.layout(ctx([rng.normal(size=4)]), ["red", "ball"])
        params = list(m.named_parameters().values())
        err = nx.grad_check(lambda: m.layouts_nll(nx.Tensor(vecs), [lay]), params, samples=8, seed=seed)
        assert err < 1e-4


def _fit_three_classes(steps=150):
    v = vocab()
    m = ToyDecoder(v, d_model=32, n_layers=2, n_heads=2, d_percep=16, seed=0)
    anchors = [class_anchor(c, 16) for c in range(3)]
    lays = []
    for c in range(3):
        lay, _ = m.layout(ctx([anchors[c]]), CAPS[c].split() + [EOS])
        lay.vector_rows = [c]
        lays.append(lay)
    table = np.stack(anchors)
    params = [nx.Parameter(k, t) for k, t in m.named_parameters().items()]
    opt = nx.Adam(params)
    for _ in range(steps):
        loss = m.layouts_nll(nx.Tensor(table), lays)
        loss.backward()
        opt.step(3e-3)
    return m, anchors


def test_three_class_mapping_decodes_exactly():
    m, anchors = _fit_three_classes()
    for c in range(3):
        out = decode_response(m, ctx([anchors[c]]), 6)
        assert out == CAPS[c].split() + [EOS]
        assert sequence_nll(m, ctx([anchors[c]]), out) < 0.05


def test_decode_cost_independent_of_stream_length():
    m = tiny()
    pooled = [np.ones(8)] * 4
    lay_short = m.layout(ctx(pooled))[0]
    # the context only ever holds K pooled vectors, however long the stream
    for _ in range(3):
        assert m.layout(ctx(pooled))[0].length == lay_short.length

    def timed():
        best = math.inf
        for _ in range(5):
            t0 = time.perf_counter()
            decode_response(m, ctx(pooled), 4)
            best = min(best, time.perf_counter() - t0)
        return best
    a = timed()
    b = timed()
    assert abs(a - b) / a < 0.5


def test_http_backend_roundtrip():
    m = tiny()
    server = make_backend_server(m)
    th = threading.Thread(target=server.serve_forever, daemon=True)
    th.start()
    try:
        client = HttpCognitionBackend(f"http://127.0.0.1:{server.server_address[1]}")
        c = ctx([np.arange(8) / 8.0], turns=[["red", "ball"]])
        assert client.decode_response(c, 4) == decode_response(m, c, 4)
        assert client.sequence_nll(c, ["red", "ball"]) == pytest.approx(sequence_nll(m, c, ["red", "ball"]))
    finally:
        server.shutdown()
        server.server_close()

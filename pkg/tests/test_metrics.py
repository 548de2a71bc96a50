import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamgate.metrics import (DialogueTurn, EvalReport, EvaluationError, bleu, evaluate_stream, fluency,
                                greedy_pairs, lcs_length, merge_reports, perplexity, rouge_l, tim_val, time_diff,
                                token_f1, trigger_acc)


def frames(n, ones):
    x = np.zeros(n, dtype=bool)
    x[list(ones)] = True
    return x


def turn(t, text="x"):
    return DialogueTurn(int(t * 2), float(t), text)


# trigger accuracy -----------------------------------------------------------------

@pytest.mark.parametrize("truth, pred, w, expected", [
    ({3, 40}, {3, 40}, 0, 1.0),
    ({3, 40}, set(), 5, 0.0),
    ({10, 50}, {11, 49, 80}, 2, 2 / 3),
    ({10}, {13}, 2, 0.0),
    ({10}, {13}, 3, 1.0),
    ({5, 7}, {6}, 1, 0.5),
    (set(), {3}, 1, 0.0),
    (set(), set(), 0, 1.0),
])
def test_trigger_acc_cases(truth, pred, w, expected):
    assert trigger_acc(frames(100, pred), frames(100, truth), w) == expected


def test_trigger_acc_accepts_strings_and_checks_length():
    assert trigger_acc(["silence", "respond"], ["silence", "response"]) == 1.0
    with pytest.raises(EvaluationError):
        trigger_acc([0, 1], [0, 1, 0])
    with pytest.raises(EvaluationError):
        trigger_acc([0, 1], [0, 1], -1)


# timing validity ------------------------------------------------------------------

@pytest.mark.parametrize("labels, pred, expected", [
    ([1, 0, 0, 0], [1, 0, 0, 0], 1.0),
    ([1, 0, 0, 0], [0, 0, 0, 0], 0.5),
    ([1, 0, 0, 0], [1, 1, 1, 1], 0.5),
    ([1, 0, 0, 0], [1, 1, 0, 0], (1 + 2 / 3) / 2),
    ([1, 1, 0, 0], [0, 1, 1, 0], 0.5),
    ([1, 0, 0, 0], [0, 1, 1, 1], 0.0),
])
def test_tim_val_cases(labels, pred, expected):
    assert tim_val(pred, labels) == expected


def test_tim_val_single_class():
    with pytest.raises(EvaluationError):
        tim_val([0, 1], [0, 0])


def test_tim_val_random_decisions_near_half():
    r = np.random.default_rng(0)
    labels = frames(10_000, range(0, 10_000, 100))
    assert abs(tim_val(r.random(10_000) < 0.5, labels) - 0.5) <= 0.02


# time difference ------------------------------------------------------------------

def test_time_diff_cases():
    assert time_diff([turn(10), turn(20)], [10.0, 20.0]) == 0.0
    assert time_diff([turn(12)], [10.0]) == 2.0
    assert time_diff([turn(11), turn(23)], [10.0, 20.0]) == 2.0
    assert time_diff([turn(11)], [10.0, 20.0], penalty=5.0) == 3.0
    assert time_diff([turn(8), turn(30)], [10.0]) == 2.0
    assert time_diff([turn(0)], [0.0, 10.0], duration_s=20.0) == 5.0
    assert time_diff([11.0, 23.0], [10.0, 20.0]) == 2.0


def test_time_diff_needs_events():
    with pytest.raises(EvaluationError):
        time_diff([turn(1)], [])


# BLEU ------------------------------------------------------------------------------

def toks(s):
    return s.split()


def test_bleu_cases():
    assert bleu(toks("a b c d e"), [toks("a b c d e")], 4) == 1.0
    assert bleu(toks("the the the"), [toks("the cat")], 1) == pytest.approx(1 / 3, rel=1e-15)
    assert bleu(toks("x y"), [toks("a b")], 1) == 0.0
    assert bleu(toks("the cat sat"), [toks("the cat sat on the mat")], 1) == pytest.approx(math.exp(-1), rel=1e-15)
    assert bleu(toks("a b c d e"), [toks("a b c d f")], 4) == pytest.approx(0.2 ** 0.25, rel=1e-15)
    # zero trigram and 4-gram matches are smoothed to 1/3 and 1/2
    expected = (3 / 4 * 1 / 3 * 1 / 3 * 1 / 2) ** 0.25
    assert bleu(toks("a b x c"), [toks("a b y c")], 4) == pytest.approx(expected, rel=1e-15)


def test_bleu_empty_candidate_warns(caplog):
    assert bleu([], [toks("a")]) == 0.0
    assert "empty candidate" in caplog.text


@given(st.sampled_from("abc"), st.sampled_from("abc"))
def test_bleu1_single_token_is_exact_match(a, b):
    assert bleu([a], [[b]], 1) == float(a == b)


# ROUGE-L ---------------------------------------------------------------------------

def f_beta(p, r, beta=1.2):
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def test_rouge_cases():
    assert rouge_l(toks("a b c"), toks("a b c")) == pytest.approx(1.0, rel=1e-15)
    assert rouge_l(toks("a b"), toks("c d")) == 0.0
    assert lcs_length(toks("a b c d"), toks("a c d")) == 3
    assert rouge_l(toks("a b c d"), toks("a c d")) == pytest.approx(2.44 * 0.75 / 2.08, rel=1e-15)
    assert rouge_l(toks("a b"), toks("b a")) == pytest.approx(0.5, rel=1e-15)
    assert rouge_l(toks("a b c"), toks("a x b y c z")) == pytest.approx(f_beta(1.0, 0.5), rel=1e-15)
    assert rouge_l([], toks("a")) == 0.0


# fluency -------------------------------------------------------------------------------

def test_fluency_cases():
    assert fluency([turn(10, "red ball")], [10.0], ["red ball"]) == 1.0
    assert fluency([turn(10, "red ball")], [10.0], ["blue cube"]) == 0.0
    assert fluency([turn(10, "red ball")], [10.0, 20.0], ["red ball", "blue cube"]) == 0.5
    assert fluency([turn(10, "red ball rolls")], [10.0], ["red ball"]) == pytest.approx(0.8, rel=1e-15)
    assert fluency([turn(10, "a b"), turn(20, "a c")], [10.0, 20.0], ["a b", "a d"]) == 0.75


def test_fluency_errors():
    with pytest.raises(EvaluationError):
        fluency([], [], [])
    with pytest.raises(EvaluationError):
        fluency([], [1.0], [])


def test_token_f1_and_perplexity():
    assert token_f1(toks("a b"), toks("a c")) == 0.5
    assert perplexity([0.0, 0.0]) == 1.0
    assert perplexity([math.log(4)]) == pytest.approx(4.0)


def test_greedy_pairs_prefers_nearest():
    assert sorted(greedy_pairs([10, 50], [11, 49, 80], 2)) == [(0, 0), (1, 1)]
    assert greedy_pairs([0], [5], 2) == []


# properties ------------------------------------------------------------------------------

flags = st.lists(st.booleans(), min_size=2, max_size=60)


@given(flags, st.data(), st.integers(0, 5), st.integers(0, 20))
def test_frame_metrics_bounded_and_shift_invariant(labels, data, w, shift):
    pred = data.draw(st.lists(st.booleans(), min_size=len(labels), max_size=len(labels)))
    ta = trigger_acc(pred, labels, w)
    assert 0.0 <= ta <= 1.0
    # leading silence moves every index by the same constant
    pad = [False] * shift
    assert trigger_acc(pad + pred, pad + labels, w) == ta
    if any(labels) and not all(labels):
        assert 0.0 <= tim_val(pred, labels) <= 1.0


@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=8),
       st.lists(st.sampled_from("abcd"), min_size=1, max_size=8))
def test_text_metrics_bounded(c, r):
    for v in (bleu(c, [r], 1), bleu(c, [r], 4), rouge_l(c, r), token_f1(c, r)):
        assert 0.0 <= v <= 1.0 + 1e-12


@given(st.lists(st.floats(0, 100), min_size=1, max_size=5), st.lists(st.floats(0, 100), max_size=5))
def test_time_diff_nonnegative(events, triggers):
    assert time_diff(triggers, events, penalty=1.0) >= 0.0


def test_report_is_deterministic():
    labels = frames(20, {4, 12})
    pred = frames(20, {5, 12, 17})
    turns = [DialogueTurn(5, 2.5, "red ball"), DialogueTurn(12, 6.0, "blue"), DialogueTurn(17, 8.5, "x")]
    times = [0.5 * i for i in range(20)]
    a = evaluate_stream(pred, labels, turns, [4, 12], ["red ball", "blue cube"], times, 1, nlls=[0.1, 0.2])
    b = evaluate_stream(pred, labels, turns, [4, 12], ["red ball", "blue cube"], times, 1, nlls=[0.1, 0.2])
    assert a.dumps() == b.dumps()
    assert a.trigger_acc == 2 / 3
    assert a.ppl == pytest.approx(math.exp(0.15))
    assert set(a.to_json()) == {"trigger_acc", "tim_val", "fluency", "time_diff_s", "ppl", "bleu1", "bleu4",
                                "rouge_l"}


def test_merge_skips_missing():
    m = merge_reports([EvalReport(trigger_acc=1.0, tim_val=None), EvalReport(trigger_acc=0.5, tim_val=0.8)])
    assert m.trigger_acc == 0.75 and m.tim_val == 0.8 and m.ppl is None

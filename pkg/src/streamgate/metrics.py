"""Timing-alignment and language metrics for streaming dialogue runs.

Definitions used here:

* trigger accuracy: truth response frames matched one-to-one to predicted
  responses within +/- ``window_w`` frames (greedy by distance), scored as
  matched / (truths + unmatched predictions).
* timing validity: balanced per-frame accuracy over the two classes.
* time difference: mean absolute gap over ground-truth events after greedy
  nearest-time matching; unmatched events cost ``penalty`` seconds.
* fluency: mean over events of token-F1 between the matched turn and the
  event caption, 0 for unmatched events.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

ROUGE_BETA = 1.2


class EvaluationError(ValueError):
    pass


@dataclass
class DialogueTurn:
    trigger_frame: int
    trigger_time_s: float
    text: str


@dataclass
class EvalReport:
    trigger_acc: float | None = None
    tim_val: float | None = None
    fluency: float | None = None
    time_diff_s: float | None = None
    ppl: float | None = None
    bleu1: float | None = None
    bleu4: float | None = None
    rouge_l: float | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _binary(xs) -> np.ndarray:
    out = []
    for x in xs:
        if isinstance(x, str):
            out.append(x in ("respond", "response", "</response>"))
        else:
            out.append(bool(x))
    return np.array(out, dtype=bool)


def greedy_pairs(a: Sequence[float], b: Sequence[float], max_dist: float = math.inf) -> list[tuple[int, int]]:
    cand = sorted((abs(x - y), i, j) for i, x in enumerate(a) for j, y in enumerate(b) if abs(x - y) <= max_dist)
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    return pairs


def trigger_acc(predicted, labels, window_w: int = 0) -> float:
    pred, truth = _binary(predicted), _binary(labels)
    if len(pred) != len(truth):
        raise EvaluationError(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    if window_w < 0:
        raise EvaluationError("window_w must be >= 0")
    t_idx = np.flatnonzero(truth).tolist()
    p_idx = np.flatnonzero(pred).tolist()
    if not t_idx and not p_idx:
        return 1.0
    matched = len(greedy_pairs(t_idx, p_idx, window_w))
    return matched / (len(t_idx) + len(p_idx) - matched)


def tim_val(predicted, labels) -> float:
    pred, truth = _binary(predicted), _binary(labels)
    if len(pred) != len(truth):
        raise EvaluationError(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    if truth.all() or not truth.any():
        raise EvaluationError("timing validity needs both classes in the labels")
    rec_resp = (pred & truth).sum() / truth.sum()
    rec_sil = (~pred & ~truth).sum() / (~truth).sum()
    return float(rec_resp + rec_sil) / 2


def match_turns(turn_times: Sequence[float], event_times: Sequence[float]) -> dict[int, int]:
    """event index -> turn index, greedy one-to-one by nearest time."""
    return {e: t for e, t in greedy_pairs(event_times, turn_times)}


def _turn_times(turns) -> list[float]:
    return [t.trigger_time_s if isinstance(t, DialogueTurn) else float(t) for t in turns]


def time_diff(turns, event_times: Sequence[float], penalty: float | None = None,
              duration_s: float | None = None) -> float:
    if not len(event_times):
        raise EvaluationError("time difference needs at least one event")
    times = _turn_times(turns)
    if penalty is None:
        if duration_s is None:
            duration_s = max(list(event_times) + times) - min(list(event_times) + times)
        penalty = duration_s / len(event_times)
    m = match_turns(times, event_times)
    total = sum(abs(times[m[e]] - et) if e in m else penalty for e, et in enumerate(event_times))
    return total / len(event_times)


def _ngrams(toks: Sequence[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(candidate: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Sentence BLEU, uniform weights, add-one smoothing on zero-match orders n >= 2."""
    if not candidate:
        log.warning("empty candidate scores 0 BLEU")
        return 0.0
    if not references:
        raise EvaluationError("bleu needs at least one reference")
    log_p = 0.0
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            for g, c in _ngrams(ref, n).items():
                max_ref[g] = max(max_ref[g], c)
        hits = sum(min(c, max_ref[g]) for g, c in cand.items())
        total = max(len(candidate) - n + 1, 0)
        if hits == 0:
            if n == 1:
                return 0.0
            hits, total = 1, total + 1
        log_p += math.log(hits / total) / max_n
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str], beta: float = ROUGE_BETA) -> float:
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def token_f1(candidate: Sequence[str], reference: Sequence[str]) -> float:
    common = sum((Counter(candidate) & Counter(reference)).values())
    if common == 0:
        return 0.0
    p = common / len(candidate)
    r = common / len(reference)
    return 2 * p * r / (p + r)


def fluency(turns: Sequence[DialogueTurn], event_times: Sequence[float], reference_texts: Sequence[str]) -> float:
    if not len(event_times):
        raise EvaluationError("fluency needs at least one event")
    if len(reference_texts) != len(event_times):
        raise EvaluationError("one reference text per event is required")
    m = match_turns(_turn_times(turns), event_times)
    scores = [token_f1(turns[m[e]].text.split(), reference_texts[e].split()) if e in m else 0.0
              for e in range(len(event_times))]
    return float(np.mean(scores))


def perplexity(mean_nlls: Sequence[float]) -> float:
    return float(math.exp(np.mean(mean_nlls)))


def evaluate_stream(decisions, labels, turns: Sequence[DialogueTurn], event_frames: Sequence[int],
                    event_texts: Sequence[str], frame_times: Sequence[float], window_w: int = 0,
                    nlls: Sequence[float] | None = None) -> EvalReport:
    """Full report for one stream. Language scores average over matched turns."""
    rep = EvalReport()
    rep.trigger_acc = trigger_acc(decisions, labels, window_w)
    try:
        rep.tim_val = tim_val(decisions, labels)
    except EvaluationError:
        rep.tim_val = None
    if len(event_frames):
        ev_times = [float(frame_times[f]) for f in event_frames]
        duration = float(frame_times[-1] - frame_times[0]) if len(frame_times) else 0.0
        rep.time_diff_s = time_diff(turns, ev_times, duration_s=duration)
        rep.fluency = fluency(turns, ev_times, event_texts)
        m = match_turns(_turn_times(turns), ev_times)
        if m:
            b1, b4, rl = [], [], []
            for e, t in m.items():
                cand, ref = turns[t].text.split(), event_texts[e].split()
                b1.append(bleu(cand, [ref], 1))
                b4.append(bleu(cand, [ref], 4))
                rl.append(rouge_l(cand, ref))
            rep.bleu1, rep.bleu4, rep.rouge_l = map(lambda v: float(np.mean(v)), (b1, b4, rl))
    if nlls:
        rep.ppl = perplexity(nlls)
    return rep


def merge_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Field-wise mean, ignoring fields a stream could not compute."""
    out = EvalReport()
    for name in asdict(out):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        setattr(out, name, float(np.mean(vals)) if vals else None)
    return out

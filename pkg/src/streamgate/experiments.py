"""Toy-scale experiments on the synthetic benchmark.

These drive the acceptance suite and the CLI: an end-to-end train/evaluate
run, the silence-weight sweep and the gate ablation. Every function is
seed-deterministic.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cognition import CognitionContext, sequence_nll, tokenize
from .datagen import StreamSample, imbalance_stats
from .gate import BaseGate, build_gate
from .memory import PoolingPolicy, pool_indices
from .metrics import EvalReport, evaluate_stream, greedy_pairs, merge_reports, tim_val, trigger_acc
from .pipeline import StreamSession, run_stream
from .synthetic import BenchmarkSpec, make_benchmark
from .system import ToySystem, build_system
from .training import TrainConfig, TrainReport, gate_predictions, recommend_ws, stream_tokens, train_stage1, \
    train_stage2

log = logging.getLogger(__name__)

# Stage-2 budgets at toy scale. The ablation and the sweep share a fixed,
# smaller budget so that arms differ in how fast they learn, not only in
# where they end up.
MAIN_STAGE2 = dict(epochs=20, lr=1e-3)
PROBE_STAGE2 = dict(epochs=8, lr=1e-3)


@dataclass
class ToyRun:
    system: ToySystem
    train: list[StreamSample]
    test: list[StreamSample]
    stage1: TrainReport | None = None
    stage2: TrainReport | None = None
    w_s: float = 0.5
    train_tokens: list[np.ndarray] = field(default_factory=list)
    test_tokens: list[np.ndarray] = field(default_factory=list)


def benchmark_pair(n_train: int = 60, n_test: int = 20, num_frames: int = 200, seed: int = 0,
                   **kw) -> tuple[list[StreamSample], list[StreamSample]]:
    train = make_benchmark(BenchmarkSpec(n_streams=n_train, num_frames=num_frames, seed=seed, **kw))
    test = make_benchmark(BenchmarkSpec(n_streams=n_test, num_frames=num_frames, seed=seed + 1, **kw))
    return train, test


def train_perception(train: list[StreamSample], test: list[StreamSample], seed: int = 0,
                     epochs: int = 15, lr: float = 3e-3, batch: int = 4) -> ToyRun:
    """Stage 1 on the training streams, then freeze and cache extractor tokens."""
    sys_ = build_system(seed=seed)
    rep = train_stage1(sys_.epfe, sys_.decoder, train, TrainConfig(stage=1, epochs=epochs, lr=lr, batch=batch,
                                                                   seed=seed))
    run = ToyRun(sys_, train, test, stage1=rep)
    run.train_tokens = stream_tokens(sys_.epfe, train)
    run.test_tokens = stream_tokens(sys_.epfe, test)
    run.w_s = recommend_ws(imbalance_stats(train))
    return run


def fit_gate(run: ToyRun, arch: str = "shallow", layers: int = 4, init: str = "early", seed: int = 0,
             w_s: float | None = None, epochs: int = MAIN_STAGE2["epochs"], lr: float = MAIN_STAGE2["lr"],
             batch: int = 4, attach: bool = True) -> tuple[BaseGate, TrainReport]:
    gate = build_gate(arch, run.system.decoder, layers, init, seed)
    cfg = TrainConfig(stage=2, epochs=epochs, lr=lr, w_s=run.w_s if w_s is None else w_s, batch=batch, seed=seed)
    rep = train_stage2(gate, run.system.epfe, run.train, cfg, run.system.vocab, tokens=run.train_tokens)
    if attach:
        run.system.gate = gate
        run.system.gate_spec = {"arch": arch, "layers": layers, "init": init, "seed": seed}
        run.stage2 = rep
    return gate, rep


def gate_scores(gate: BaseGate, run: ToyRun, window_w: int = 1) -> dict[str, float]:
    """Frame-level gate quality on the held-out streams (batched, no cognition)."""
    ta, tv, rec = [], [], []
    for s, tok in zip(run.test, run.test_tokens):
        pred = gate_predictions(gate, run.system.prompt_ids, tok)
        lab = s.label_array().astype(bool)
        ta.append(trigger_acc(pred, lab, window_w))
        tv.append(tim_val(pred, lab))
        rec.append(float((pred & lab).sum() / lab.sum()))
    return {"trigger_acc": float(np.mean(ta)), "tim_val": float(np.mean(tv)), "recall": float(np.mean(rec))}


@dataclass
class EndToEndResult:
    report: EvalReport
    exact_match: float
    matched_turns: int
    total_turns: int
    wall_s: float


def evaluate_end_to_end(run: ToyRun, window_w: int = 1, policy: PoolingPolicy | None = None,
                        cognition: str = "blocking") -> EndToEndResult:
    """Stream every test sample through the gated runner and score it.

    Caption exact-match counts turns matched to a ground-truth event within
    ``window_w`` frames; spurious turns have no reference and are already
    charged by TriggerAcc.
    """
    t0 = time.perf_counter()
    sys_ = run.system
    policy = policy or PoolingPolicy()
    reports, hits, matched, total = [], 0, 0, 0
    for s in run.test:
        sess = StreamSession(sys_.epfe, sys_.gate, sys_.decoder, s.prompt, sys_.vocab.encode(tokenize(s.prompt)),
                             policy=policy, cognition=cognition)
        turns, decisions, _ = run_stream(sess, s.frames)
        anchors = [e.anchor_frame for e in s.events]
        texts = [e.text for e in s.events]
        pairs = greedy_pairs([t.trigger_frame for t in turns], anchors, window_w)
        matched += len(pairs)
        hits += sum(turns[i].text == texts[j] for i, j in pairs)
        total += len(turns)
        reports.append(evaluate_stream(
            [d.decision for d in decisions], s.labels, turns, anchors, texts,
            [f.timestamp_s for f in s.frames], window_w, nlls=anchor_nlls(sys_, s, policy)))
    return EndToEndResult(merge_reports(reports), hits / matched if matched else 0.0, matched, total,
                          time.perf_counter() - t0)


def anchor_nlls(sys_: ToySystem, sample: StreamSample, policy: PoolingPolicy) -> list[float]:
    """Teacher-forced caption NLL at each ground-truth anchor, windows since the previous anchor."""
    tokens = sys_.epfe.tokens(sample.frames)
    out, prev, turns = [], -1, []
    for ev in sample.events:
        window = tokens[prev + 1: ev.anchor_frame + 1]
        pooled = [window[i].vector for i in pool_indices(len(window), policy)]
        ctx = CognitionContext(tokenize(sample.prompt), pooled, list(turns))
        out.append(sequence_nll(sys_.decoder, ctx, tokenize(ev.text) + ["<eos>"]))
        turns.append(tokenize(ev.text))
        prev = ev.anchor_frame
    return out


def ws_sweep(run: ToyRun, ws_values, seeds=range(5), epochs: int = PROBE_STAGE2["epochs"],
             lr: float = PROBE_STAGE2["lr"], window_w: int = 1) -> list[dict]:
    rows = []
    for ws in ws_values:
        for seed in seeds:
            gate, _ = fit_gate(run, seed=seed, w_s=ws, epochs=epochs, lr=lr, attach=False)
            rows.append({"w_s": float(ws), "seed": int(seed), **gate_scores(gate, run, window_w)})
            log.info("w_s %.3g seed %d: %s", ws, seed, rows[-1])
    return rows


ABLATION_ARMS = (
    ("shallow", "early"), ("shallow", "skip"), ("shallow", "random"),
    ("linear", "-"), ("mlp", "-"), ("transformer", "-"), ("xattn", "-"),
)


def gate_ablation(run: ToyRun, arms=ABLATION_ARMS, seeds=range(3), layers: int = 4,
                  epochs: int = PROBE_STAGE2["epochs"], lr: float = PROBE_STAGE2["lr"], window_w: int = 1) -> list[dict]:
    rows = []
    for arch, init in arms:
        for seed in seeds:
            gate, _ = fit_gate(run, arch, layers, init if init != "-" else "early", seed,
                               epochs=epochs, lr=lr, attach=False)
            rows.append({"arch": arch, "init": init, "seed": int(seed), **gate_scores(gate, run, window_w)})
            log.info("%s/%s seed %d: %s", arch, init, seed, rows[-1])
    return rows


def mean_by(rows: list[dict], key, metric: str) -> dict:
    groups: dict = {}
    for r in rows:
        k = tuple(r[x] for x in key) if isinstance(key, tuple) else r[key]
        groups.setdefault(k, []).append(r[metric])
    return {k: float(np.mean(v)) for k, v in groups.items()}

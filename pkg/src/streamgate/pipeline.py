"""Streaming runner, per-step invocation baseline and throughput harness.

Event-gated mode does constant work per frame (one extractor step, one gate
pass) and only calls the cognition backend on a respond decision. The
baseline instead runs the full decoder over every past frame at every step.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .cognition import (RESPONSE, SILENCE, CognitionBackend, CognitionContext, ContextOverflowError,
                        ToyDecoder, detokenize, tokenize)
from .epfe import EPFE, PerceptionToken, SsmState, epfe_step
from .features import FeatureFrame, SyntheticStreamSpec, generate_synthetic_stream
from .gate import BaseGate, GateDecision, gate_step
from .memory import PerceptionMemory, PoolingPolicy, pool
from .metrics import DialogueTurn

log = logging.getLogger(__name__)

COGNITION_MODES = ("blocking", "async")


class StreamError(RuntimeError):
    def __init__(self, frame_index: int, phase: str, cause: BaseException):
        super().__init__(f"stream aborted at frame {frame_index} during {phase}: {cause}")
        self.frame_index = frame_index
        self.phase = phase
        self.__cause__ = cause


@dataclass
class LatencyRecord:
    frame_index: int
    perception_us: float
    gate_us: float
    cognition_us: float | None = None


@dataclass
class StreamSession:
    epfe: EPFE
    gate: BaseGate | Callable[[PerceptionToken], GateDecision]
    backend: CognitionBackend | None
    prompt: str
    prompt_ids: list[int]
    policy: PoolingPolicy = field(default_factory=PoolingPolicy)
    max_len: int = 8
    cognition: str = "blocking"
    memory: PerceptionMemory = field(default_factory=PerceptionMemory)
    state: SsmState | None = None
    turns: list[DialogueTurn] = field(default_factory=list)
    decisions: list[GateDecision] = field(default_factory=list)
    latency: list[LatencyRecord] = field(default_factory=list)
    cognition_calls: int = 0

    def __post_init__(self):
        if self.cognition not in COGNITION_MODES:
            raise ValueError(f"cognition mode must be one of {COGNITION_MODES}")
        if self.state is None:
            self.state = self.epfe.initial_state()

    def decide(self, token: PerceptionToken) -> GateDecision:
        if isinstance(self.gate, BaseGate):
            return gate_step(self.gate, self.prompt_ids, token)
        return self.gate(token)


def _us(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e6


def _respond(session: StreamSession, pooled: list[PerceptionToken], frame: FeatureFrame,
             rec: LatencyRecord) -> DialogueTurn:
    t0 = time.perf_counter()
    ctx = CognitionContext(
        prompt_tokens=tokenize(session.prompt),
        pooled_tokens=[t.vector for t in pooled],
        prior_turns=[tokenize(t.text) for t in session.turns],
    )
    text = detokenize(session.backend.decode_response(ctx, session.max_len))
    turn = DialogueTurn(frame.frame_index, frame.timestamp_s, text)
    session.turns.append(turn)
    session.cognition_calls += 1
    rec.cognition_us = _us(t0)
    return turn


def _process(session: StreamSession, frame: FeatureFrame, pool_exec: ThreadPoolExecutor | None,
             pending: list[Future]):
    phase = "perception"
    try:
        t0 = time.perf_counter()
        token, session.state = epfe_step(session.epfe, session.state, frame)
        session.memory.append(token)
        rec = LatencyRecord(frame.frame_index, _us(t0), 0.0)
        phase = "gate"
        t0 = time.perf_counter()
        dec = session.decide(token)
        rec.gate_us = _us(t0)
        session.decisions.append(dec)
        session.latency.append(rec)
        if not dec.respond or session.backend is None:
            return
        phase = "cognition"
        # snapshot first, then move the trigger mark
        pooled = pool(session.memory, session.policy)
        session.memory.mark_trigger(frame.frame_index)
        if pool_exec is None:
            _respond(session, pooled, frame, rec)
        else:
            # one worker, FIFO: each job sees every earlier turn, as in blocking mode
            pending.append(pool_exec.submit(_respond, session, pooled, frame, rec))
    except Exception as exc:  # noqa: BLE001 - rewrapped with context
        raise StreamError(frame.frame_index, phase, exc) from exc


def run_stream(session: StreamSession, frames: Iterable[FeatureFrame]):
    """Process frames in order; returns (turns, decisions, latency log)."""
    pending: list[Future] = []
    pool_exec = ThreadPoolExecutor(max_workers=1) if session.cognition == "async" else None
    try:
        for frame in frames:
            _process(session, frame, pool_exec, pending)
        for fut in pending:
            fut.result()
    finally:
        if pool_exec is not None:
            pool_exec.shutdown(wait=True)
    return session.turns, session.decisions, session.latency


def scheduled_gate(respond_frames: Iterable[int]) -> Callable[[PerceptionToken], GateDecision]:
    """Oracle/stub gate that responds exactly at the given frames."""
    wanted = set(int(f) for f in respond_frames)

    def decide(token: PerceptionToken) -> GateDecision:
        hit = token.frame_index in wanted
        return GateDecision(token.frame_index, "respond" if hit else "silence",
                            np.array([0.0, 1.0]) if hit else np.array([1.0, 0.0]))
    return decide


# per-step baseline ----------------------------------------------------------

@dataclass
class BaselineResult:
    turns: list[DialogueTurn]
    decisions: list[GateDecision]
    latency: list[LatencyRecord]
    overflow_frame: int | None = None


def _judge(decoder: ToyDecoder, vectors: np.ndarray, prompt: list[str], prior: list[list[str]]) -> np.ndarray:
    """Full-context forward; returns (silence, response) logits at the first generated slot."""
    ctx = CognitionContext(prompt_tokens=prompt, pooled_tokens=list(vectors), prior_turns=prior)
    lay, vecs = decoder.layout(ctx, [SILENCE])
    with nx.no_grad():
        logits, starts = decoder.batch_logits(nx.Tensor(vecs), [lay])
    row = logits.data[0, starts[0]]
    v = decoder.vocab
    return np.array([row[v.id(SILENCE)], row[v.id(RESPONSE)]])


def run_per_step_baseline(decoder: ToyDecoder, epfe: EPFE, frames: Sequence[FeatureFrame], prompt: str,
                          schedule: Iterable[int] | None = None, policy: PoolingPolicy | None = None,
                          max_len: int = 8, measure: Callable[[int], bool] | None = None) -> BaselineResult:
    """Per-step invocation: the decoder reads every past projection plus the prompt at every frame.

    ``schedule`` replaces the decoder's own silence/response judgment (the
    forward pass still runs); ``policy`` pools the respond context exactly as
    the gated runner does, otherwise the whole history is used. ``measure``
    selects the frames that actually run the decoder, so a latency probe at a
    late frame need not pay for every earlier one; perception still runs on
    every frame.
    """
    prompt_toks = tokenize(prompt)
    sched = None if schedule is None else set(int(f) for f in schedule)
    state = epfe.initial_state()
    mem = PerceptionMemory()
    res = BaselineResult([], [], [])
    history: list[np.ndarray] = []
    for frame in frames:
        t0 = time.perf_counter()
        token, state = epfe_step(epfe, state, frame)
        mem.append(token)
        history.append(token.vector)
        rec = LatencyRecord(frame.frame_index, _us(t0), 0.0)
        if measure is not None and not measure(frame.frame_index):
            continue
        t0 = time.perf_counter()
        prior = [tokenize(t.text) for t in res.turns]
        try:
            logits = _judge(decoder, np.stack(history), prompt_toks, prior)
        except ContextOverflowError as exc:
            log.warning("per-step baseline overflowed at frame %d: %s", frame.frame_index, exc)
            res.overflow_frame = frame.frame_index
            break
        if sched is not None:
            hit = frame.frame_index in sched
            logits = np.array([0.0, 1.0]) if hit else np.array([1.0, 0.0])
        dec = GateDecision(frame.frame_index, "respond" if logits[1] > logits[0] else "silence", logits)
        rec.gate_us = _us(t0)
        res.decisions.append(dec)
        res.latency.append(rec)
        if dec.respond:
            t0 = time.perf_counter()
            if policy is not None:
                vecs = [t.vector for t in pool(mem, policy)]
                mem.mark_trigger(frame.frame_index)
            else:
                vecs = list(history)
            ctx = CognitionContext(prompt_tokens=prompt_toks, pooled_tokens=vecs, prior_turns=prior)
            try:
                text = detokenize(decoder.decode_response(ctx, max_len))
            except ContextOverflowError as exc:
                log.warning("per-step baseline overflowed at frame %d: %s", frame.frame_index, exc)
                res.overflow_frame = frame.frame_index
                break
            res.turns.append(DialogueTurn(frame.frame_index, frame.timestamp_s, text))
            rec.cognition_us = _us(t0)
    return res


# throughput -----------------------------------------------------------------

@dataclass
class BenchResult:
    mode: str
    fps_in: float
    wall_s_per_video_second: float
    frames: int = 0

    def __post_init__(self):
        if self.wall_s_per_video_second <= 0:
            raise ValueError("wall time must be positive")

    @property
    def realtime(self) -> bool:
        return self.wall_s_per_video_second < 1.0


BENCH_MODES = ("event_gated", "per_step")


def bench_frames(fps: float, duration_s: float, dim: int, seed: int = 0) -> list[FeatureFrame]:
    n = max(1, int(round(fps * duration_s)))
    seg = max(1, n // 4)
    spec = SyntheticStreamSpec(seed=seed, num_frames=n, fps=fps, event_segments=[(seg, 2 * seg, 0)], dim=dim)
    return generate_synthetic_stream(spec)


def bench_throughput(modes: Sequence[str], fps_list: Sequence[float], duration_s: float, epfe: EPFE,
                     decoder: ToyDecoder, gate: BaseGate, prompt: str, seed: int = 0,
                     policy: PoolingPolicy | None = None) -> list[BenchResult]:
    """Wall seconds spent per second of video for each (mode, fps)."""
    out = []
    prompt_ids = decoder.vocab.encode(tokenize(prompt))
    for mode in modes:
        if mode not in BENCH_MODES:
            raise ValueError(f"unknown bench mode {mode!r}")
        for fps in fps_list:
            frames = bench_frames(fps, duration_s, epfe.cfg.d_spat, seed)
            t0 = time.perf_counter()
            if mode == "event_gated":
                sess = StreamSession(epfe, gate, decoder, prompt, prompt_ids, policy=policy or PoolingPolicy())
                run_stream(sess, frames)
            else:
                run_per_step_baseline(decoder, epfe, frames, prompt, policy=policy)
            wall = max(time.perf_counter() - t0, 1e-9)
            video_s = len(frames) / fps
            out.append(BenchResult(mode, float(fps), wall / video_s, len(frames)))
            log.info("%s @ %g fps: %.4f s per video second", mode, fps, out[-1].wall_s_per_video_second)
    return out


def paired_latency(session: StreamSession, frames: Sequence[FeatureFrame]) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame perception+gate latency alongside a fixed reference step (both in us).

    After every frame the same extractor+gate work is repeated from the initial
    state on the first frame. Machine-speed drift hits both series alike, so
    their difference isolates any dependence on stream position.
    """
    if session.cognition != "blocking":
        raise ValueError("paired latency needs blocking cognition")
    s0 = session.epfe.initial_state()
    lat, ref = [], []
    for frame in frames:
        _process(session, frame, None, [])
        rec = session.latency[-1]
        lat.append(rec.perception_us + rec.gate_us)
        t0 = time.perf_counter()
        tok, _ = epfe_step(session.epfe, s0, frames[0])
        session.decide(tok)
        ref.append(_us(t0))
    return np.array(lat), np.array(ref)


def latency_slope(frame_index, latency_us, reference_us=None, blocks: int = 20) -> tuple[float, float]:
    """(slope in us per 1000 frames, median us).

    The slope is fit to per-block medians so scheduler hiccups do not
    dominate; with a reference series it is fit to the paired difference.
    """
    idx = np.asarray(frame_index, dtype=np.float64)
    lat = np.asarray(latency_us, dtype=np.float64)
    y = lat if reference_us is None else lat - np.asarray(reference_us, dtype=np.float64)
    parts = np.array_split(np.arange(len(idx)), blocks)
    xs = np.array([idx[p].mean() for p in parts])
    ys = np.array([np.median(y[p]) for p in parts])
    slope = np.polyfit(xs, ys, 1)[0]
    return float(slope * 1000.0), float(np.median(lat))

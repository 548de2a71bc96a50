"""Two-stage training.

Stage 1 trains the feature extractor and the decoder together: for every
event, the extractor runs over the stream, the window since the previous
event is pooled, and the caption is scored under teacher forcing.

Stage 2 freezes both and trains only the gate with a per-frame cross entropy
weighted ``w_s`` on silence and ``1 - w_s`` on response.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .cognition import EOS, CognitionContext, SequenceLayout, ToyDecoder, tokenize
from .datagen import ImbalanceStats, StreamSample
from .epfe import EPFE
from .features import stack_features
from .gate import BaseGate
from .memory import PoolingPolicy, pool_indices

log = logging.getLogger(__name__)


class TrainingDivergedError(nx.TrainingError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray]):
        super().__init__(message)
        self.last_good = last_good


DEFAULT_LR = {1: 2e-3, 2: 2e-4}


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 1
    lr: float | None = None  # stage default when unset
    cosine: bool = True
    min_lr: float = 0.0
    w_s: float = 0.5
    seed: int = 0
    batch: int = 4
    optimizer: str = "adam"
    clip: float = 1.0
    pool_strategy: str = "uniform"
    pool_capacity: int = 16

    def __post_init__(self):
        if self.lr is None:
            self.lr = DEFAULT_LR[self.stage] if self.stage in DEFAULT_LR else 2e-3
        if not 0 < self.w_s < 1:
            raise ValueError(f"w_s must lie in (0, 1), got {self.w_s}")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def policy(self) -> PoolingPolicy:
        return PoolingPolicy(self.pool_strategy, self.pool_capacity)


def parse_config(text: str, **overrides) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    kw: dict = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        kw[key] = _coerce(types[key], value)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kw)


def _coerce(type_name, value: str):
    t = str(type_name)
    if "bool" in t:
        return value.lower() in ("1", "true", "yes", "on")
    if "int" in t:
        return int(value)
    if "float" in t:
        return float(value)
    return value


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    checksum: str = ""
    wall_s: float = 0.0

    def write_log(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for i, loss in enumerate(self.step_losses):
                w.writerow([i, f"{loss:.10g}"])


def recommend_ws(stats: ImbalanceStats | float) -> float:
    ratio = stats.ratio_r if isinstance(stats, ImbalanceStats) else float(stats)
    if ratio < 1:
        log.warning("silence:response ratio %.3g < 1; falling back to w_s = 0.5", ratio)
        return 0.5
    return float(min(max(10.0 / ratio, 0.01), 0.5))


class _Optim:
    def __init__(self, params: list[nx.Parameter], cfg: TrainConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total = total_steps
        self.step_no = 0
        self.adam = nx.Adam(params) if cfg.optimizer == "adam" else None

    def step(self):
        cfg = self.cfg
        lr = nx.cosine_lr(cfg.lr, self.step_no, self.total, cfg.min_lr) if cfg.cosine else cfg.lr
        for p in self.params:
            if p.value.grad is None:
                p.value.grad = np.zeros_like(p.value.data)
        if cfg.clip > 0:
            nx.clip_grad_norm(self.params, cfg.clip)
        if self.adam is not None:
            self.adam.step(lr)
        else:
            nx.sgd_step(self.params, lr)
        self.step_no += 1


def _snapshot(named: dict[str, nx.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in named.items()}


def _batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _frames_array(samples: Sequence[StreamSample]) -> np.ndarray:
    """(B, T_max, D) features, zero-padded at the end; padding never reaches earlier tokens."""
    arrs = [stack_features(s.frames) for s in samples]
    t_max = max(a.shape[0] for a in arrs)
    out = np.zeros((len(arrs), t_max, arrs[0].shape[1]))
    for i, a in enumerate(arrs):
        out[i, : a.shape[0]] = a
    return out


def event_layouts(sample: StreamSample, decoder: ToyDecoder, policy: PoolingPolicy,
                  row_offset: int = 0) -> list[SequenceLayout]:
    """One teacher-forced caption sequence per event; vector rows index the stream's tokens."""
    layouts = []
    prompt = tokenize(sample.prompt)
    prev = -1
    turns: list[list[str]] = []
    for ev in sample.events:
        window = list(range(prev + 1, ev.anchor_frame + 1))
        rows = [row_offset + window[i] for i in pool_indices(len(window), policy)]
        lay, _ = decoder.layout(_ctx(prompt, turns), tokenize(ev.text) + [EOS])
        lay.vector_rows = rows
        layouts.append(lay)
        turns.append(tokenize(ev.text))
        prev = ev.anchor_frame
    return layouts


def _ctx(prompt, turns):
    return CognitionContext(prompt_tokens=prompt, prior_turns=list(turns))


def stage1_loss(epfe: EPFE, decoder: ToyDecoder, samples: Sequence[StreamSample],
                policy: PoolingPolicy) -> nx.Tensor:
    feats = _frames_array(samples)
    b, t, _ = feats.shape
    last = max(ev.anchor_frame for s in samples for ev in s.events) + 1 if any(s.events for s in samples) else 0
    tokens, _ = epfe.scan(feats[:, :last])
    table = nx.reshape(tokens, (b * last, -1))
    layouts = []
    for i, s in enumerate(samples):
        layouts += event_layouts(s, decoder, policy, row_offset=i * last)
    if not layouts:
        return nx.Tensor(0.0)
    return decoder.layouts_nll(table, layouts)


def train_stage1(epfe: EPFE, decoder: ToyDecoder, dataset: Sequence[StreamSample],
                 cfg: TrainConfig) -> TrainReport:
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    t0 = time.perf_counter()
    named = {**epfe.named_parameters(), **decoder.named_parameters()}
    params = nx.as_parameters(named)
    rng = np.random.default_rng([cfg.seed, 1])
    steps_per_epoch = -(-len(dataset) // cfg.batch)
    opt = _Optim(params, cfg, cfg.epochs * steps_per_epoch)
    rep = TrainReport()
    good = _snapshot(named)
    policy = cfg.policy
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(len(dataset), cfg.batch, rng):
            loss = stage1_loss(epfe, decoder, [dataset[i] for i in idx], policy)
            val = loss.item()
            if not np.isfinite(val):
                nx.assign(named, good)
                raise TrainingDivergedError(f"stage-1 loss became {val} in epoch {epoch}", good)
            if loss.requires_grad:
                loss.backward()
            opt.step()
            good = _snapshot(named)
            losses.append(val)
            rep.step_losses.append(val)
        rep.epoch_losses.append(float(np.mean(losses)))
        log.info("stage 1 epoch %d loss %.4f", epoch, rep.epoch_losses[-1])
    rep.checksum = nx.checksum(named)
    rep.wall_s = time.perf_counter() - t0
    return rep


def stream_tokens(epfe: EPFE, samples: Sequence[StreamSample]) -> list[np.ndarray]:
    """Frozen perception tokens, one (T, d_out) array per stream."""
    with nx.no_grad():
        feats = _frames_array(samples)
        tokens, _ = epfe.scan(feats)
    return [tokens.data[i, : len(s.frames)] for i, s in enumerate(samples)]


def stage2_loss(gate: BaseGate, prompt_ids, tokens: np.ndarray, labels: np.ndarray, w_s: float) -> nx.Tensor:
    logits = gate.logits(prompt_ids, nx.Tensor(tokens))
    return nx.cross_entropy(logits, labels, class_weights=[w_s, 1.0 - w_s])


def train_stage2(gate: BaseGate, epfe: EPFE, dataset: Sequence[StreamSample], cfg: TrainConfig,
                 vocab, tokens: Sequence[np.ndarray] | None = None) -> TrainReport:
    """Only gate parameters move; ``tokens`` may carry precomputed frozen EPFE output."""
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    t0 = time.perf_counter()
    named = gate.named_parameters()
    params = nx.as_parameters(named)
    if tokens is None:
        tokens = stream_tokens(epfe, dataset)
    labels = [s.label_array() for s in dataset]
    prompts = [vocab.encode(tokenize(s.prompt)) for s in dataset]
    rng = np.random.default_rng([cfg.seed, 2])
    steps_per_epoch = -(-len(dataset) // cfg.batch)
    opt = _Optim(params, cfg, cfg.epochs * steps_per_epoch)
    rep = TrainReport()
    good = _snapshot(named)
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(len(dataset), cfg.batch, rng):
            # streams sharing a prompt go through one forward pass
            groups: dict[tuple, list[int]] = {}
            for i in idx:
                groups.setdefault(tuple(prompts[i]), []).append(int(i))
            total = None
            n_frames = sum(len(labels[i]) for i in idx)
            for prompt, members in groups.items():
                tok = np.concatenate([tokens[i] for i in members])
                lab = np.concatenate([labels[i] for i in members])
                part = nx.mul(stage2_loss(gate, list(prompt), tok, lab, cfg.w_s), len(lab) / n_frames)
                total = part if total is None else nx.add(total, part)
            val = total.item()
            if not np.isfinite(val):
                nx.assign(named, good)
                raise TrainingDivergedError(f"stage-2 loss became {val} in epoch {epoch}", good)
            total.backward()
            opt.step()
            good = _snapshot(named)
            losses.append(val)
            rep.step_losses.append(val)
        rep.epoch_losses.append(float(np.mean(losses)))
        log.info("stage 2 epoch %d loss %.4f", epoch, rep.epoch_losses[-1])
    rep.checksum = nx.checksum(named)
    rep.wall_s = time.perf_counter() - t0
    return rep


def gate_predictions(gate: BaseGate, prompt_ids, tokens: np.ndarray) -> np.ndarray:
    """Batched per-frame respond flags (ties go to silence)."""
    with nx.no_grad():
        lg = gate.logits(prompt_ids, nx.Tensor(tokens)).data
    return lg[:, 1] > lg[:, 0]

"""Seeded synthetic streaming benchmark.

Each stream holds a few non-overlapping event segments drawn from a small set
of classes; every frame inside a segment carries a per-frame caption of its
class. The captions go through the regular dataset construction, so the
event anchors and labels come out of the same code path real annotations use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import CaptionRecord, StreamSample, build_sample
from .features import SyntheticStreamSpec, generate_synthetic_stream

CAPTIONS = ("chef chops", "player scores", "door opens", "dog barks", "car stops", "light flashes")
PROMPT = "narrate each new event"


@dataclass
class BenchmarkSpec:
    n_streams: int = 60
    num_frames: int = 200
    n_classes: int = 3
    events_min: int = 2
    events_max: int = 3
    seg_min: int = 15
    seg_max: int = 40
    gap_min: int = 12
    noise_std: float = 0.3
    fps: float = 2.0
    dim: int = 64
    seed: int = 0
    anchor_seed: int = 0
    prompt: str = PROMPT


def _segments(rng: np.random.Generator, spec: BenchmarkSpec) -> list[tuple[int, int, int]]:
    n_events = int(rng.integers(spec.events_min, spec.events_max + 1))
    for _ in range(1000):
        lengths = rng.integers(spec.seg_min, spec.seg_max + 1, size=n_events)
        slack = spec.num_frames - lengths.sum() - spec.gap_min * (n_events + 1)
        if slack < 0:
            continue
        cuts = np.sort(rng.integers(0, slack + 1, size=n_events))
        segs = []
        pos = spec.gap_min
        prev_cut = 0
        prev_cls = -1
        for length, cut in zip(lengths, cuts):
            pos += cut - prev_cut
            prev_cut = cut
            cls = int(rng.integers(spec.n_classes))
            while cls == prev_cls and spec.n_classes > 1:
                cls = int(rng.integers(spec.n_classes))
            segs.append((int(pos), int(pos + length), cls))
            prev_cls = cls
            pos += length + spec.gap_min
        return segs
    raise ValueError("stream too short for the requested events")


def make_stream(spec: BenchmarkSpec, index: int) -> StreamSample:
    rng = np.random.default_rng([spec.seed, index, 11])
    segs = _segments(rng, spec)
    stream_spec = SyntheticStreamSpec(
        seed=int(rng.integers(2 ** 31)), num_frames=spec.num_frames, fps=spec.fps,
        event_segments=segs, noise_std=spec.noise_std, dim=spec.dim, anchor_seed=spec.anchor_seed)
    frames = generate_synthetic_stream(stream_spec)
    captions = [CaptionRecord(CAPTIONS[cls], frames[f].timestamp_s)
                for start, end, cls in segs for f in range(start, end)]
    sample = build_sample(captions, [f.timestamp_s for f in frames], spec.prompt,
                          stream_id=f"synth-{spec.seed}-{index}", fps=spec.fps)
    sample.frames = frames
    return sample


def make_benchmark(spec: BenchmarkSpec) -> list[StreamSample]:
    return [make_stream(spec, i) for i in range(spec.n_streams)]


def two_event_stream(noise_std: float = 0.01, frames_per_event: int = 50, classes=(0, 1),
                     dim: int = 64, seed: int = 5, anchor_seed: int = 0) -> tuple[list, list[tuple[int, int]]]:
    """Two back-to-back events; returns (frames, [(start, end), ...])."""
    n = frames_per_event * len(classes)
    segs = [(i * frames_per_event, (i + 1) * frames_per_event, c) for i, c in enumerate(classes)]
    spec = SyntheticStreamSpec(seed=seed, num_frames=n, event_segments=segs, noise_std=noise_std,
                               dim=dim, anchor_seed=anchor_seed)
    return generate_synthetic_stream(spec), [(s, e) for s, e, _ in segs]

"""Streaming dataset construction from timestamped caption annotations.

Adjacent identical captions collapse to one event anchored at the run's first
timestamp; each event then labels the earliest frame not before that time as
a response frame. Every other frame is silence.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import load_feature_file

log = logging.getLogger(__name__)

SILENCE_LABEL, RESPONSE_LABEL = "silence", "response"


class CaptionInputError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class CaptionRecord:
    text: str
    time_s: float


def normalize_text(text: str) -> str:
    return " ".join(text.split())


@dataclass
class Event:
    text: str
    anchor_frame: int


@dataclass
class StreamSample:
    prompt: str
    events: list[Event]
    labels: list[str]
    features: str = ""
    stream_id: str = ""
    fps: float = 2.0
    # in-memory FeatureFrame list; not serialized
    frames: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n_resp = sum(1 for lab in self.labels if lab == RESPONSE_LABEL)
        if n_resp != len(self.events):
            raise DatasetError(f"{n_resp} response labels for {len(self.events)} events")
        for ev in self.events:
            if self.labels[ev.anchor_frame] != RESPONSE_LABEL:
                raise DatasetError(f"event {ev.text!r} anchor frame {ev.anchor_frame} is not labeled response")

    def label_array(self) -> np.ndarray:
        return np.array([lab == RESPONSE_LABEL for lab in self.labels], dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "stream_id": self.stream_id, "prompt": self.prompt, "fps": self.fps,
            "events": [{"text": e.text, "anchor_frame": e.anchor_frame} for e in self.events],
            "labels": self.labels, "features": self.features,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StreamSample":
        return cls(
            prompt=obj["prompt"],
            events=[Event(e["text"], int(e["anchor_frame"])) for e in obj["events"]],
            labels=list(obj["labels"]), features=obj.get("features", ""),
            stream_id=obj.get("stream_id", ""), fps=float(obj.get("fps", 2.0)),
        )


@dataclass
class ImbalanceStats:
    silence_count: int
    response_count: int

    @property
    def ratio_r(self) -> float:
        return self.silence_count / self.response_count


def dedup_captions(captions: Sequence[CaptionRecord]) -> list[CaptionRecord]:
    for i in range(1, len(captions)):
        if captions[i].time_s < captions[i - 1].time_s:
            raise CaptionInputError(f"caption {i} at {captions[i].time_s}s precedes caption {i - 1}")
    out: list[CaptionRecord] = []
    for rec in captions:
        text = normalize_text(rec.text)
        if out and out[-1].text == text:
            continue
        out.append(CaptionRecord(text, rec.time_s))
    return out


def label_frames(events: Sequence[CaptionRecord], frame_times: Sequence[float]) -> list[str]:
    times = np.asarray(frame_times, dtype=np.float64)
    if len(times) and np.any(np.diff(times) <= 0):
        raise DatasetError("frame times must be strictly increasing")
    labels = [SILENCE_LABEL] * len(times)
    owner: dict[int, str] = {}
    for ev in events:
        if len(times) == 0 or ev.time_s < times[0] or ev.time_s > times[-1]:
            raise DatasetError(f"event {ev.text!r} at {ev.time_s}s lies outside the frame range")
        idx = int(np.searchsorted(times, ev.time_s, side="left"))
        if idx in owner:
            raise DatasetError(f"event {ev.text!r} collides with {owner[idx]!r} at frame {idx}")
        owner[idx] = ev.text
        labels[idx] = RESPONSE_LABEL
    return labels


def anchor_frames(events: Sequence[CaptionRecord], frame_times: Sequence[float]) -> list[int]:
    times = np.asarray(frame_times, dtype=np.float64)
    return [int(np.searchsorted(times, ev.time_s, side="left")) for ev in events]


def build_sample(captions: Sequence[CaptionRecord], frame_times: Sequence[float], prompt: str,
                 features: str = "", stream_id: str = "", fps: float = 2.0) -> StreamSample:
    events = dedup_captions(captions)
    labels = label_frames(events, frame_times)
    anchors = anchor_frames(events, frame_times)
    return StreamSample(prompt, [Event(e.text, a) for e, a in zip(events, anchors)], labels,
                        features=features, stream_id=stream_id, fps=fps)


def imbalance_stats(samples: Iterable[StreamSample]) -> ImbalanceStats:
    samples = list(samples)
    if not samples:
        raise DatasetError("empty dataset")
    resp = sum(s.labels.count(RESPONSE_LABEL) for s in samples)
    sil = sum(len(s.labels) for s in samples) - resp
    if resp == 0:
        raise DatasetError("dataset has no response labels")
    if sil == 0:
        log.warning("dataset has no silence labels; ratio is degenerate")
        return ImbalanceStats(resp, resp)
    return ImbalanceStats(sil, resp)


# files ----------------------------------------------------------------------

def read_captions(path: str | Path) -> list[CaptionRecord]:
    out = []
    for ln in Path(path).read_text().splitlines():
        if ln.strip():
            obj = json.loads(ln)
            out.append(CaptionRecord(str(obj["text"]), float(obj["time_s"])))
    return out


def write_captions(path: str | Path, captions: Iterable[CaptionRecord]):
    with open(path, "w") as fh:
        for c in captions:
            fh.write(json.dumps({"text": c.text, "time_s": c.time_s}) + "\n")


def write_dataset(path: str | Path, samples: Iterable[StreamSample]):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_dataset(path: str | Path) -> list[StreamSample]:
    return [StreamSample.from_json(json.loads(ln)) for ln in Path(path).read_text().splitlines() if ln.strip()]


def feature_path(sample: StreamSample, dataset_path: str | Path) -> Path:
    """Feature references are relative to the dataset file unless absolute."""
    p = Path(sample.features)
    return p if p.is_absolute() else Path(dataset_path).parent / p


def attach_frames(samples: Sequence[StreamSample], dataset_path: str | Path) -> list[StreamSample]:
    cache: dict[Path, list] = {}
    for s in samples:
        p = feature_path(s, dataset_path)
        if p not in cache:
            cache[p] = load_feature_file(p)
        s.frames = cache[p]
        if len(s.frames) != len(s.labels):
            raise DatasetError(f"stream {s.stream_id!r}: {len(s.frames)} frames but {len(s.labels)} labels")
    return list(samples)

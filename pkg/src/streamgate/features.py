"""Per-frame spatial feature vectors: synthetic generation and the SGF1 file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FEATURE_MAGIC = b"SGF1"
DEFAULT_DIM = 64
DEFAULT_FPS = 2.0


class SpecError(ValueError):
    pass


class FeatureFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class FeatureFrame:
    frame_index: int
    timestamp_s: float
    features: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, FeatureFrame):
            return NotImplemented
        return (self.frame_index == other.frame_index
                and self.timestamp_s == other.timestamp_s
                and np.array_equal(self.features, other.features))


@dataclass
class SyntheticStreamSpec:
    seed: int
    num_frames: int
    fps: float = DEFAULT_FPS
    event_segments: list[tuple[int, int, int]] = field(default_factory=list)
    noise_std: float = 0.1
    dim: int = DEFAULT_DIM
    # anchors are shared by every stream built with the same anchor_seed
    anchor_seed: int = 0

    def validate(self):
        if self.num_frames < 0 or self.fps <= 0 or self.dim < 1 or self.noise_std < 0:
            raise SpecError("num_frames >= 0, fps > 0, dim >= 1 and noise_std >= 0 are required")
        segs = sorted(self.event_segments)
        for start, end, cls in segs:
            if not 0 <= start < end <= self.num_frames:
                raise SpecError(f"segment ({start}, {end}) outside [0, {self.num_frames})")
            if cls < 0:
                raise SpecError(f"negative event class {cls}")
        for (s0, e0, _), (s1, _, _) in zip(segs, segs[1:]):
            if s1 < e0:
                raise SpecError(f"overlapping segments starting at frames {s0} and {s1}")

    def to_json(self) -> dict:
        return {
            "seed": self.seed, "num_frames": self.num_frames, "fps": self.fps,
            "event_segments": [list(s) for s in self.event_segments],
            "noise_std": self.noise_std, "dim": self.dim, "anchor_seed": self.anchor_seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticStreamSpec":
        return cls(
            seed=int(obj["seed"]), num_frames=int(obj["num_frames"]),
            fps=float(obj.get("fps", DEFAULT_FPS)),
            event_segments=[tuple(int(v) for v in s) for s in obj.get("event_segments", [])],
            noise_std=float(obj.get("noise_std", 0.1)), dim=int(obj.get("dim", DEFAULT_DIM)),
            anchor_seed=int(obj.get("anchor_seed", 0)),
        )


def class_anchor(event_class: int, dim: int = DEFAULT_DIM, anchor_seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([anchor_seed, 7919, event_class])
    return rng.standard_normal(dim)


def generate_synthetic_stream(spec: SyntheticStreamSpec) -> list[FeatureFrame]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    feats = rng.standard_normal((spec.num_frames, spec.dim)) * spec.noise_std
    for start, end, cls in spec.event_segments:
        feats[start:end] += class_anchor(cls, spec.dim, spec.anchor_seed)
    return [FeatureFrame(i, i / spec.fps, feats[i]) for i in range(spec.num_frames)]


def stack_features(frames: Sequence[FeatureFrame]) -> np.ndarray:
    if not frames:
        return np.zeros((0, 0))
    return np.stack([f.features for f in frames])


def write_feature_file(path: str | Path, frames: Sequence[FeatureFrame]):
    dim = len(frames[0].features) if frames else 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IQ", dim, len(frames)))
        for f in frames:
            if len(f.features) != dim:
                raise SpecError(f"frame {f.frame_index} has dimension {len(f.features)}, expected {dim}")
            fh.write(struct.pack("<qd", f.frame_index, f.timestamp_s))
            fh.write(np.ascontiguousarray(f.features, dtype="<f8").tobytes())


def load_feature_file(path: str | Path) -> list[FeatureFrame]:
    buf = Path(path).read_bytes()
    if buf[:4] != FEATURE_MAGIC:
        raise FeatureFormatError("bad magic, expected SGF1", 0)
    if len(buf) < 16:
        raise FeatureFormatError("truncated header", len(buf))
    dim, count = struct.unpack_from("<IQ", buf, 4)
    pos = 16
    rec = 16 + 8 * dim
    frames: list[FeatureFrame] = []
    for k in range(count):
        if pos + rec > len(buf):
            raise FeatureFormatError(f"truncated payload in frame record {k}", pos)
        idx, ts = struct.unpack_from("<qd", buf, pos)
        if frames and not ts > frames[-1].timestamp_s:
            raise FeatureFormatError(f"non-increasing timestamp at frame {idx}", pos)
        feats = np.frombuffer(buf, dtype="<f8", count=dim, offset=pos + 16).astype(np.float64)
        frames.append(FeatureFrame(int(idx), float(ts), feats))
        pos += rec
    if pos != len(buf):
        raise FeatureFormatError("trailing bytes after last frame record", pos)
    return frames


def load_stream_spec(path: str | Path) -> SyntheticStreamSpec:
    return SyntheticStreamSpec.from_json(json.loads(Path(path).read_text()))

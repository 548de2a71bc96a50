import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamgate.datagen import (RESPONSE_LABEL, SILENCE_LABEL, CaptionInputError, CaptionRecord, DatasetError, Event,
                                StreamSample, attach_frames, build_sample, dedup_captions, imbalance_stats,
                                label_frames, read_captions, read_dataset, write_captions, write_dataset)
from streamgate.features import write_feature_file
from streamgate.synthetic import BenchmarkSpec, make_benchmark

S, R = SILENCE_LABEL, RESPONSE_LABEL


def recs(*pairs):
    return [CaptionRecord(t, s) for t, s in pairs]


def collapse_oracle(records):
    out = []
    prev = None
    for r in records:
        if r.text != prev:
            out.append((r.text, r.time_s))
        prev = r.text
    return out


def scan_oracle(event_times, frame_times):
    labels = [S] * len(frame_times)
    for t in event_times:
        best = None
        for i, ft in enumerate(frame_times):
            if ft >= t and (best is None or ft < frame_times[best]):
                best = i
        labels[best] = R
    return labels


def test_dedup_example():
    out = dedup_captions(recs(("a", 1), ("a", 2), ("b", 3), ("a", 4)))
    assert [(r.text, r.time_s) for r in out] == [("a", 1), ("b", 3), ("a", 4)]


def test_dedup_single_and_whitespace():
    assert dedup_captions(recs(("x", 0.5))) == recs(("x", 0.5))
    assert len(dedup_captions(recs(("a  b", 0), ("a b", 1)))) == 1


def test_dedup_unordered_names_index():
    with pytest.raises(CaptionInputError, match="caption 2"):
        dedup_captions(recs(("a", 0), ("b", 2), ("c", 1)))


def test_dedup_matches_oracle(rng):
    times = np.cumsum(rng.uniform(0, 1, size=1000))
    records = [CaptionRecord(str(rng.choice(["x", "y", "z"])), float(t)) for t in times]
    assert [(r.text, r.time_s) for r in dedup_captions(records)] == collapse_oracle(records)


@given(st.lists(st.sampled_from("abc"), max_size=40))
def test_dedup_idempotent(texts):
    records = [CaptionRecord(t, float(i)) for i, t in enumerate(texts)]
    once = dedup_captions(records)
    assert dedup_captions(once) == once


def test_label_exact_hit_and_earliest_not_before():
    frames = [0.0, 0.5, 1.0]
    assert label_frames(recs(("e", 0.5)), frames) == [S, R, S]
    assert label_frames(recs(("e", 0.6)), frames) == [S, S, R]


def test_label_errors():
    with pytest.raises(DatasetError, match="'late'"):
        label_frames(recs(("late", 1.5)), [0.0, 0.5, 1.0])
    with pytest.raises(DatasetError, match="'b'"):
        label_frames(recs(("a", 0.55), ("b", 0.6)), [0.0, 0.5, 1.0])


def test_labels_match_scan_oracle(rng):
    frame_times = list(np.cumsum(rng.uniform(0.1, 1.0, size=500)))
    for _ in range(20):
        picks = np.sort(rng.choice(500, size=int(rng.integers(1, 30)), replace=False))
        # events strictly inside (previous frame, chosen frame] hit distinct frames
        ev = [frame_times[i] - (rng.uniform(0, frame_times[i] - frame_times[i - 1]) * 0.99 if i else 0.0)
              for i in picks]
        got = label_frames([CaptionRecord(f"e{j}", t) for j, t in enumerate(ev)], frame_times)
        assert got == scan_oracle(ev, frame_times)
        assert got.count(R) == len(ev)


def test_imbalance_reference_ratios():
    for ratio in (310, 71):
        s = StreamSample("q", [Event("x", 0)], [R] + [S] * ratio)
        st_ = imbalance_stats([s, s])
        assert (st_.silence_count, st_.response_count, st_.ratio_r) == (2 * ratio, 2, ratio)


def test_imbalance_all_response_warns(caplog):
    s = StreamSample("q", [Event("x", 0), Event("y", 1)], [R, R])
    with caplog.at_level(logging.WARNING):
        assert imbalance_stats([s]).ratio_r == 1
    assert "no silence" in caplog.text


def test_imbalance_degenerate():
    with pytest.raises(DatasetError):
        imbalance_stats([StreamSample("q", [], [S, S])])
    with pytest.raises(DatasetError):
        imbalance_stats([])


def test_sample_invariants():
    with pytest.raises(DatasetError):
        StreamSample("q", [Event("x", 1)], [R, S])


def test_caption_and_dataset_roundtrip(tmp_path):
    caps = recs(("a", 0.0), ("a", 0.5), ("b", 1.0))
    write_captions(tmp_path / "c.jsonl", caps)
    assert read_captions(tmp_path / "c.jsonl") == caps
    sample = build_sample(caps, [0.0, 0.5, 1.0, 1.5], "what happens", features="f.sgf", stream_id="s0", fps=2.0)
    assert sample.labels == [R, S, R, S]
    write_dataset(tmp_path / "d.jsonl", [sample])
    assert read_dataset(tmp_path / "d.jsonl") == [sample]


def test_attach_frames_checks_length(tmp_path):
    sample = build_sample(recs(("a", 0.0)), [0.0, 0.5], "q", features="f.sgf")
    frames = make_benchmark(BenchmarkSpec(n_streams=1, num_frames=100, dim=4))[0].frames
    write_feature_file(tmp_path / "f.sgf", frames)
    with pytest.raises(DatasetError, match="100 frames"):
        attach_frames([sample], tmp_path / "d.jsonl")


def test_synthetic_benchmark_labels_follow_segments():
    data = make_benchmark(BenchmarkSpec(n_streams=10, num_frames=200, seed=2))
    for s in data:
        assert len(s.frames) == 200 == len(s.labels)
        assert s.labels.count(R) == len(s.events)
        assert 2 <= len(s.events) <= 3
    again = make_benchmark(BenchmarkSpec(n_streams=10, num_frames=200, seed=2))
    assert [s.labels for s in data] == [s.labels for s in again]


def test_benchmark_ratio_can_be_pinned():
    data = make_benchmark(BenchmarkSpec(n_streams=4, num_frames=202, events_min=2, events_max=2))
    assert imbalance_stats(data).ratio_r == 100

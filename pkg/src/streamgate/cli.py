"""``streamgate`` command line."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .cognition import tokenize
from .datagen import (attach_frames, build_sample, imbalance_stats, read_captions, read_dataset,
                      write_dataset)
from .epfe import event_similarity_gap, token_similarity_matrix
from .features import generate_synthetic_stream, load_feature_file, load_stream_spec, write_feature_file
from .gate import ARCHS, INIT_STRATEGIES
from .memory import PoolingPolicy
from .metrics import DialogueTurn, evaluate_stream
from .pipeline import COGNITION_MODES, StreamSession, bench_throughput, run_stream
from .synthetic import BenchmarkSpec, make_benchmark
from .system import build_system, load_system, save_system
from .training import parse_config, recommend_ws, train_stage1, train_stage2

log = logging.getLogger("streamgate")


def _csv_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_gen_stream(a):
    spec = load_stream_spec(a.spec)
    frames = generate_synthetic_stream(spec)
    write_feature_file(a.out, frames)
    print(f"wrote {len(frames)} frames to {a.out}")


def cmd_gen_benchmark(a):
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = make_benchmark(BenchmarkSpec(n_streams=a.n, num_frames=a.frames, seed=a.seed, noise_std=a.noise))
    for s in samples:
        name = f"{s.stream_id}.sgf"
        write_feature_file(out / name, s.frames)
        s.features = name
    write_dataset(out / "dataset.jsonl", samples)
    print(f"wrote {len(samples)} streams to {out / 'dataset.jsonl'}")


def cmd_build_dataset(a):
    frames = load_feature_file(a.features)
    if len(frames) > 1:
        fps = 1.0 / float(np.median(np.diff([f.timestamp_s for f in frames])))
    else:
        fps = 2.0
    feat = Path(a.features).resolve()
    try:
        ref = str(feat.relative_to(Path(a.out).resolve().parent))
    except ValueError:
        ref = str(feat)
    sample = build_sample(read_captions(a.captions), [f.timestamp_s for f in frames], a.prompt,
                          features=ref, stream_id=a.stream_id or feat.stem, fps=fps)
    write_dataset(a.out, [sample])
    print(f"{len(sample.events)} events over {len(frames)} frames -> {a.out}")


def _load_train_data(path):
    return attach_frames(read_dataset(path), path)


def cmd_train(a):
    text = Path(a.config).read_text() if a.config else ""
    cfg = parse_config(text, stage=a.stage)
    data = _load_train_data(a.dataset)
    if a.stage == 1:
        texts = [e.text for s in data for e in s.events]
        sys_ = build_system(texts, prompt=data[0].prompt, seed=cfg.seed, d_spat=len(data[0].frames[0].features))
        rep = train_stage1(sys_.epfe, sys_.decoder, data, cfg)
    else:
        if not a.checkpoint:
            raise SystemExit("stage 2 needs --checkpoint <stage-1 bundle>")
        sys_ = load_system(a.checkpoint, {"arch": a.gate_arch, "layers": a.gate_layers, "init": a.gate_init,
                                          "seed": cfg.seed})
        if "w_s" not in {ln.split("=")[0].strip() for ln in text.splitlines() if "=" in ln}:
            cfg.w_s = recommend_ws(imbalance_stats(data))
            log.info("using recommended w_s = %.4g", cfg.w_s)
        rep = train_stage2(sys_.gate, sys_.epfe, data, cfg, sys_.vocab)
    save_system(a.out, sys_)
    log_path = a.log or str(a.out) + ".log.csv"
    rep.write_log(log_path)
    print(json.dumps({"epoch_losses": rep.epoch_losses, "checksum": rep.checksum, "wall_s": rep.wall_s,
                      "log": log_path}))


def _gate_override(a):
    if a.gate_arch is None and a.gate_layers is None and a.gate_init is None:
        return None
    log.warning("gate flags given: using a freshly initialized, untrained gate")
    return {"arch": a.gate_arch or "shallow", "layers": a.gate_layers or 4, "init": a.gate_init or "early"}


def cmd_run(a):
    sys_ = load_system(a.checkpoint, _gate_override(a))
    if sys_.gate is None:
        raise SystemExit("checkpoint carries no gate; train stage 2 or pass --gate-arch")
    frames = load_feature_file(a.stream)
    prompt = a.prompt or sys_.prompt
    sess = StreamSession(sys_.epfe, sys_.gate, sys_.decoder, prompt, sys_.vocab.encode(tokenize(prompt)),
                         policy=PoolingPolicy(a.pool, a.capacity), cognition=a.cognition)
    turns, decisions, lat = run_stream(sess, frames)
    with open(a.out, "w") as fh:
        for d, r in zip(decisions, lat):
            fh.write(json.dumps({"type": "frame", "frame_index": d.frame_index, "decision": d.decision,
                                 "perception_us": r.perception_us, "gate_us": r.gate_us,
                                 "cognition_us": r.cognition_us}) + "\n")
        for t in turns:
            fh.write(json.dumps({"type": "turn", "trigger_frame": t.trigger_frame,
                                 "trigger_time_s": t.trigger_time_s, "text": t.text}) + "\n")
    print(f"{len(decisions)} frames, {len(turns)} turns -> {a.out}")


def cmd_eval(a):
    decisions, turns = [], []
    for ln in Path(a.run).read_text().splitlines():
        if not ln.strip():
            continue
        obj = json.loads(ln)
        if obj.get("type") == "frame":
            decisions.append(obj["decision"])
        elif obj.get("type") == "turn":
            turns.append(DialogueTurn(int(obj["trigger_frame"]), float(obj["trigger_time_s"]), obj["text"]))
    truth = read_dataset(a.truth)
    if a.stream_id:
        truth = [s for s in truth if s.stream_id == a.stream_id]
    if not truth:
        raise SystemExit("no matching ground-truth stream")
    s = truth[0]
    times = [i / s.fps for i in range(len(s.labels))]
    rep = evaluate_stream(decisions, s.labels, turns, [e.anchor_frame for e in s.events],
                          [e.text for e in s.events], times, a.window)
    Path(a.out).write_text(rep.dumps() + "\n")
    print(rep.dumps())


def _system_for_bench(a):
    if a.checkpoint:
        sys_ = load_system(a.checkpoint)
        if sys_.gate is None:
            sys_.attach_gate()
        return sys_
    log.warning("no checkpoint given: timing randomly initialized toy models")
    sys_ = build_system()
    sys_.attach_gate()
    return sys_


def cmd_bench(a):
    sys_ = _system_for_bench(a)
    modes = {"gated": ["event_gated"], "perstep": ["per_step"], "both": ["event_gated", "per_step"]}[a.mode]
    rows = bench_throughput(modes, _csv_floats(a.fps), a.duration, sys_.epfe, sys_.decoder, sys_.gate,
                            sys_.prompt)
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "fps", "wall_s_per_video_second"])
        for r in rows:
            w.writerow([r.mode, f"{r.fps_in:g}", f"{r.wall_s_per_video_second:.6g}"])
    png = plotting.bench_plot(rows, Path(a.out).with_suffix(".png"))
    for r in rows:
        print(f"{r.mode},{r.fps_in:g},{r.wall_s_per_video_second:.6g}")
    print(f"wrote {a.out} and {png}")


def cmd_heatmap(a):
    sys_ = load_system(a.checkpoint)
    frames = load_feature_file(a.stream)
    sim = token_similarity_matrix(sys_.epfe.tokens(frames))
    np.savetxt(a.out, sim, delimiter=",", fmt="%.6f")
    segs = []
    if a.segments:
        bounds = [int(v) for v in a.segments.split(",")]
        segs = list(zip(bounds[:-1], bounds[1:]))
        within, cross = event_similarity_gap(sim, segs)
        print(f"within={within:.4f} cross={cross:.4f} gap={within - cross:.4f}")
    png = plotting.similarity_heatmap(sim, Path(a.out).with_suffix(".png"), segs)
    print(f"wrote {a.out} and {png}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamgate", description="Event-gated streaming video dialogue toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("gen-stream", help="synthesize a feature file from a stream spec JSON")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_stream)

    s = sub.add_parser("gen-benchmark", help="write a synthetic benchmark (features + dataset JSONL)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n", type=int, default=60)
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.3)
    s.set_defaults(func=cmd_gen_benchmark)

    s = sub.add_parser("build-dataset", help="label a feature file from caption JSONL")
    s.add_argument("--captions", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stream-id", default="")
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train", help="stage 1 (extractor + decoder) or stage 2 (gate)")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", help="stage-1 bundle to start stage 2 from")
    s.add_argument("--log", help="CSV training log (default <out>.log.csv)")
    s.add_argument("--gate-arch", choices=ARCHS, default="shallow")
    s.add_argument("--gate-layers", type=int, default=4)
    s.add_argument("--gate-init", choices=INIT_STRATEGIES, default="early")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("run", help="stream a feature file through the gated pipeline")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--stream", required=True)
    s.add_argument("--prompt")
    s.add_argument("--out", required=True)
    s.add_argument("--cognition", choices=COGNITION_MODES, default="blocking")
    s.add_argument("--pool", default="uniform", choices=("uniform", "last_k", "stride"))
    s.add_argument("--capacity", type=int, default=16)
    s.add_argument("--gate-arch", choices=ARCHS)
    s.add_argument("--gate-layers", type=int)
    s.add_argument("--gate-init", choices=INIT_STRATEGIES)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="score a run against ground truth")
    s.add_argument("--run", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stream-id")
    s.add_argument("--window", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="throughput: wall seconds per video second")
    s.add_argument("--mode", choices=("gated", "perstep", "both"), default="gated")
    s.add_argument("--fps", default="5,10,30,60,100")
    s.add_argument("--duration", type=float, default=10.0)
    s.add_argument("--checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("heatmap", help="perception-token cosine similarity (CSV + PNG)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--stream", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--segments", help="comma-separated event boundaries, e.g. 0,50,100")
    s.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Figure rendering for the report commands. Files only, no display."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def similarity_heatmap(sim: np.ndarray, path: str | Path, segments: Sequence[tuple[int, int]] = ()) -> Path:
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    im = ax.imshow(sim, vmin=-1.0, vmax=1.0, cmap="RdBu_r", origin="upper", interpolation="nearest")
    for _, end in segments[:-1]:
        ax.axhline(end - 0.5, color="k", lw=0.6)
        ax.axvline(end - 0.5, color="k", lw=0.6)
    ax.set_xlabel("frame")
    ax.set_ylabel("frame")
    ax.set_title("perception token cosine similarity")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def bench_plot(rows: Sequence, path: str | Path) -> Path:
    """``rows``: objects with mode, fps_in and wall_s_per_video_second."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for mode in sorted({r.mode for r in rows}):
        pts = sorted((r.fps_in, r.wall_s_per_video_second) for r in rows if r.mode == mode)
        ax.plot(*zip(*pts), marker="o", label=mode)
    ax.axhline(1.0, color="grey", ls="--", lw=0.8, label="real time")
    ax.set_xlabel("input fps")
    ax.set_ylabel("wall s per video second")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, path)

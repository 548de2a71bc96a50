"""Event-preserving feature extractor: a state-space recurrence over frame features.

Each frame costs one fixed-size state update and yields one perception token.
Two modes share the same parameter naming:

``lti``
    h' = A h + B x,  y = C h'  with a dense A scaled to spectral radius 0.99.
``selective``
    diagonal negative-real A discretized per step with an input-dependent
    step size, plus an input-dependent readout gate on C.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .features import FeatureFrame
from .numerics import Tensor

MODES = ("lti", "selective")


class NumericalDivergenceError(RuntimeError):
    def __init__(self, frame_index: int):
        super().__init__(f"EPFE state became non-finite at frame {frame_index}")
        self.frame_index = frame_index


@dataclass
class EPFEConfig:
    mode: str = "selective"
    d_spat: int = 64
    d_in: int = 64
    d_state: int = 64
    d_out: int = 64
    seed: int = 0
    # decay rates (continuous time) spread log-uniformly over this range at init
    rate_min: float = 0.02
    rate_max: float = 3.0


@dataclass
class SsmState:
    h: np.ndarray
    frames_seen: int = 0


@dataclass
class PerceptionToken:
    frame_index: int
    vector: np.ndarray


def _inv_softplus(y):
    return np.log(np.expm1(y))


class EPFE:
    def __init__(self, cfg: EPFEConfig | None = None, **kw):
        self.cfg = cfg or EPFEConfig(**kw)
        c = self.cfg
        if c.mode not in MODES:
            raise ValueError(f"unknown EPFE mode {c.mode!r}")
        rng = np.random.default_rng([c.seed, 101])
        p: dict[str, Tensor] = {}
        p["input_proj"] = nx.uniform_init(rng, (c.d_in, c.d_spat), c.d_spat)
        p["B"] = nx.uniform_init(rng, (c.d_state, c.d_in), c.d_in)
        p["C"] = nx.uniform_init(rng, (c.d_out, c.d_state), c.d_state)
        if c.mode == "lti":
            m = rng.uniform(-1, 1, size=(c.d_state, c.d_state))
            radius = np.max(np.abs(np.linalg.eigvals(m)))
            p["A"] = nx.param(m * (0.99 / radius))
        else:
            rates = np.exp(np.linspace(np.log(c.rate_min), np.log(c.rate_max), c.d_state))
            p["A"] = nx.param(_inv_softplus(rates))
            p["dt_w"] = nx.param(rng.uniform(-0.1, 0.1, size=(c.d_state, c.d_in)) / np.sqrt(c.d_in))
            p["dt_b"] = nx.param(np.full(c.d_state, _inv_softplus(1.0)))
            p["c_w"] = nx.uniform_init(rng, (c.d_state, c.d_in), c.d_in)
            p["c_b"] = nx.param(np.zeros(c.d_state))
        self.params = p

    @property
    def mode(self) -> str:
        return self.cfg.mode

    def named_parameters(self, prefix: str = "epfe.") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}

    def zero_state(self, batch: int | None = None) -> np.ndarray:
        shape = (self.cfg.d_state,) if batch is None else (batch, self.cfg.d_state)
        return np.zeros(shape)

    def transition(self) -> np.ndarray:
        """The state matrix as used for a unit step (dense for lti, diagonal otherwise)."""
        a = self.params["A"].data
        if self.mode == "lti":
            return a
        return np.diag(np.exp(-np.logaddexp(0.0, a)))

    def step_tensor(self, h: Tensor, feats: Tensor) -> tuple[Tensor, Tensor]:
        """One recurrence step on (batch, dim) tensors; returns (token, new_state)."""
        p = self.params
        x = nx.linear(feats, p["input_proj"])
        if self.mode == "lti":
            h_new = nx.add(nx.linear(h, p["A"]), nx.linear(x, p["B"]))
            return nx.linear(h_new, p["C"]), h_new
        u = nx.linear(x, p["B"])
        dt = nx.softplus(nx.linear(x, p["dt_w"], p["dt_b"]))
        rate = nx.softplus(p["A"])
        # zero-order hold of h' = -rate*h + rate*u; the input is scaled by the
        # rate so each channel is a unit-gain moving average
        decay = nx.exp(nx.mul(nx.mul(dt, rate), -1.0))
        h_new = nx.add(nx.mul(decay, h), nx.mul(nx.sub(1.0, decay), u))
        gate = nx.sigmoid(nx.linear(x, p["c_w"], p["c_b"]))
        return nx.linear(nx.mul(gate, h_new), p["C"]), h_new

    def scan(self, feats: np.ndarray | Tensor, h0: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Run the recurrence over (batch, T, d_spat) features.

        Returns tokens stacked as (batch, T, d_out) and the final state.
        """
        feats = nx.as_tensor(feats)
        b, t, _ = feats.shape
        h = nx.Tensor(self.zero_state(b) if h0 is None else h0)
        ys = []
        for i in range(t):
            y, h = self.step_tensor(h, feats[:, i, :])
            ys.append(y)
        if not ys:
            return nx.Tensor(np.zeros((b, 0, self.cfg.d_out))), h
        return nx.stack(ys, axis=1), h

    def initial_state(self) -> SsmState:
        return SsmState(self.zero_state(), 0)

    def tokens(self, frames: Sequence[FeatureFrame]) -> list[PerceptionToken]:
        state = self.initial_state()
        out = []
        for f in frames:
            tok, state = epfe_step(self, state, f)
            out.append(tok)
        return out


def epfe_reset(state: SsmState) -> SsmState:
    return SsmState(np.zeros_like(state.h), 0)


def epfe_step(model: EPFE, state: SsmState, frame: FeatureFrame) -> tuple[PerceptionToken, SsmState]:
    feats = np.asarray(frame.features, dtype=np.float64)
    if feats.shape != (model.cfg.d_spat,):
        raise nx.DimensionError(
            f"frame {frame.frame_index} has feature shape {feats.shape}, EPFE expects ({model.cfg.d_spat},)")
    if state.h.shape != (model.cfg.d_state,):
        raise nx.DimensionError(f"state shape {state.h.shape} does not match d_state {model.cfg.d_state}")
    with nx.no_grad():
        y, h_new = model.step_tensor(Tensor(state.h[None, :]), Tensor(feats[None, :]))
    h_new = h_new.data[0]
    if not np.all(np.isfinite(h_new)):
        raise NumericalDivergenceError(frame.frame_index)
    return PerceptionToken(frame.frame_index, y.data[0].copy()), SsmState(h_new, state.frames_seen + 1)


def unrolled_lti_output(A: np.ndarray, B: np.ndarray, C: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Convolution form sum_{k<t} C A^(t-1-k) B x_k for every prefix t = 1..T."""
    t_len = xs.shape[0]
    powers = [np.eye(A.shape[0])]
    for _ in range(t_len):
        powers.append(A @ powers[-1])
    out = np.zeros((t_len, C.shape[0]))
    for t in range(1, t_len + 1):
        acc = np.zeros(A.shape[0])
        for k in range(t):
            acc += powers[t - 1 - k] @ (B @ xs[k])
        out[t - 1] = C @ acc
    return out


class SimilarityError(ValueError):
    pass


def token_similarity_matrix(tokens: Sequence[PerceptionToken]) -> np.ndarray:
    if not tokens:
        return np.zeros((0, 0))
    if len({t.vector.shape for t in tokens}) != 1:
        raise nx.DimensionError("tokens have differing dimensions")
    mat = np.stack([t.vector for t in tokens])
    norms = np.linalg.norm(mat, axis=1)
    for t, n in zip(tokens, norms):
        if n == 0:
            raise SimilarityError(f"zero-norm perception token at frame {t.frame_index}")
    unit = mat / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def event_similarity_gap(sim: np.ndarray, segments: Sequence[tuple[int, int]]) -> tuple[float, float]:
    """Mean within-segment and mean cross-segment similarity (off-diagonal pairs only)."""
    within, cross = [], []
    for i, (s0, e0) in enumerate(segments):
        block = sim[s0:e0, s0:e0]
        n = e0 - s0
        if n > 1:
            within.append((block.sum() - np.trace(block)) / (n * n - n))
        for s1, e1 in segments[i + 1:]:
            cross.append(sim[s0:e0, s1:e1].mean())
    return float(np.mean(within)), float(np.mean(cross))

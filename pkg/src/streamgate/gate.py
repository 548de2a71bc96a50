"""Cognition gate: decides per frame whether to invoke the cognition backend.

The default gate reuses the first ``k`` blocks of the decoder (shallow layer
transfer) and reads only the prompt plus the current perception token. The
two-way head is the pair of decoder ``lm_head`` rows for ``</silence>`` and
``</response>``; logits are always ordered (silence, response).

Alternative classifiers for the architecture ablation share the same
``logits(prompt_ids, vectors)`` surface.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .cognition import (BLOCK_KEYS, RESPONSE, SILENCE, ToyDecoder, block_forward, causal_mask,
                        init_block, sinusoidal_positions)
from .epfe import PerceptionToken
from .numerics import Tensor

INIT_STRATEGIES = ("random", "skip", "early")
ARCHS = ("shallow", "linear", "mlp", "transformer", "xattn")
SILENCE_IDX, RESPONSE_IDX = 0, 1
MIN_DEPTH = 2


class GateConfigError(ValueError):
    pass


class GateNumericalError(RuntimeError):
    def __init__(self, frame_index: int):
        super().__init__(f"gate produced non-finite logits at frame {frame_index}")
        self.frame_index = frame_index


@dataclass
class GateDecision:
    frame_index: int
    decision: str
    logits: np.ndarray

    @property
    def respond(self) -> bool:
        return self.decision == "respond"


def decide(logits: np.ndarray) -> str:
    # ties go to silence
    return "respond" if logits[RESPONSE_IDX] > logits[SILENCE_IDX] else "silence"


def source_layers(n_layers: int, k: int, strategy: str) -> list[int]:
    if not MIN_DEPTH <= k <= n_layers:
        raise GateConfigError(f"gate depth {k} must lie in [{MIN_DEPTH}, {n_layers}]")
    if strategy == "early":
        return list(range(k))
    if strategy == "skip":
        return [(i * n_layers) // k for i in range(k)]
    if strategy == "random":
        return []
    raise GateConfigError(f"unknown init strategy {strategy!r}")


class BaseGate:
    arch = "base"

    def named_parameters(self, prefix: str = "gate.") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}

    def logits(self, prompt_ids, vectors: Tensor) -> Tensor:
        raise NotImplementedError

    def config(self) -> dict:
        return {"arch": self.arch}


class ShallowGate(BaseGate):
    arch = "shallow"

    def __init__(self, d_model: int, d_percep: int, vocab_size: int, n_blocks: int, n_heads: int,
                 seed: int = 0, strategy: str = "random", sources: list[int] | None = None):
        rng = np.random.default_rng([seed, 303])
        self.n_heads = n_heads
        self.strategy = strategy
        self.sources = sources or []
        self.params: dict[str, Tensor] = {
            "embed": nx.param(rng.normal(0.0, 0.5, size=(vocab_size, d_model))),
            "perc_w": nx.uniform_init(rng, (d_model, d_percep), d_percep),
            "perc_b": nx.param(np.zeros(d_model)),
        }
        self.blocks = [init_block(rng, d_model) for _ in range(n_blocks)]
        for i, blk in enumerate(self.blocks):
            for key in BLOCK_KEYS:
                self.params[f"blocks.{i}.{key}"] = blk[key]
        self.params["lnf_g"] = nx.param(np.ones(d_model))
        self.params["lnf_b"] = nx.param(np.zeros(d_model))
        self.params["head"] = nx.uniform_init(rng, (2, d_model), d_model)
        self._pe = sinusoidal_positions(64, d_model)

    def config(self) -> dict:
        return {"arch": self.arch, "layers": len(self.blocks), "init": self.strategy, "sources": self.sources}

    def _positions(self, t: int) -> np.ndarray:
        if t > self._pe.shape[0]:
            self._pe = sinusoidal_positions(2 * t, self._pe.shape[1])
        return self._pe[:t]

    def _inputs(self, prompt_ids, vectors: Tensor) -> Tensor:
        p = self.params
        n = vectors.shape[0]
        ids = np.broadcast_to(np.asarray(prompt_ids, dtype=np.int64), (n, len(prompt_ids)))
        prompt = nx.take(p["embed"], ids)
        tok = nx.reshape(nx.linear(vectors, p["perc_w"], p["perc_b"]), (n, 1, -1))
        x = nx.concat([prompt, tok], axis=1)
        return nx.add(x, self._positions(x.shape[1]))

    def hidden(self, prompt_ids, vectors: Tensor) -> list[Tensor]:
        """Per-block activations over the full [prompt ; token] sequence."""
        x = self._inputs(prompt_ids, vectors)
        mask = causal_mask(x.shape[1])
        acts = []
        for blk in self.blocks:
            x = block_forward(blk, x, self.n_heads, mask)
            acts.append(x)
        return acts

    def logits(self, prompt_ids, vectors: Tensor) -> Tensor:
        # The prompt prefix is shared by every row, so it runs once and each
        # perception token attends to its cached keys/values. Same math as
        # running [prompt ; token] per row.
        p = self.params
        n_p = len(prompt_ids)
        pe = self._positions(n_p + 1)
        px = nx.add(nx.take(p["embed"], np.asarray(prompt_ids, dtype=np.int64)[None, :]), pe[:n_p])
        tx = nx.add(nx.reshape(nx.linear(vectors, p["perc_w"], p["perc_b"]), (vectors.shape[0], 1, -1)), pe[n_p])
        pmask = causal_mask(n_p)
        for blk in self.blocks:
            px_next, k, v = block_forward(blk, px, self.n_heads, pmask, return_kv=True)
            tx = block_forward(blk, tx, self.n_heads, None, past=(k, v))
            px = px_next
        last = tx[:, 0, :]
        return nx.linear(nx.layer_norm(last, p["lnf_g"], p["lnf_b"]), p["head"])


class LinearGate(BaseGate):
    arch = "linear"

    def __init__(self, d_percep: int, seed: int = 0, **_):
        rng = np.random.default_rng([seed, 404])
        self.params = {"w": nx.uniform_init(rng, (2, d_percep), d_percep), "b": nx.param(np.zeros(2))}

    def logits(self, prompt_ids, vectors: Tensor) -> Tensor:
        return nx.linear(vectors, self.params["w"], self.params["b"])


class MLPGate(BaseGate):
    arch = "mlp"

    def __init__(self, d_percep: int, hidden: int = 64, seed: int = 0, **_):
        rng = np.random.default_rng([seed, 505])
        self.params = {
            "w1": nx.uniform_init(rng, (hidden, d_percep), d_percep), "b1": nx.param(np.zeros(hidden)),
            "w2": nx.uniform_init(rng, (2, hidden), hidden), "b2": nx.param(np.zeros(2)),
        }

    def logits(self, prompt_ids, vectors: Tensor) -> Tensor:
        p = self.params
        return nx.linear(nx.gelu(nx.linear(vectors, p["w1"], p["b1"])), p["w2"], p["b2"])


class TransformerGate(BaseGate):
    """One bidirectional encoder block over [prompt ; token], linear head on the token slot."""
    arch = "transformer"

    def __init__(self, d_percep: int, vocab_size: int, d_model: int = 64, n_heads: int = 2, seed: int = 0, **_):
        rng = np.random.default_rng([seed, 606])
        self.n_heads = n_heads
        blk = init_block(rng, d_model)
        self.params = {
            "embed": nx.param(rng.normal(0.0, 0.5, size=(vocab_size, d_model))),
            "perc_w": nx.uniform_init(rng, (d_model, d_percep), d_percep),
            "perc_b": nx.param(np.zeros(d_model)),
            **{f"block.{k}": v for k, v in blk.items()},
            "w": nx.uniform_init(rng, (2, d_model), d_model), "b": nx.param(np.zeros(2)),
        }
        self.block = blk
        self._pe = sinusoidal_positions(64, d_model)

    def logits(self, prompt_ids, vectors: Tensor) -> Tensor:
        p = self.params
        n = vectors.shape[0]
        ids = np.broadcast_to(np.asarray(prompt_ids, dtype=np.int64), (n, len(prompt_ids)))
        tok = nx.reshape(nx.linear(vectors, p["perc_w"], p["perc_b"]), (n, 1, -1))
        x = nx.concat([nx.take(p["embed"], ids), tok], axis=1)
        x = nx.add(x, self._pe[: x.shape[1]])
        x = block_forward(self.block, x, self.n_heads, None)
        return nx.linear(x[:, -1, :], p["w"], p["b"])


class CrossAttentionGate(BaseGate):
    """Prompt embeddings query the projected perception token; mean-pool, then linear."""
    arch = "xattn"

    def __init__(self, d_percep: int, vocab_size: int, d_model: int = 64, seed: int = 0, **_):
        rng = np.random.default_rng([seed, 707])
        self.params = {
            "embed": nx.param(rng.normal(0.0, 0.5, size=(vocab_size, d_model))),
            "wq": nx.uniform_init(rng, (d_model, d_model), d_model),
            "wk": nx.uniform_init(rng, (d_model, d_percep), d_percep),
            "wv": nx.uniform_init(rng, (d_model, d_percep), d_percep),
            "w": nx.uniform_init(rng, (2, d_model), d_model), "b": nx.param(np.zeros(2)),
        }

    def logits(self, prompt_ids, vectors: Tensor) -> Tensor:
        p = self.params
        n = vectors.shape[0]
        q = nx.linear(nx.take(p["embed"], np.asarray(prompt_ids, dtype=np.int64)), p["wq"])  # (P, D)
        k = nx.reshape(nx.linear(vectors, p["wk"]), (n, 1, -1))
        v = nx.reshape(nx.linear(vectors, p["wv"]), (n, 1, -1))
        scores = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))  # (N, P, 1)
        ctx = nx.matmul(nx.softmax(scores, axis=-1), v)  # (N, P, D)
        return nx.linear(nx.mean(ctx, axis=1), p["w"], p["b"])


def gate_init(decoder: ToyDecoder, k: int = 4, strategy: str = "early", seed: int = 0) -> ShallowGate:
    c = decoder.cfg
    sources = source_layers(c.n_layers, k, strategy)
    gate = ShallowGate(c.d_model, c.d_percep, len(decoder.vocab), k, c.n_heads, seed=seed,
                       strategy=strategy, sources=sources)
    if strategy == "random":
        return gate
    p = gate.params
    p["embed"].data = decoder.embed.data.copy()
    p["perc_w"].data = decoder.perc_w.data.copy()
    p["perc_b"].data = decoder.perc_b.data.copy()
    for i, src in enumerate(sources):
        for key in BLOCK_KEYS:
            gate.blocks[i][key].data = decoder.blocks[src][key].data.copy()
    p["lnf_g"].data = decoder.lnf_g.data.copy()
    p["lnf_b"].data = decoder.lnf_b.data.copy()
    v = decoder.vocab
    p["head"].data = decoder.lm_head.data[[v.id(SILENCE), v.id(RESPONSE)]].copy()
    return gate


def gate_alternatives(kind: str, d_percep: int = 64, vocab_size: int = 16, d_model: int = 64,
                      n_heads: int = 2, seed: int = 0) -> BaseGate:
    kinds = {"linear": LinearGate, "mlp": MLPGate, "transformer": TransformerGate,
             "cross_attention": CrossAttentionGate, "xattn": CrossAttentionGate}
    if kind not in kinds:
        raise GateConfigError(f"unknown gate architecture {kind!r}")
    return kinds[kind](d_percep=d_percep, vocab_size=vocab_size, d_model=d_model, n_heads=n_heads, seed=seed)


def build_gate(arch: str, decoder: ToyDecoder, layers: int = 4, init: str = "early", seed: int = 0) -> BaseGate:
    if arch == "shallow":
        return gate_init(decoder, layers, init, seed)
    c = decoder.cfg
    return gate_alternatives(arch, c.d_percep, len(decoder.vocab), c.d_model, c.n_heads, seed)


def gate_step(gate: BaseGate, prompt, token: PerceptionToken) -> GateDecision:
    if len(prompt) == 0:
        raise GateConfigError("gate prompt must be non-empty")
    with nx.no_grad():
        out = gate.logits(prompt, Tensor(np.asarray(token.vector, dtype=np.float64)[None, :])).data[0]
    if not np.all(np.isfinite(out)):
        raise GateNumericalError(token.frame_index)
    return GateDecision(token.frame_index, decide(out), out.copy())


def clone_gate(gate: BaseGate) -> BaseGate:
    return copy.deepcopy(gate)

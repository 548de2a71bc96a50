"""Toy causal decoder standing in for the language model, plus the backend protocol.

Sequence layout for every call::

    [prior turns, each closed by <eos>] [projected perception vectors] [prompt] <bos> [response ...]

Perception vectors enter through a learned linear projection into the model
width; everything else is a word-level token embedding. Positions are
sinusoidal, so the only length limit is ``max_seq_len``.
"""

from __future__ import annotations

import json
import math
import threading
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

BOS, EOS, SILENCE, RESPONSE = "<bos>", "<eos>", "</silence>", "</response>"
SPECIALS = (BOS, EOS, SILENCE, RESPONSE)
DEFAULT_MAX_TURNS = 4


class VocabularyError(KeyError):
    def __str__(self):
        return str(self.args[0])


class ContextOverflowError(RuntimeError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token strings in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words: list[str] = []
        seen = set(SPECIALS)
        for text in texts:
            for w in tokenize(text):
                if w not in seen:
                    seen.add(w)
                    words.append(w)
        return cls(list(SPECIALS) + sorted(words))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def id(self, tok: str) -> int:
        try:
            return self.index[tok]
        except KeyError:
            raise VocabularyError(f"token {tok!r} is not in the vocabulary") from None

    def encode(self, toks: Iterable[str]) -> list[int]:
        return [self.id(t) for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path):
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls([ln for ln in Path(path).read_text().splitlines() if ln])


def detokenize(toks: Iterable[str]) -> str:
    return " ".join(t for t in toks if t not in SPECIALS)


@dataclass
class CognitionContext:
    prompt_tokens: list[str]
    pooled_tokens: list[np.ndarray] = field(default_factory=list)
    prior_turns: list[list[str]] = field(default_factory=list)
    capacity: int | None = None

    def __post_init__(self):
        if self.capacity is not None and len(self.pooled_tokens) > self.capacity:
            raise ValueError(f"{len(self.pooled_tokens)} pooled tokens exceed capacity {self.capacity}")


class CognitionBackend(Protocol):
    def decode_response(self, ctx: CognitionContext, max_len: int) -> list[str]: ...

    def sequence_nll(self, ctx: CognitionContext, reference: Sequence[str]) -> float: ...


# transformer pieces ---------------------------------------------------------

def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


_MASKS: dict[int, np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    m = _MASKS.get(n)
    if m is None:
        m = np.triu(np.full((n, n), -1e9), k=1)
        if n <= 512:
            _MASKS[n] = m
    return m


BLOCK_KEYS = ("ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_g", "ln2_b", "w_ff1", "b_ff1", "w_ff2", "b_ff2")


def init_block(rng: np.random.Generator, d: int, ff_mult: int = 4) -> dict[str, Tensor]:
    return {
        "ln1_g": nx.param(np.ones(d)), "ln1_b": nx.param(np.zeros(d)),
        "w_qkv": nx.uniform_init(rng, (3 * d, d), d), "b_qkv": nx.param(np.zeros(3 * d)),
        "w_o": nx.uniform_init(rng, (d, d), d), "b_o": nx.param(np.zeros(d)),
        "ln2_g": nx.param(np.ones(d)), "ln2_b": nx.param(np.zeros(d)),
        "w_ff1": nx.uniform_init(rng, (ff_mult * d, d), d), "b_ff1": nx.param(np.zeros(ff_mult * d)),
        "w_ff2": nx.uniform_init(rng, (d, ff_mult * d), ff_mult * d), "b_ff2": nx.param(np.zeros(d)),
    }


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    scores = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = nx.add(scores, mask)
    return nx.matmul(nx.softmax(scores, axis=-1), v)


def block_forward(p: dict[str, Tensor], x: Tensor, n_heads: int, mask: np.ndarray | None,
                  past: tuple[Tensor, Tensor] | None = None, return_kv: bool = False):
    """Pre-norm self-attention + GELU feed-forward on (B, T, D).

    ``past`` holds keys/values (B or 1, H, T_past, dh) of earlier positions that
    every new position may attend to; ``mask`` covers only the new positions.
    """
    b, t, d = x.shape
    dh = d // n_heads
    h = nx.layer_norm(x, p["ln1_g"], p["ln1_b"])
    qkv = nx.linear(h, p["w_qkv"], p["b_qkv"])
    qkv = nx.transpose(nx.reshape(qkv, (b, t, 3, n_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    k_all, v_all = k, v
    if past is not None:
        pk, pv = past
        if pk.shape[0] != b:
            pk = nx.broadcast_to(pk, (b,) + pk.shape[1:])
            pv = nx.broadcast_to(pv, (b,) + pv.shape[1:])
        k_all, v_all = nx.concat([pk, k], axis=2), nx.concat([pv, v], axis=2)
        if mask is not None:
            mask = np.concatenate([np.zeros((t, pk.shape[2])), mask], axis=1)
    att = attention(q, k_all, v_all, mask)
    att = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (b, t, d))
    x = nx.add(x, nx.linear(att, p["w_o"], p["b_o"]))
    h = nx.layer_norm(x, p["ln2_g"], p["ln2_b"])
    ff = nx.linear(nx.gelu(nx.linear(h, p["w_ff1"], p["b_ff1"])), p["w_ff2"], p["b_ff2"])
    out = nx.add(x, ff)
    return (out, k, v) if return_kv else out


# the decoder ----------------------------------------------------------------

@dataclass
class DecoderConfig:
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 2
    d_percep: int = 64
    max_seq_len: int = 4096
    max_turns: int = DEFAULT_MAX_TURNS
    seed: int = 0


@dataclass
class SequenceLayout:
    """One training/scoring sequence: slots are vector rows or token ids."""
    vector_rows: list[int]
    prefix_ids: list[int]
    prompt_ids: list[int]
    target_ids: list[int]
    turn_ids: list[int] = field(default_factory=list)

    @property
    def length(self) -> int:
        # the final target is predicted, never fed back in
        return len(self.turn_ids) + len(self.vector_rows) + len(self.prompt_ids) + 1 + max(len(self.target_ids) - 1, 0)


class ToyDecoder:
    def __init__(self, vocab: Vocab, cfg: DecoderConfig | None = None, **kw):
        self.vocab = vocab
        self.cfg = cfg or DecoderConfig(**kw)
        c = self.cfg
        if c.d_model % c.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        rng = np.random.default_rng([c.seed, 202])
        v = len(vocab)
        self.embed = nx.param(rng.normal(0.0, 0.5, size=(v, c.d_model)))
        self.perc_w = nx.uniform_init(rng, (c.d_model, c.d_percep), c.d_percep)
        self.perc_b = nx.param(np.zeros(c.d_model))
        self.blocks = [init_block(rng, c.d_model) for _ in range(c.n_layers)]
        self.lnf_g = nx.param(np.ones(c.d_model))
        self.lnf_b = nx.param(np.zeros(c.d_model))
        self.lm_head = nx.uniform_init(rng, (v, c.d_model), c.d_model)
        self._pe = sinusoidal_positions(min(c.max_seq_len, 512), c.d_model)

    # parameters
    def named_parameters(self, prefix: str = "llm.") -> dict[str, Tensor]:
        out = {
            prefix + "embed": self.embed, prefix + "perc_w": self.perc_w, prefix + "perc_b": self.perc_b,
        }
        for i, blk in enumerate(self.blocks):
            for k in BLOCK_KEYS:
                out[f"{prefix}blocks.{i}.{k}"] = blk[k]
        out[prefix + "lnf_g"] = self.lnf_g
        out[prefix + "lnf_b"] = self.lnf_b
        out[prefix + "lm_head"] = self.lm_head
        return out

    def positions(self, n: int) -> np.ndarray:
        if n > self._pe.shape[0]:
            self._pe = sinusoidal_positions(max(n, 2 * self._pe.shape[0]), self.cfg.d_model)
        return self._pe[:n]

    def project(self, vectors: Tensor) -> Tensor:
        return nx.linear(vectors, self.perc_w, self.perc_b)

    def run_blocks(self, x: Tensor, n_blocks: int | None = None, collect: bool = False):
        t = x.shape[1]
        mask = causal_mask(t)
        acts = []
        for blk in self.blocks[: n_blocks if n_blocks is not None else len(self.blocks)]:
            x = block_forward(blk, x, self.cfg.n_heads, mask)
            if collect:
                acts.append(x)
        return (x, acts) if collect else x

    def head(self, h: Tensor) -> Tensor:
        return nx.linear(nx.layer_norm(h, self.lnf_g, self.lnf_b), self.lm_head)

    # context assembly
    def layout(self, ctx: CognitionContext, targets: Sequence[str] = ()) -> tuple[SequenceLayout, np.ndarray]:
        turns = ctx.prior_turns[-self.cfg.max_turns:] if self.cfg.max_turns > 0 else []
        turn_ids: list[int] = []
        for turn in turns:
            turn_ids += self.vocab.encode([t for t in turn if t != EOS]) + [self.vocab.id(EOS)]
        if ctx.pooled_tokens:
            vecs = np.stack([np.asarray(v, dtype=np.float64) for v in ctx.pooled_tokens])
        else:
            vecs = np.zeros((0, self.cfg.d_percep))
        lay = SequenceLayout(
            vector_rows=list(range(len(vecs))), prefix_ids=[],
            prompt_ids=self.vocab.encode(ctx.prompt_tokens) + [self.vocab.id(BOS)],
            target_ids=self.vocab.encode(targets), turn_ids=turn_ids,
        )
        lay.prompt_ids, bos = lay.prompt_ids[:-1], lay.prompt_ids[-1]
        lay.prefix_ids = [bos]
        return lay, vecs

    def batch_logits(self, vectors: Tensor, layouts: Sequence[SequenceLayout], feed_targets: bool = True):
        """Right-padded batch forward.

        ``vectors`` is a (N, d_percep) table that every layout's ``vector_rows``
        index into. Returns (logits (B, L, V), per-sample index of the position
        that predicts the first target).
        """
        n_vec = vectors.shape[0] if vectors.ndim == 2 else 0
        v = len(self.vocab)
        pad = n_vec + v
        seqs = []
        starts = []
        for lay in layouts:
            ids = [n_vec + i for i in lay.turn_ids] + list(lay.vector_rows) \
                + [n_vec + i for i in lay.prompt_ids + lay.prefix_ids]
            starts.append(len(ids) - 1)
            if feed_targets and lay.target_ids:
                ids += [n_vec + i for i in lay.target_ids[:-1]]
            seqs.append(ids)
        width = max(len(s) for s in seqs)
        if width > self.cfg.max_seq_len:
            raise ContextOverflowError(f"sequence length {width} exceeds max_seq_len {self.cfg.max_seq_len}")
        index = np.full((len(seqs), width), pad, dtype=np.int64)
        for r, s in enumerate(seqs):
            index[r, : len(s)] = s
        parts = [self.embed, nx.Tensor(np.zeros((1, self.cfg.d_model)))]
        if n_vec:
            parts.insert(0, self.project(vectors))
        table = nx.concat(parts, axis=0)
        x = nx.add(nx.take(table, index), self.positions(width))
        return self.head(self.run_blocks(x)), starts

    def layouts_nll(self, vectors: Tensor, layouts: Sequence[SequenceLayout]) -> Tensor:
        """Mean over samples of the per-sample mean target NLL (teacher forcing)."""
        logits, starts = self.batch_logits(vectors, layouts)
        lp = nx.log_softmax(logits, axis=-1)
        rows, cols, tgt, wts = [], [], [], []
        for r, (lay, s) in enumerate(zip(layouts, starts)):
            n = len(lay.target_ids)
            for j, t in enumerate(lay.target_ids):
                rows.append(r)
                cols.append(s + j)
                tgt.append(t)
                wts.append(1.0 / (n * len(layouts)))
        picked = nx.take(lp, (np.array(rows), np.array(cols), np.array(tgt)))
        return nx.mul(nx.tsum(nx.mul(picked, np.array(wts))), -1.0)

    # backend protocol
    def decode_response(self, ctx: CognitionContext, max_len: int) -> list[str]:
        return decode_response(self, ctx, max_len)

    def sequence_nll(self, ctx: CognitionContext, reference: Sequence[str]) -> float:
        return sequence_nll(self, ctx, reference)


def decode_response(model: ToyDecoder, ctx: CognitionContext, max_len: int) -> list[str]:
    """Greedy decoding until <eos> (kept in the output) or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if not ctx.prompt_tokens and not ctx.pooled_tokens:
        raise ValueError("empty cognition context")
    lay, vecs = model.layout(ctx)
    if lay.length + max_len - 1 > model.cfg.max_seq_len:
        raise ContextOverflowError(
            f"context of {lay.length} positions plus {max_len} generated exceeds max_seq_len {model.cfg.max_seq_len}")
    eos = model.vocab.id(EOS)
    out: list[int] = []
    vt = nx.Tensor(vecs) if len(vecs) else nx.Tensor(np.zeros((0, model.cfg.d_percep)))
    with nx.no_grad():
        for _ in range(max_len):
            lay.target_ids = out + [0]
            logits, starts = model.batch_logits(vt, [lay])
            nxt = int(np.argmax(logits.data[0, starts[0] + len(out)]))
            out.append(nxt)
            if nxt == eos:
                break
    return model.vocab.decode(out)


def sequence_nll(model: ToyDecoder, ctx: CognitionContext, reference: Sequence[str]) -> float:
    if not reference:
        raise ValueError("reference must be non-empty")
    lay, vecs = model.layout(ctx, reference)
    vt = nx.Tensor(vecs) if len(vecs) else nx.Tensor(np.zeros((0, model.cfg.d_percep)))
    with nx.no_grad():
        return model.layouts_nll(vt, [lay]).item()


def token_nlls(model: ToyDecoder, ctx: CognitionContext, reference: Sequence[str]) -> np.ndarray:
    """Per-position NLL of the reference under teacher forcing."""
    lay, vecs = model.layout(ctx, reference)
    vt = nx.Tensor(vecs) if len(vecs) else nx.Tensor(np.zeros((0, model.cfg.d_percep)))
    with nx.no_grad():
        logits, starts = model.batch_logits(vt, [lay])
        lp = nx.log_softmax(logits).data[0]
    s = starts[0]
    return np.array([-lp[s + j, t] for j, t in enumerate(lay.target_ids)])


# remote backend -------------------------------------------------------------

def context_to_json(ctx: CognitionContext) -> dict:
    return {
        "prompt": " ".join(ctx.prompt_tokens),
        "pooled": [np.asarray(v, dtype=float).tolist() for v in ctx.pooled_tokens],
        "prior_turns": [" ".join(t) for t in ctx.prior_turns],
    }


def context_from_json(obj: dict) -> CognitionContext:
    return CognitionContext(
        prompt_tokens=tokenize(obj.get("prompt", "")),
        pooled_tokens=[np.asarray(v, dtype=np.float64) for v in obj.get("pooled", [])],
        prior_turns=[tokenize(t) for t in obj.get("prior_turns", [])],
    )


class HttpCognitionBackend:
    """Client for a cognition service speaking the JSON wire format.

    POST /decode  {prompt, pooled, prior_turns, max_len} -> {"tokens": [...]}
    POST /nll     {prompt, pooled, prior_turns, reference} -> {"nll": float}
    """

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _post(self, route: str, payload: dict) -> dict:
        req = urllib.request.Request(
            self.base_url + route, data=json.dumps(payload).encode(),
            headers={"Content-Type": "application/json"}, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read())

    def decode_response(self, ctx: CognitionContext, max_len: int) -> list[str]:
        body = context_to_json(ctx)
        body["max_len"] = max_len
        return list(self._post("/decode", body)["tokens"])

    def sequence_nll(self, ctx: CognitionContext, reference: Sequence[str]) -> float:
        body = context_to_json(ctx)
        body["reference"] = list(reference)
        return float(self._post("/nll", body)["nll"])


def make_backend_server(backend: CognitionBackend, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """HTTP server exposing ``backend`` over the wire format; call serve_forever() to run."""
    lock = threading.Lock()

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_POST(self):
            try:
                body = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                ctx = context_from_json(body)
                with lock:
                    if self.path == "/decode":
                        out = {"tokens": backend.decode_response(ctx, int(body["max_len"]))}
                    elif self.path == "/nll":
                        out = {"nll": backend.sequence_nll(ctx, list(body["reference"]))}
                    else:
                        self.send_error(404)
                        return
                code = 200
            except (KeyError, ValueError) as exc:
                out, code = {"error": str(exc)}, 400
            raw = json.dumps(out).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

    return ThreadingHTTPServer((host, port), Handler)

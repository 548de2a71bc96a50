"""A trained toy system (extractor, decoder, gate) and its on-disk bundle.

Parameters go into one SGT1 checkpoint under the ``epfe.``, ``llm.`` and
``gate.`` prefixes. Configs and the vocabulary live in a JSON sidecar next to
it (``<ckpt>.json``), since the binary format carries only named arrays.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

from . import numerics as nx
from .cognition import DecoderConfig, ToyDecoder, Vocab, tokenize
from .epfe import EPFE, EPFEConfig
from .gate import ARCHS, BaseGate, build_gate
from .synthetic import CAPTIONS, PROMPT


@dataclass
class ToySystem:
    epfe: EPFE
    decoder: ToyDecoder
    prompt: str = PROMPT
    gate: BaseGate | None = None
    gate_spec: dict | None = None

    @property
    def vocab(self) -> Vocab:
        return self.decoder.vocab

    @property
    def prompt_ids(self) -> list[int]:
        return self.vocab.encode(tokenize(self.prompt))

    def attach_gate(self, arch: str = "shallow", layers: int = 4, init: str = "early", seed: int = 0) -> BaseGate:
        self.gate = build_gate(arch, self.decoder, layers, init, seed)
        self.gate_spec = {"arch": arch, "layers": layers, "init": init, "seed": seed}
        return self.gate


def build_system(texts: Iterable[str] = CAPTIONS, prompt: str = PROMPT, seed: int = 0,
                 epfe_mode: str = "selective", d_spat: int = 64) -> ToySystem:
    vocab = Vocab.build(list(texts) + [prompt])
    epfe = EPFE(EPFEConfig(mode=epfe_mode, d_spat=d_spat, seed=seed))
    dec = ToyDecoder(vocab, DecoderConfig(d_percep=epfe.cfg.d_out, seed=seed))
    return ToySystem(epfe, dec, prompt)


def _named(sys_: ToySystem) -> dict[str, nx.Tensor]:
    named = {**sys_.epfe.named_parameters(), **sys_.decoder.named_parameters()}
    if sys_.gate is not None:
        named.update(sys_.gate.named_parameters())
    return named


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save_system(path: str | Path, sys_: ToySystem):
    nx.save_checkpoint(path, _named(sys_))
    meta = {
        "epfe": asdict(sys_.epfe.cfg),
        "decoder": asdict(sys_.decoder.cfg),
        "vocab": sys_.vocab.tokens,
        "prompt": sys_.prompt,
        "gate": sys_.gate_spec,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2))


def load_system(path: str | Path, gate_override: dict | None = None) -> ToySystem:
    """Rebuild from a bundle. ``gate_override`` swaps in a fresh, untrained gate spec."""
    meta = json.loads(sidecar_path(path).read_text())
    arrays = nx.load_checkpoint(path)
    vocab = Vocab(meta["vocab"])
    epfe = EPFE(EPFEConfig(**meta["epfe"]))
    dec = ToyDecoder(vocab, DecoderConfig(**meta["decoder"]))
    nx.assign(epfe.named_parameters(), arrays)
    nx.assign(dec.named_parameters(), arrays)
    sys_ = ToySystem(epfe, dec, meta.get("prompt", PROMPT))
    spec = gate_override or meta.get("gate")
    if spec:
        if spec.get("arch", "shallow") not in ARCHS:
            raise ValueError(f"unknown gate architecture {spec['arch']!r}")
        gate = sys_.attach_gate(spec.get("arch", "shallow"), int(spec.get("layers", 4)),
                                spec.get("init", "early"), int(spec.get("seed", 0)))
        if gate_override is None:
            nx.assign(gate.named_parameters(), arrays)
    return sys_

"""Reaction-conditioned encoder/decoder and the property-prediction head.

Each reactant/reagent SMILES is encoded on its own. The per-fragment
encodings are summed element-wise and then averaged over the sequence axis
to give one reaction vector, which is the *only* memory slot the decoder's
cross-attention sees.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import torch

from . import nn
from .nn import Params
from .smiles import BOS, EOS, PAD, VOCAB_SIZE

REACTANT_ROLE = VOCAB_SIZE
REAGENT_ROLE = VOCAB_SIZE + 1


@dataclass
class ModelConfig:
    layers: int = 4
    heads: int = 8
    width: int = 256
    ff_width: int = 1024
    vocab_size: int = VOCAB_SIZE
    max_len: int = 159
    dropout: float = 0.1
    mlp_hidden: int | None = None
    strict_mean: bool = False
    role_tokens: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.width % 2:
            raise ValueError("width must be even for sinusoidal positions")
        if self.layers < 1 or self.max_len < 3:
            raise ValueError("need at least one layer and max_len >= 3")
        needed = VOCAB_SIZE + (2 if self.role_tokens else 0)
        if self.vocab_size < needed:
            raise ValueError(f"vocab_size must be at least {needed}")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.width

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FragmentEncoding:
    values: torch.Tensor  # (L, d), rows >= valid_len are zero
    valid_len: int


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig, seed: int = 0, decoder: bool = True) -> Params:
    gen = torch.Generator().manual_seed(seed)
    dt = nn.resolve_dtype(cfg.dtype)
    d, f = cfg.width, cfg.ff_width
    p: Params = {}
    nn.init_embedding(p, "enc.emb", cfg.vocab_size, d, gen, dt)
    for i in range(cfg.layers):
        pre = f"enc.{i}"
        nn.init_layer_norm(p, f"{pre}.ln1", d, dt)
        for name in "qkvo":
            nn.init_linear(p, f"{pre}.attn.{name}", d, d, gen, dt)
        nn.init_layer_norm(p, f"{pre}.ln2", d, dt)
        nn.init_linear(p, f"{pre}.ff1", d, f, gen, dt)
        nn.init_linear(p, f"{pre}.ff2", f, d, gen, dt)
    nn.init_layer_norm(p, "enc.ln", d, dt)
    if decoder:
        nn.init_embedding(p, "dec.emb", cfg.vocab_size, d, gen, dt)
        for i in range(cfg.layers):
            pre = f"dec.{i}"
            nn.init_layer_norm(p, f"{pre}.ln1", d, dt)
            for name in "qkvo":
                nn.init_linear(p, f"{pre}.self.{name}", d, d, gen, dt)
            nn.init_layer_norm(p, f"{pre}.ln2", d, dt)
            for name in "qkvo":
                nn.init_linear(p, f"{pre}.cross.{name}", d, d, gen, dt)
            nn.init_layer_norm(p, f"{pre}.ln3", d, dt)
            nn.init_linear(p, f"{pre}.ff1", d, f, gen, dt)
            nn.init_linear(p, f"{pre}.ff2", f, d, gen, dt)
        nn.init_layer_norm(p, "dec.ln", d, dt)
        nn.init_linear(p, "dec.out", d, cfg.vocab_size, gen, dt)
    for t in p.values():
        t.requires_grad_(True)
    return p


def init_head(params: Params, cfg: ModelConfig, n_tasks: int, seed: int = 0) -> Params:
    """Encoder weights from ``params`` plus a freshly initialised two-layer MLP."""
    gen = torch.Generator().manual_seed(seed)
    dt = nn.resolve_dtype(cfg.dtype)
    out = {k: v.detach().clone() for k, v in params.items() if k.startswith("enc.")}
    if len(out) != sum(1 for k in init_params_shapes(cfg) if k.startswith("enc.")):
        raise ValueError("encoder parameters incomplete for this config")
    nn.init_linear(out, "head.hidden", cfg.width, cfg.hidden, gen, dt)
    nn.init_linear(out, "head.out", cfg.hidden, n_tasks, gen, dt)
    for t in out.values():
        t.requires_grad_(True)
    return out


_SHAPES: dict[tuple, dict[str, tuple]] = {}


def init_params_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    key = dataclasses.astuple(cfg)
    if key not in _SHAPES:
        _SHAPES[key] = {k: tuple(v.shape) for k, v in init_params(cfg, 0).items()}
    return _SHAPES[key]


def check_compatible(params: Params, cfg: ModelConfig) -> None:
    expected = init_params_shapes(cfg)
    for name, shape in expected.items():
        if name.startswith("enc.") and (name not in params or tuple(params[name].shape) != shape):
            got = tuple(params[name].shape) if name in params else None
            raise ValueError(f"checkpoint tensor {name!r} has shape {got}, config expects {shape}")


# ---------------------------------------------------------------------------
# helpers

_PE_CACHE: dict[tuple, torch.Tensor] = {}


def _positions(length: int, width: int, dtype: torch.dtype) -> torch.Tensor:
    key = (length, width, dtype)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = nn.positional_encoding(length, width, dtype)
    return _PE_CACHE[key]


def pad_batch(seqs: Sequence[Sequence[int]], length: int) -> torch.Tensor:
    out = torch.full((len(seqs), length), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s) == 0:
            raise ValueError("empty token sequence")
        if len(s) > length:
            raise ValueError(f"sequence of length {len(s)} exceeds max length {length}")
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def _ff(x, p, pre, cfg, gen):
    h = torch.relu(nn.linear(x, p[f"{pre}.ff1.w"], p[f"{pre}.ff1.b"]))
    h = nn.dropout(h, cfg.dropout, gen)
    return nn.linear(h, p[f"{pre}.ff2.w"], p[f"{pre}.ff2.b"])


def _ln(x, p, name):
    return nn.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


# ---------------------------------------------------------------------------
# encoder


def encode_tokens(tokens: torch.Tensor, params: Params, cfg: ModelConfig, generator=None) -> torch.Tensor:
    """Encode a padded ``(B, L)`` id batch; rows are independent, pad rows come out zero."""
    pad = tokens == PAD
    if pad.all(dim=1).any():
        raise ValueError("empty token sequence")
    dt = params["enc.emb"].dtype
    length = tokens.shape[1]
    x = nn.embedding_lookup(tokens, params["enc.emb"]) * math.sqrt(cfg.width) + _positions(length, cfg.width, dt)
    x = nn.dropout(x, cfg.dropout, generator)
    for i in range(cfg.layers):
        pre = f"enc.{i}"
        q = _ln(x, params, f"{pre}.ln1")
        h = nn.multi_head_attention(q, q, q, pad, cfg.heads, params, f"{pre}.attn.",
                                    dropout_p=cfg.dropout, generator=generator)
        x = x + nn.dropout(h, cfg.dropout, generator)
        x = x + nn.dropout(_ff(_ln(x, params, f"{pre}.ln2"), params, pre, cfg, generator), cfg.dropout, generator)
    x = _ln(x, params, "enc.ln")
    return x.masked_fill(pad[..., None], 0.0)


def encode_fragment(tokens: Sequence[int], params: Params, cfg: ModelConfig) -> FragmentEncoding:
    """Encode one fragment on its own, padded to ``cfg.max_len``."""
    if len(tokens) == 0:
        raise ValueError("cannot encode an empty fragment")
    if len(tokens) > cfg.max_len:
        raise ValueError(f"fragment of {len(tokens)} tokens exceeds max length {cfg.max_len}")
    values = encode_tokens(pad_batch([tokens], cfg.max_len), params, cfg)[0]
    return FragmentEncoding(values, len(tokens))


def aggregate(encodings: Sequence[FragmentEncoding], strict_length: int | None = None) -> torch.Tensor:
    """Sum the fragment encodings element-wise, then average over the sequence axis.

    The divisor is the longest valid length in the set, or ``strict_length``
    when given (the literal global-``L`` reading).
    """
    if not encodings:
        raise ValueError("cannot aggregate an empty set of encodings")
    widths = {e.values.shape[-1] for e in encodings}
    if len(widths) != 1:
        raise ValueError(f"encodings disagree in width: {sorted(widths)}")
    lengths = {e.values.shape[0] for e in encodings}
    if len(lengths) != 1:
        raise ValueError("encodings must share the padded length")
    # fixed summation order keeps the result bit-identical under permutation
    ordered = sorted(encodings, key=lambda e: (e.valid_len, e.values.detach().flatten().tolist()))
    total = ordered[0].values
    for e in ordered[1:]:
        total = total + e.values
    divisor = strict_length or max(e.valid_len for e in encodings)
    return total.sum(dim=0) / divisor


def fragment_tokens(fragments: Sequence[str], roles: Sequence[str] | None, cfg: ModelConfig) -> list[tuple[int, ...]]:
    from .smiles import tokenize

    out = []
    for i, frag in enumerate(fragments):
        ids = tokenize(frag)
        if cfg.role_tokens:
            role = roles[i] if roles is not None else "reactant"
            ids = [REACTANT_ROLE if role == "reactant" else REAGENT_ROLE] + ids
        out.append(tuple(ids))
    return out


def reaction_vectors(
    batch: Sequence[Sequence[Sequence[int]]], params: Params, cfg: ModelConfig, generator=None,
    pad_to_max: bool = True,
) -> torch.Tensor:
    """Encode a batch of reactions (each a list of fragment id sequences) to ``(B, d)``.

    Fragments are sorted within each reaction before encoding, so the result
    does not depend on the order they were given in. With ``pad_to_max``
    every fragment is padded to ``cfg.max_len``, which makes float32 results
    independent of the other fragments in the batch; training turns it off
    for speed.
    """
    flat: list[Sequence[int]] = []
    owner: list[int] = []
    slot: list[int] = []
    l_eff = []
    for r, frags in enumerate(batch):
        if not frags:
            raise ValueError(f"reaction {r} has no fragments")
        ordered = sorted(tuple(f) for f in frags)
        for k, f in enumerate(ordered):
            flat.append(f)
            owner.append(r)
            slot.append(k)
        l_eff.append(max(len(f) for f in ordered))
    length = cfg.max_len if pad_to_max else max(len(f) for f in flat)
    enc = encode_tokens(pad_batch(flat, length), params, cfg, generator)
    n_slots = max(slot) + 1
    owner_t = torch.tensor(owner)
    slot_t = torch.tensor(slot)
    total = None
    for k in range(n_slots):
        sel = slot_t == k
        part = enc.new_zeros((len(batch),) + enc.shape[1:])
        part = part.index_put((owner_t[sel],), enc[sel])
        total = part if total is None else total + part
    divisor = torch.full((len(batch), 1), float(cfg.max_len), dtype=enc.dtype) if cfg.strict_mean else torch.tensor(l_eff, dtype=enc.dtype)[:, None]
    return total.sum(dim=1) / divisor


# ---------------------------------------------------------------------------
# decoder


def decode_teacher_forced(
    h_r: torch.Tensor, target_in: torch.Tensor, params: Params, cfg: ModelConfig, generator=None,
    return_cross_weights: bool = False,
):
    """Logits ``(B, T, V)`` for decoder inputs ``target_in`` (``(B, T)``, starting with BOS)."""
    if target_in.shape[1] > cfg.max_len:
        raise ValueError(f"target of length {target_in.shape[1]} exceeds max length {cfg.max_len}")
    pad = target_in == PAD
    dt = params["dec.emb"].dtype
    length = target_in.shape[1]
    x = nn.embedding_lookup(target_in, params["dec.emb"]) * math.sqrt(cfg.width) + _positions(length, cfg.width, dt)
    x = nn.dropout(x, cfg.dropout, generator)
    memory = h_r[:, None, :]
    cross_weights = []
    for i in range(cfg.layers):
        pre = f"dec.{i}"
        q = _ln(x, params, f"{pre}.ln1")
        h = nn.multi_head_attention(q, q, q, pad, cfg.heads, params, f"{pre}.self.", causal=True,
                                    dropout_p=cfg.dropout, generator=generator)
        x = x + nn.dropout(h, cfg.dropout, generator)
        q = _ln(x, params, f"{pre}.ln2")
        h, w = nn.multi_head_attention(q, memory, memory, None, cfg.heads, params, f"{pre}.cross.",
                                       return_weights=True)
        cross_weights.append(w)
        x = x + nn.dropout(h, cfg.dropout, generator)
        x = x + nn.dropout(_ff(_ln(x, params, f"{pre}.ln3"), params, pre, cfg, generator), cfg.dropout, generator)
    x = _ln(x, params, "dec.ln")
    logits = nn.linear(x, params["dec.out.w"], params["dec.out.b"])
    if return_cross_weights:
        return logits, cross_weights
    return logits


def decoder_targets(products: Sequence[Sequence[int]], cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forcing pair: inputs ``BOS + product`` and labels ``product + EOS``, PAD-filled."""
    full = [(BOS, *p, EOS) for p in products]
    longest = max(len(f) for f in full)
    if longest > cfg.max_len:
        raise ValueError(f"product needs {longest} positions with BOS/EOS, max length is {cfg.max_len}")
    padded = pad_batch(full, longest)
    return padded[:, :-1], padded[:, 1:]


def decode_greedy(h_r: torch.Tensor, params: Params, cfg: ModelConfig, max_steps: int | None = None) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_steps`` tokens; returns ids without specials."""
    steps = cfg.max_len - 1 if max_steps is None else max_steps
    if steps > cfg.max_len:
        raise ValueError("max_steps exceeds max length")
    batch = h_r.shape[0]
    cur = torch.full((batch, 1), BOS, dtype=torch.long)
    done = torch.zeros(batch, dtype=torch.bool)
    out: list[list[int]] = [[] for _ in range(batch)]
    banned = [PAD, BOS] + list(range(VOCAB_SIZE, cfg.vocab_size))
    with torch.no_grad():
        for _ in range(steps):
            if cur.shape[1] > cfg.max_len:
                break
            logits = decode_teacher_forced(h_r, cur, params, cfg)[:, -1]
            logits[:, banned] = float("-inf")
            nxt = logits.argmax(dim=-1)
            for b in range(batch):
                if done[b]:
                    continue
                if int(nxt[b]) == EOS:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
            if done.all():
                break
            cur = torch.cat([cur, nxt[:, None]], dim=1)
    return out


# ---------------------------------------------------------------------------
# property head


def pooled_encoding(tokens: torch.Tensor, params: Params, cfg: ModelConfig, generator=None) -> torch.Tensor:
    """Mean of the encoder output over valid (non-pad) positions, ``(B, d)``."""
    enc = encode_tokens(tokens, params, cfg, generator)
    valid = (tokens != PAD).sum(dim=1, keepdim=True).to(enc.dtype)
    return enc.sum(dim=1) / valid


def property_forward(tokens: torch.Tensor, params: Params, cfg: ModelConfig, generator=None) -> torch.Tensor:
    """Predictions ``(B, n_tasks)``: pooled encoding -> linear -> ReLU -> linear."""
    if tokens.shape[1] > cfg.max_len:
        raise ValueError(f"input of length {tokens.shape[1]} exceeds max length {cfg.max_len}")
    pooled = pooled_encoding(tokens, params, cfg, generator)
    hidden = torch.relu(nn.linear(pooled, params["head.hidden.w"], params["head.hidden.b"]))
    hidden = nn.dropout(hidden, cfg.dropout, generator)
    return nn.linear(hidden, params["head.out.w"], params["head.out.b"])

"""Functional transformer building blocks on top of torch tensors.

Parameters live in plain ``dict[str, torch.Tensor]`` objects; every op takes
its weights explicitly. Backward passes come from torch autograd except for
:func:`softmax_cross_entropy`, whose gradient is written out by hand.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

Params = dict[str, torch.Tensor]

CHECKPOINT_MAGIC = b"RPT1"

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


def resolve_dtype(name: str | torch.dtype) -> torch.dtype:
    if isinstance(name, torch.dtype):
        return name
    try:
        return _DTYPES[name]
    except KeyError:
        raise ValueError(f"unsupported dtype {name!r}; use float32 or float64") from None


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    y = x @ weight.transpose(0, 1)
    if bias is not None:
        y = y + bias
    return y


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError("layer_norm: gain/bias must match the last dimension")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def embedding_lookup(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ValueError(f"embedding_lookup: ids outside [0, {table.shape[0]})")
    return table[ids]


def positional_encoding(length: int, width: int, dtype=torch.float64) -> torch.Tensor:
    """Sinusoidal table: even columns sin, odd columns cos."""
    if width % 2:
        raise ValueError("positional_encoding needs an even width")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, width, 2, dtype=torch.float64) / width)
    table = torch.zeros(length, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.to(resolve_dtype(dtype))


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout; a no-op when ``generator`` is None or ``p == 0``."""
    if generator is None or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def multi_head_attention(
    query: torch.Tensor,
    key: torch.Tensor,
    value: torch.Tensor,
    key_mask: torch.Tensor | None,
    heads: int,
    p: Mapping[str, torch.Tensor],
    prefix: str = "",
    causal: bool = False,
    dropout_p: float = 0.0,
    generator: torch.Generator | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``heads`` heads with input/output projections.

    ``query`` is ``(B, Lq, d)``; ``key``/``value`` are ``(B, Lk, d)``. ``key_mask``
    is ``(B, Lk)`` and True marks *invalid* keys; those get exactly zero weight.
    Projection weights are read from ``p`` under ``prefix + {q,k,v,o}.{w,b}``.
    """
    batch, lq, width = query.shape
    lk = key.shape[1]
    if width % heads:
        raise ValueError(f"width {width} is not divisible by {heads} heads")
    hd = width // heads

    def project(x, name, length):
        y = linear(x, p[f"{prefix}{name}.w"], p[f"{prefix}{name}.b"])
        return y.view(batch, length, heads, hd).transpose(1, 2)

    q = project(query, "q", lq)
    k = project(key, "k", lk)
    v = project(value, "v", lk)
    scores = q @ k.transpose(-1, -2) / math.sqrt(hd)

    invalid = torch.zeros(batch, lq, lk, dtype=torch.bool)
    if key_mask is not None:
        invalid = invalid | key_mask[:, None, :].to(torch.bool)
    if causal:
        invalid = invalid | torch.triu(torch.ones(lq, lk, dtype=torch.bool), diagonal=1)[None]
    if invalid.all(dim=-1).any():
        raise ValueError("attention row with every key masked")
    scores = scores.masked_fill(invalid[:, None], float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    attn = dropout(weights, dropout_p, generator)
    out = (attn @ v).transpose(1, 2).reshape(batch, lq, width)
    out = linear(out, p[f"{prefix}o.w"], p[f"{prefix}o.b"])
    if return_weights:
        return out, weights
    return out


class _SoftmaxCrossEntropy(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, targets, ignore_id):
        loss, grad = _xent_value_and_grad(logits.detach(), targets, ignore_id)
        ctx.save_for_backward(grad)
        return loss

    @staticmethod
    def backward(ctx, upstream):
        (grad,) = ctx.saved_tensors
        return upstream * grad, None, None


def _xent_value_and_grad(logits: torch.Tensor, targets: torch.Tensor, ignore_id: int):
    vocab = logits.shape[-1]
    flat = logits.reshape(-1, vocab)
    tgt = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    if flat.shape[0] != tgt.shape[0]:
        raise ValueError("softmax_cross_entropy: logits and targets disagree in length")
    keep = tgt != ignore_id
    bad = keep & ((tgt < 0) | (tgt >= vocab))
    if bad.any():
        raise ValueError(f"target id {int(tgt[bad][0])} outside vocabulary of size {vocab}")
    count = int(keep.sum())
    if count == 0:
        return logits.new_zeros(()), torch.zeros_like(logits)
    safe = torch.where(keep, tgt, torch.zeros_like(tgt))
    logz = torch.logsumexp(flat, dim=-1)
    picked = flat.gather(1, safe[:, None])[:, 0]
    nll = (logz - picked) * keep
    loss = nll.sum() / count
    grad = torch.softmax(flat, dim=-1)
    grad[torch.arange(flat.shape[0]), safe] -= 1.0
    grad = grad * keep[:, None] / count
    return loss, grad.reshape(logits.shape)


def softmax_cross_entropy(logits: torch.Tensor, targets, ignore_id: int):
    """Mean token cross-entropy and its gradient with respect to ``logits``.

    Positions whose target equals ``ignore_id`` contribute nothing. Returns
    ``(loss, grad)``; use :func:`cross_entropy` inside an autograd graph.
    """
    return _xent_value_and_grad(logits.detach(), targets, ignore_id)


def cross_entropy(logits: torch.Tensor, targets, ignore_id: int) -> torch.Tensor:
    """Differentiable form of :func:`softmax_cross_entropy` (hand-written backward)."""
    return _SoftmaxCrossEntropy.apply(logits, torch.as_tensor(targets, dtype=torch.long), ignore_id)


# ---------------------------------------------------------------------------
# initialization


def init_linear(params: Params, name: str, fan_in: int, fan_out: int, gen: torch.Generator, dtype) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    params[f"{name}.w"] = (torch.rand(fan_out, fan_in, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)
    params[f"{name}.b"] = (torch.rand(fan_out, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


def init_layer_norm(params: Params, name: str, width: int, dtype) -> None:
    params[f"{name}.g"] = torch.ones(width, dtype=dtype)
    params[f"{name}.b"] = torch.zeros(width, dtype=dtype)


def init_embedding(params: Params, name: str, rows: int, width: int, gen: torch.Generator, dtype) -> None:
    params[name] = (torch.randn(rows, width, generator=gen, dtype=torch.float64) * width**-0.5).to(dtype)


def clone_params(params: Params, requires_grad: bool | None = None) -> Params:
    out = {}
    for k, v in params.items():
        flag = v.requires_grad if requires_grad is None else requires_grad
        out[k] = v.detach().clone().requires_grad_(flag)
    return out


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: Params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {
            name: {"m": torch.zeros_like(p), "v": torch.zeros_like(p), "step": 0} for name, p in params.items()
        }

    def step(self, grads: Mapping[str, torch.Tensor | None], lr: float) -> None:
        adamw_step(self.params, grads, self.state, lr, self.betas, self.eps, self.weight_decay)

    def state_tensors(self) -> tuple[dict[str, torch.Tensor], dict[str, int]]:
        tensors, steps = {}, {}
        for name, s in self.state.items():
            tensors[f"adam.m.{name}"] = s["m"]
            tensors[f"adam.v.{name}"] = s["v"]
            steps[name] = s["step"]
        return tensors, steps

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor], steps: Mapping[str, int]) -> None:
        for name, s in self.state.items():
            s["m"] = tensors[f"adam.m.{name}"].clone()
            s["v"] = tensors[f"adam.v.{name}"].clone()
            s["step"] = int(steps[name])


def adamw_step(params: Params, grads, state, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One in-place AdamW update.

    Weight decay is decoupled: each parameter first shrinks by
    ``lr * weight_decay * param`` regardless of its gradient.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    b1, b2 = betas
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name!r}")
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            s = state[name]
            s["step"] += 1
            t = s["step"]
            s["m"].mul_(b1).add_(g, alpha=1 - b1)
            s["v"].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = s["m"] / (1 - b1**t)
            v_hat = s["v"] / (1 - b2**t)
            p.mul_(1 - lr * weight_decay)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def clip_grad_norm(grads: dict[str, torch.Tensor | None], max_norm: float | None) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values() if g is not None))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# checkpoint container


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], config: Mapping | None = None, meta: Mapping | None = None) -> Path:
    """Write ``RPT1`` + u64 header length + JSON header + little-endian payloads."""
    path = Path(path)
    entries = []
    payloads = []
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        dt = {np.dtype("float64"): "float64", np.dtype("float32"): "float32"}.get(arr.dtype)
        if dt is None:
            raise TypeError(f"cannot store tensor {name!r} of dtype {arr.dtype}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        payloads.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    config = dict(config or {})
    header = {"tensors": entries, "config": config, "config_hash": config_hash(config), "meta": dict(meta or {})}
    blob = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payloads:
            fh.write(chunk)
    return path


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(tensors, header)``."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12 : 12 + hlen])
    if header.get("config_hash") != config_hash(header.get("config", {})):
        raise ValueError(f"{path}: config hash mismatch")
    offset = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        offset += count * dt.itemsize
        tensors[e["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after tensor payloads")
    return tensors, header

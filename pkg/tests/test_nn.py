import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rxnpretrain import nn
from rxnpretrain.nn import (
    AdamW,
    adamw_step,
    clip_grad_norm,
    cross_entropy,
    embedding_lookup,
    layer_norm,
    linear,
    load_checkpoint,
    multi_head_attention,
    positional_encoding,
    save_checkpoint,
    softmax_cross_entropy,
)

from oracles import fd_gradient, relative_error

D = torch.float64


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


def _attn_params(width, seed=0, prefix=""):
    p = {}
    g = _gen(seed)
    for name in "qkvo":
        nn.init_linear(p, f"{prefix}{name}", width, width, g, D)
    return p


def test_linear_example():
    x = torch.tensor([[1.0, 2.0]], dtype=D)
    w = torch.tensor([[1.0, 0.0], [1.0, -1.0], [0.5, 0.5]], dtype=D)
    b = torch.tensor([0.0, 1.0, -1.0], dtype=D)
    assert linear(x, w, b).tolist() == [[1.0, 0.0, 0.5]]
    with pytest.raises(ValueError):
        linear(torch.ones(1, 3, dtype=D), w, b)


def test_layer_norm_matches_numpy():
    x = torch.tensor([[1.0, 2.0, 3.0, 4.0], [2.0, 2.0, 2.0, 6.0]], dtype=D)
    g = torch.tensor([1.0, 2.0, 1.0, 0.5], dtype=D)
    b = torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=D)
    a = x.numpy()
    ref = (a - a.mean(-1, keepdims=True)) / np.sqrt(a.var(-1, keepdims=True) + 1e-5) * g.numpy() + b.numpy()
    assert np.allclose(layer_norm(x, g, b).numpy(), ref, atol=1e-12)


def test_embedding_lookup():
    table = torch.arange(12, dtype=D).view(4, 3)
    assert embedding_lookup(torch.tensor([3, 0]), table).tolist() == [[9, 10, 11], [0, 1, 2]]
    with pytest.raises(ValueError):
        embedding_lookup(torch.tensor([4]), table)


def test_positional_encoding_values():
    pe = positional_encoding(3, 4)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert math.isclose(pe[1, 0], math.sin(1.0), abs_tol=1e-15)
    assert math.isclose(pe[1, 1], math.cos(1.0), abs_tol=1e-15)
    assert math.isclose(pe[2, 2], math.sin(2.0 / 100.0), abs_tol=1e-15)
    assert math.isclose(pe[2, 3], math.cos(2.0 / 100.0), abs_tol=1e-15)


def test_dropout_determinism_and_scale():
    x = torch.ones(1000, dtype=D)
    a = nn.dropout(x, 0.25, _gen(5))
    b = nn.dropout(x, 0.25, _gen(5))
    assert torch.equal(a, b)
    assert set(a.unique().tolist()) <= {0.0, 1.0 / 0.75}
    assert torch.equal(nn.dropout(x, 0.25, None), x)


def test_attention_single_key_returns_value_projection():
    p = _attn_params(4)
    q = torch.randn(1, 3, 4, generator=_gen(1), dtype=D)
    kv = torch.randn(1, 1, 4, generator=_gen(2), dtype=D)
    out, w = multi_head_attention(q, kv, kv, None, 2, p, return_weights=True)
    assert torch.all(w == 1.0)
    v = linear(kv, p["v.w"], p["v.b"])
    expected = linear(v.expand(1, 3, 4), p["o.w"], p["o.b"])
    assert torch.allclose(out, expected, atol=1e-14)


def test_attention_identical_keys_split_evenly():
    p = _attn_params(4)
    q = torch.randn(1, 1, 4, generator=_gen(1), dtype=D)
    k = torch.randn(1, 1, 4, generator=_gen(2), dtype=D).expand(1, 2, 4)
    _, w = multi_head_attention(q, k, k, None, 1, p, return_weights=True)
    assert torch.allclose(w, torch.tensor([0.5, 0.5], dtype=D))


def test_attention_masked_keys_zero_weight_and_gradient():
    p = _attn_params(4)
    x = torch.randn(2, 5, 4, generator=_gen(3), dtype=D, requires_grad=True)
    mask = torch.tensor([[False, False, True, True, True], [False] * 5])
    out, w = multi_head_attention(x[:, :1], x, x, mask, 2, p, return_weights=True)
    assert torch.all(w[0, :, :, 2:] == 0)
    out.sum().backward()
    assert torch.all(x.grad[0, 2:] == 0)


def test_attention_rejects_fully_masked_row_and_bad_width():
    p = _attn_params(4)
    x = torch.zeros(1, 2, 4, dtype=D)
    with pytest.raises(ValueError):
        multi_head_attention(x, x, x, torch.tensor([[True, True]]), 2, p)
    with pytest.raises(ValueError):
        multi_head_attention(x, x, x, None, 3, p)


def test_attention_causal():
    p = _attn_params(4)
    x = torch.randn(1, 4, 4, generator=_gen(4), dtype=D)
    _, w = multi_head_attention(x, x, x, None, 2, p, causal=True, return_weights=True)
    assert torch.all(torch.triu(w[0, 0], diagonal=1) == 0)
    y = x.clone()
    y[0, 3] += 1.0
    a = multi_head_attention(x, x, x, None, 2, p, causal=True)
    b = multi_head_attention(y, y, y, None, 2, p, causal=True)
    assert torch.equal(a[:, :3], b[:, :3])


def test_cross_entropy_uniform_is_log_vocab():
    logits = torch.zeros(3, 7, dtype=D)
    loss, grad = softmax_cross_entropy(logits, [1, 2, 3], ignore_id=-100)
    assert math.isclose(float(loss), math.log(7), rel_tol=1e-14)
    assert torch.allclose(grad.sum(-1), torch.zeros(3, dtype=D), atol=1e-15)


def test_cross_entropy_all_ignored():
    loss, grad = softmax_cross_entropy(torch.randn(2, 5, dtype=D), [4, 4], ignore_id=4)
    assert float(loss) == 0.0 and torch.all(grad == 0)


def test_cross_entropy_matches_torch_reference():
    logits = torch.randn(6, 9, generator=_gen(7), dtype=D)
    tgt = torch.tensor([0, 3, 8, 8, 1, 2])
    ours, _ = softmax_cross_entropy(logits, tgt, ignore_id=8)
    ref = torch.nn.functional.cross_entropy(logits, tgt, ignore_index=8)
    assert math.isclose(float(ours), float(ref), rel_tol=1e-13)


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(ValueError):
        softmax_cross_entropy(torch.zeros(1, 3, dtype=D), [5], ignore_id=-1)


# --- finite-difference checks on every op (float64) ------------------------


def _fd_check(fn, *tensors, tol=1e-4):
    for t in tensors:
        t.requires_grad_(True)
    out = fn()
    weight = torch.randn(out.shape, generator=_gen(99), dtype=D)
    grads = torch.autograd.grad((out * weight).sum(), tensors)
    for t, g in zip(tensors, grads):
        num = fd_gradient(lambda: (fn() * weight).sum(), t.detach().requires_grad_(False))
        # some gradients are identically zero (e.g. key bias under softmax shift invariance)
        assert relative_error(g, num) < tol or float((g - num).abs().max()) < 1e-9


def test_fd_linear():
    x, w, b = (torch.randn(*s, generator=_gen(i), dtype=D) for i, s in enumerate([(3, 4), (5, 4), (5,)]))
    _fd_check(lambda: linear(x, w, b), x, w, b)


def test_fd_layer_norm():
    x = torch.randn(3, 6, generator=_gen(1), dtype=D)
    g = torch.randn(6, generator=_gen(2), dtype=D)
    b = torch.randn(6, generator=_gen(3), dtype=D)
    _fd_check(lambda: layer_norm(x, g, b), x, g, b)


def test_fd_embedding():
    table = torch.randn(5, 3, generator=_gen(1), dtype=D)
    ids = torch.tensor([[0, 4, 4], [2, 2, 1]])
    _fd_check(lambda: embedding_lookup(ids, table), table)


def test_fd_attention():
    p = _attn_params(4, seed=3)
    q = torch.randn(2, 3, 4, generator=_gen(1), dtype=D)
    kv = torch.randn(2, 4, 4, generator=_gen(2), dtype=D)
    mask = torch.tensor([[False, False, False, True], [False, True, False, False]])
    _fd_check(lambda: multi_head_attention(q, kv, kv, mask, 2, p), q, kv, *p.values())


def test_fd_cross_entropy():
    logits = torch.randn(4, 5, generator=_gen(1), dtype=D)
    tgt = torch.tensor([0, 4, 2, 3])
    _fd_check(lambda: cross_entropy(logits, tgt, ignore_id=3), logits)
    _, grad = softmax_cross_entropy(logits, tgt, ignore_id=3)
    num = fd_gradient(lambda: softmax_cross_entropy(logits, tgt, 3)[0], logits.detach())
    assert relative_error(grad, num) < 1e-6


# --- optimizer -------------------------------------------------------------


def test_adamw_first_step_matches_closed_form():
    p = {"w": torch.tensor([1.0, -2.0], dtype=D)}
    g = {"w": torch.tensor([0.5, 0.25], dtype=D)}
    opt = AdamW(p, weight_decay=0.1)
    opt.step(g, lr=0.01)
    # bias-corrected first step moves by lr * g/|g| after decay
    expected = np.array([1.0, -2.0]) * (1 - 0.01 * 0.1) - 0.01 * np.array([0.5, 0.25]) / (np.array([0.5, 0.25]) + 1e-8)
    assert np.allclose(p["w"].numpy(), expected, atol=1e-14)


def test_adamw_decay_is_decoupled():
    p = {"w": torch.tensor([3.0], dtype=D)}
    AdamW(p, weight_decay=0.5).step({"w": torch.zeros(1, dtype=D)}, lr=0.1)
    assert math.isclose(float(p["w"]), 3.0 * 0.95, rel_tol=1e-14)
    q = {"w": torch.tensor([3.0], dtype=D)}
    AdamW(q, weight_decay=0.0).step({"w": None}, lr=0.1)
    assert float(q["w"]) == 3.0


def test_adamw_minimizes_quadratic():
    target = torch.tensor([1.0, -2.0, 0.5], dtype=D)
    p = {"w": torch.zeros(3, dtype=D)}
    opt = AdamW(p, weight_decay=0.0)
    for _ in range(500):
        opt.step({"w": 2 * (p["w"] - target)}, lr=0.1)
    assert torch.allclose(p["w"], target, atol=1e-2)


def test_adamw_rejects_nonfinite_and_bad_lr():
    p = {"w": torch.zeros(2, dtype=D)}
    opt = AdamW(p)
    with pytest.raises(FloatingPointError, match="w"):
        opt.step({"w": torch.tensor([float("nan"), 0.0], dtype=D)}, lr=0.1)
    assert torch.all(p["w"] == 0)
    with pytest.raises(ValueError):
        adamw_step(p, {"w": torch.zeros(2, dtype=D)}, opt.state, lr=0.0)


def test_clip_grad_norm():
    g = {"a": torch.tensor([3.0], dtype=D), "b": torch.tensor([4.0], dtype=D), "c": None}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert math.isclose(float(torch.sqrt(g["a"] ** 2 + g["b"] ** 2)), 1.0, rel_tol=1e-9)


# --- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    tensors = {
        "a": torch.randn(3, 4, generator=_gen(1), dtype=torch.float32),
        "b": torch.randn(7, generator=_gen(2), dtype=D),
        "s": torch.tensor(2.5, dtype=D),
    }
    path = save_checkpoint(tmp_path / "x.rpt", tensors, {"width": 4}, {"note": "t"})
    back, header = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and torch.equal(back[k], tensors[k])
    assert header["config"] == {"width": 4} and header["meta"] == {"note": "t"}
    assert path.read_bytes()[:4] == b"RPT1"


def test_checkpoint_rejects_corruption(tmp_path):
    path = save_checkpoint(tmp_path / "x.rpt", {"a": torch.zeros(2, dtype=D)}, {"k": 1})
    raw = path.read_bytes()
    (tmp_path / "bad.rpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "bad.rpt")
    (tmp_path / "tail.rpt").write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(tmp_path / "tail.rpt")
    (tmp_path / "hash.rpt").write_bytes(raw.replace(b'"k": 1', b'"k": 2'))
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(tmp_path / "hash.rpt")


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers(-5, 5), max_size=4))
def test_config_hash_key_order_independent(cfg):
    rev = dict(reversed(list(cfg.items())))
    assert nn.config_hash(cfg) == nn.config_hash(rev)
    assert len(nn.config_hash(cfg)) == 16

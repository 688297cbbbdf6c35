import random

import pytest
import torch

from rxnpretrain import model as M
from rxnpretrain.smiles import BOS, EOS, PAD, tokenize
from rxnpretrain.synthetic import reaction_corpus
from rxnpretrain.training import prepare_reaction, pretrain_loss

from oracles import fd_gradient, relative_error

SMALL = M.ModelConfig(layers=2, heads=2, width=8, ff_width=16, max_len=40, dropout=0.0, dtype="float64")


@pytest.fixture(scope="module")
def params():
    return M.init_params(SMALL, seed=1)


def _frags(*smiles):
    return [tuple(tokenize(s)) for s in smiles]


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(width=10, heads=4)
    with pytest.raises(ValueError):
        M.ModelConfig.from_dict({"widht": 8})
    cfg = M.ModelConfig.from_dict(SMALL.to_dict())
    assert cfg == SMALL


def test_param_shapes(params):
    assert params["enc.emb"].shape == (131, 8)
    assert params["dec.out.w"].shape == (131, 8)
    assert params["enc.1.ff1.w"].shape == (16, 8)
    assert all(v.dtype == torch.float64 for v in params.values())
    enc_only = M.init_params(SMALL, seed=1, decoder=False)
    assert all(k.startswith("enc.") for k in enc_only)
    M.check_compatible(enc_only, SMALL)
    with pytest.raises(ValueError):
        M.check_compatible(enc_only, M.ModelConfig(layers=2, heads=2, width=16, ff_width=16, max_len=40))


def test_init_deterministic():
    a = M.init_params(SMALL, seed=3)
    b = M.init_params(SMALL, seed=3)
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = M.init_params(SMALL, seed=4)
    assert not torch.equal(a["enc.emb"], c["enc.emb"])


def test_permutation_invariance(params):
    frags = _frags("CCO", "c1ccccc1", "[Na+]")
    h = M.reaction_vectors([frags], params, SMALL)
    for perm in ([2, 0, 1], [1, 2, 0], [2, 1, 0]):
        h2 = M.reaction_vectors([[frags[i] for i in perm]], params, SMALL)
        assert torch.equal(h, h2)


def test_aggregate_matches_reaction_vectors(params):
    frags = _frags("CCO", "OC(=O)C", "N")
    encs = [M.encode_fragment(f, params, SMALL) for f in frags]
    assert torch.allclose(M.aggregate(encs), M.reaction_vectors([frags], params, SMALL)[0], atol=1e-13)
    assert torch.equal(M.aggregate(encs), M.aggregate(encs[::-1]))


def test_aggregate_is_sum_over_fragments_divided_by_longest(params):
    frags = _frags("CCO", "N")
    encs = [M.encode_fragment(f, params, SMALL) for f in frags]
    manual = (encs[0].values.sum(0) + encs[1].values.sum(0)) / 3
    assert torch.allclose(M.aggregate(encs), manual, atol=1e-14)
    strict = M.aggregate(encs, strict_length=SMALL.max_len)
    assert torch.allclose(strict, manual * 3 / SMALL.max_len, atol=1e-14)


def test_duplicate_fragment_doubles_contribution(params):
    a, b = _frags("CCCO", "CN")
    L = 4
    base = M.reaction_vectors([[a]], params, SMALL) * L
    once = M.reaction_vectors([[a, b]], params, SMALL) * L
    twice = M.reaction_vectors([[a, b, b]], params, SMALL) * L
    assert torch.allclose(twice - once, once - base, atol=1e-12)


def test_locality(params):
    # a fragment's encoding does not depend on the other fragments
    a, b, c = _frags("CCO", "N", "c1ccccc1")
    e1 = M.encode_tokens(M.pad_batch([a, b], SMALL.max_len), params, SMALL)[0]
    e2 = M.encode_tokens(M.pad_batch([a, c], SMALL.max_len), params, SMALL)[0]
    assert torch.equal(e1, e2)


def test_pad_rows_zero(params):
    enc = M.encode_tokens(M.pad_batch(_frags("CC"), 6), params, SMALL)
    assert torch.all(enc[0, 2:] == 0)


def test_pad_batch_errors():
    with pytest.raises(ValueError):
        M.pad_batch([()], 4)
    with pytest.raises(ValueError):
        M.pad_batch([(1, 2, 3)], 2)


def test_cross_attention_weights_exactly_one(params):
    h = M.reaction_vectors([_frags("CCO"), _frags("N", "O")], params, SMALL)
    tin, _ = M.decoder_targets([tokenize("CC"), tokenize("CCCN")], SMALL)
    _, weights = M.decode_teacher_forced(h, tin, params, SMALL, return_cross_weights=True)
    assert len(weights) == SMALL.layers
    for w in weights:
        assert torch.all(w == 1.0)


def test_decoder_causal(params):
    h = M.reaction_vectors([_frags("CCO")], params, SMALL)
    a = torch.tensor([[BOS, 67, 67, 79]])
    b = torch.tensor([[BOS, 67, 67, 78]])
    la = M.decode_teacher_forced(h, a, params, SMALL)
    lb = M.decode_teacher_forced(h, b, params, SMALL)
    assert torch.equal(la[:, :3], lb[:, :3])
    assert not torch.equal(la[:, 3], lb[:, 3])


def test_decoder_targets():
    tin, lab = M.decoder_targets([[67], [67, 79]], SMALL)
    # the trailing EOS of a short input is harmless: its label is PAD and attention is causal
    assert tin.tolist() == [[BOS, 67, EOS], [BOS, 67, 79]]
    assert lab.tolist() == [[67, EOS, PAD], [67, 79, EOS]]
    with pytest.raises(ValueError):
        M.decoder_targets([[67] * 39], SMALL)


def test_greedy_decode_shapes(params):
    h = M.reaction_vectors([_frags("CCO"), _frags("N")], params, SMALL)
    out = M.decode_greedy(h, params, SMALL, max_steps=5)
    assert len(out) == 2 and all(len(o) <= 5 for o in out)
    assert all(t not in (PAD, BOS, EOS) for o in out for t in o)


def test_fragment_tokens_roles():
    cfg = M.ModelConfig(layers=1, heads=2, width=8, ff_width=8, max_len=20, role_tokens=True, vocab_size=133)
    toks = M.fragment_tokens(["C", "O"], ["reactant", "reagent"], cfg)
    assert toks == [(M.REACTANT_ROLE, 67), (M.REAGENT_ROLE, 79)]
    assert M.fragment_tokens(["C"], None, SMALL) == [(67,)]


def test_end_to_end_gradient_selected_tensors():
    cfg = M.ModelConfig(layers=2, heads=2, width=8, ff_width=16, max_len=24, dropout=0.0, dtype="float64")
    p = M.init_params(cfg, seed=2)
    batch = [prepare_reaction(r, cfg) for r in reaction_corpus(3, seed=5, max_atoms=4)]
    loss = pretrain_loss(batch, p, cfg)
    names = ["enc.0.attn.q.w", "enc.1.ff2.b", "enc.ln.g", "dec.1.cross.v.w", "dec.0.self.k.w", "dec.out.b"]
    grads = torch.autograd.grad(loss, [p[n] for n in names])
    for n, g in zip(names, grads):
        num = fd_gradient(lambda: pretrain_loss(batch, p, cfg), p[n].detach())
        assert relative_error(g, num) < 1e-3 or float((g - num).abs().max()) < 1e-9, n


def test_property_head(params):
    head = M.init_head(params, SMALL, n_tasks=3, seed=0)
    assert not any(k.startswith("dec.") for k in head)
    assert torch.equal(head["enc.emb"], params["enc.emb"])
    toks = M.pad_batch(_frags("CCO", "N"), 10)
    out = M.property_forward(toks, head, SMALL)
    assert out.shape == (2, 3)
    pooled = M.pooled_encoding(toks, head, SMALL)
    enc = M.encode_tokens(toks, head, SMALL)
    assert torch.allclose(pooled[1], enc[1, :1].mean(0), atol=1e-14)


def test_property_head_embedding_gradient_nonzero(params):
    head = M.init_head(params, SMALL, n_tasks=1, seed=0)
    out = M.property_forward(M.pad_batch(_frags("CCO"), 5), head, SMALL)
    out.sum().backward()
    assert head["enc.emb"].grad[67].abs().sum() > 0
    assert torch.all(head["enc.emb"].grad[PAD] == 0)


def test_random_reactions_permutation_float32():
    cfg = M.ModelConfig(layers=1, heads=2, width=16, ff_width=32, max_len=40, dropout=0.0)
    p = M.init_params(cfg, seed=0)
    rng = random.Random(0)
    for r in reaction_corpus(10, seed=1):
        frags = M.fragment_tokens(r.fragments(), r.roles(), cfg)
        shuffled = frags[:]
        rng.shuffle(shuffled)
        assert torch.equal(M.reaction_vectors([frags], p, cfg), M.reaction_vectors([shuffled], p, cfg))

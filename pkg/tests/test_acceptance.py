"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines.
"""

import math
import random
import time

import numpy as np
import pytest
import torch

from rxnpretrain import model as M
from rxnpretrain import nn
from rxnpretrain.evaluation import bonferroni_level, rank_biserial, run_crossval_comparison, wilcoxon_signed_rank
from rxnpretrain.reactions import PropertyDataset, PropertyRecord
from rxnpretrain.smiles import SmilesError, parse_smiles, write_canonical, write_randomized
from rxnpretrain.synthetic import heteroatom_dataset, molecule_corpus, reaction_corpus
from rxnpretrain.training import (
    TrainConfig,
    cosine_cyclic_lr,
    fit_property_model,
    prepare_reaction,
    pretrain,
    pretrain_loss,
    token_accuracy,
)

from oracles import fd_gradient, relative_error, wilcoxon_enumeration

D = torch.float64


class Criterion:
    """Context manager that times a block and prints one PASS/FAIL line."""

    def __init__(self, number: int, name: str, budget_s: float):
        self.number, self.name, self.budget = number, name, budget_s
        self.details = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        over = elapsed > self.budget
        ok = exc_type is None and not over
        why = self.details if exc is None else f"{exc_type.__name__}: {exc}".splitlines()[0]
        if over and exc is None:
            why += f"; over the {self.budget:g}s budget"
        print(f"\n{'PASS' if ok else 'FAIL'} [{self.number}] {self.name}: {why} ({elapsed:.1f}s)")
        if over and exc is None:
            raise AssertionError(f"criterion {self.number} took {elapsed:.1f}s > {self.budget:g}s")
        return False


def test_1_statistics_fidelity():
    with Criterion(1, "statistics fidelity", 1.0) as c:
        baseline = [0.656 + 0.01 * k for k in range(10)]
        treated = [0.428 + 0.005 * k for k in range(10)]
        pairs = list(zip(baseline, treated))
        out = wilcoxon_signed_rank(pairs, direction="lower")
        r = rank_biserial(pairs, direction="lower")
        level = bonferroni_level(0.05, 12)
        assert round(out.p_value, 5) == 0.00098 and f"{out.p_value:.3f}" == "0.001"
        assert f"{r:.3f}" == "1.000"
        assert f"{level:.5f}" == "0.00417"
        c.details = f"p={out.p_value:.5f} (shown {out.p_value:.3f}), r={r:.3f}, alpha/12={level:.5f}"


def test_2_wilcoxon_oracle_equivalence():
    with Criterion(2, "Wilcoxon exact p vs 2^n enumeration", 60.0) as c:
        rng = np.random.default_rng(2024)
        worst, with_ties, with_zeros, done = 0.0, 0, 0, 0
        while done < 1000:
            n = int(rng.integers(1, 13))
            diffs = rng.choice([-3, -2, -1.5, -1, 0, 0.5, 1, 1.5, 2, 3], size=n)
            if not (diffs != 0).any():
                continue
            _, p_ge, _ = wilcoxon_enumeration(diffs)
            p = wilcoxon_signed_rank([(0.0, d) for d in diffs]).p_value
            worst = max(worst, abs(p - p_ge))
            nz = np.abs(diffs[diffs != 0])
            with_ties += len(np.unique(nz)) < len(nz)
            with_zeros += bool((diffs == 0).any())
            done += 1
        assert worst <= 1e-12
        assert with_ties > 100 and with_zeros > 100
        c.details = f"1000 instances ({with_ties} with ties, {with_zeros} with zeros), max |dp|={worst:.1e}"


def test_3_reaction_vector_invariants():
    with Criterion(3, "sum-then-mean invariants", 60.0) as c:
        cfg = M.ModelConfig(layers=2, heads=4, width=32, ff_width=64, max_len=48, dropout=0.0)
        params = M.init_params(cfg, seed=3)
        rng = random.Random(3)
        corpus = reaction_corpus(100, seed=33, max_atoms=6, reagent_prob=0.8)
        with torch.no_grad():
            for r in corpus:
                frags = M.fragment_tokens(r.fragments(), r.roles(), cfg)
                perm = frags[:]
                while len(perm) > 1 and perm == frags:
                    rng.shuffle(perm)
                h1 = M.reaction_vectors([frags], params, cfg)
                h2 = M.reaction_vectors([perm], params, cfg)
                assert torch.equal(h1, h2)
                tin, _ = M.decoder_targets([M.fragment_tokens([r.product], None, cfg)[0]], cfg)
                l1, w = M.decode_teacher_forced(h1, tin, params, cfg, return_cross_weights=True)
                l2 = M.decode_teacher_forced(h2, tin, params, cfg)
                assert torch.equal(l1, l2)
                assert all(torch.all(x == 1.0) for x in w)
                # {a, a} is exactly twice {a}: scaling by 2 is exact in binary floating point
                single = M.reaction_vectors([[frags[0]]], params, cfg)
                assert torch.equal(M.reaction_vectors([[frags[0], frags[0]]], params, cfg), 2 * single)
            # duplicating a fragment adds its contribution once more, exactly (float64)
            cfg64 = M.ModelConfig(**{**cfg.to_dict(), "dtype": "float64"})
            p64 = M.init_params(cfg64, seed=3)
            worst = 0.0
            for r in corpus[:20]:
                frags = M.fragment_tokens(r.fragments(), r.roles(), cfg64)
                enc = [M.encode_fragment(f, p64, cfg64) for f in frags]
                L = max(e.valid_len for e in enc)
                once = M.aggregate(enc) * L
                twice = M.aggregate(enc + [enc[0]]) * L
                worst = max(worst, float((twice - once - enc[0].values.sum(0)).abs().max()))
            assert worst < 1e-12
        c.details = (f"100 reactions bit-identical under permutation; h({{a,a}}) == 2 h({{a}}) bit-exact; "
                     f"added-duplicate error {worst:.1e}; cross weights == 1.0")


def _fd_op(fn, tensors, tol):
    out = fn()
    weight = torch.randn(out.shape, generator=torch.Generator().manual_seed(0), dtype=D)
    grads = torch.autograd.grad((out * weight).sum(), tensors, allow_unused=True)
    worst = 0.0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        num = fd_gradient(lambda: (fn() * weight).sum(), t.detach())
        err = relative_error(g, num) if float(num.abs().max()) > 1e-9 else float((g - num).abs().max())
        worst = max(worst, err)
    assert worst < tol, worst
    return worst


@pytest.mark.slow
def test_4_gradient_correctness():
    with Criterion(4, "finite-difference gradients", 300.0) as c:
        gen = torch.Generator().manual_seed(4)

        def rnd(*shape):
            return torch.randn(*shape, generator=gen, dtype=D).requires_grad_(True)

        ops = {}
        x, w, b = rnd(3, 5), rnd(4, 5), rnd(4)
        ops["linear"] = _fd_op(lambda: nn.linear(x, w, b), [x, w, b], 1e-4)
        x, g, bb = rnd(3, 6), rnd(6), rnd(6)
        ops["layer_norm"] = _fd_op(lambda: nn.layer_norm(x, g, bb), [x, g, bb], 1e-4)
        table = rnd(7, 4)
        ids = torch.tensor([[0, 6, 6], [3, 1, 0]])
        ops["embedding"] = _fd_op(lambda: nn.embedding_lookup(ids, table), [table], 1e-4)
        x = rnd(4, 6)
        ops["dropout"] = _fd_op(lambda: nn.dropout(x, 0.3, torch.Generator().manual_seed(1)), [x], 1e-4)
        ap = {}
        for name in "qkvo":
            nn.init_linear(ap, name, 8, 8, gen, D)
        for v in ap.values():
            v.requires_grad_(True)
        q, kv = rnd(2, 3, 8), rnd(2, 4, 8)
        mask = torch.tensor([[False, False, True, False], [False, True, True, False]])
        ops["attention"] = _fd_op(lambda: nn.multi_head_attention(q, kv, kv, mask, 2, ap), [q, kv, *ap.values()], 1e-4)
        s = rnd(3, 3, 8)
        ops["causal_attention"] = _fd_op(lambda: nn.multi_head_attention(s, s, s, None, 2, ap, causal=True), [s], 1e-4)
        logits = rnd(5, 131)
        tgt = torch.tensor([3, 128, 130, 67, 128])
        ops["cross_entropy"] = _fd_op(lambda: nn.cross_entropy(logits, tgt, 128), [logits], 1e-4)

        cfg = M.ModelConfig(layers=2, heads=2, width=8, ff_width=16, max_len=24, dropout=0.0, dtype="float64")
        params = M.init_params(cfg, seed=4)
        batch = [prepare_reaction(r, cfg) for r in reaction_corpus(2, seed=4, max_atoms=3)]
        loss = pretrain_loss(batch, params, cfg)
        names = list(params)
        grads = torch.autograd.grad(loss, [params[n] for n in names])
        analytic = torch.cat([g.reshape(-1) for g in grads])
        numeric = torch.cat([fd_gradient(lambda: pretrain_loss(batch, params, cfg), params[n].detach()).reshape(-1)
                             for n in names])
        e2e = relative_error(analytic, numeric)
        assert e2e < 1e-3
        op_txt = ", ".join(f"{k} {v:.1e}" for k, v in ops.items())
        c.details = f"ops max rel err: {op_txt}; end-to-end ({analytic.numel()} params) {e2e:.1e}"


@pytest.mark.slow
def test_5_memorization():
    with Criterion(5, "32-reaction memorization", 600.0) as c:
        cfg = M.ModelConfig(layers=2, heads=4, width=64, ff_width=128, max_len=48, dropout=0.0)
        corpus = reaction_corpus(32, seed=3)
        tcfg = TrainConfig(batch_size=32, max_steps=1000, base_lr=1e-4, max_lr=2e-3, cycle_steps=200, seed=0,
                           weight_decay=0.0)
        res = pretrain(corpus, cfg, tcfg)
        canon = [prepare_reaction(r, cfg) for r in corpus]
        acc = token_accuracy(canon, res.params, cfg)
        with torch.no_grad():
            h = M.reaction_vectors([p.fragments for p in canon], res.params, cfg)
            decoded = M.decode_greedy(h, res.params, cfg)
        exact = sum(list(d) == list(p.product) for d, p in zip(decoded, canon))
        assert acc > 0.99
        assert exact == 32
        c.details = f"token accuracy {acc:.4f} after {res.step} steps; {exact}/32 greedy products exact"


@pytest.mark.slow
def test_6_smiles_round_trip_and_fuzz():
    with Criterion(6, "SMILES round-trip and parser fuzz", 300.0) as c:
        mols = molecule_corpus(1000, seed=6, max_atoms=40)
        failures = 0
        for i, smi in enumerate(mols):
            g = parse_smiles(smi)
            assert len(g.atoms) <= 40
            canon = write_canonical(g)
            rng = random.Random(i)
            for _ in range(100):
                if write_canonical(parse_smiles(write_randomized(g, rng))) != canon:
                    failures += 1
        assert failures == 0
        rng = np.random.default_rng(6)
        alphabet = np.frombuffer(b"CNOSPFIBrclnos[]()=#-+@/\\.%0123456789H:*", dtype=np.uint8)
        crashes = rejected = 0
        for k in range(100_000):
            size = int(rng.integers(0, 24))
            raw = rng.integers(0, 256, size, dtype=np.uint8) if k % 2 else rng.choice(alphabet, size)
            data = bytes(raw)
            try:
                parse_smiles(data).validate()
            except SmilesError as exc:
                rejected += 1
                if not 0 <= exc.position <= len(data):
                    crashes += 1
            except Exception:  # noqa: BLE001
                crashes += 1
        assert crashes == 0
        c.details = (f"1000 molecules x 100 randomizations, {failures} mismatches; "
                     f"100000 fuzz inputs, {rejected} rejected cleanly, {crashes} crashes")


def test_7_scheduler_and_stopping():
    with Criterion(7, "cyclic schedule and early stopping", 1.0) as c:
        T = 1000
        assert cosine_cyclic_lr(0, 1e-5, 5e-4, T) == 1e-5
        assert cosine_cyclic_lr(T // 2, 1e-5, 5e-4, T) == 5e-4
        cfg = M.ModelConfig(layers=1, heads=1, width=4, ff_width=4, max_len=16, dropout=0.0)
        ds = PropertyDataset("t", ["y"], [PropertyRecord(s, (float(len(s)),)) for s in ["C", "CO", "CCN", "O"]])
        rigged = [3.0, 2.0, 2.5, 1.0, 1.5] + [1.2, 0.99999999 + 1e-7] * 100
        snaps = {}

        def evaluator(step, params):
            snaps[step] = {k: v.detach().clone() for k, v in params.items()}
            return rigged[step - 1]

        tcfg = TrainConfig.finetuning(batch_size=4, epochs=1000, lr=1e-3, patience=40)
        res = fit_property_model(ds, ds, cfg, tcfg, evaluator=evaluator)
        best = res.log.best_step
        assert best == 4 and res.step - best <= 40 and res.step == 44
        assert all(torch.equal(res.params[k], snaps[best][k]) for k in res.params)
        c.details = f"lr(0)={cosine_cyclic_lr(0, 1e-5, 5e-4, T):g}, lr(T/2)={cosine_cyclic_lr(T // 2, 1e-5, 5e-4, T):g}; best step {best}, halted at {res.step}"


@pytest.mark.slow
def test_8_transfer_signal_toy_scale():
    with Criterion(8, "toy-scale transfer signal", 1800.0) as c:
        cfg = M.ModelConfig(layers=2, heads=4, width=32, ff_width=64, max_len=48, dropout=0.0)
        corpus = reaction_corpus(2000, seed=11, max_atoms=10)
        pre = pretrain(corpus, cfg, TrainConfig(batch_size=64, max_steps=4000, base_lr=1e-4, max_lr=2e-3,
                                                cycle_steps=200, seed=1, weight_decay=0.0))
        encoder = {k: v for k, v in pre.params.items() if k.startswith("enc.")}
        ds = heteroatom_dataset(200, seed=5)
        # fixed 200-step budget: patience above the budget so neither arm halts early
        ft = TrainConfig.finetuning(batch_size=32, max_steps=200, patience=10**6, seed=3, search_runs=3,
                                    search_max_steps=50, search_low=1e-4, search_high=3e-3)
        report, results = run_crossval_comparison([ds], encoder, cfg, ft, n_folds=10, seed=7, metrics=["rmse"])
        text = report.to_text().splitlines()
        assert text[0].split()[:2] == ["Data", "set"] and len(text) == 3
        row = report.rows[0]
        assert row.n_folds == 10 and row.metric == "rmse" and row.direction == "lower"
        assert all(math.isfinite(v) for v in (row.baseline_mean, row.treated_mean, row.p_value, row.rank_biserial))
        arms = results[0].arms
        assert len(arms["random"]) == len(arms["pretrained"]) == 10
        wins = sum(p.final_val_loss <= b.final_val_loss for b, p in zip(arms["random"], arms["pretrained"]))
        c.details = (f"pre-trained val loss <= random in {wins}/10 folds; test RMSE {row.baseline_mean:.3f} -> "
                     f"{row.treated_mean:.3f}, p={row.p_value:.3f}, r={row.rank_biserial:.3f}")
        assert wins >= 7

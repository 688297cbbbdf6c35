"""Toy molecules, a toy reaction grammar and a derived property task.

Used for smoke runs and tests where real corpora are not available. The
reaction grammar couples two random molecules at their canonically-first
atoms, so the product is a deterministic function of the reactant set and
carries every reactant atom.
"""

from __future__ import annotations

import random

from .reactions import PropertyDataset, PropertyRecord, Reaction
from .smiles import Atom, Bond, BondOrder, MolGraph, canonical_ranks, parse_smiles, write_canonical

_ELEMENTS = ("C",) * 6 + ("N", "O", "O", "S", "F", "Cl")
_MAX_DEGREE = {"C": 4, "N": 3, "O": 2, "S": 2, "F": 1, "Cl": 1, "Br": 1}
_AROMATIC_RINGS = ("cccccc", "ccccnc", "ccncnc", "cccoc", "cccsc")
_REAGENTS = ("O", "CO", "CCO", "[Na+]", "[Cl-]", "CN(C)C=O", "ClCCl", "[K+]", "O=C([O-])[O-]")


def _free(g: MolGraph, degree: list[int], i: int) -> bool:
    a = g.atoms[i]
    limit = _MAX_DEGREE.get(a.element, 4) - (1 if a.aromatic else 0)
    return degree[i] < limit


def random_molecule(rng: random.Random, min_atoms: int = 2, max_atoms: int = 8, ring_prob: float = 0.0,
                    aromatic_prob: float = 0.0, charge_prob: float = 0.0, double_prob: float = 0.1) -> MolGraph:
    """Random connected heavy-atom graph with simple valence limits."""
    g = MolGraph()
    degree: list[int] = []

    def add_atom(atom: Atom, anchor: int | None, order: BondOrder = BondOrder.SINGLE) -> int:
        g.atoms.append(atom)
        degree.append(0)
        idx = len(g.atoms) - 1
        if anchor is not None:
            g.bonds.append(Bond(anchor, idx, order))
            degree[anchor] += 1
            degree[idx] += 1
        return idx

    target = rng.randint(min_atoms, max_atoms)
    if aromatic_prob and rng.random() < aromatic_prob and target >= 6:
        ring = rng.choice(_AROMATIC_RINGS)
        first = add_atom(Atom(ring[0].upper(), aromatic=True), None)
        prev = first
        for ch in ring[1:]:
            atom = Atom(ch.upper(), aromatic=True, hcount=1, bracket=True) if ch == "n" and rng.random() < 0.2 else Atom(ch.upper(), aromatic=True)
            prev = add_atom(atom, prev, BondOrder.AROMATIC)
        g.bonds.append(Bond(prev, first, BondOrder.AROMATIC))
        degree[prev] += 1
        degree[first] += 1
    else:
        add_atom(Atom(rng.choice(_ELEMENTS)), None)
    attempts = 0
    while len(g.atoms) < target and attempts < 200:
        attempts += 1
        anchors = [i for i in range(len(g.atoms)) if _free(g, degree, i)]
        if not anchors:
            break
        anchor = rng.choice(anchors)
        element = rng.choice(_ELEMENTS)
        charged = charge_prob and rng.random() < charge_prob and element in ("N", "O")
        atom = Atom(element, charge=(1 if element == "N" else -1), bracket=True) if charged else Atom(element)
        order = BondOrder.SINGLE
        if (not g.atoms[anchor].aromatic and element in ("C", "O", "N") and not charged
                and _MAX_DEGREE[g.atoms[anchor].element] - degree[anchor] >= 2 and rng.random() < double_prob):
            order = BondOrder.DOUBLE
            degree[anchor] += 1
        idx = add_atom(atom, anchor, order)
        if order == BondOrder.DOUBLE:
            degree[idx] += 1
    if ring_prob and rng.random() < ring_prob and len(g.atoms) >= 5:
        existing = {frozenset((b.begin, b.end)) for b in g.bonds}
        cands = [(i, j) for i in range(len(g.atoms)) for j in range(i + 3, len(g.atoms))
                 if frozenset((i, j)) not in existing and _free(g, degree, i) and _free(g, degree, j)
                 and not (g.atoms[i].aromatic and g.atoms[j].aromatic)]
        if cands:
            i, j = rng.choice(cands)
            g.bonds.append(Bond(i, j, BondOrder.SINGLE))
    g.validate()
    return g


def couple(a: MolGraph, b: MolGraph) -> MolGraph:
    """Join ``b`` onto ``a`` by a single bond between their canonically-first atoms."""
    ra, rb = canonical_ranks(a), canonical_ranks(b)
    ia = min(range(len(a.atoms)), key=ra.__getitem__)
    ib = min(range(len(b.atoms)), key=rb.__getitem__)
    off = len(a.atoms)
    atoms = list(a.atoms) + list(b.atoms)
    bonds = list(a.bonds) + [Bond(x.begin + off, x.end + off, x.order) for x in b.bonds]
    bonds.append(Bond(ia, ib + off, BondOrder.SINGLE))
    return MolGraph(atoms, bonds)


def random_reaction(rng: random.Random, max_atoms: int = 6, reagent_prob: float = 0.5) -> Reaction:
    a = random_molecule(rng, 1, max_atoms)
    b = random_molecule(rng, 1, max_atoms)
    product = write_canonical(couple(a, b))
    reagents = (rng.choice(_REAGENTS),) if rng.random() < reagent_prob else ()
    return Reaction((write_canonical(a), write_canonical(b)), reagents, product)


def reaction_corpus(n: int, seed: int = 0, max_atoms: int = 6, reagent_prob: float = 0.5) -> list[Reaction]:
    rng = random.Random(seed)
    out, seen = [], set()
    while len(out) < n:
        r = random_reaction(rng, max_atoms, reagent_prob)
        key = (frozenset(r.reactants), r.product)
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out


def heteroatom_count(smiles: str) -> int:
    return sum(1 for a in parse_smiles(smiles).atoms if a.element != "C")


def heteroatom_dataset(n: int, seed: int = 0, min_atoms: int = 2, max_atoms: int = 10) -> PropertyDataset:
    """Regression task whose label is the number of non-carbon heavy atoms."""
    rng = random.Random(seed)
    records = []
    for _ in range(n):
        smi = write_canonical(random_molecule(rng, min_atoms, max_atoms))
        records.append(PropertyRecord(smi, (float(heteroatom_count(smi)),)))
    return PropertyDataset("heteroatoms", ["heteroatoms"], records, "regression")


def molecule_corpus(n: int, seed: int = 0, max_atoms: int = 40) -> list[str]:
    """Diverse canonical SMILES: rings, aromatic rings, charges, brackets."""
    rng = random.Random(seed)
    return [
        write_canonical(random_molecule(rng, 1, max_atoms, ring_prob=0.5, aromatic_prob=0.4, charge_prob=0.05, double_prob=0.15))
        for _ in range(n)
    ]

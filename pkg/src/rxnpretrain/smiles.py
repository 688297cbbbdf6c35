"""SMILES parsing, randomized/canonical writing and ASCII tokenization.

The graph model is deliberately small: heavy atoms with element, aromatic
flag, formal charge, explicit hydrogen count and a bracket flag, joined by
single/double/triple/aromatic bonds. There is no valence model, so two
strings are the same molecule exactly when their graphs are isomorphic over
those labels.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

PAD = 128
BOS = 129
EOS = 130
VOCAB_SIZE = 131

ORGANIC = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
AROMATIC_BRACKET = ("b", "c", "n", "o", "p", "s", "se", "as")

ELEMENTS = frozenset(
    """H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co
    Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te
    I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir
    Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No
    Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og""".split()
)


class SmilesError(ValueError):
    """Parse failure with the 0-based character position where it was detected."""

    def __init__(self, position: int, reason: str):
        super().__init__(f"position {position}: {reason}")
        self.position = position
        self.reason = reason


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4


_BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}
_BOND_TEXT = {BondOrder.DOUBLE: "=", BondOrder.TRIPLE: "#"}


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    charge: int = 0
    hcount: int = 0
    bracket: bool = False

    @property
    def label(self) -> tuple:
        return (self.element, self.aromatic, self.charge, self.hcount, self.bracket)


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder


@dataclass
class MolGraph:
    atoms: list[Atom] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.atoms)

    def neighbors(self) -> list[list[tuple[int, BondOrder]]]:
        adj: list[list[tuple[int, BondOrder]]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.begin].append((b.end, b.order))
            adj[b.end].append((b.begin, b.order))
        return adj

    def validate(self) -> None:
        n = len(self.atoms)
        if n == 0:
            raise ValueError("empty molecule")
        seen = set()
        for b in self.bonds:
            if not (0 <= b.begin < n and 0 <= b.end < n) or b.begin == b.end:
                raise ValueError(f"bad bond endpoints {b.begin}-{b.end}")
            key = frozenset((b.begin, b.end))
            if key in seen:
                raise ValueError(f"duplicate bond {b.begin}-{b.end}")
            seen.add(key)
            if b.order == BondOrder.AROMATIC and not (
                self.atoms[b.begin].aromatic and self.atoms[b.end].aromatic
            ):
                raise ValueError(f"aromatic bond {b.begin}-{b.end} between non-aromatic atoms")
        adj = self.neighbors()
        stack, reached = [0], {0}
        while stack:
            for w, _ in adj[stack.pop()]:
                if w not in reached:
                    reached.add(w)
                    stack.append(w)
        if len(reached) != n:
            raise ValueError("molecule graph is not connected")


# ---------------------------------------------------------------------------
# parsing


class _Parser:
    def __init__(self, text: str):
        self.s = text
        self.i = 0
        self.atoms: list[Atom] = []
        self.bonds: dict[frozenset, Bond] = {}
        # ring digit -> (atom index, bond symbol or None, position)
        self.rings: dict[int, tuple[int, str | None, int]] = {}

    def error(self, reason: str, pos: int | None = None) -> SmilesError:
        return SmilesError(self.i if pos is None else pos, reason)

    def peek(self) -> str:
        return self.s[self.i] if self.i < len(self.s) else ""

    def parse(self) -> MolGraph:
        if not self.s:
            raise self.error("empty input")
        prev: int | None = None
        pending_bond: tuple[str, int] | None = None
        branches: list[tuple[int, int]] = []  # (atom index, position of '(')
        while self.i < len(self.s):
            c = self.s[self.i]
            if c == "(":
                if prev is None:
                    raise self.error("branch opened before any atom")
                if pending_bond is not None:
                    raise self.error("bond symbol before branch")
                if self.i + 1 < len(self.s) and self.s[self.i + 1] == ")":
                    raise self.error("empty branch")
                branches.append((prev, self.i))
                self.i += 1
            elif c == ")":
                if not branches:
                    raise self.error("unbalanced parenthesis: unexpected ')'")
                if pending_bond is not None:
                    raise self.error("bond symbol without following atom")
                prev = branches.pop()[0]
                self.i += 1
            elif c in _BOND_SYMBOLS:
                if prev is None:
                    raise self.error("bond symbol before any atom")
                if pending_bond is not None:
                    raise self.error("two consecutive bond symbols")
                pending_bond = (c, self.i)
                self.i += 1
            elif c.isdigit() or c == "%":
                if prev is None:
                    raise self.error("ring closure before any atom")
                self.ring_closure(prev, pending_bond[0] if pending_bond else None)
                pending_bond = None
            elif c in "/\\":
                raise self.error("stereochemistry is not supported")
            elif c == ".":
                raise self.error("multi-component SMILES; split fragments on '.' first")
            else:
                idx = self.atom()
                if prev is not None:
                    self.add_bond(prev, idx, pending_bond[0] if pending_bond else None, pending_bond[1] if pending_bond else self.i)
                elif pending_bond is not None:  # pragma: no cover - guarded above
                    raise self.error("bond symbol before any atom")
                pending_bond = None
                prev = idx
        if pending_bond is not None:
            raise self.error("bond symbol without following atom")
        if branches:
            raise self.error("unbalanced parenthesis: missing ')'")
        if self.rings:
            digit, (_, _, pos) = min(self.rings.items(), key=lambda kv: kv[1][2])
            raise SmilesError(pos, f"unmatched ring-closure digit {digit}")
        return MolGraph(self.atoms, list(self.bonds.values()))

    def ring_closure(self, atom: int, symbol: str | None) -> None:
        start = self.i
        if self.s[self.i] == "%":
            digits = self.s[self.i + 1 : self.i + 3]
            if len(digits) != 2 or not digits.isdigit():
                raise self.error("'%' must be followed by two digits")
            num = int(digits)
            self.i += 3
        else:
            num = int(self.s[self.i])
            self.i += 1
        if num not in self.rings:
            self.rings[num] = (atom, symbol, start)
            return
        other, other_symbol, _ = self.rings.pop(num)
        if other == atom:
            raise SmilesError(start, "ring closure to the same atom")
        if symbol and other_symbol and symbol != other_symbol:
            raise SmilesError(start, "conflicting ring-closure bond symbols")
        self.add_bond(other, atom, symbol or other_symbol, start)

    def add_bond(self, a: int, b: int, symbol: str | None, pos: int) -> None:
        both_aromatic = self.atoms[a].aromatic and self.atoms[b].aromatic
        if symbol is None:
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
        else:
            order = _BOND_SYMBOLS[symbol]
            if order == BondOrder.AROMATIC and not both_aromatic:
                raise SmilesError(pos, "aromatic bond between non-aromatic atoms")
        key = frozenset((a, b))
        if key in self.bonds:
            raise SmilesError(pos, "duplicate bond between the same atoms")
        self.bonds[key] = Bond(a, b, order)

    def atom(self) -> int:
        c = self.peek()
        if c == "[":
            atom = self.bracket_atom()
        elif self.s.startswith(("Cl", "Br"), self.i):
            atom = Atom(self.s[self.i : self.i + 2])
            self.i += 2
        elif c in ORGANIC:
            atom = Atom(c)
            self.i += 1
        elif c in AROMATIC_ORGANIC:
            atom = Atom(c.upper(), aromatic=True)
            self.i += 1
        elif c == "@":
            raise self.error("stereochemistry is not supported")
        else:
            raise self.error(f"unknown atom symbol {c!r}")
        self.atoms.append(atom)
        return len(self.atoms) - 1

    def bracket_atom(self) -> Atom:
        start = self.i
        end = self.s.find("]", start)
        if end < 0:
            raise self.error("unclosed bracket atom")
        body = self.s[start + 1 : end]
        self.i = start + 1
        if not body:
            raise self.error("empty bracket atom")
        if body[0].isdigit():
            raise self.error("isotopes are not supported")
        # element: longest match, aromatic forms first
        symbol = None
        aromatic = False
        for cand in (body[:2], body[:1]):
            if cand in AROMATIC_BRACKET and len(cand) <= len(body):
                symbol, aromatic = cand.capitalize(), True
                break
            if cand in ELEMENTS:
                symbol = cand
                break
        if symbol is None:
            raise self.error(f"unknown element in bracket atom {body!r}")
        j = len(symbol)
        hcount = 0
        charge = 0
        if j < len(body) and body[j] == "@":
            raise SmilesError(start + 1 + j, "stereochemistry is not supported")
        if j < len(body) and body[j] == "H":
            j += 1
            k = j
            while k < len(body) and body[k].isdigit():
                k += 1
            hcount = int(body[j:k]) if k > j else 1
            j = k
        if j < len(body) and body[j] in "+-":
            sign = 1 if body[j] == "+" else -1
            k = j + 1
            if k < len(body) and body[k].isdigit():
                while k < len(body) and body[k].isdigit():
                    k += 1
                charge = sign * int(body[j + 1 : k])
            else:
                while k < len(body) and body[k] == body[j]:
                    k += 1
                charge = sign * (k - j)
            j = k
        if j < len(body):
            pos = start + 1 + j
            if body[j] == ":":
                raise SmilesError(pos, "atom classes are not supported")
            if body[j] == "@":
                raise SmilesError(pos, "stereochemistry is not supported")
            raise SmilesError(pos, f"unexpected {body[j]!r} in bracket atom")
        self.i = end + 1
        return Atom(symbol, aromatic, charge, hcount, bracket=True)


def parse_smiles(s: str | bytes) -> MolGraph:
    """Parse a single-fragment SMILES string into a :class:`MolGraph`.

    Raises :class:`SmilesError` carrying the 0-based position of the problem.
    Errors detected at end of input (e.g. a missing ``')'``) report
    ``len(s)``.
    """
    if isinstance(s, (bytes, bytearray)):
        for pos, byte in enumerate(s):
            if byte > 127:
                raise SmilesError(pos, "non-ASCII byte")
        s = bytes(s).decode("ascii")
    for pos, ch in enumerate(s):
        if ord(ch) > 127 or not ch.isprintable() or ch.isspace():
            raise SmilesError(pos, f"invalid character {ch!r}")
    return _Parser(s).parse()


# ---------------------------------------------------------------------------
# writing


def _atom_text(atom: Atom) -> str:
    sym = atom.element.lower() if atom.aromatic else atom.element
    if not atom.bracket:
        return sym
    out = "[" + sym
    if atom.hcount:
        out += "H" if atom.hcount == 1 else f"H{atom.hcount}"
    if atom.charge:
        out += ("+" if atom.charge > 0 else "-") + (str(abs(atom.charge)) if abs(atom.charge) > 1 else "")
    return out + "]"


def _bond_text(g: MolGraph, a: int, b: int, order: BondOrder) -> str:
    if order in _BOND_TEXT:
        return _BOND_TEXT[order]
    if order == BondOrder.SINGLE and g.atoms[a].aromatic and g.atoms[b].aromatic:
        return "-"
    return ""


def _ring_label(num: int) -> str:
    return str(num) if num < 10 else f"%{num}"


def _write(g: MolGraph, start: int, order: Sequence[Sequence[tuple[int, BondOrder]]]) -> str:
    """Linearize ``g`` by depth-first traversal from ``start``.

    ``order[v]`` is the neighbour visiting order at ``v``; it decides the DFS
    tree, which edges become ring closures and which branch is written last.
    """
    n = len(g.atoms)
    visited = [False] * n
    children: list[list[tuple[int, BondOrder]]] = [[] for _ in range(n)]
    opens: list[list[tuple[int, BondOrder]]] = [[] for _ in range(n)]
    closes: list[list[int]] = [[] for _ in range(n)]
    done_edges: set[frozenset] = set()

    # iterative DFS keeps deep chains clear of the recursion limit
    visited[start] = True
    stack = [(start, iter(order[start]))]
    while stack:
        v, it = stack[-1]
        for w, bo in it:
            key = frozenset((v, w))
            if key in done_edges:
                continue
            done_edges.add(key)
            if visited[w]:
                # back edge to an ancestor: ring opens at the ancestor
                opens[w].append((v, bo))
                closes[v].append(w)
            else:
                visited[w] = True
                children[v].append((w, bo))
                stack.append((w, iter(order[w])))
            break
        else:
            stack.pop()

    parts: list[str] = []
    free: list[int] = []
    next_num = 1
    open_digit: dict[frozenset, int] = {}

    def take_digit() -> int:
        nonlocal next_num
        if free:
            free.sort()
            return free.pop(0)
        next_num += 1
        return next_num - 1

    # explicit stack of (atom, bond text) items and branch markers
    work: list = [("atom", start, "")]
    while work:
        item = work.pop()
        if item[0] == "text":
            parts.append(item[1])
            continue
        _, v, btext = item
        parts.append(btext + _atom_text(g.atoms[v]))
        for w in closes[v]:
            num = open_digit.pop(frozenset((v, w)))
            parts.append(_ring_label(num))
            free.append(num)
        for w, bo in opens[v]:
            num = take_digit()
            open_digit[frozenset((v, w))] = num
            parts.append(_bond_text(g, v, w, bo) + _ring_label(num))
        kids = children[v]
        # push in reverse so the first child is written first
        for idx in range(len(kids) - 1, -1, -1):
            w, bo = kids[idx]
            bt = _bond_text(g, v, w, bo)
            if idx == len(kids) - 1:
                work.append(("atom", w, bt))
            else:
                work.append(("text", ")"))
                work.append(("atom", w, bt))
                work.append(("text", "("))
    return "".join(parts)


def _as_rng(rng) -> random.Random:
    if isinstance(rng, random.Random):
        return rng
    return random.Random(rng)


def write_randomized(g: MolGraph, rng=None) -> str:
    """Write a random SMILES: uniform start atom, uniformly shuffled neighbour order.

    ``rng`` may be a :class:`random.Random` or a seed.
    """
    rng = _as_rng(rng)
    start = rng.randrange(len(g.atoms))
    adj = g.neighbors()
    for nbrs in adj:
        rng.shuffle(nbrs)
    return _write(g, start, adj)


def randomize_smiles(smiles: str, rng=None) -> str:
    return write_randomized(parse_smiles(smiles), rng)


# ---------------------------------------------------------------------------
# canonicalization


def _dense_rank(keys: Sequence) -> list[int]:
    order = sorted(set(keys))
    lookup = {k: i for i, k in enumerate(order)}
    return [lookup[k] for k in keys]


def _refine(ranks: list[int], adj) -> list[int]:
    """Morgan-style refinement until the partition stops splitting."""
    n_classes = len(set(ranks))
    while True:
        keys = [
            (ranks[v], tuple(sorted((ranks[w], int(bo)) for w, bo in adj[v])))
            for v in range(len(ranks))
        ]
        new = _dense_rank(keys)
        n_new = len(set(new))
        if n_new == n_classes:
            return new
        ranks, n_classes = new, n_new


def _initial_invariants(g: MolGraph, adj) -> list[tuple]:
    return [
        (a.element, a.charge, len(adj[i]), a.aromatic, a.hcount, a.bracket,
         tuple(sorted(int(bo) for _, bo in adj[i])))
        for i, a in enumerate(g.atoms)
    ]


# product of tied-cell sizes explored exhaustively before falling back to
# single-representative tie breaking
_EXHAUSTIVE_BUDGET = 8


def canonical_ranks(g: MolGraph) -> list[int]:
    """Canonical atom ranking (0 = first), a function of the graph's isomorphism class."""
    return _canonical(g)[1]


def _canonical(g: MolGraph) -> tuple[str, list[int]]:
    adj = g.neighbors()
    start_ranks = _refine(_dense_rank(_initial_invariants(g, adj)), adj)
    best: tuple[str, list[int]] | None = None

    def leaf(ranks: list[int]) -> tuple[str, list[int]]:
        order = [sorted(nbrs, key=lambda t: ranks[t[0]]) for nbrs in adj]
        start = min(range(len(ranks)), key=ranks.__getitem__)
        return _write(g, start, order), ranks

    def search(ranks: list[int], budget: int) -> None:
        nonlocal best
        n = len(ranks)
        counts: dict[int, int] = {}
        for r in ranks:
            counts[r] = counts.get(r, 0) + 1
        tied = [r for r, c in counts.items() if c > 1]
        if not tied:
            cand = leaf(ranks)
            if best is None or cand[0] < best[0]:
                best = cand
            return
        # split the lowest-ranked tied cell
        cell_rank = min(tied)
        members = [v for v in range(n) if ranks[v] == cell_rank]
        explore = members if budget * len(members) <= _EXHAUSTIVE_BUDGET else members[:1]
        child_budget = budget * len(explore)
        for v in explore:
            keys = [(2 * r + (0 if u == v else 1)) if r == cell_rank else 2 * r for u, r in enumerate(ranks)]
            search(_refine(_dense_rank(keys), adj), child_budget)

    search(start_ranks, 1)
    assert best is not None
    return best


def write_canonical(g: MolGraph) -> str:
    """Deterministic SMILES that depends only on the isomorphism class of ``g``."""
    return _canonical(g)[0]


def canonicalize(smiles: str) -> str:
    return write_canonical(parse_smiles(smiles))


# ---------------------------------------------------------------------------
# tokenization


def tokenize(s: str) -> list[int]:
    """One token per character: its ASCII code."""
    ids = []
    for pos, ch in enumerate(s):
        code = ord(ch)
        if code > 127:
            raise SmilesError(pos, f"non-ASCII character {ch!r}")
        ids.append(code)
    return ids


def detokenize(ids: Iterable[int]) -> str:
    chars = []
    for pos, t in enumerate(ids):
        t = int(t)
        if not 0 <= t <= 127:
            raise ValueError(f"token {t} at position {pos} is not a character id")
        chars.append(chr(t))
    return "".join(chars)

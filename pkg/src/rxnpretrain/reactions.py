"""Reaction corpora, property datasets and cross-validation fold plans."""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .smiles import SmilesError, parse_smiles, write_canonical, write_randomized

MAX_SMILES_LEN = 157


class ReactionError(ValueError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class Reaction:
    reactants: tuple[str, ...]
    reagents: tuple[str, ...]
    product: str

    def fragments(self) -> tuple[str, ...]:
        return self.reactants + self.reagents

    def roles(self) -> tuple[str, ...]:
        return ("reactant",) * len(self.reactants) + ("reagent",) * len(self.reagents)

    def to_line(self) -> str:
        return f"{'.'.join(self.reactants)}>{'.'.join(self.reagents)}>{self.product}"


def _split(field_text: str) -> tuple[str, ...]:
    return tuple(f for f in field_text.split(".")) if field_text else ()


def parse_reaction_line(line: str) -> Reaction:
    """Parse ``reactants>reagents>product``; fragments are '.'-separated."""
    line = line.strip()
    parts = line.split(">")
    if len(parts) != 3:
        raise ReactionError("format", f"expected two '>' separators, found {len(parts) - 1}")
    reactants, reagents, products = (_split(p) for p in parts)
    if len(products) > 1:
        raise ReactionError("multi-product", f"{len(products)} product fragments")
    if not products:
        raise ReactionError("format", "missing product")
    if not reactants:
        raise ReactionError("format", "missing reactants")
    for frag in reactants + reagents + products:
        if not frag:
            raise ReactionError("format", "empty fragment")
        try:
            parse_smiles(frag)
        except SmilesError as exc:
            raise ReactionError("unparsable", f"{frag!r}: {exc}") from exc
    return Reaction(reactants, reagents, products[0])


def read_reactions(path) -> tuple[list[Reaction], list[tuple[int, str]]]:
    """Parse a corpus file; returns ``(reactions, [(line number, reason), ...])``."""
    kept, rejected = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                kept.append(parse_reaction_line(line))
            except ReactionError as exc:
                rejected.append((lineno, exc.reason))
    return kept, rejected


def filter_and_truncate(reactions: Iterable[Reaction], max_len: int = MAX_SMILES_LEN):
    """Keep reactions whose every SMILES has at most ``max_len`` characters.

    Over-length reactions are dropped whole rather than cut, since a cut
    SMILES is generally not a molecule. Returns ``(kept, [(reaction, reason)])``.
    """
    kept, dropped = [], []
    for r in reactions:
        if all(len(s) <= max_len for s in r.fragments() + (r.product,)):
            kept.append(r)
        else:
            dropped.append((r, "length"))
    return kept, dropped


def augment_reaction(r: Reaction, rng=None) -> Reaction:
    """Randomize reactant/reagent SMILES and canonicalize the product."""
    rng = rng if isinstance(rng, random.Random) else random.Random(rng)
    return Reaction(
        tuple(write_randomized(parse_smiles(s), rng) for s in r.reactants),
        tuple(write_randomized(parse_smiles(s), rng) for s in r.reagents),
        write_canonical(parse_smiles(r.product)),
    )


# ---------------------------------------------------------------------------
# property data


@dataclass(frozen=True)
class PropertyRecord:
    smiles: str
    labels: tuple[float | None, ...]


@dataclass
class PropertyDataset:
    name: str
    tasks: list[str]
    records: list[PropertyRecord]
    task_type: str = "regression"

    def __len__(self) -> int:
        return len(self.records)

    def label_matrix(self) -> np.ndarray:
        """``(n, T)`` float array with NaN for missing labels."""
        return np.array([[np.nan if v is None else v for v in r.labels] for r in self.records], dtype=float)

    def subset(self, indices: Sequence[int]) -> "PropertyDataset":
        return PropertyDataset(self.name, self.tasks, [self.records[i] for i in indices], self.task_type)


def load_property_csv(path) -> list[PropertyRecord]:
    return load_property_dataset(path).records


def load_property_dataset(path, name: str | None = None, task_type: str | None = None) -> PropertyDataset:
    """Read ``smiles,task1,...`` CSV; empty cells are missing labels.

    ``task_type`` defaults to classification when every present label is 0
    or 1, regression otherwise.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0].strip().lower() != "smiles":
        raise ValueError(f"{path}: missing header row starting with 'smiles'")
    tasks = [t.strip() for t in rows[0][1:]]
    if not tasks:
        raise ValueError(f"{path}: header names no tasks")
    records = []
    for rowno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(tasks) + 1:
            raise ValueError(f"{path}: row {rowno} has {len(row)} cells, header has {len(tasks) + 1}")
        labels: list[float | None] = []
        for cell in row[1:]:
            cell = cell.strip()
            if cell == "":
                labels.append(None)
                continue
            try:
                value = float(cell)
            except ValueError:
                raise ValueError(f"{path}: row {rowno}: cannot parse {cell!r} as a number") from None
            if not math.isfinite(value):
                raise ValueError(f"{path}: row {rowno}: non-finite label {cell!r}")
            labels.append(value)
        if all(v is None for v in labels):
            raise ValueError(f"{path}: row {rowno} has no labels")
        records.append(PropertyRecord(row[0].strip(), tuple(labels)))
    if task_type is None:
        present = {v for r in records for v in r.labels if v is not None}
        task_type = "classification" if present <= {0.0, 1.0} else "regression"
    return PropertyDataset(name or path.stem, tasks, records, task_type)


# ---------------------------------------------------------------------------
# fold plans

ROLES = ("test", "validation", "tuning", "training")


@dataclass
class FoldPlan:
    n_folds: int
    assignments: list[int]
    seed: int | None = None
    stratify: int | None = None
    _members: dict = field(default_factory=dict, repr=False, compare=False)

    def fold(self, k: int) -> list[int]:
        if k not in self._members:
            self._members[k] = [i for i, f in enumerate(self.assignments) if f == k]
        return self._members[k]

    def roles(self, k: int) -> dict[str, list[int]]:
        """Record indices per role in rotation ``k``."""
        n = self.n_folds
        special = {k % n: "test", (k + 1) % n: "validation", (k + 2) % n: "tuning"}
        out: dict[str, list[int]] = {r: [] for r in ROLES}
        for f in range(n):
            out[special.get(f, "training")].extend(self.fold(f))
        for r in out:
            out[r].sort()
        return out

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "n_folds": self.n_folds, "assignments": self.assignments})

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        assignments = [int(a) for a in d["assignments"]]
        n = int(d["n_folds"])
        if n < 3 or any(not 0 <= a < n for a in assignments):
            raise ValueError("fold plan assignments out of range")
        return cls(n, assignments, d.get("seed"))


def make_fold_plan(records: Sequence[PropertyRecord] | int, n_folds: int = 10, stratify: int | None = None, seed: int = 0) -> FoldPlan:
    """Random (or label-stratified) assignment of records to ``n_folds`` folds.

    Records are shuffled and dealt round-robin, so fold sizes differ by at
    most one; when stratifying, positives are dealt before negatives so each
    fold's positive count also differs by at most one.
    """
    if n_folds < 3:
        raise ValueError("need at least 3 folds (test, validation and tuning roles)")
    n = records if isinstance(records, int) else len(records)
    rng = np.random.default_rng(seed)
    if stratify is None:
        order = rng.permutation(n).tolist()
    else:
        if isinstance(records, int):
            raise ValueError("stratification needs records with labels")
        labels = [r.labels[stratify] if stratify < len(r.labels) else None for r in records]
        if any(v is None for v in labels):
            raise ValueError(f"stratification label {stratify} is missing for some records")
        if not set(labels) <= {0.0, 1.0}:
            raise ValueError(f"stratification label {stratify} is not binary")
        pos = [i for i, v in enumerate(labels) if v == 1.0]
        neg = [i for i, v in enumerate(labels) if v == 0.0]
        order = [pos[i] for i in rng.permutation(len(pos))] + [neg[i] for i in rng.permutation(len(neg))]
    assignments = [0] * n
    for rank, idx in enumerate(order):
        assignments[idx] = rank % n_folds
    return FoldPlan(n_folds, assignments, seed, stratify)

"""Jigsaw permutation sets chosen to be far apart in Hamming distance.

Index 0 of every set is the identity ("ordered") permutation. The remaining
entries are picked greedily: each new entry is the candidate whose minimum
Hamming distance to everything already selected is largest, ties going to the
lexicographically smallest candidate.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

POOL_CAP = 500_000


@dataclass(frozen=True)
class Permutation:
    order: Tuple[int, ...]

    def __post_init__(self):
        order = tuple(int(v) for v in self.order)
        if sorted(order) != list(range(len(order))):
            raise ValueError(f"not a permutation of 0..{len(order) - 1}: {order}")
        object.__setattr__(self, "order", order)

    def __len__(self) -> int:
        return len(self.order)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(tuple(range(n)))

    def inverse(self) -> "Permutation":
        inv = [0] * len(self.order)
        for i, v in enumerate(self.order):
            inv[v] = i
        return Permutation(tuple(inv))

    @property
    def is_identity(self) -> bool:
        return self.order == tuple(range(len(self.order)))


@dataclass(frozen=True)
class PermutationSet:
    n_tiles: int
    entries: Tuple[Permutation, ...]
    seed: int
    min_pairwise: Optional[int]  # None for a singleton set

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def P(self) -> int:
        return len(self.entries)

    def as_array(self) -> np.ndarray:
        return np.array([p.order for p in self.entries], dtype=np.int64).reshape(len(self.entries), self.n_tiles)


@dataclass(frozen=True)
class AuditReport:
    distinct: bool
    has_identity: bool
    lengths_ok: bool
    min_pairwise: Optional[int]
    mean_pairwise: Optional[float]

    @property
    def ok(self) -> bool:
        return self.distinct and self.has_identity and self.lengths_ok


def hamming(a: Permutation, b: Permutation) -> int:
    """Number of grid positions at which two permutations place different tiles."""
    if len(a) != len(b):
        raise ValueError(f"hamming: length mismatch {len(a)} vs {len(b)}")
    return sum(x != y for x, y in zip(a.order, b.order))


def _candidate_pool(n_tiles: int, seed: int) -> np.ndarray:
    """Lexicographically sorted candidates, identity included."""
    if math.factorial(n_tiles) <= POOL_CAP:
        return np.array(list(itertools.permutations(range(n_tiles))), dtype=np.int8).reshape(-1, n_tiles)
    rng = np.random.default_rng(seed)
    pool = np.arange(n_tiles, dtype=np.int8)[None, :]
    while pool.shape[0] < POOL_CAP:
        need = POOL_CAP - pool.shape[0]
        fresh = np.argsort(rng.random((need, n_tiles)), axis=1).astype(np.int8)
        pool = np.unique(np.concatenate([pool, fresh]), axis=0)
    identity = np.arange(n_tiles, dtype=np.int8)
    if pool.shape[0] > POOL_CAP:
        # trim extras but never drop the identity
        keep = np.ones(pool.shape[0], dtype=bool)
        extra = pool.shape[0] - POOL_CAP
        not_id = np.flatnonzero(~(pool == identity).all(axis=1))
        keep[not_id[-extra:]] = False
        pool = pool[keep]
    return pool


def generate_permutation_set(n_tiles: int, P: int, seed: int = 0) -> PermutationSet:
    if n_tiles < 1:
        raise ValueError("n_tiles must be >= 1")
    if P < 1:
        raise ValueError("P must be >= 1")
    pool_size = min(math.factorial(n_tiles), POOL_CAP)
    if P > pool_size:
        raise ValueError(f"P={P} exceeds the candidate pool of {pool_size} permutations for {n_tiles} tiles")
    pool = _candidate_pool(n_tiles, seed)
    identity = np.arange(n_tiles)
    id_row = int(np.flatnonzero((pool == identity).all(axis=1))[0])

    chosen = [id_row]
    # min distance from each candidate to the chosen set; chosen rows sit at 0
    min_dist = (pool != pool[id_row]).sum(axis=1).astype(np.int16)
    achieved = None
    for _ in range(P - 1):
        best = int(np.argmax(min_dist))  # first max == lexicographically smallest
        d = int(min_dist[best])
        achieved = d if achieved is None else min(achieved, d)
        chosen.append(best)
        np.minimum(min_dist, (pool != pool[best]).sum(axis=1).astype(np.int16), out=min_dist)

    entries = tuple(Permutation(tuple(int(v) for v in pool[i])) for i in chosen)
    return PermutationSet(n_tiles=n_tiles, entries=entries, seed=seed, min_pairwise=achieved)


def pairwise_distances(s: PermutationSet) -> np.ndarray:
    arr = s.as_array()
    return (arr[:, None, :] != arr[None, :, :]).sum(axis=2)


def audit_set(s: PermutationSet) -> AuditReport:
    """Exhaustive pairwise scan. Violations are reported, never raised."""
    lengths_ok = all(len(p) == s.n_tiles for p in s.entries)
    has_identity = bool(s.entries) and s.entries[0].is_identity
    if not lengths_ok:
        return AuditReport(len(set(s.entries)) == len(s.entries), has_identity, False, None, None)
    if len(s.entries) < 2:
        return AuditReport(True, has_identity, True, None, None)
    d = pairwise_distances(s)
    upper = d[np.triu_indices(len(s.entries), k=1)]
    return AuditReport(
        distinct=bool((upper > 0).all()),
        has_identity=has_identity,
        lengths_ok=True,
        min_pairwise=int(upper.min()),
        mean_pairwise=float(upper.mean()),
    )


def save_permutation_set(s: PermutationSet, path: Union[str, Path]) -> None:
    lines = [f"{s.n_tiles} {s.P} {s.seed}"]
    lines += [" ".join(str(v) for v in p.order) for p in s.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_permutation_set(path: Union[str, Path]) -> PermutationSet:
    """Parse a permutation-set file, rejecting anything that breaks the set invariants."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty permutation file")
    try:
        n_tiles, P, seed = (int(v) for v in lines[0].split())
    except ValueError:
        raise ValueError(f"{path}: header must be 'n_tiles P seed', got {lines[0]!r}") from None
    if len(lines) - 1 != P:
        raise ValueError(f"{path}: header declares {P} permutations, found {len(lines) - 1}")
    entries = []
    for lineno, ln in enumerate(lines[1:], start=2):
        order = tuple(int(v) for v in ln.split())
        if len(order) != n_tiles:
            raise ValueError(f"{path}:{lineno}: expected {n_tiles} indices, got {len(order)}")
        entries.append(Permutation(order))
    s = PermutationSet(n_tiles, tuple(entries), seed, None)
    report = audit_set(s)
    if not report.has_identity:
        raise ValueError(f"{path}: first permutation must be the identity")
    if not report.distinct:
        raise ValueError(f"{path}: duplicate permutations")
    return PermutationSet(n_tiles, tuple(entries), seed, report.min_pairwise)


def from_orders(orders: Sequence[Sequence[int]], seed: int = 0) -> PermutationSet:
    """Wrap explicit orders as a set (no invariant enforcement; see :func:`audit_set`)."""
    entries = tuple(Permutation(tuple(o)) for o in orders)
    n = len(entries[0]) if entries else 0
    s = PermutationSet(n, entries, seed, None)
    return PermutationSet(n, entries, seed, audit_set(s).min_pairwise)

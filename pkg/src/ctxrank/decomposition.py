"""Tabular K-th order FETA over a finite object universe ``{0, ..., N-1}``.

Utilities are stored per context size: ``U_c(i, C)`` for a context ``C`` of
``c`` other items, keyed by ``(i, sorted tuple of C)``. Size 0 holds the
context-free utility ``U_0``. A ranking function maps every non-empty subset
(a sorted tuple) to the positions of its items, in the tuple's order.

``construct_feta_tables`` builds tables that reproduce an arbitrary ranking
function on every subset, level by level: each new level scores an item by
its inverse position in the target ranking, spaced widely enough that the
lower levels can no longer flip any pair.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .ranklosses import rank_from_scores

MAX_UNIVERSE = 8

Query = tuple[int, ...]


@dataclass
class UtilityTables:
    universe_size: int
    tables: dict[tuple[int, Query], float] = field(default_factory=dict)

    @property
    def max_order(self) -> int:
        return max((len(ctx) for _, ctx in self.tables), default=0)

    def get(self, item: int, context) -> float:
        ctx = tuple(sorted(context))
        if item in ctx:
            raise ValueError(f"item {item} cannot be part of its own context")
        try:
            return self.tables[(item, ctx)]
        except KeyError:
            raise KeyError(f"no utility entry for item {item} in context {ctx}") from None

    def set(self, item: int, context, value: float) -> None:
        ctx = tuple(sorted(context))
        if item in ctx:
            raise ValueError(f"item {item} cannot be part of its own context")
        if not math.isfinite(value):
            raise ValueError("utility values must be finite")
        self.tables[(item, ctx)] = float(value)

    def copy(self) -> UtilityTables:
        return UtilityTables(self.universe_size, dict(self.tables))


def all_queries(n: int):
    """Every non-empty subset of ``range(n)`` as a sorted tuple, by size."""
    for size in range(1, n + 1):
        yield from itertools.combinations(range(n), size)


def kth_order_utility(tables: UtilityTables, i: int, C, K: int) -> float:
    """``U_0(i)`` plus, for k = 1..K, the mean of ``U_k`` over all k-subsets of ``C``."""
    C = tuple(sorted(C))
    if i in C:
        raise ValueError("item is part of its context")
    if K > len(C):
        raise ValueError(f"order {K} exceeds context size {len(C)}")
    total = tables.get(i, ())
    for k in range(1, K + 1):
        subs = itertools.combinations(C, k)
        total += sum(tables.get(i, sub) for sub in subs) / math.comb(len(C), k)
    return total


def feta_query_scores(tables: UtilityTables, Q: Query, K: int | None = None) -> np.ndarray:
    """Scores of the items of ``Q`` (in order) with contexts ``Q`` minus the item.

    ``K`` defaults to the highest populated order of ``tables``.
    """
    K = tables.max_order if K is None else K
    return np.array(
        [kth_order_utility(tables, i, Q[:a] + Q[a + 1 :], min(K, len(Q) - 1)) for a, i in enumerate(Q)]
    )


def tables_from_matrices(U0, U1=None) -> UtilityTables:
    """First-order tables from a utility vector and a pairwise matrix (diagonal ignored)."""
    U0 = np.asarray(U0, dtype=np.float64)
    N = len(U0)
    t = UtilityTables(N)
    for i in range(N):
        t.set(i, (), U0[i])
        if U1 is not None:
            for j in range(N):
                if j != i:
                    t.set(i, (j,), U1[i][j])
    return t


def ranking_function_from_tables(tables: UtilityTables, K: int | None = None) -> dict[Query, np.ndarray]:
    return {
        Q: rank_from_scores(feta_query_scores(tables, Q, K)) for Q in all_queries(tables.universe_size)
    }


def random_ranking_function(N: int, rng: np.random.Generator) -> dict[Query, np.ndarray]:
    return {Q: rng.permutation(len(Q)) for Q in all_queries(N)}


def _check_total(rho, N):
    for Q in all_queries(N):
        if Q not in rho:
            raise ValueError(f"ranking function is not defined on query {Q}")
        pi = np.asarray(rho[Q])
        if sorted(pi.tolist()) != list(range(len(Q))):
            raise ValueError(f"ranking for {Q} is not a permutation")


def construct_feta_tables(rho: dict[Query, np.ndarray], epsilon: float = 1.0, N: int | None = None) -> UtilityTables:
    """Tables of order N-1 whose FETA aggregation reproduces ``rho`` on every query."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if N is None:
        N = max((len(Q) for Q in rho), default=0)
    if not 1 <= N <= MAX_UNIVERSE:
        raise ValueError(f"universe size must be in [1, {MAX_UNIVERSE}], got {N}")
    _check_total(rho, N)
    tables = UtilityTables(N)
    for i in range(N):
        tables.set(i, (), 0.0)
    for i, j in itertools.permutations(range(N), 2):
        Q = (min(i, j), max(i, j))
        pos = np.asarray(rho[Q])
        tables.set(i, (j,), 1.0 if pos[Q.index(i)] < pos[Q.index(j)] else 0.0)
    for m in range(3, N + 1):
        queries = list(itertools.combinations(range(N), m))
        # largest spread of the already-built lower levels within any size-m query
        delta = 0.0
        for Q in queries:
            lower = feta_query_scores(tables, Q, K=m - 2)
            delta = max(delta, float(lower.max() - lower.min()))
        step = delta + epsilon
        for Q in queries:
            pos = np.asarray(rho[Q])
            for a, i in enumerate(Q):
                tables.set(i, Q[:a] + Q[a + 1 :], (m - (pos[a] + 1)) * step)
    return tables


@dataclass
class VerificationReport:
    n_queries: int
    mismatches: list[Query]
    min_margin: float

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def render(self) -> str:
        lines = [
            f"queries: {self.n_queries}",
            f"mismatches: {len(self.mismatches)}",
            f"min_margin: {self.min_margin!r}",
        ]
        lines += [f"mismatch: {list(Q)}" for Q in self.mismatches]
        return "\n".join(lines) + "\n"


def verify_reconstruction(rho: dict[Query, np.ndarray], tables: UtilityTables) -> VerificationReport:
    """Compare full-order FETA rankings with ``rho`` on every non-empty query.

    ``min_margin`` is the smallest score gap between consecutive items of a
    target ranking (negative when some pair is inverted; inf if all queries
    are singletons).
    """
    mismatches = []
    margin = math.inf
    N = tables.universe_size
    for Q in all_queries(N):
        s = feta_query_scores(tables, Q)
        target = np.asarray(rho[Q])
        if not np.array_equal(rank_from_scores(s), target):
            mismatches.append(Q)
        if len(Q) > 1:
            ordered = s[np.argsort(target)]
            margin = min(margin, float(np.min(ordered[:-1] - ordered[1:])))
    return VerificationReport(2**N - 1, mismatches, margin)


def preference_reversals(rho: dict[Query, np.ndarray]) -> list[tuple[int, int, Query, Query]]:
    """Pairs (a, b) ranked one way in some query and the other way in another."""
    seen: dict[tuple[int, int], tuple[bool, Query]] = {}
    out = []
    for Q, pi in rho.items():
        pi = np.asarray(pi)
        for x, y in itertools.combinations(range(len(Q)), 2):
            key = (Q[x], Q[y])
            above = bool(pi[x] < pi[y])
            if key not in seen:
                seen[key] = (above, Q)
            elif seen[key][0] != above:
                out.append((*key, seen[key][1], Q))
    return out


@dataclass
class SpanReport:
    universe_size: int
    n_functions: int
    all_restrictions: bool
    reversals: int

    @property
    def ok(self) -> bool:
        return (
            self.n_functions == math.factorial(self.universe_size)
            and self.all_restrictions
            and self.reversals == 0
        )


def zeroth_order_span(N: int) -> SpanReport:
    """Enumerate every strict U_0 order on N items and the ranking functions it induces.

    Checks that each induced function is the restriction of one global order
    and counts the distinct functions (N! when the span claim holds).
    """
    if not 1 <= N <= 6:
        raise ValueError("exhaustive span check supports 1 <= N <= 6")
    functions = set()
    restrictions = True
    reversals = 0
    for values in itertools.permutations(range(N)):
        tables = tables_from_matrices(np.array(values, dtype=np.float64))
        rho = ranking_function_from_tables(tables, K=0)
        global_pos = rho[tuple(range(N))]
        for Q, pi in rho.items():
            expected = rank_from_scores(-global_pos[list(Q)].astype(np.float64))
            restrictions &= bool(np.array_equal(pi, expected))
        reversals += len(preference_reversals(rho))
        functions.add(tuple(tuple(int(p) for p in rho[Q]) for Q in sorted(rho)))
    return SpanReport(N, len(functions), restrictions, reversals)


def extend_order(tables: UtilityTables, new_order: int) -> UtilityTables:
    """Copy of ``tables`` with a zero level ``U_new_order`` added for every context of that size."""
    out = tables.copy()
    N = tables.universe_size
    for i in range(N):
        others = [j for j in range(N) if j != i]
        for ctx in itertools.combinations(others, new_order):
            out.tables.setdefault((i, ctx), 0.0)
    return out

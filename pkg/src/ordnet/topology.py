"""Combinatorial complexes, neighborhood functions and ordered cells.

A complex is a set of vertices plus ranked cells (nonempty vertex subsets)
whose rank function is order preserving under inclusion. Cells get integer
ids; vertex cells come first, in sorted vertex order, then higher cells in
the order they were given.

Ordered cells are stored as :class:`CellOrder` records: the maximal chain of
the ordered neighbors plus the set of neighbors left off the chain.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

from .errors import (
    DuplicateCell,
    EmptySupport,
    NotOnChain,
    OrderMismatch,
    RankOrderViolation,
    UnknownCell,
)

CellId = int
Vertex = Hashable


class Kind(str, enum.Enum):
    INCIDENCE_UP = "incidence_up"
    INCIDENCE_DOWN = "incidence_down"
    ADJACENCY_UP = "adjacency_up"
    ADJACENCY_DOWN = "adjacency_down"


@dataclass(frozen=True)
class NeighborhoodSpec:
    """One neighborhood function; ``source_rank`` restricts it to cells of that rank."""

    kind: Kind
    r: int = 1
    source_rank: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.r < 1:
            raise ValueError(f"neighborhood order r must be >= 1, got {self.r}")

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "r": self.r, "source_rank": self.source_rank}

    @classmethod
    def from_json(cls, obj: dict) -> "NeighborhoodSpec":
        return cls(Kind(obj["kind"]), int(obj.get("r", 1)), obj.get("source_rank"))

    def __str__(self):
        s = f"{self.kind.value}({self.r})"
        return s if self.source_rank is None else f"{s}@rank{self.source_rank}"


def incidence_up(r: int = 1, source_rank: int | None = None) -> NeighborhoodSpec:
    return NeighborhoodSpec(Kind.INCIDENCE_UP, r, source_rank)


def incidence_down(r: int = 1, source_rank: int | None = None) -> NeighborhoodSpec:
    return NeighborhoodSpec(Kind.INCIDENCE_DOWN, r, source_rank)


def adjacency_up(r: int = 1, source_rank: int | None = None) -> NeighborhoodSpec:
    return NeighborhoodSpec(Kind.ADJACENCY_UP, r, source_rank)


def adjacency_down(r: int = 1, source_rank: int | None = None) -> NeighborhoodSpec:
    return NeighborhoodSpec(Kind.ADJACENCY_DOWN, r, source_rank)


@dataclass(frozen=True)
class Cell:
    id: CellId
    support: frozenset
    rank: int
    label: int | None = None


@dataclass(frozen=True)
class CellOrder:
    """Order induced by ``owner`` on one of its neighborhoods.

    ``chain`` is the total order (or the unique maximal chain of a partial
    order) in ascending order; ``unranked`` holds the neighbors that are not
    on the chain.
    """

    owner: CellId
    neighborhood: NeighborhoodSpec
    chain: tuple[CellId, ...]
    unranked: frozenset = frozenset()

    def to_json(self) -> dict:
        return {
            "owner": self.owner,
            "neighborhood": self.neighborhood.to_json(),
            "chain": list(self.chain),
            "unranked": sorted(self.unranked),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CellOrder":
        return cls(
            int(obj["owner"]),
            NeighborhoodSpec.from_json(obj["neighborhood"]),
            tuple(int(c) for c in obj["chain"]),
            frozenset(int(c) for c in obj.get("unranked", ())),
        )


@dataclass(frozen=True)
class HasseGraph:
    """Directed graph of one neighborhood: edge ``(tau, sigma)`` means tau is in N(sigma)."""

    nodes: tuple[CellId, ...]
    edges: tuple[tuple[CellId, CellId], ...]


@dataclass(frozen=True)
class Violation:
    kind: str
    cells: tuple
    detail: str = ""


def _vertex_key(v):
    return (type(v).__name__, v)


class CombinatorialComplex:
    """Immutable combinatorial complex with optional cell orders.

    Construct through :func:`build_complex` (checked) or directly (unchecked,
    used by :func:`validate` tests and deserialization of arbitrary input).
    """

    def __init__(
        self,
        vertices: Iterable[Vertex],
        cells: Iterable[Cell],
        orders: Iterable[CellOrder] = (),
    ):
        self._vertices = tuple(sorted(set(vertices), key=_vertex_key))
        self._cells = {c.id: c for c in cells}
        by_rank: dict[int, list[CellId]] = {}
        for cid in sorted(self._cells):
            by_rank.setdefault(self._cells[cid].rank, []).append(cid)
        self._by_rank = {k: tuple(v) for k, v in sorted(by_rank.items())}
        self._orders = {(o.owner, o.neighborhood): o for o in orders}
        self._vertex_cell = {}
        for cid, c in self._cells.items():
            if c.rank == 0 and len(c.support) == 1:
                (v,) = c.support
                self._vertex_cell.setdefault(v, cid)
        self._nbr_cache: dict[tuple[CellId, NeighborhoodSpec], tuple[CellId, ...]] = {}

    @property
    def vertices(self) -> tuple:
        return self._vertices

    @property
    def cells(self) -> dict[CellId, Cell]:
        return dict(self._cells)

    @property
    def orders(self) -> tuple[CellOrder, ...]:
        return tuple(self._orders.values())

    @property
    def dimension(self) -> int:
        return max(self._by_rank) if self._by_rank else -1

    def __len__(self):
        return len(self._cells)

    def __contains__(self, cid):
        return cid in self._cells

    def cell(self, cid: CellId) -> Cell:
        try:
            return self._cells[cid]
        except KeyError:
            raise UnknownCell(f"no cell with id {cid}") from None

    def cell_ids(self) -> tuple[CellId, ...]:
        return tuple(sorted(self._cells))

    def rank_cells(self, rank: int) -> tuple[CellId, ...]:
        return self._by_rank.get(rank, ())

    def count_by_rank(self) -> dict[int, int]:
        return {k: len(v) for k, v in self._by_rank.items()}

    def vertex_cell(self, v: Vertex) -> CellId:
        return self._vertex_cell[v]

    def find(self, support: Iterable[Vertex], rank: int | None = None) -> CellId:
        """Id of the cell with the given support (and rank, if given)."""
        s = frozenset(support)
        for c in self._cells.values():
            if c.support == s and (rank is None or c.rank == rank):
                return c.id
        raise UnknownCell(f"no cell with support {sorted(s, key=_vertex_key)}")

    def order_for(self, owner: CellId, spec: NeighborhoodSpec) -> CellOrder | None:
        return self._orders.get((owner, spec))

    def with_orders(self, orders: Iterable[CellOrder]) -> "CombinatorialComplex":
        return CombinatorialComplex(self._vertices, self._cells.values(), orders)

    def neighborhood(self, cid: CellId, spec: NeighborhoodSpec) -> tuple[CellId, ...]:
        key = (cid, spec)
        hit = self._nbr_cache.get(key)
        if hit is None:
            hit = self._compute_neighborhood(cid, spec)
            self._nbr_cache[key] = hit
        return hit

    def _compute_neighborhood(self, cid, spec):
        sigma = self.cell(cid)
        if spec.source_rank is not None and sigma.rank != spec.source_rank:
            return ()
        r = spec.r
        if spec.kind is Kind.INCIDENCE_UP:
            return tuple(
                t
                for t in self.rank_cells(sigma.rank + r)
                if sigma.support < self._cells[t].support
            )
        if spec.kind is Kind.INCIDENCE_DOWN:
            return tuple(
                t
                for t in self.rank_cells(sigma.rank - r)
                if self._cells[t].support < sigma.support
            )
        # adjacencies: tau shares an r-up (r-down) incidence with sigma; sigma itself excluded
        inner = NeighborhoodSpec(
            Kind.INCIDENCE_UP if spec.kind is Kind.ADJACENCY_UP else Kind.INCIDENCE_DOWN, r
        )
        back = NeighborhoodSpec(
            Kind.INCIDENCE_DOWN if spec.kind is Kind.ADJACENCY_UP else Kind.INCIDENCE_UP, r
        )
        out = set()
        for delta in self.neighborhood(cid, inner):
            out.update(self.neighborhood(delta, back))
        out.discard(cid)
        return tuple(sorted(out))

    def to_json(self) -> dict:
        return {
            "vertices": list(self._vertices),
            "cells": [
                {
                    "id": c.id,
                    "support": sorted(c.support, key=_vertex_key),
                    "rank": c.rank,
                    "label": c.label,
                }
                for c in (self._cells[i] for i in self.cell_ids())
            ],
            "orders": [o.to_json() for o in self._orders.values()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CombinatorialComplex":
        cells = [
            Cell(int(c["id"]), frozenset(c["support"]), int(c["rank"]), c.get("label"))
            for c in obj["cells"]
        ]
        orders = [CellOrder.from_json(o) for o in obj.get("orders", ())]
        return cls(obj["vertices"], cells, orders)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def build_complex(
    vertices: Iterable[Vertex],
    higher_cells: Sequence[tuple] = (),
    vertex_labels: dict | None = None,
    orders: Iterable[CellOrder] = (),
) -> CombinatorialComplex:
    """Build a checked complex; rank-0 vertex cells are created automatically.

    ``higher_cells`` holds ``(support, rank)`` or ``(support, rank, label)``
    tuples. Raises on the first invariant violation.
    """
    vertices = sorted(set(vertices), key=_vertex_key)
    vertex_labels = vertex_labels or {}
    cells = [Cell(i, frozenset([v]), 0, vertex_labels.get(v)) for i, v in enumerate(vertices)]
    vset = set(vertices)
    seen = {(c.support, 0) for c in cells}
    for spec in higher_cells:
        support, rank = frozenset(spec[0]), int(spec[1])
        label = spec[2] if len(spec) > 2 else None
        if not support:
            raise EmptySupport(f"cell #{len(cells)} has an empty support")
        if not support <= vset:
            raise ValueError(f"support {sorted(support, key=_vertex_key)} uses unknown vertices")
        if rank < 0:
            raise ValueError(f"rank must be nonnegative, got {rank}")
        if (support, rank) in seen:
            raise DuplicateCell(f"support {sorted(support, key=_vertex_key)} at rank {rank} given twice")
        seen.add((support, rank))
        cells.append(Cell(len(cells), support, rank, label))
    cc = CombinatorialComplex(vertices, cells, orders)
    for v in validate(cc):
        if v.kind == "Duplicate":
            raise DuplicateCell(v.detail)
        raise RankOrderViolation(v.detail)
    for o in cc.orders:
        check_order(cc, o)
    return cc


def validate(cc: CombinatorialComplex) -> list[Violation]:
    """All violated complex invariants; empty iff the complex is well formed."""
    out: list[Violation] = []
    cells = [cc.cell(i) for i in cc.cell_ids()]
    vset = set(cc.vertices)
    for c in cells:
        if not c.support:
            out.append(Violation("EmptySupport", (c.id,), f"cell {c.id} has empty support"))
        elif not c.support <= vset:
            out.append(Violation("UnknownVertex", (c.id,), f"cell {c.id} uses unknown vertices"))
        if c.rank < 0:
            out.append(Violation("NegativeRank", (c.id,), f"cell {c.id} has rank {c.rank}"))
        if c.rank == 0 and len(c.support) != 1:
            out.append(Violation("RankZeroNonVertex", (c.id,), f"rank-0 cell {c.id} is not a singleton"))
    singles = {next(iter(c.support)): c for c in cells if len(c.support) == 1 and c.rank == 0}
    for v in cc.vertices:
        if v not in singles:
            out.append(Violation("Property1", (v,), f"vertex {v!r} has no rank-0 cell"))
    by_support: dict[frozenset, list[Cell]] = {}
    for c in cells:
        by_support.setdefault(c.support, []).append(c)
    for support, group in by_support.items():
        ranks = [c.rank for c in group]
        for rank in set(ranks):
            dup = [c.id for c in group if c.rank == rank]
            if len(dup) > 1:
                out.append(Violation("Duplicate", tuple(dup), f"cells {dup} share support and rank {rank}"))
        if len(set(ranks)) > 1:
            ids = tuple(c.id for c in group)
            out.append(Violation("SupportCollision", ids, f"cells {list(ids)} share a support at ranks {sorted(set(ranks))}"))
    for s in cells:
        for t in cells:
            if s.id != t.id and s.support < t.support and s.rank > t.rank:
                out.append(
                    Violation(
                        "RankOrder",
                        (s.id, t.id),
                        f"cell {s.id} (rank {s.rank}) is contained in cell {t.id} (rank {t.rank})",
                    )
                )
    return out


def neighborhood(cc: CombinatorialComplex, cell: CellId, spec: NeighborhoodSpec) -> tuple[CellId, ...]:
    """Neighbors of ``cell`` under ``spec`` in ascending id order."""
    return cc.neighborhood(cell, spec)


def hasse_graph(cc: CombinatorialComplex, spec: NeighborhoodSpec) -> HasseGraph:
    nodes, edges = [], []
    for sigma in cc.cell_ids():
        nbrs = cc.neighborhood(sigma, spec)
        if nbrs:
            nodes.append(sigma)
            edges.extend((tau, sigma) for tau in nbrs)
    return HasseGraph(tuple(nodes), tuple(edges))


def check_order(cc: CombinatorialComplex, order: CellOrder) -> None:
    nbrs = set(cc.neighborhood(order.owner, order.neighborhood))
    chain = list(order.chain)
    if len(set(chain)) != len(chain):
        raise OrderMismatch(f"chain of cell {order.owner} repeats a cell")
    stray = [c for c in chain + sorted(order.unranked) if c not in nbrs]
    if stray:
        raise OrderMismatch(f"cells {stray} are not in {order.neighborhood} of cell {order.owner}")
    if set(chain) & order.unranked:
        raise OrderMismatch(f"cell {order.owner}: chain and unranked set overlap")
    if set(chain) | order.unranked != nbrs:
        missing = sorted(nbrs - set(chain) - order.unranked)
        raise OrderMismatch(f"order of cell {order.owner} does not cover neighbors {missing}")
    if nbrs and not chain:
        raise OrderMismatch(f"order of cell {order.owner} has an empty chain")


def ordered_neighbors(cc: CombinatorialComplex, order: CellOrder) -> tuple[CellId, ...]:
    """The ordered neighbors: the total order, or the maximal chain of a partial one."""
    check_order(cc, order)
    return order.chain


def tau_chain(order: CellOrder, tau: CellId) -> tuple[CellId, ...]:
    """Ascending prefix of the chain ending at ``tau``."""
    try:
        i = order.chain.index(tau)
    except ValueError:
        raise NotOnChain(f"cell {tau} is not on the chain of cell {order.owner}") from None
    return order.chain[: i + 1]


def load_complex(path) -> CombinatorialComplex:
    with open(path) as fh:
        return CombinatorialComplex.from_json(json.load(fh))


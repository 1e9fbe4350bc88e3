"""Color refinement tests on labeled combinatorial complexes.

``ccwl_refine`` gathers neighbor colors as sorted multisets; ``ord_ccwl_refine``
gathers them as tuples following each ordered cell's chain. Both run jointly
on the two complexes being compared so that colors are comparable, with a
shared interning table standing in for a perfect hash.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

from .errors import TooLarge
from .topology import (
    Cell,
    CellOrder,
    CombinatorialComplex,
    NeighborhoodSpec,
    build_complex,
    check_order,
    incidence_down,
)

MAX_BRUTE_FORCE_CELLS = 10


@dataclass
class Coloring:
    colors: dict  # (side, cell id) -> color
    round: int
    intern_table: dict = field(repr=False)


@dataclass(frozen=True)
class WlVerdict:
    distinguishable: bool
    rounds: int
    final_histograms: tuple[Counter, Counter]
    class_counts: tuple[int, ...] = ()


def _index_orders(cc, specs, orders):
    out = {}
    for o in orders:
        if o.neighborhood in specs:
            check_order(cc, o)
            out[(o.owner, o.neighborhood)] = o
    return out


def _refine(complexes, specs, orders_by_side) -> tuple[WlVerdict, Coloring]:
    specs = list(specs)
    intern: dict = {}

    def color_of(sig):
        c = intern.get(sig)
        if c is None:
            c = intern[sig] = len(intern)
        return c

    keys = [(side, cid) for side, cc in enumerate(complexes) for cid in cc.cell_ids()]
    colors = {}
    for side, cid in keys:
        cell = complexes[side].cell(cid)
        label = 0 if cell.label is None else cell.label
        colors[(side, cid)] = color_of(("init", cell.rank, label))
    counts = [len(set(colors.values()))]
    rounds = 0
    # a partition of n cells can be split at most n - 1 times
    for _ in range(len(keys) + 1):
        new = {}
        for side, cid in keys:
            cc = complexes[side]
            parts = []
            for spec in specs:
                order = orders_by_side[side].get((cid, spec))
                if order is None:
                    nbr = sorted(colors[(side, t)] for t in cc.neighborhood(cid, spec))
                    parts.append(("set", tuple(nbr)))
                else:
                    seq = tuple(colors[(side, t)] for t in order.chain)
                    rest = sorted(colors[(side, t)] for t in order.unranked)
                    parts.append(("seq", seq, tuple(rest)))
            new[(side, cid)] = color_of((colors[(side, cid)], tuple(parts)))
        rounds += 1
        n_new = len(set(new.values()))
        stable = n_new == counts[-1]
        colors = new
        counts.append(n_new)
        if stable:
            break
    hists = tuple(
        Counter(colors[(side, cid)] for cid in cc.cell_ids()) for side, cc in enumerate(complexes)
    )
    verdict = WlVerdict(hists[0] != hists[1], rounds, hists, tuple(counts))
    return verdict, Coloring(colors, rounds, intern)


def ccwl_refine(
    a: CombinatorialComplex, b: CombinatorialComplex, specs: Sequence[NeighborhoodSpec]
) -> WlVerdict:
    """Multiset (order-blind) refinement on the disjoint union of ``a`` and ``b``."""
    return _refine((a, b), specs, ({}, {}))[0]


def ord_ccwl_refine(
    a: CombinatorialComplex,
    b: CombinatorialComplex,
    specs: Sequence[NeighborhoodSpec],
    orders_a: Sequence[CellOrder] | None = None,
    orders_b: Sequence[CellOrder] | None = None,
) -> WlVerdict:
    """Order-aware refinement; orders default to the ones stored on each complex.

    Cells without a declared order on a neighborhood fall back to multisets.
    """
    specs = list(specs)
    oa = _index_orders(a, specs, a.orders if orders_a is None else orders_a)
    ob = _index_orders(b, specs, b.orders if orders_b is None else orders_b)
    return _refine((a, b), specs, (oa, ob))[0]


def _label(cell):
    return 0 if cell.label is None else cell.label


def brute_force_isomorphic(
    a: CombinatorialComplex, b: CombinatorialComplex, specs: Sequence[NeighborhoodSpec]
) -> bool:
    """Exhaustive search for a rank- and label-preserving bijection that maps
    every neighborhood relation onto the other complex and back."""
    if len(a) > MAX_BRUTE_FORCE_CELLS or len(b) > MAX_BRUTE_FORCE_CELLS:
        raise TooLarge(f"brute force is limited to {MAX_BRUTE_FORCE_CELLS} cells per complex")
    if len(a) != len(b):
        return False
    ca, cb = a.cell_ids(), b.cell_ids()
    key_a = {s: (a.cell(s).rank, _label(a.cell(s))) for s in ca}
    key_b = {s: (b.cell(s).rank, _label(b.cell(s))) for s in cb}
    if Counter(key_a.values()) != Counter(key_b.values()):
        return False
    rel_a = [{(t, s) for s in ca for t in a.neighborhood(s, sp)} for sp in specs]
    rel_b = [{(t, s) for s in cb for t in b.neighborhood(s, sp)} for sp in specs]
    if [len(r) for r in rel_a] != [len(r) for r in rel_b]:
        return False

    mapping: dict = {}
    used: set = set()

    def consistent(s, image):
        for ra, rb in zip(rel_a, rel_b):
            for t, img_t in mapping.items():
                if ((t, s) in ra) != ((img_t, image) in rb):
                    return False
                if ((s, t) in ra) != ((image, img_t) in rb):
                    return False
            if ((s, s) in ra) != ((image, image) in rb):
                return False
        return True

    def search(i):
        if i == len(ca):
            return True
        s = ca[i]
        for image in cb:
            if image in used or key_b[image] != key_a[s] or not consistent(s, image):
                continue
            mapping[s] = image
            used.add(image)
            if search(i + 1):
                return True
            del mapping[s]
            used.discard(image)
        return False

    # consistent() checks both directions, so the inverse preserves neighborhoods too
    return search(0)


def counterexample_pair() -> tuple[CombinatorialComplex, CombinatorialComplex, list[NeighborhoodSpec]]:
    """Two labeled simplicial complexes separated only by an ordered aggregation.

    Both are a filled triangle abc with a pendant edge cd. Every vertex and the
    triangle carry label 0; edges carry label 1 except one outlier edge with
    label 2, placed on ab in the first complex and on bc in the second. The
    triangle orders its edge faces as (ab, bc, ca). Under 1-down incidence the
    multiset test sees the same colors everywhere, while the tuple gathered by
    the triangle puts the outlier at a different position.
    """
    spec = incidence_down(1)

    def make(outlier):
        edges = ["ab", "bc", "ac", "cd"]
        cells = [(e, 1, 2 if e == outlier else 1) for e in edges] + [("abc", 2, 0)]
        cc = build_complex("abcd", cells, vertex_labels=dict.fromkeys("abcd", 0))
        tri = cc.find("abc")
        chain = (cc.find("ab"), cc.find("bc"), cc.find("ac"))
        return cc.with_orders([CellOrder(tri, spec, chain)])

    return make("ab"), make("bc"), [spec]


def load_fixture(path=None):
    """Read a pair file ``{"specs": [...], "a": complex, "b": complex}``."""
    if path is None:
        text = resources.files("ordnet.fixtures").joinpath("ordccwl_counterexample.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    obj = json.loads(text)
    specs = [NeighborhoodSpec.from_json(s) for s in obj["specs"]]
    return CombinatorialComplex.from_json(obj["a"]), CombinatorialComplex.from_json(obj["b"]), specs


def fixture_json() -> dict:
    a, b, specs = counterexample_pair()
    return {"version": 1, "specs": [s.to_json() for s in specs], "a": a.to_json(), "b": b.to_json()}


def relabel(cc: CombinatorialComplex, vertex_map: dict, cell_perm: Sequence[int] | None = None):
    """Copy of ``cc`` with vertices renamed and cell ids permuted; orders follow."""
    ids = cc.cell_ids()
    perm = dict(zip(ids, cell_perm if cell_perm is not None else ids))
    cells = [
        Cell(perm[c.id], frozenset(vertex_map[v] for v in c.support), c.rank, c.label)
        for c in (cc.cell(i) for i in ids)
    ]
    orders = [
        CellOrder(perm[o.owner], o.neighborhood, tuple(perm[t] for t in o.chain), frozenset(perm[t] for t in o.unranked))
        for o in cc.orders
    ]
    return CombinatorialComplex([vertex_map[v] for v in cc.vertices], cells, orders)


__all__ = [
    "Coloring",
    "WlVerdict",
    "ccwl_refine",
    "ord_ccwl_refine",
    "brute_force_isomorphic",
    "counterexample_pair",
    "load_fixture",
    "relabel",
]

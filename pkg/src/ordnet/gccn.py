"""GCCN and ordered GCCN layers over arbitrary combinatorial complexes.

Cell states are plain ``dict[CellId, Tensor]`` maps holding one feature
vector per cell. A layer updates every cell with at least one neighbor under
some configured neighborhood; all other cells pass through unchanged.

Per-neighborhood messages are a linear map of each neighbor state, summed over
the incoming edges of that neighborhood's Hasse graph, and the neighborhoods
are combined by elementwise sum. Ordered neighborhoods instead feed the chain
of neighbor states through a GRU started from a projection of the cell's own
state; the GRU state after consuming neighbor tau is the neighbor-dependent
representation of the cell at tau.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensornn as tn
from .errors import MissingState, ShapeMismatch
from .tensornn import ParamStore, Tensor
from .topology import CellId, CellOrder, CombinatorialComplex, NeighborhoodSpec, check_order

CellStates = dict  # CellId -> Tensor


@dataclass
class LayerConfig:
    neighborhoods: list[NeighborhoodSpec]
    hidden: int
    ordered: list[NeighborhoodSpec] = field(default_factory=list)
    update_layers: tuple[int, ...] = ()
    activation: str = "relu"
    name: str = "gccn"
    message_fn: str = "linear"
    inter_agg: str = "sum"
    update: str = "mlp"

    def __post_init__(self):
        if (self.message_fn, self.inter_agg, self.update) != ("linear", "sum", "mlp"):
            raise ValueError("only linear messages, sum aggregation and MLP updates are supported")
        if self.hidden < 1:
            raise ValueError("hidden width must be positive")

    def phi_sizes(self) -> list[int]:
        return [*self.update_layers, self.hidden]


def _state(states: Mapping, cid: CellId) -> Tensor:
    try:
        return states[cid]
    except KeyError:
        raise MissingState(f"no state for cell {cid}") from None


def neighborhood_message(
    cc: CombinatorialComplex,
    states: Mapping,
    sigma: CellId,
    spec: NeighborhoodSpec,
    params: ParamStore,
    name: str,
    width: int,
) -> Tensor | None:
    """Sum over incoming Hasse edges of a linear map of the neighbor state."""
    total = None
    for tau in cc.neighborhood(sigma, spec):
        h = _state(states, tau)
        msg = tn.linear(params, f"{name}/rank{cc.cell(tau).rank}", h, width, bias=False)
        total = msg if total is None else tn.add(total, msg)
    return total


def ordgccn_face_states(
    cc: CombinatorialComplex,
    states: Mapping,
    order: CellOrder,
    params: ParamStore,
    name: str = "ord",
    hidden: int | None = None,
    step_input: Callable[[CellId], Tensor] | None = None,
    project: bool = True,
    rnn: str | None = None,
) -> dict[CellId, Tensor]:
    """Neighbor-dependent states of ``order.owner``, one per chain element.

    The GRU starts from ``linear(h_owner)`` (or ``h_owner`` itself when
    ``project`` is false) and consumes ``step_input(tau)`` (default: the state
    of tau) for each tau on the chain in ascending order.
    """
    check_order(cc, order)
    h_own = _state(states, order.owner)
    hidden = hidden or h_own.shape[-1]
    h = tn.linear(params, f"{name}/init", h_own, hidden) if project else h_own
    if h.shape[-1] != hidden:
        raise ShapeMismatch(f"{name}: initial state width {h.shape[-1]} != {hidden}")
    rnn = rnn or f"{name}/rnn"
    out = {}
    for tau in order.chain:
        x = step_input(tau) if step_input is not None else _state(states, tau)
        h = tn.gru_step(params, rnn, x, h)
        out[tau] = h
    return out


def _participates(cc, sigma, specs):
    return any(cc.neighborhood(sigma, s) for s in specs)


def _update(cc, states, config, params, use_orders):
    out = dict(states)
    specs = list(config.neighborhoods)
    ordered = list(config.ordered) if use_orders else []
    all_specs = specs + [s for s in ordered if s not in specs]
    for sigma in cc.cell_ids():
        if not _participates(cc, sigma, all_specs):
            continue
        h = _state(states, sigma)
        seq_parts, set_parts = [], []
        ordered_here = set()
        for j, spec in enumerate(ordered):
            order = cc.order_for(sigma, spec)
            if order is None or not order.chain:
                continue
            ordered_here.add(spec)
            faces = ordgccn_face_states(
                cc, states, order, params, f"{config.name}/ord{j}", config.hidden
            )
            seq_parts.append(faces[order.chain[-1]])
        for i, spec in enumerate(specs):
            if spec in ordered_here:
                continue
            msg = neighborhood_message(cc, states, sigma, spec, params, f"{config.name}/omega{i}", config.hidden)
            if msg is not None:
                set_parts.append(msg)
        zero = Tensor(np.zeros(config.hidden))
        agg = _sum(set_parts) if set_parts else zero
        pieces = [h]
        if ordered:
            pieces.append(_sum(seq_parts) if seq_parts else zero)
        pieces.append(agg)
        rank = cc.cell(sigma).rank
        out[sigma] = tn.mlp(params, f"{config.name}/phi/rank{rank}", config.phi_sizes(), tn.concat(pieces), config.activation)
    return out


def _sum(parts):
    total = parts[0]
    for p in parts[1:]:
        total = tn.add(total, p)
    return total


def gccn_layer(cc: CombinatorialComplex, states: Mapping, config: LayerConfig, params: ParamStore) -> CellStates:
    """One permutation-invariant layer: ``phi(h, sum over neighborhoods of messages)``."""
    return _update(cc, states, config, params, use_orders=False)


def ordgccn_layer(cc: CombinatorialComplex, states: Mapping, config: LayerConfig, params: ParamStore) -> CellStates:
    """One order-aware layer: ``phi(h, last ordered GRU state, unordered aggregate)``.

    Orders are looked up on the complex for each spec in ``config.ordered``; a
    neighborhood used in order-aware form for a cell is left out of that
    cell's unordered sum. With no ordered specs this is exactly ``gccn_layer``.
    """
    return _update(cc, states, config, params, use_orders=bool(config.ordered))


def run_layers(
    cc: CombinatorialComplex,
    states: Mapping,
    configs: Sequence[LayerConfig],
    params: ParamStore,
) -> CellStates:
    for cfg in configs:
        states = ordgccn_layer(cc, states, cfg, params)
    return states

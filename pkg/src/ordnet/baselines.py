"""Analytical M/M/1 tandem delay baseline.

Every link is treated as an independent M/M/1 server fed by the superposition
of the flows crossing it, regardless of queue count or scheduling policy. The
mean service time uses the traffic-weighted mean packet size of those flows,
i.e. total bits over total packets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .netmodel import NetworkScenario


@dataclass(frozen=True)
class QtPrediction:
    delay: dict  # flow id -> seconds, math.inf when a traversed link is saturated
    utilization: dict  # link id -> rho
    saturated: frozenset  # link ids with rho >= 1
    sojourn: dict  # link id -> seconds (only links carrying traffic)


def qt_predict(scenario: NetworkScenario) -> QtPrediction:
    bits = {l.id: 0.0 for l in scenario.links}
    pkts = {l.id: 0.0 for l in scenario.links}
    for f in scenario.flows:
        for _, lid in f.path:
            bits[lid] += f.avg_rate
            pkts[lid] += f.avg_rate / f.packet_size
    util, sojourn, saturated = {}, {}, set()
    for l in scenario.links:
        util[l.id] = bits[l.id] / l.capacity
        if pkts[l.id] == 0:
            continue
        lam = pkts[l.id]
        mu = l.capacity / (bits[l.id] / pkts[l.id])
        if lam >= mu:
            saturated.add(l.id)
            sojourn[l.id] = math.inf
        else:
            sojourn[l.id] = 1.0 / (mu - lam)
    delay = {f.id: sum(sojourn[lid] for _, lid in f.path) for f in scenario.flows}
    return QtPrediction(delay, util, frozenset(saturated), sojourn)


__all__ = ["QtPrediction", "qt_predict"]

"""Packet-level discrete-event simulator used as the ground-truth oracle.

Packets follow each flow's traffic model, carry exponentially distributed
sizes and traverse their path hop by hop. Every link serves its queues
work-conservingly: strict priority (larger integer first) when any of its
queues is SP, otherwise the head packet that arrived first. Queues are
drop-tail with their size in bits; a packet arriving at an idle link goes
straight into service. Propagation delay is zero, so end-to-end delay is
queuing plus transmission time.

Statistics cover packets generated in ``[warmup, duration)``. After
``duration`` no new packets are generated but the event queue is drained, so
every counted packet is either delivered or dropped.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_ndtr

from .errors import BadParams, BadScenario, Infeasible
from .netmodel import FlowMetrics, FlowSpec, NetworkScenario, check_scenario

TRAFFIC_KINDS = ("poisson", "deterministic", "onoff", "autocorr_exp", "modulated_exp")
MAX_PILOT_LOSS = 0.03


@dataclass(frozen=True)
class TrafficModel:
    kind: str
    rate: float  # mean packets per second
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRAFFIC_KINDS:
            raise BadParams(f"unknown traffic model {self.kind!r}")
        if not self.rate > 0:
            raise BadParams("rate must be positive")
        p = self.params
        if self.kind == "onoff" and not (p.get("on_mean", 0) > 0 and p.get("off_mean", -1) >= 0):
            raise BadParams("onoff needs on_mean > 0 and off_mean >= 0")
        if self.kind in ("autocorr_exp", "modulated_exp") and not abs(p.get("rho", 0.0)) < 1:
            raise BadParams("AR coefficient must satisfy |rho| < 1")
        if self.kind == "modulated_exp":
            levels = p.get("levels", [1.0])
            if not levels or min(levels) <= 0 or p.get("period", 1.0) <= 0:
                raise BadParams("modulation levels and period must be positive")

    @classmethod
    def of_flow(cls, flow: FlowSpec) -> "TrafficModel":
        return cls(flow.traffic.model, flow.avg_rate / flow.packet_size, dict(flow.traffic.params))


class TrafficSampler:
    """Stateful interarrival generator; consecutive calls continue one stream."""

    def __init__(self, model: TrafficModel, rng: np.random.Generator):
        self.model = model
        self.rng = rng
        p = model.params
        self.z = rng.standard_normal()  # AR(1) state
        self.t = 0.0  # elapsed time, drives modulation
        if model.kind == "onoff":
            on, off = p["on_mean"], p["off_mean"]
            self.on_rate = model.rate * (on + off) / on
            # start in the stationary phase: OFF with probability off / (on + off)
            in_on = rng.random() < on / (on + off)
            self.pending = 0.0 if in_on or off == 0 else rng.exponential(off)
            self.left = rng.exponential(on)
        if model.kind == "modulated_exp":
            levels = np.asarray(p.get("levels", [1.0]), dtype=float)
            self.levels = levels / levels.mean()
            self.period = float(p.get("period", 1.0))

    def _ar_gap(self, rate: float) -> float:
        rho = self.model.params.get("rho", 0.0)
        self.z = rho * self.z + math.sqrt(1.0 - rho * rho) * self.rng.standard_normal()
        # Exp(rate) quantile of Phi(z), computed as -log(1 - Phi(z)) / rate = -log Phi(-z) / rate
        return float(-log_ndtr(-self.z)) / rate

    def _onoff_gap(self) -> float:
        on, off = self.model.params["on_mean"], self.model.params["off_mean"]
        gap = self.pending
        self.pending = 0.0
        while True:
            cand = self.rng.exponential(1.0 / self.on_rate)
            if cand <= self.left:
                self.left -= cand
                return gap + cand
            gap += self.left
            if off > 0:
                gap += self.rng.exponential(off)
            self.left = self.rng.exponential(on)

    def gaps(self, n: int) -> np.ndarray:
        if n < 1:
            raise BadParams("n must be >= 1")
        m = self.model
        if m.kind == "poisson":
            out = self.rng.exponential(1.0 / m.rate, size=n)
        elif m.kind == "deterministic":
            out = np.full(n, 1.0 / m.rate)
        elif m.kind == "onoff":
            out = np.array([self._onoff_gap() for _ in range(n)])
        elif m.kind == "autocorr_exp":
            out = np.array([self._ar_gap(m.rate) for _ in range(n)])
        else:
            out = np.empty(n)
            for i in range(n):
                level = self.levels[int(self.t // self.period) % len(self.levels)]
                out[i] = self._ar_gap(m.rate * level)
                self.t += out[i]
        return out


def sample_interarrivals(model: TrafficModel, rng: np.random.Generator, n: int) -> np.ndarray:
    return TrafficSampler(model, rng).gaps(n)


# --- simulation -----------------------------------------------------------------


@dataclass
class SimResult:
    metrics: dict  # flow id -> FlowMetrics
    sent: dict
    delivered: dict
    dropped: dict
    delay_se: dict  # batch-means standard error of the mean delay
    link_utilization: dict
    trace: list | None = None

    @property
    def totals(self) -> tuple[int, int, int]:
        return sum(self.sent.values()), sum(self.delivered.values()), sum(self.dropped.values())

    def label_rows(self) -> list[dict]:
        return [
            {
                "flow_id": fid,
                "mean_delay_s": m.mean_delay,
                "jitter_s": m.jitter,
                "loss_rate": m.loss_rate,
                "sent": self.sent[fid],
                "dropped": self.dropped[fid],
            }
            for fid, m in self.metrics.items()
        ]


def batch_means_se(x: np.ndarray, n_batches: int = 30) -> float:
    """Standard error of the mean from non-overlapping batch means."""
    n = len(x) // n_batches
    if n < 2:
        return float("nan") if len(x) < 2 else float(np.std(x, ddof=1) / math.sqrt(len(x)))
    means = np.asarray(x[: n * n_batches]).reshape(n_batches, n).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(n_batches))


_ARRIVE, _DEPART = 0, 1


class _Link:
    __slots__ = ("id", "capacity", "queues", "strict", "busy", "busy_since", "busy_time")

    def __init__(self, lid, capacity, queues, strict):
        self.id, self.capacity, self.queues, self.strict = lid, capacity, queues, strict
        self.busy = None
        self.busy_since = 0.0
        self.busy_time = 0.0


class _Queue:
    __slots__ = ("id", "size", "priority", "buf", "occupancy")

    def __init__(self, qid, size, priority):
        self.id, self.size, self.priority = qid, size, priority
        self.buf = deque()
        self.occupancy = 0.0


def simulate(
    scenario: NetworkScenario,
    seed: int,
    duration: float,
    warmup: float | None = None,
    trace: bool = False,
    constant_sizes: bool = False,
) -> SimResult:
    """Run one simulation and return per-flow delay, jitter and loss."""
    warmup = 0.1 * duration if warmup is None else warmup
    if not (duration > warmup >= 0):
        raise BadParams("need duration > warmup >= 0")
    try:
        check_scenario(scenario)
    except Exception as e:  # any invariant violation makes the scenario unusable
        raise BadScenario(str(e)) from None
    queues = {q.id: _Queue(q.id, q.size, q.priority) for q in scenario.queues}
    links = {}
    for l in scenario.links:
        ordered = scenario.link_queues(l.id)
        strict = any(q.policy == "SP" for q in ordered)
        links[l.id] = _Link(l.id, l.capacity, [queues[q.id] for q in ordered], strict)
    flows = scenario.flows
    routes = [[(queues[q], links[l]) for q, l in f.path] for f in flows]
    streams = np.random.SeedSequence(seed).spawn(len(flows))
    samplers, size_rngs = [], []
    for f, ss in zip(flows, streams):
        a, b = ss.spawn(2)
        samplers.append(TrafficSampler(TrafficModel.of_flow(f), np.random.default_rng(a)))
        size_rngs.append(np.random.default_rng(b))
    gap_buf = [deque() for _ in flows]
    size_buf = [deque() for _ in flows]

    n = len(flows)
    sent, dropped = [0] * n, [0] * n
    delays = [[] for _ in range(n)]
    log = [] if trace else None
    events: list = []
    seq = 0

    def next_gap(i):
        if not gap_buf[i]:
            gap_buf[i].extend(samplers[i].gaps(256).tolist())
        return gap_buf[i].popleft()

    def next_size(i):
        if constant_sizes:
            return flows[i].packet_size
        if not size_buf[i]:
            size_buf[i].extend(size_rngs[i].exponential(flows[i].packet_size, size=256).tolist())
        return size_buf[i].popleft()

    def start(link, pkt, now):
        nonlocal seq
        link.busy = pkt
        link.busy_since = now
        seq += 1
        heapq.heappush(events, (now + pkt[1] / link.capacity, seq, _DEPART, link))
        if log is not None:
            log.append(("start", now, link.id, pkt[4]))

    def offer(pkt, now):
        """Packet reaches hop ``pkt[3]`` at time ``now``."""
        q, link = routes[pkt[0]][pkt[3]]
        if log is not None:
            log.append(("arrive", now, q.id, pkt[4], pkt[0]))
        if link.busy is None:
            start(link, pkt, now)
            return
        if q.occupancy + pkt[1] > q.size:
            if pkt[2] >= warmup:
                dropped[pkt[0]] += 1
            if log is not None:
                log.append(("drop", now, q.id, pkt[4]))
            return
        q.buf.append((now, pkt))
        q.occupancy += pkt[1]
        if log is not None:
            log.append(("enqueue", now, q.id, pkt[4]))

    def pick(link):
        if link.strict:
            for q in link.queues:  # already sorted by descending priority
                if q.buf:
                    return q
            return None
        best = None
        for q in link.queues:
            if q.buf and (best is None or q.buf[0][0] < best.buf[0][0]):
                best = q
        return best

    for i in range(n):
        seq += 1
        heapq.heappush(events, (next_gap(i), seq, _ARRIVE, i))
    pid = 0
    while events:
        now, _, kind, obj = heapq.heappop(events)
        if kind == _ARRIVE:
            i = obj
            pkt = [i, next_size(i), now, 0, pid]
            pid += 1
            if now >= warmup:
                sent[i] += 1
            offer(pkt, now)
            t_next = now + next_gap(i)
            if t_next < duration:
                seq += 1
                heapq.heappush(events, (t_next, seq, _ARRIVE, i))
            continue
        link = obj
        pkt = link.busy
        lo, hi = max(link.busy_since, warmup), min(now, duration)
        if hi > lo:
            link.busy_time += hi - lo
        link.busy = None
        if log is not None:
            log.append(("depart", now, link.id, pkt[4]))
        q = pick(link)
        if q is not None:
            _, nxt = q.buf.popleft()
            q.occupancy -= nxt[1]
            if not q.buf:
                q.occupancy = 0.0  # clear float drift
            start(link, nxt, now)
        pkt[3] += 1
        if pkt[3] < len(routes[pkt[0]]):
            offer(pkt, now)
        elif pkt[2] >= warmup:
            delays[pkt[0]].append(now - pkt[2])

    metrics, sent_d, deliv_d, drop_d, se_d = {}, {}, {}, {}, {}
    for i, f in enumerate(flows):
        d = np.asarray(delays[i])
        metrics[f.id] = FlowMetrics(
            float(d.mean()) if len(d) else float("nan"),
            float(d.std()) if len(d) else float("nan"),
            dropped[i] / sent[i] if sent[i] else 0.0,
        )
        sent_d[f.id], deliv_d[f.id], drop_d[f.id] = sent[i], len(d), dropped[i]
        se_d[f.id] = batch_means_se(d)
    window = duration - warmup
    util = {l.id: links[l.id].busy_time / window for l in scenario.links}
    return SimResult(metrics, sent_d, deliv_d, drop_d, se_d, util, log)


# --- intensity calibration ------------------------------------------------------


def max_utilization(scenario: NetworkScenario) -> float:
    return max((scenario.link_load(l.id) for l in scenario.links), default=0.0)


def scale_rates(scenario: NetworkScenario, factor: float) -> NetworkScenario:
    return scenario.with_flows([replace(f, avg_rate=f.avg_rate * factor) for f in scenario.flows])


def calibrate_intensity(
    scenario: NetworkScenario,
    target: float,
    seed: int,
    pilot_packets: int = 2000,
    shrink: float = 0.9,
    max_tries: int = 20,
) -> tuple[NetworkScenario, float]:
    """Scale all flow rates so the busiest link sits at ``target`` utilization.

    A pilot simulation then checks that no flow loses more than 3% of its
    packets; otherwise the scale is shrunk geometrically and retried. Returns
    the scaled scenario and the overall scale factor.
    """
    if not 0 < target <= 0.95:
        raise BadParams("target utilization must lie in (0, 0.95]")
    if not scenario.flows:
        return scenario, 1.0
    scale = target / max_utilization(scenario)
    for attempt in range(max_tries):
        cand = scale_rates(scenario, scale)
        slowest = min(f.avg_rate / f.packet_size for f in cand.flows)
        duration = pilot_packets / slowest
        res = simulate(cand, seed + attempt, duration)
        if max(m.loss_rate for m in res.metrics.values()) <= MAX_PILOT_LOSS:
            return cand, scale
        scale *= shrink
    raise Infeasible(f"pilot loss stayed above {MAX_PILOT_LOSS:.0%} after {max_tries} reductions")


__all__ = [
    "TrafficModel",
    "TrafficSampler",
    "SimResult",
    "sample_interarrivals",
    "simulate",
    "calibrate_intensity",
    "batch_means_se",
    "max_utilization",
    "scale_rates",
]

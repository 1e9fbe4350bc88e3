"""RouteNet expressed on an ordered combinatorial complex.

A network scenario (routers, links, queues, flows) becomes a complex whose
vertices are queues plus one end-of-flow marker per router, whose 1-cells are
links (the set of queues injecting into them) and whose 2-cells are flows (the
union of their links plus the destination marker). Each flow orders its link
faces and the chain of queues it traverses; each link orders its queues for
the link recurrence.

Two implementations of the message passing are provided and must agree:
``message_passing`` runs batched over hop positions with matrix states, while
``routenet_as_ordgccn`` walks the complex cell by cell through the generic
ordered-GCCN helpers in :mod:`ordnet.gccn`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensornn as tn
from .errors import (
    BadScenario,
    DegenerateLink,
    DisconnectedPath,
    Divergence,
    MissingState,
    NonPositiveLabel,
    UnfittedStats,
)
from .gccn import ordgccn_face_states
from .tensornn import ParamStore, Tape, Tensor
from .topology import CellOrder, CombinatorialComplex, build_complex, incidence_down, incidence_up

POLICIES = ("FIFO", "SP")
TRAFFIC_MODELS = ("poisson", "deterministic", "onoff", "autocorr_exp", "modulated_exp")

# neighborhoods carrying orders on the scenario complex
FLOW_LINKS = incidence_down(1, source_rank=2)
FLOW_QUEUES = incidence_down(2, source_rank=2)
LINK_QUEUES = incidence_down(1, source_rank=1)
QUEUE_LINKS = incidence_up(1, source_rank=0)

# vertex labels
QUEUE, EOF, PAD, TAG = 0, 1, 2, 3


# --- scenario data model ------------------------------------------------------


@dataclass(frozen=True)
class LinkSpec:
    id: str
    src: str
    dst: str
    capacity: float  # bits per second


@dataclass(frozen=True)
class QueueSpec:
    id: str
    link: str
    size: float  # bits
    policy: str = "FIFO"
    priority: int = 0


@dataclass(frozen=True)
class TrafficSpec:
    model: str = "poisson"
    params: dict = field(default_factory=dict)

    def burstiness(self) -> float:
        """Peak-to-mean rate ratio implied by the traffic parameters."""
        p = self.params
        if self.model == "onoff":
            return (p["on_mean"] + p["off_mean"]) / p["on_mean"]
        if self.model == "modulated_exp":
            levels = p.get("levels", [1.0])
            return max(levels) / (sum(levels) / len(levels))
        return 1.0


@dataclass(frozen=True)
class FlowSpec:
    id: str
    src: str
    dst: str
    path: tuple  # ((queue id, link id), ...)
    traffic: TrafficSpec
    avg_rate: float  # bits per second
    packet_size: float  # mean bits
    tos: int = 0


@dataclass(frozen=True)
class FlowMetrics:
    mean_delay: float
    jitter: float
    loss_rate: float


@dataclass
class NetworkScenario:
    routers: list
    links: list
    queues: list
    flows: list

    def __post_init__(self):
        self.link_by_id = {l.id: l for l in self.links}
        self.queue_by_id = {q.id: q for q in self.queues}
        self.flow_by_id = {f.id: f for f in self.flows}

    def link_queues(self, lid) -> list[QueueSpec]:
        """Queues of ``lid`` in link-recurrence order (priority first under SP)."""
        qs = [q for q in self.queues if q.link == lid]
        if any(q.policy == "SP" for q in qs):
            return sorted(qs, key=lambda q: (-q.priority, q.id))
        return sorted(qs, key=lambda q: q.id)

    def link_load(self, lid) -> float:
        rate = sum(f.avg_rate for f in self.flows for _, l in f.path if l == lid)
        return rate / self.link_by_id[lid].capacity

    def with_flows(self, flows) -> "NetworkScenario":
        return NetworkScenario(list(self.routers), list(self.links), list(self.queues), list(flows))

    def to_json(self) -> dict:
        return {
            "routers": list(self.routers),
            "links": [{"id": l.id, "from": l.src, "to": l.dst, "capacity_bps": l.capacity} for l in self.links],
            "queues": [
                {"id": q.id, "link": q.link, "size_bits": q.size, "policy": q.policy, "priority": q.priority}
                for q in self.queues
            ],
            "flows": [
                {
                    "id": f.id,
                    "src": f.src,
                    "dst": f.dst,
                    "path": [[q, l] for q, l in f.path],
                    "traffic": {"model": f.traffic.model, "params": dict(f.traffic.params)},
                    "avg_rate_bps": f.avg_rate,
                    "packet_size_bits": f.packet_size,
                    "tos": f.tos,
                }
                for f in self.flows
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "NetworkScenario":
        try:
            links = [LinkSpec(str(l["id"]), str(l["from"]), str(l["to"]), float(l["capacity_bps"])) for l in obj["links"]]
            queues = [
                QueueSpec(str(q["id"]), str(q["link"]), float(q["size_bits"]), q.get("policy", "FIFO"), int(q.get("priority", 0)))
                for q in obj["queues"]
            ]
            flows = [
                FlowSpec(
                    str(f["id"]),
                    str(f["src"]),
                    str(f["dst"]),
                    tuple((str(q), str(l)) for q, l in f["path"]),
                    TrafficSpec(f.get("traffic", {}).get("model", "poisson"), dict(f.get("traffic", {}).get("params", {}))),
                    float(f["avg_rate_bps"]),
                    float(f["packet_size_bits"]),
                    int(f.get("tos", 0)),
                )
                for f in obj["flows"]
            ]
            routers = [str(r) for r in obj["routers"]]
        except (KeyError, TypeError, ValueError) as e:
            raise BadScenario(f"malformed scenario: {e!r}") from None
        return cls(routers, links, queues, flows)


def load_scenario(path) -> NetworkScenario:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise BadScenario(f"{path}: {e}") from None
    return NetworkScenario.from_json(obj)


def check_scenario(sc: NetworkScenario) -> None:
    """Raise on any violated scenario invariant."""
    routers = set(sc.routers)
    for kind, items in (("router", sc.routers), ("link", sc.links), ("queue", sc.queues), ("flow", sc.flows)):
        ids = [x if kind == "router" else x.id for x in items]
        if len(set(ids)) != len(ids):
            raise BadScenario(f"duplicate {kind} id")
    for l in sc.links:
        if l.src not in routers or l.dst not in routers:
            raise BadScenario(f"link {l.id} references an unknown router")
        if not l.capacity > 0:
            raise BadScenario(f"link {l.id} has nonpositive capacity")
    for q in sc.queues:
        if q.link not in sc.link_by_id:
            raise BadScenario(f"queue {q.id} references unknown link {q.link}")
        if q.policy not in POLICIES or q.priority < 0 or q.size < 0:
            raise BadScenario(f"queue {q.id} has invalid policy, priority or size")
    for f in sc.flows:
        if f.traffic.model not in TRAFFIC_MODELS:
            raise BadScenario(f"flow {f.id}: unknown traffic model {f.traffic.model!r}")
        if not (f.avg_rate > 0 and f.packet_size > 0):
            raise BadScenario(f"flow {f.id}: rate and packet size must be positive")
        if not f.path:
            raise DisconnectedPath(f"flow {f.id} has an empty path")
        at = f.src
        seen = set()
        for q, l in f.path:
            link = sc.link_by_id.get(l)
            queue = sc.queue_by_id.get(q)
            if link is None or queue is None or queue.link != l:
                raise DisconnectedPath(f"flow {f.id}: queue {q} does not inject into link {l}")
            if link.src != at or l in seen:
                raise DisconnectedPath(f"flow {f.id}: link {l} does not continue the path")
            seen.add(l)
            at = link.dst
        if at != f.dst:
            raise DisconnectedPath(f"flow {f.id}: path ends at {at}, not {f.dst}")


# --- complexification -----------------------------------------------------------


@dataclass
class ScenarioComplex:
    complex: CombinatorialComplex
    queue_cell: dict
    link_cell: dict
    flow_cell: dict
    aux_cells: tuple  # end-of-flow, pad and tag vertices

    @property
    def cc(self) -> CombinatorialComplex:
        return self.complex


def complexify(sc: NetworkScenario) -> ScenarioComplex:
    """Ordered combinatorial complex of a scenario.

    Links with a single queue get an extra pad vertex so that no link shares
    its support with a vertex cell. Flows whose link sets coincide with an
    earlier flow get a private tag vertex for the same reason.
    """
    check_scenario(sc)
    verts = [f"q:{q.id}" for q in sc.queues] + [f"eof:{r}" for r in sc.routers]
    labels = {f"q:{q.id}": QUEUE for q in sc.queues}
    labels.update({f"eof:{r}": EOF for r in sc.routers})
    link_support = {}
    for l in sc.links:
        support = {f"q:{q.id}" for q in sc.queues if q.link == l.id}
        if not support:
            raise DegenerateLink(f"link {l.id} has no queues")
        if len(support) == 1:
            verts.append(f"pad:{l.id}")
            labels[f"pad:{l.id}"] = PAD
            support.add(f"pad:{l.id}")
        link_support[l.id] = frozenset(support)
    flow_support, seen = {}, set()
    for f in sc.flows:
        support = frozenset().union(*(link_support[l] for _, l in f.path)) | {f"eof:{f.dst}"}
        if support in seen:
            verts.append(f"tag:{f.id}")
            labels[f"tag:{f.id}"] = TAG
            support = support | {f"tag:{f.id}"}
        seen.add(support)
        flow_support[f.id] = support
    higher = [(link_support[l.id], 1) for l in sc.links] + [(flow_support[f.id], 2) for f in sc.flows]
    cc = build_complex(verts, higher, vertex_labels=labels)
    queue_cell = {q.id: cc.vertex_cell(f"q:{q.id}") for q in sc.queues}
    link_cell = {l.id: cc.find(link_support[l.id], 1) for l in sc.links}
    flow_cell = {f.id: cc.find(flow_support[f.id], 2) for f in sc.flows}
    aux = tuple(sorted(cc.vertex_cell(v) for v in verts if not v.startswith("q:")))
    orders = []
    for f in sc.flows:
        fc = flow_cell[f.id]
        links = tuple(link_cell[l] for _, l in f.path)
        orders.append(CellOrder(fc, FLOW_LINKS, links))
        chain = tuple(queue_cell[q] for q, _ in f.path)
        rest = frozenset(cc.neighborhood(fc, FLOW_QUEUES)) - set(chain)
        orders.append(CellOrder(fc, FLOW_QUEUES, chain, rest))
    for l in sc.links:
        lc = link_cell[l.id]
        chain = tuple(queue_cell[q.id] for q in sc.link_queues(l.id))
        rest = frozenset(cc.neighborhood(lc, LINK_QUEUES)) - set(chain)
        orders.append(CellOrder(lc, LINK_QUEUES, chain, rest))
    cc = build_complex(verts, higher, vertex_labels=labels, orders=orders)
    return ScenarioComplex(cc, queue_cell, link_cell, flow_cell, aux)


# --- features -------------------------------------------------------------------


def flow_features(sc: NetworkScenario, f: FlowSpec) -> tuple[list[float], list[float]]:
    min_cap = min(sc.link_by_id[l].capacity for _, l in f.path)
    cont = [f.avg_rate, f.packet_size, float(len(f.path)), f.traffic.burstiness(), f.avg_rate / min_cap]
    onehot = [1.0 if f.traffic.model == m else 0.0 for m in TRAFFIC_MODELS]
    return cont, onehot


def queue_features(sc: NetworkScenario, q: QueueSpec) -> tuple[list[float], list[float]]:
    return [q.size, float(q.priority)], [1.0 if q.policy == p else 0.0 for p in POLICIES]


def link_features(sc: NetworkScenario, l: LinkSpec) -> tuple[list[float], list[float]]:
    return [l.capacity, float(len(sc.link_queues(l.id))), sc.link_load(l.id)], []


_FEATURES = {
    "flow": (flow_features, lambda sc: sc.flows),
    "queue": (queue_features, lambda sc: sc.queues),
    "link": (link_features, lambda sc: sc.links),
}


def raw_features(sc: NetworkScenario, kind: str) -> tuple[np.ndarray, np.ndarray]:
    fn, items = _FEATURES[kind]
    rows = [fn(sc, x) for x in items(sc)]
    cont = np.array([r[0] for r in rows], dtype=float).reshape(len(rows), -1)
    hot = np.array([r[1] for r in rows], dtype=float).reshape(len(rows), -1)
    return cont, hot


@dataclass
class FeatureStats:
    """Per-type z-score statistics, frozen after fitting."""

    mean: dict
    std: dict
    packet_size: float

    @classmethod
    def fit(cls, scenarios: Sequence[NetworkScenario]) -> "FeatureStats":
        mean, std = {}, {}
        for kind in _FEATURES:
            blocks = [raw_features(sc, kind)[0] for sc in scenarios]
            blocks = [b for b in blocks if b.size]
            if not blocks:
                raise UnfittedStats(f"no {kind} rows to fit statistics on")
            x = np.concatenate(blocks)
            s = x.std(axis=0)
            mean[kind], std[kind] = x.mean(axis=0), np.where(s > 1e-12, s, 1.0)
        sizes = [f.packet_size for sc in scenarios for f in sc.flows]
        return cls(mean, std, float(np.mean(sizes)))

    def normalize(self, sc: NetworkScenario, kind: str) -> np.ndarray:
        cont, hot = raw_features(sc, kind)
        if cont.shape[0] == 0:
            return np.zeros((0, len(self.mean[kind]) + hot.shape[1]))
        return np.concatenate([(cont - self.mean[kind]) / self.std[kind], hot], axis=1)

    def to_json(self) -> dict:
        return {
            "mean": {k: v.tolist() for k, v in self.mean.items()},
            "std": {k: v.tolist() for k, v in self.std.items()},
            "packet_size": self.packet_size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureStats":
        return cls(
            {k: np.asarray(v) for k, v in obj["mean"].items()},
            {k: np.asarray(v) for k, v in obj["std"].items()},
            float(obj["packet_size"]),
        )


# --- model --------------------------------------------------------------------


@dataclass
class ModelConfig:
    dim: int = 32
    iterations: int = 8
    encoder_layers: int = 2
    head_hidden: int = 16
    update_activation: str = "tanh"
    delay_scale: float | None = None  # bits; defaults to the mean training packet size

    def __post_init__(self):
        if self.iterations < 0 or self.dim < 1:
            raise ValueError("iterations must be >= 0 and dim >= 1")


@dataclass
class NodeStates:
    flow: Tensor
    queue: Tensor
    link: Tensor


@dataclass
class HopFaces:
    """Face-dependent flow states at one hop position across all flows long enough."""

    flows: np.ndarray  # flow indices
    links: np.ndarray  # link indices
    states: Tensor  # [len(flows), dim]


@dataclass
class MPState:
    flow: Tensor
    queue: Tensor
    link: Tensor
    faces: list  # HopFaces per hop position

    def face_map(self, sc: NetworkScenario) -> dict:
        """``(flow id, link id) -> state row`` as numpy arrays."""
        out = {}
        for hop in self.faces:
            for row, (fi, li) in enumerate(zip(hop.flows, hop.links)):
                out[(sc.flows[fi].id, sc.links[li].id)] = hop.states.data[row]
        return out


@dataclass
class Plan:
    """Index arrays for hop-batched message passing on one scenario."""

    n_flows: int
    n_queues: int
    n_links: int
    hop_flows: list
    hop_queues: list
    hop_links: list
    link_pos_links: list
    link_pos_queues: list
    capacity: np.ndarray
    packet_size: np.ndarray


def make_plan(sc: NetworkScenario) -> Plan:
    check_scenario(sc)
    qidx = {q.id: i for i, q in enumerate(sc.queues)}
    lidx = {l.id: i for i, l in enumerate(sc.links)}
    depth = max((len(f.path) for f in sc.flows), default=0)
    hf, hq, hl = [], [], []
    for k in range(depth):
        rows = [(i, qidx[f.path[k][0]], lidx[f.path[k][1]]) for i, f in enumerate(sc.flows) if len(f.path) > k]
        a = np.array(rows, dtype=np.int64).reshape(-1, 3)
        hf.append(a[:, 0])
        hq.append(a[:, 1])
        hl.append(a[:, 2])
    per_link = [[qidx[q.id] for q in sc.link_queues(l.id)] for l in sc.links]
    lp_l, lp_q = [], []
    for k in range(max((len(p) for p in per_link), default=0)):
        rows = [(i, p[k]) for i, p in enumerate(per_link) if len(p) > k]
        a = np.array(rows, dtype=np.int64).reshape(-1, 2)
        lp_l.append(a[:, 0])
        lp_q.append(a[:, 1])
    cap = np.array([l.capacity for l in sc.links])
    ps = np.array([f.packet_size for f in sc.flows])
    return Plan(len(sc.flows), len(sc.queues), len(sc.links), hf, hq, hl, lp_l, lp_q, cap, ps)


class RouteNetModel:
    """Parameters, hyperparameters and normalization statistics."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, params: ParamStore | None = None,
                 stats: FeatureStats | None = None):
        self.config = config or ModelConfig()
        self.params = params or ParamStore(seed)
        self.stats = stats

    @property
    def delay_scale(self) -> float:
        if self.config.delay_scale is not None:
            return self.config.delay_scale
        if self.stats is None:
            raise UnfittedStats("delay scale needs fitted statistics")
        return self.stats.packet_size

    def fit_stats(self, scenarios: Sequence[NetworkScenario]) -> None:
        self.stats = FeatureStats.fit(scenarios)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"config": asdict(self.config), "stats": self.stats.to_json() if self.stats else None}
        meta.update(extra or {})
        self.params.save(path, meta)

    @classmethod
    def load(cls, path) -> "RouteNetModel":
        with open(path) as fh:
            obj = json.load(fh)
        meta = obj["meta"]
        stats = FeatureStats.from_json(meta["stats"]) if meta.get("stats") else None
        return cls(ModelConfig(**meta["config"]), params=ParamStore.from_json(obj), stats=stats)

    def predict(self, sc: NetworkScenario) -> dict:
        out = readout(self, sc, message_passing(self, sc, encode_features(self, sc)))
        return {f.id: FlowMetrics(*(float(out[k].data[i]) for k in ("delay", "jitter", "loss"))) for i, f in enumerate(sc.flows)}


def encode_features(model: RouteNetModel, sc: NetworkScenario, stats: FeatureStats | None = None) -> NodeStates:
    """Z-score raw features and map them to width-``dim`` initial states."""
    stats = stats or model.stats
    if stats is None:
        raise UnfittedStats("feature statistics have not been fitted")
    d = model.config.dim
    sizes = [d] * model.config.encoder_layers
    enc = {}
    for kind in _FEATURES:
        x = stats.normalize(sc, kind)
        enc[kind] = tn.mlp(model.params, f"enc/{kind}", sizes, Tensor(x), "relu")
    return NodeStates(enc["flow"], enc["queue"], enc["link"])


def _scatter_rows(h: Tensor, idx: np.ndarray, new: Tensor, n: int) -> Tensor:
    keep = np.ones((n, 1))
    keep[idx] = 0.0
    return tn.add(tn.mul(h, keep), tn.segment_sum(new, idx, n))


def _queue_update(model, hq, msg):
    d = model.config.dim
    return tn.mlp(model.params, "uq", [d, d], tn.concat([hq, msg], axis=-1), model.config.update_activation)


def message_passing(model: RouteNetModel, sc: NetworkScenario, h0: NodeStates, iterations: int | None = None,
                    plan: Plan | None = None) -> MPState:
    """Flow, queue and link updates batched over hop positions."""
    plan = plan or make_plan(sc)
    T = model.config.iterations if iterations is None else iterations
    p, d = model.params, model.config.dim
    hf, hq, hl = h0.flow, h0.queue, h0.link
    for name, t, n in (("flow", hf, plan.n_flows), ("queue", hq, plan.n_queues), ("link", hl, plan.n_links)):
        if t is None or t.shape[0] != n:
            raise MissingState(f"initial {name} states do not cover the scenario")
    faces = []
    for _ in range(T):
        h = hf
        faces = []
        msg = Tensor(np.zeros((plan.n_queues, d)))
        for fi, qi, li in zip(plan.hop_flows, plan.hop_queues, plan.hop_links):
            x = tn.concat([tn.take(hq, qi), tn.take(hl, li)], axis=-1)
            new = tn.gru_step(p, "frnn", x, tn.take(h, fi))
            h = _scatter_rows(h, fi, new, plan.n_flows)
            faces.append(HopFaces(fi, li, new))
            msg = tn.add(msg, tn.segment_sum(new, qi, plan.n_queues))
        hq = _queue_update(model, hq, msg)
        g = hl
        for li, qi in zip(plan.link_pos_links, plan.link_pos_queues):
            new = tn.gru_step(p, "lrnn", tn.take(hq, qi), tn.take(g, li))
            g = _scatter_rows(g, li, new, plan.n_links)
        hf, hl = h, g
    return MPState(hf, hq, hl, faces)


def _stack(rows: Sequence[Tensor], d: int) -> Tensor:
    if not rows:
        return Tensor(np.zeros((0, d)))
    return tn.concat([tn.reshape(r, (1, -1)) for r in rows], axis=0)


def routenet_as_ordgccn(model: RouteNetModel, sc: NetworkScenario, h0: NodeStates, iterations: int | None = None,
                        scx: ScenarioComplex | None = None) -> MPState:
    """Same computation as ``message_passing`` expressed cell by cell on the complex.

    Flow cells scan their queue chain with inputs pairing each queue with the
    unique link containing it and keep the last face state; queue vertices sum
    the face states of the flows whose chain contains them; link cells scan
    their queue order. End-of-flow, pad and tag vertices keep their state.
    """
    scx = scx or complexify(sc)
    cc = scx.cc
    T = model.config.iterations if iterations is None else iterations
    p, d = model.params, model.config.dim
    states = {}
    for table, mat in ((scx.flow_cell, h0.flow), (scx.queue_cell, h0.queue), (scx.link_cell, h0.link)):
        if mat.shape[0] != len(table):
            raise MissingState("initial states do not cover the scenario")
        for row, cid in enumerate(table.values()):
            states[cid] = tn.take(mat, row)
    for cid in scx.aux_cells:
        states[cid] = Tensor(np.zeros(d))

    def link_of(q):
        links = cc.neighborhood(q, QUEUE_LINKS)
        if len(links) != 1:
            raise DisconnectedPath(f"queue cell {q} lies on {len(links)} links")
        return links[0]

    flow_cells = list(scx.flow_cell.values())
    queue_cells = [c for c in scx.queue_cell.values()]
    faces_by_flow = {}
    for _ in range(T):
        new = dict(states)
        faces_by_flow = {}
        for fc in flow_cells:
            order = cc.order_for(fc, FLOW_QUEUES)
            faces = ordgccn_face_states(
                cc, states, order, p, rnn="frnn", project=False,
                step_input=lambda q: tn.concat([states[q], states[link_of(q)]]),
            )
            faces_by_flow[fc] = faces
            new[fc] = faces[order.chain[-1]]
        for qc in queue_cells:
            msgs = [faces_by_flow[fc][qc] for fc in cc.neighborhood(qc, incidence_up(2)) if qc in faces_by_flow[fc]]
            m = Tensor(np.zeros(d))
            for x in msgs:
                m = tn.add(m, x)
            new[qc] = _queue_update(model, states[qc], m)
        for lc in scx.link_cell.values():
            order = cc.order_for(lc, LINK_QUEUES)
            faces = ordgccn_face_states(cc, new, order, p, rnn="lrnn", project=False)
            new[lc] = faces[order.chain[-1]]
        states = new
    hops = []
    lidx = {c: i for i, c in enumerate(scx.link_cell.values())}
    depth = max((len(f.path) for f in sc.flows), default=0) if T else 0
    for k in range(depth):
        fi, li, rows = [], [], []
        for i, f in enumerate(sc.flows):
            if len(f.path) > k:
                fc = scx.flow_cell[f.id]
                q = scx.queue_cell[f.path[k][0]]
                fi.append(i)
                li.append(lidx[link_of(q)])
                rows.append(faces_by_flow[fc][q])
        hops.append(HopFaces(np.array(fi, dtype=np.int64), np.array(li, dtype=np.int64), _stack(rows, d)))
    return MPState(
        _stack([states[c] for c in scx.flow_cell.values()], d),
        _stack([states[c] for c in scx.queue_cell.values()], d),
        _stack([states[c] for c in scx.link_cell.values()], d),
        hops,
    )


def _head(model, name, x):
    return tn.reshape(tn.mlp(model.params, name, [model.config.head_hidden, 1], x, "relu"), (-1,))


def readout(model: RouteNetModel, sc: NetworkScenario, state: MPState, plan: Plan | None = None) -> dict:
    """Per-flow delay, jitter and loss tensors keyed by metric name.

    Delay sums a positive per-hop queuing term (scaled to bits and divided by
    the link capacity) plus the transmission time of a mean-size packet.
    """
    plan = plan or make_plan(sc)
    n = plan.n_flows
    if n and not state.faces:
        raise MissingState("readout needs at least one round of message passing")
    scale = model.delay_scale
    delay = Tensor(np.zeros(n))
    jitter = Tensor(np.zeros(n))
    floor = np.zeros(n)
    for hop in state.faces:
        cap = plan.capacity[hop.links]
        dq = tn.mul(tn.softplus(_head(model, "rdelay", hop.states)), scale / cap)
        jq = tn.mul(tn.softplus(_head(model, "rjitter", hop.states)), scale / cap)
        delay = tn.add(delay, tn.segment_sum(dq, hop.flows, n))
        jitter = tn.add(jitter, tn.segment_sum(jq, hop.flows, n))
        np.add.at(floor, hop.flows, plan.packet_size[hop.flows] / cap)
    delay = tn.add(delay, floor)
    loss = tn.sigmoid(_head(model, "rloss", state.flow))
    return {"delay": delay, "jitter": jitter, "loss": loss}


def transmission_floor(sc: NetworkScenario) -> np.ndarray:
    return np.array([sum(f.packet_size / sc.link_by_id[l].capacity for _, l in f.path) for f in sc.flows])


# --- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    patience: int = 20
    target: str = "delay"
    batch_size: int = 1
    seed: int = 0


def merge_scenarios(scenarios: Sequence[NetworkScenario]) -> NetworkScenario:
    """Disjoint union; every id is prefixed with its scenario index."""
    routers, links, queues, flows = [], [], [], []
    for i, sc in enumerate(scenarios):
        pre = f"{i}:"
        routers += [pre + r for r in sc.routers]
        links += [LinkSpec(pre + l.id, pre + l.src, pre + l.dst, l.capacity) for l in sc.links]
        queues += [QueueSpec(pre + q.id, pre + q.link, q.size, q.policy, q.priority) for q in sc.queues]
        flows += [
            FlowSpec(pre + f.id, pre + f.src, pre + f.dst, tuple((pre + q, pre + l) for q, l in f.path),
                     f.traffic, f.avg_rate, f.packet_size, f.tos)
            for f in sc.flows
        ]
    return NetworkScenario(routers, links, queues, flows)


def _label_vector(sc: NetworkScenario, labels: Mapping, target: str) -> np.ndarray:
    attr = {"delay": "mean_delay", "jitter": "jitter", "loss": "loss_rate"}[target]
    y = np.array([getattr(labels[f.id], attr) for f in sc.flows], dtype=float)
    if target != "loss" and not np.all(y > 0):
        raise NonPositiveLabel(f"{target} labels must be positive for MAPE")
    if target == "loss" and not np.all((y >= 0) & (y <= 1)):
        raise NonPositiveLabel("loss labels must lie in [0, 1]")
    return y


@dataclass
class _Batch:
    scenario: NetworkScenario
    plan: Plan
    y: np.ndarray


def _objective(pred: Tensor, y: np.ndarray, target: str) -> Tensor:
    if target == "loss":
        eps = 1e-7
        a = tn.mul(tn.log(tn.add(pred, eps)), y)
        b = tn.mul(tn.log(tn.add(tn.sub(1.0, pred), eps)), 1.0 - y)
        return tn.mul(tn.mean(tn.add(a, b)), -1.0)
    return tn.mean(tn.abs_(tn.div(tn.sub(pred, y), y)))


def _mape(pred: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.abs(pred - y) / np.where(y > 0, y, 1.0)


def _forward(model, batch: _Batch, target: str) -> Tensor:
    h0 = encode_features(model, batch.scenario)
    state = message_passing(model, batch.scenario, h0, plan=batch.plan)
    return readout(model, batch.scenario, state, plan=batch.plan)[target]


def _batches(data, size, target):
    out = []
    for i in range(0, len(data), size):
        chunk = data[i : i + size]
        sc = merge_scenarios([s for s, _ in chunk])
        y = np.concatenate([_label_vector(s, lab, target) for s, lab in chunk])
        out.append(_Batch(sc, make_plan(sc), y))
    return out


def evaluate_split(model: RouteNetModel, batches: Sequence[_Batch], target: str) -> float:
    errs = [_mape(_forward(model, b, target).data, b.y) for b in batches]
    if not errs:
        return float("nan")
    return float(np.mean(np.concatenate(errs)) * 100.0)


def train(
    model: RouteNetModel,
    train_data: Sequence[tuple[NetworkScenario, Mapping]],
    val_data: Sequence[tuple[NetworkScenario, Mapping]] = (),
    config: TrainConfig | None = None,
    log=None,
) -> tuple[RouteNetModel, list[dict]]:
    """Fit ``model`` by Adam over scenario batches; returns the best-on-validation model and history.

    ``train_data`` holds ``(scenario, {flow id: FlowMetrics})`` pairs. The
    history has one row per epoch with the training objective and the
    train/validation MAPE in percent.
    """
    config = config or TrainConfig()
    if model.stats is None:
        model.fit_stats([s for s, _ in train_data])
    rng = np.random.default_rng(config.seed)
    val_batches = _batches(list(val_data), max(config.batch_size, 1), config.target)
    single = [_batches([item], 1, config.target)[0] for item in train_data]
    history = []
    best, best_score, since = model.params.values(), math.inf, 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_data))
        total, abs_err, count = 0.0, 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = single[idx[0]] if len(idx) == 1 else _batches([train_data[i] for i in idx], len(idx), config.target)[0]
            with Tape() as tape:
                pred = _forward(model, batch, config.target)
                loss = _objective(pred, batch.y, config.target)
            if not math.isfinite(loss.item()):
                raise Divergence(f"non-finite training loss at epoch {epoch}")
            model.params.zero_grad()
            tn.backward(tape, loss, model.params)
            tn.adam_step(model.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2)
            total += loss.item() * len(batch.y)
            abs_err += float(_mape(pred.data, batch.y).sum())
            count += len(batch.y)
        row = {
            "epoch": epoch,
            "train_loss": total / max(count, 1),
            "train_mape": abs_err / max(count, 1) * 100.0,
            "val_mape": evaluate_split(model, val_batches, config.target),
        }
        history.append(row)
        if log:
            log(row)
        score = row["val_mape"] if val_batches else row["train_mape"]
        if score < best_score - 1e-12:
            best, best_score, since = model.params.values(), score, 0
        else:
            since += 1
            if since >= config.patience:
                break
    model.params.load_values(best)
    return model, history


__all__ = [
    "LinkSpec",
    "QueueSpec",
    "TrafficSpec",
    "FlowSpec",
    "FlowMetrics",
    "NetworkScenario",
    "ScenarioComplex",
    "FeatureStats",
    "ModelConfig",
    "RouteNetModel",
    "TrainConfig",
    "MPState",
    "check_scenario",
    "complexify",
    "encode_features",
    "message_passing",
    "routenet_as_ordgccn",
    "readout",
    "train",
    "merge_scenarios",
    "load_scenario",
]

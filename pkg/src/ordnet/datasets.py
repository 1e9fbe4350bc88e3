"""Scenario generation, dataset persistence, splits and evaluation metrics.

A dataset directory holds::

    manifest.json     generator config, seed and per-scenario summary
    scenarios/*.json  one scenario per file
    labels.csv        simulated per-flow delay, jitter and loss
    splits.json       train / val / test scenario names
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import networkx as nx
import numpy as np

from .errors import BadConfig, MissingPrediction, ZeroLabel
from .netmodel import (
    TRAFFIC_MODELS,
    FlowMetrics,
    FlowSpec,
    LinkSpec,
    NetworkScenario,
    QueueSpec,
    TrafficSpec,
    load_scenario,
)
from .netsim import calibrate_intensity, simulate

LABEL_FIELDS = ("scenario", "flow_id", "mean_delay_s", "jitter_s", "loss_rate", "sent", "dropped")


@dataclass
class GenConfig:
    nodes: int = 6
    flows: int = 8
    count: int = 10
    topology: str = "er"  # "er" (Erdos-Renyi, resampled until connected) or "ba" (preferential attachment)
    edge_prob: float = 0.5
    traffic: tuple = ("poisson", "onoff")
    sp_prob: float = 0.0  # chance that a link gets 2-3 strict-priority queues instead of one FIFO queue
    queue_sizes: tuple = (8e3, 16e3, 32e3, 64e3)
    capacities: tuple = (1e5, 2e5, 4e5)
    packet_size: float = 1000.0
    rate_range: tuple = (1e4, 5e4)
    utilization: tuple = (0.3, 0.7)
    onoff_on: tuple = (0.2, 1.0)  # seconds
    onoff_off: tuple = (0.2, 1.0)
    random_weights: bool = False
    packets_per_flow: int = 5000
    split: tuple = (0.7, 0.15, 0.15)

    def check(self) -> None:
        if not 4 <= self.nodes <= 12:
            raise BadConfig("nodes must lie in 4..12")
        if self.flows < 1 or self.count < 1:
            raise BadConfig("need at least one flow and one scenario")
        if self.flows > self.nodes * (self.nodes - 1):
            raise BadConfig("more flows than ordered router pairs")
        if self.topology not in ("er", "ba"):
            raise BadConfig(f"unknown topology {self.topology!r}")
        if not self.traffic or any(t not in TRAFFIC_MODELS for t in self.traffic):
            raise BadConfig(f"traffic models must be drawn from {TRAFFIC_MODELS}")
        if not 0 < self.utilization[0] <= self.utilization[1] <= 0.95:
            raise BadConfig("utilization range must lie in (0, 0.95]")
        if not 0 <= self.sp_prob <= 1 or not 0 < self.edge_prob <= 1:
            raise BadConfig("probabilities must lie in [0, 1]")
        if len(self.split) != 3 or min(self.split) < 0 or not math.isclose(sum(self.split), 1.0):
            raise BadConfig("split must be three nonnegative fractions summing to 1")

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> "GenConfig":
        known = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# --- generation -----------------------------------------------------------------


def _topology(cfg: GenConfig, rng: np.random.Generator) -> nx.Graph:
    for _ in range(1000):
        s = int(rng.integers(2**31))
        if cfg.topology == "ba":
            g = nx.barabasi_albert_graph(cfg.nodes, 2, seed=s)
        else:
            g = nx.gnp_random_graph(cfg.nodes, cfg.edge_prob, seed=s)
        if nx.is_connected(g):
            return g
    raise BadConfig("could not sample a connected topology; raise edge_prob")


def shortest_path(g: nx.DiGraph, src: int, dst: int) -> list[int]:
    """Minimum-weight path; ties go to the smallest next-hop router index."""
    dist = nx.single_source_dijkstra_path_length(g.reverse(copy=False), dst, weight="weight")
    path = [src]
    while path[-1] != dst:
        u = path[-1]
        nxt = min(v for v in g.successors(u) if v in dist and dist[u] == g.edges[u, v]["weight"] + dist[v])
        path.append(nxt)
    return path


def random_scenario(cfg: GenConfig, rng: np.random.Generator) -> NetworkScenario:
    """One uncalibrated scenario drawn from ``cfg``."""
    g = _topology(cfg, rng)
    routers = [f"r{i}" for i in range(cfg.nodes)]
    dg = nx.DiGraph()
    dg.add_nodes_from(range(cfg.nodes))
    links, queues, link_queues = [], [], {}
    for a, b in sorted(g.edges()):
        cap = float(rng.choice(cfg.capacities))
        for u, v in ((a, b), (b, a)):
            lid = f"l{len(links)}"
            w = int(rng.integers(1, 6)) if cfg.random_weights else 1
            links.append(LinkSpec(lid, routers[u], routers[v], cap))
            dg.add_edge(u, v, link=lid, weight=w)
            sp = rng.random() < cfg.sp_prob
            nq = int(rng.integers(2, 4)) if sp else 1
            link_queues[lid] = []
            for j in range(nq):
                qid = f"{lid}q{j}"
                prio = nq - 1 - j if sp else 0
                queues.append(QueueSpec(qid, lid, float(rng.choice(cfg.queue_sizes)), "SP" if sp else "FIFO", prio))
                link_queues[lid].append(qid)
    pairs = [(a, b) for a in range(cfg.nodes) for b in range(cfg.nodes) if a != b]
    chosen = sorted(rng.choice(len(pairs), size=cfg.flows, replace=False))
    model = str(cfg.traffic[int(rng.integers(len(cfg.traffic)))])
    flows = []
    for k, idx in enumerate(chosen):
        a, b = pairs[idx]
        nodes = shortest_path(dg, a, b)
        tos = int(rng.integers(0, 3))
        path = []
        for u, v in zip(nodes, nodes[1:]):
            lid = dg.edges[u, v]["link"]
            qs = link_queues[lid]
            path.append((qs[tos % len(qs)], lid))
        params = {}
        if model == "onoff":
            params = {"on_mean": float(rng.uniform(*cfg.onoff_on)), "off_mean": float(rng.uniform(*cfg.onoff_off))}
        elif model == "autocorr_exp":
            params = {"rho": float(rng.uniform(0.3, 0.9))}
        elif model == "modulated_exp":
            params = {"rho": float(rng.uniform(0.3, 0.9)), "period": float(rng.uniform(1.0, 5.0)),
                      "levels": [float(x) for x in rng.uniform(0.5, 2.0, size=3)]}
        rate = float(rng.uniform(*cfg.rate_range))
        flows.append(FlowSpec(f"f{k}", routers[a], routers[b], tuple(path), TrafficSpec(model, params), rate,
                              cfg.packet_size, tos))
    return NetworkScenario(routers, links, queues, flows)


def _seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def generate_scenarios(config: GenConfig, seed: int, calibrate: bool = True) -> list[NetworkScenario]:
    """``config.count`` scenarios, each a pure function of (config, seed, index)."""
    config.check()
    out = []
    for ss in _seeds(seed, config.count):
        rng = np.random.default_rng(ss)
        sc = random_scenario(config, rng)
        if calibrate:
            target = float(rng.uniform(*config.utilization))
            sc, _ = calibrate_intensity(sc, target, seed=int(rng.integers(2**31)))
        out.append(sc)
    return out


def sim_duration(sc: NetworkScenario, packets_per_flow: int) -> float:
    """Duration giving the slowest flow about ``packets_per_flow`` post-warmup packets."""
    slowest = min(f.avg_rate / f.packet_size for f in sc.flows)
    return packets_per_flow / slowest / 0.9


def label_scenario(sc: NetworkScenario, seed: int, packets_per_flow: int):
    return simulate(sc, seed, sim_duration(sc, packets_per_flow))


# --- persistence ------------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    scenarios: dict  # name -> NetworkScenario
    labels: dict  # name -> {flow id -> FlowMetrics}
    splits: dict  # split -> [names]
    manifest: dict

    def split(self, name: str) -> list[tuple[NetworkScenario, dict]]:
        return [(self.scenarios[n], self.labels[n]) for n in self.splits[name]]


def split_names(names: Sequence[str], fractions: Sequence[float]) -> dict:
    n = len(names)
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_val - n_test
    return {
        "train": list(names[:n_train]),
        "val": list(names[n_train : n_train + n_val]),
        "test": list(names[n_train + n_val :]),
    }


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def labels_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LABEL_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in LABEL_FIELDS})
    return buf.getvalue()


def read_labels(path) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["scenario"], {})[r["flow_id"]] = FlowMetrics(
                float(r["mean_delay_s"]), float(r["jitter_s"]), float(r["loss_rate"])
            )
    return out


def build_dataset(out_dir, config: GenConfig, seed: int, log=None) -> Dataset:
    """Generate, simulate and write a complete dataset directory."""
    scenarios = generate_scenarios(config, seed)
    root = Path(out_dir)
    (root / "scenarios").mkdir(parents=True, exist_ok=True)
    names = [f"s{i:04d}" for i in range(len(scenarios))]
    rows, summary = [], []
    sim_seeds = np.random.SeedSequence([seed, 1]).generate_state(len(scenarios))
    for name, sc, s in zip(names, scenarios, sim_seeds):
        (root / "scenarios" / f"{name}.json").write_text(sc.dumps() + "\n")
        res = label_scenario(sc, int(s), config.packets_per_flow)
        for r in res.label_rows():
            rows.append({"scenario": name, **r})
        summary.append({"name": name, "traffic": sc.flows[0].traffic.model, "flows": len(sc.flows)})
        if log:
            log(name)
    (root / "labels.csv").write_text(labels_csv(rows))
    splits = split_names(names, config.split)
    (root / "splits.json").write_text(json.dumps(splits, indent=1) + "\n")
    manifest = {"seed": seed, "config": config.to_json(), "scenarios": summary, "splits": {k: len(v) for k, v in splits.items()}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return load_dataset(root)


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    splits = json.loads((root / "splits.json").read_text())
    names = [s["name"] for s in manifest["scenarios"]]
    scenarios = {n: load_scenario(root / "scenarios" / f"{n}.json") for n in names}
    labels = read_labels(root / "labels.csv")
    for n, lab in labels.items():
        missing = set(lab) - set(scenarios[n].flow_by_id)
        if missing:
            raise BadConfig(f"labels for unknown flows {sorted(missing)} in {n}")
    return Dataset(root, scenarios, labels, splits, manifest)


# --- evaluation -------------------------------------------------------------------

_ATTR = {"delay": "mean_delay", "jitter": "jitter", "loss": "loss_rate"}


@dataclass
class Metrics:
    mape: float  # percent
    mse: float
    mae: float
    n: int


@dataclass
class MetricReport:
    targets: dict  # target -> Metrics
    per_scenario: dict = field(default_factory=dict)  # scenario -> target -> Metrics

    def to_json(self) -> dict:
        return {
            "targets": {t: asdict(m) for t, m in self.targets.items()},
            "per_scenario": {s: {t: asdict(m) for t, m in d.items()} for s, d in self.per_scenario.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls(
            {t: Metrics(**m) for t, m in obj["targets"].items()},
            {s: {t: Metrics(**m) for t, m in d.items()} for s, d in obj.get("per_scenario", {}).items()},
        )


def _metrics(pred: np.ndarray, y: np.ndarray, target: str) -> Metrics:
    if len(y) == 0:
        return Metrics(float("nan"), float("nan"), float("nan"), 0)
    err = pred - y
    pos = y > 0
    if target != "loss" and not pos.all():
        raise ZeroLabel(f"{target} labels must be positive for MAPE")
    mape = float(np.mean(np.abs(err[pos]) / y[pos]) * 100.0) if pos.any() else float("nan")
    with np.errstate(over="ignore", invalid="ignore"):
        return Metrics(mape, float(np.mean(err**2)), float(np.mean(np.abs(err))), int(len(y)))


def _value(x, target):
    return float(getattr(x, _ATTR[target])) if isinstance(x, FlowMetrics) else float(x)


def evaluate(predictions: Mapping, labels: Mapping, targets: Sequence[str] = ("delay",)) -> MetricReport:
    """MAPE (percent), MSE and MAE of predictions against labels.

    Both arguments map scenario name -> flow id -> FlowMetrics (or a bare
    float for a single target). Every labeled flow needs a prediction.
    """
    report = MetricReport({})
    for target in targets:
        all_p, all_y = [], []
        for name in sorted(labels):
            ps, ys = [], []
            for fid in sorted(labels[name]):
                try:
                    p = predictions[name][fid]
                except KeyError:
                    raise MissingPrediction(f"no prediction for flow {fid} of {name}") from None
                ps.append(_value(p, target))
                ys.append(_value(labels[name][fid], target))
            report.per_scenario.setdefault(name, {})[target] = _metrics(np.array(ps), np.array(ys), target)
            all_p += ps
            all_y += ys
        report.targets[target] = _metrics(np.array(all_p), np.array(all_y), target)
    return report


__all__ = [
    "GenConfig",
    "Dataset",
    "Metrics",
    "MetricReport",
    "generate_scenarios",
    "random_scenario",
    "shortest_path",
    "build_dataset",
    "load_dataset",
    "evaluate",
    "labels_csv",
    "read_labels",
    "split_names",
]

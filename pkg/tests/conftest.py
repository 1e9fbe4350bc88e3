from hypothesis import strategies as st

from ordnet.topology import build_complex


@st.composite
def random_complexes(draw):
    n = draw(st.integers(1, 6))
    verts = list(range(n))
    m = draw(st.integers(0, 12 - n))
    higher = {}
    for _ in range(m):
        support = frozenset(draw(st.sets(st.sampled_from(verts), min_size=2 if n > 1 else 1, max_size=n)))
        if len(support) < 2:
            continue
        higher.setdefault(support, draw(st.integers(1, 3)))
    # make rank order preserving by forcing rank >= rank of any contained cell
    items = sorted(higher.items(), key=lambda kv: len(kv[0]))
    fixed = {}
    for support, rank in items:
        floor = max([fixed[s] for s in fixed if s < support], default=1)
        fixed[support] = max(rank, floor)
    return build_complex(verts, [(s, r) for s, r in fixed.items()])


def random_scenario(seed, n_routers=5, n_flows=6, max_queues=3, traffic=("poisson", "onoff")):
    """Small random scenario: ring plus chords, shortest-path flows, mixed queue policies."""
    import networkx as nx
    import numpy as np

    from ordnet.netmodel import FlowSpec, LinkSpec, NetworkScenario, QueueSpec, TrafficSpec

    rng = np.random.default_rng(seed)
    routers = [f"r{i}" for i in range(n_routers)]
    g = nx.DiGraph()
    pairs = {(i, (i + 1) % n_routers) for i in range(n_routers)}
    for _ in range(n_routers):
        a, b = rng.choice(n_routers, size=2, replace=False)
        pairs.add((int(a), int(b)))
    pairs |= {(b, a) for a, b in pairs}
    links, queues, link_queues = [], [], {}
    for k, (a, b) in enumerate(sorted(pairs)):
        lid = f"l{k}"
        links.append(LinkSpec(lid, routers[a], routers[b], float(rng.choice([1e4, 4e4, 1e5]))))
        g.add_edge(a, b, link=lid)
        nq = int(rng.integers(1, max_queues + 1))
        policy = "SP" if nq > 1 else "FIFO"
        link_queues[lid] = []
        for j in range(nq):
            qid = f"{lid}q{j}"
            queues.append(QueueSpec(qid, lid, float(rng.choice([8e3, 16e3, 32e3, 64e3])), policy, j if policy == "SP" else 0))
            link_queues[lid].append(qid)
    flows = []
    for k in range(n_flows):
        a, b = (int(x) for x in rng.choice(n_routers, size=2, replace=False))
        nodes = nx.shortest_path(g, a, b)
        tos = int(rng.integers(0, 3))
        path = []
        for u, v in zip(nodes, nodes[1:]):
            lid = g.edges[u, v]["link"]
            qs = link_queues[lid]
            path.append((qs[tos % len(qs)], lid))
        model = str(rng.choice(list(traffic)))
        params = {"on_mean": 0.5, "off_mean": 0.5} if model == "onoff" else {}
        flows.append(FlowSpec(f"f{k}", routers[a], routers[b], tuple(path), TrafficSpec(model, params),
                              float(rng.uniform(500, 3000)), 1000.0, tos))
    return NetworkScenario(routers, links, queues, flows)

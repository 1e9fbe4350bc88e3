import math
from collections import defaultdict

import numpy as np
import pytest

from conftest import random_scenario

from ordnet.errors import BadParams, BadScenario
from ordnet.netmodel import FlowSpec, LinkSpec, NetworkScenario, QueueSpec, TrafficSpec
from ordnet.netsim import (
    TrafficModel,
    TrafficSampler,
    batch_means_se,
    calibrate_intensity,
    max_utilization,
    sample_interarrivals,
    scale_rates,
    simulate,
)


def single_link(rate_bps, capacity=1e6, size_bits=1e12, model="poisson", params=None, packet=1000.0):
    return NetworkScenario(
        ["A", "B"],
        [LinkSpec("l", "A", "B", capacity)],
        [QueueSpec("q", "l", size_bits)],
        [FlowSpec("f", "A", "B", (("q", "l"),), TrafficSpec(model, params or {}), rate_bps, packet)],
    )


def lag1(x):
    x = np.asarray(x) - np.mean(x)
    return float(np.dot(x[:-1], x[1:]) / np.dot(x, x))


# --- traffic --------------------------------------------------------------------


def test_deterministic_gaps():
    gaps = sample_interarrivals(TrafficModel("deterministic", 100.0), np.random.default_rng(0), 50)
    np.testing.assert_allclose(gaps, 0.01, rtol=0, atol=1e-15)


def test_poisson_mean():
    lam, n = 250.0, 100_000
    gaps = sample_interarrivals(TrafficModel("poisson", lam), np.random.default_rng(1), n)
    se = gaps.std(ddof=1) / math.sqrt(n)
    assert abs(gaps.mean() - 1 / lam) <= 3 * se


def test_autocorr_rho_zero_is_white():
    n = 50_000
    gaps = sample_interarrivals(TrafficModel("autocorr_exp", 10.0, {"rho": 0.0}), np.random.default_rng(2), n)
    assert abs(lag1(gaps)) <= 3 / math.sqrt(n)


def test_autocorr_marginal_and_correlation():
    n = 100_000
    gaps = sample_interarrivals(TrafficModel("autocorr_exp", 10.0, {"rho": 0.8}), np.random.default_rng(3), n)
    assert lag1(gaps) > 0.3
    se = batch_means_se(gaps)
    assert abs(gaps.mean() - 0.1) <= 4 * se


def test_onoff_long_run_rate():
    model = TrafficModel("onoff", 100.0, {"on_mean": 0.2, "off_mean": 0.6})
    gaps = sample_interarrivals(model, np.random.default_rng(4), 1_000_000)
    # about 12,000 on/off cycles; the rate estimate has roughly 1% relative error
    assert abs(len(gaps) / gaps.sum() - 100.0) / 100.0 < 0.03
    # bursty: squared coefficient of variation well above the exponential value of 1
    assert gaps.var() / gaps.mean() ** 2 > 2.0


def test_modulated_rate_follows_levels():
    model = TrafficModel("modulated_exp", 50.0, {"rho": 0.0, "period": 5.0, "levels": [1.0, 3.0]})
    s = TrafficSampler(model, np.random.default_rng(5))
    gaps = s.gaps(100_000)
    t = np.cumsum(gaps)
    phase = (t // 5.0).astype(int) % 2
    low = np.sum(phase == 0) / np.sum(gaps[phase == 0])
    high = np.sum(phase == 1) / np.sum(gaps[phase == 1])
    assert high / low == pytest.approx(3.0, rel=0.1)


def test_sampler_continues_stream():
    m = TrafficModel("onoff", 20.0, {"on_mean": 1.0, "off_mean": 1.0})
    a = TrafficSampler(m, np.random.default_rng(6)).gaps(100)
    s = TrafficSampler(m, np.random.default_rng(6))
    b = np.concatenate([s.gaps(40), s.gaps(60)])
    np.testing.assert_array_equal(a, b)


def test_bad_traffic_params():
    with pytest.raises(BadParams):
        TrafficModel("poisson", 0.0)
    with pytest.raises(BadParams):
        TrafficModel("autocorr_exp", 1.0, {"rho": 1.0})
    with pytest.raises(BadParams):
        TrafficModel("onoff", 1.0, {"on_mean": 0.0, "off_mean": 1.0})
    with pytest.raises(BadParams):
        sample_interarrivals(TrafficModel("poisson", 1.0), np.random.default_rng(0), 0)


# --- simulator -------------------------------------------------------------------


@pytest.mark.parametrize("rho", [0.3, 0.5, 0.7])
def test_mm1_oracle(rho):
    mu = 1000.0  # capacity 1e6 bps, mean packet 1000 bits
    lam = rho * mu
    duration = 1.1e5 / (0.9 * lam)
    res = simulate(single_link(lam * 1000.0), seed=11, duration=duration)
    assert res.delivered["f"] >= 1e5
    m = res.metrics["f"]
    assert abs(m.mean_delay - 1.0 / (mu - lam)) <= 3 * res.delay_se["f"]
    assert res.sent["f"] == res.delivered["f"] + res.dropped["f"]
    assert res.link_utilization["l"] == pytest.approx(rho, abs=0.02)


def test_no_queuing_constant_sizes():
    sc = single_link(1e4, capacity=1e6, model="deterministic")
    res = simulate(sc, 0, 10.0, constant_sizes=True)
    m = res.metrics["f"]
    assert m.mean_delay == pytest.approx(1000.0 / 1e6, rel=1e-12)
    assert m.jitter <= 1e-15
    assert m.loss_rate == 0.0


def test_zero_size_queue_drops_every_buffered_packet():
    res = simulate(single_link(8e5, size_bits=0.0), 3, 5.0, warmup=0.0, trace=True)
    busy_arrivals = 0
    busy = False
    for ev in res.trace:
        if ev[0] == "arrive" and busy:
            busy_arrivals += 1
        if ev[0] == "start":
            busy = True
        if ev[0] == "depart":
            busy = False
    assert not any(ev[0] == "enqueue" for ev in res.trace)
    assert res.dropped["f"] == busy_arrivals > 0


def test_bad_inputs():
    with pytest.raises(BadParams):
        simulate(single_link(1e5), 0, 1.0, warmup=1.0)
    bad = single_link(1e5)
    bad = NetworkScenario(bad.routers, bad.links, [QueueSpec("q", "nope", 1.0)], bad.flows)
    with pytest.raises(BadScenario):
        simulate(bad, 0, 1.0)


def test_conservation_and_determinism():
    sc = random_scenario(21, n_routers=5, n_flows=8)
    a = simulate(sc, 5, 20.0)
    b = simulate(sc, 5, 20.0)
    assert repr(a) == repr(b)
    for fid in a.sent:
        assert a.sent[fid] == a.delivered[fid] + a.dropped[fid]
    s, d, x = a.totals
    assert s == d + x


def test_fifo_order_within_queue():
    sc = random_scenario(22, n_routers=4, n_flows=6)
    res = simulate(sc, 1, 5.0, trace=True)
    link_of = {q.id: q.link for q in sc.queues}
    queued = defaultdict(int)  # per link, packets waiting in buffers
    busy = defaultdict(bool)
    in_queue = defaultdict(list)  # per (queue, flow): packet ids in arrival order
    pkt_queue = {}
    flow_of = {}
    for ev in res.trace:
        kind = ev[0]
        if kind == "arrive":
            _, _, q, pid, flow = ev
            flow_of[pid] = flow
            pkt_queue[pid] = q
        elif kind == "enqueue":
            _, _, q, pid = ev
            queued[link_of[q]] += 1
            in_queue[(q, flow_of[pid])].append(pid)
        elif kind == "start":
            _, _, link, pid = ev
            busy[link] = True
            q = pkt_queue[pid]
            lst = in_queue[(q, flow_of[pid])]
            if pid in lst:
                assert lst[0] == pid  # oldest packet of this flow in this queue leaves first
                lst.pop(0)
                queued[link] -= 1
        elif kind == "depart":
            _, _, link, _ = ev
            busy[link] = False
    # after draining, every link is idle with empty buffers
    for link in busy:
        assert not busy[link] and queued[link] == 0


def test_idle_link_with_waiting_packets_never_observed():
    sc = random_scenario(23, n_routers=4, n_flows=6)
    res = simulate(sc, 2, 5.0, trace=True)
    link_of = {q.id: q.link for q in sc.queues}
    waiting, busy = defaultdict(int), defaultdict(bool)
    pkt_link = {}
    events = res.trace
    for i, ev in enumerate(events):
        if ev[0] == "enqueue":
            waiting[link_of[ev[2]]] += 1
            pkt_link[ev[3]] = link_of[ev[2]]
        elif ev[0] == "start":
            if pkt_link.pop(ev[3], None) == ev[2]:
                waiting[ev[2]] -= 1
            busy[ev[2]] = True
        elif ev[0] == "depart":
            busy[ev[2]] = False
            nxt = events[i + 1] if i + 1 < len(events) else None
            if waiting[ev[2]]:
                # the very next logged action on this link restarts service at the same instant
                assert nxt is not None and nxt[0] == "start" and nxt[2] == ev[2] and nxt[1] == ev[1]


def test_strict_priority_favours_high_priority():
    sc = NetworkScenario(
        ["A", "B"],
        [LinkSpec("l", "A", "B", 1e6)],
        [QueueSpec("hi", "l", 1e9, "SP", 2), QueueSpec("lo", "l", 1e9, "SP", 1)],
        [
            FlowSpec("h", "A", "B", (("hi", "l"),), TrafficSpec(), 4e5, 1000.0),
            FlowSpec("w", "A", "B", (("lo", "l"),), TrafficSpec(), 4e5, 1000.0, 1),
        ],
    )
    m = simulate(sc, 0, 60.0).metrics
    assert m["h"].mean_delay < m["w"].mean_delay


# --- calibration -----------------------------------------------------------------


def test_calibrate_closed_form():
    sc, scale = calibrate_intensity(single_link(1e5, capacity=1e6), 0.5, seed=0)
    assert sc.flows[0].avg_rate == pytest.approx(0.5e6, rel=1e-12)
    assert max_utilization(sc) == pytest.approx(0.5, rel=1e-12)
    again, scale2 = calibrate_intensity(sc, 0.5, seed=0)
    assert abs(scale2 - 1.0) <= 1e-9


def test_calibrate_shrinks_on_pilot_loss():
    sc = single_link(1e5, capacity=1e6, size_bits=8e3)
    full = scale_rates(sc, 9.5)  # the scale hitting utilization 0.95 exactly
    pilot = simulate(full, 1, 2000 / (full.flows[0].avg_rate / 1000.0))
    assert pilot.metrics["f"].loss_rate > 0.03
    cal, scale = calibrate_intensity(sc, 0.95, seed=1)
    assert scale < 9.5
    assert max_utilization(cal) < 0.95


def test_calibrate_bad_target():
    with pytest.raises(BadParams):
        calibrate_intensity(single_link(1e5), 0.99, seed=0)

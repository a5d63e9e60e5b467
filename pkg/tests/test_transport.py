import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccoll.transport import (
    CATEGORIES, COMDECOM, OTHERS, REDUCTION, WAIT, CommWorld, Deadlock, MessageTruncated,
    SimParams, TransportError,
)

MODES = ["virtual", "real"]
SIM = SimParams(latency=2e-6, bandwidth=1e9)


@pytest.mark.parametrize("mode", MODES)
def test_zero_byte_message(mode):
    def fn(ep):
        if ep.rank == 0:
            ep.wait(ep.isend(1, 5, b""))
            return None
        return ep.wait(ep.irecv(0, 5))

    results, report = CommWorld(2, mode, SIM).run(fn)
    assert results[1] == b""
    assert report.ranks[0].bytes_sent == 0
    assert report.ranks[0].messages_sent == 1


def test_arrival_time_oracle():
    nbytes = 4000

    def fn(ep):
        if ep.rank == 0:
            ep.charge(OTHERS, lambda: None, 3e-6)
            ep.isend(1, 1, bytes(nbytes))
            return ep.clock
        ep.wait(ep.irecv(0, 1))
        return ep.clock

    (t_send, t_recv), _ = CommWorld(2, "virtual", SIM).run(fn)
    assert t_send == pytest.approx(3e-6)
    assert t_recv == pytest.approx(3e-6 + SIM.latency + nbytes / SIM.bandwidth, rel=1e-12)


def test_sends_serialise_on_egress():
    def fn(ep):
        if ep.rank == 0:
            ep.isend(1, 1, bytes(1000))
            ep.isend(1, 2, bytes(1000))
            return None
        ep.wait(ep.irecv(0, 2))
        return ep.clock

    (_, t), _ = CommWorld(2, "virtual", SIM).run(fn)
    assert t == pytest.approx(2000 / SIM.bandwidth + SIM.latency)


@pytest.mark.parametrize("mode", MODES)
def test_fifo_per_channel(mode):
    def fn(ep):
        if ep.rank == 0:
            ep.waitall([ep.isend(1, 9, bytes([i])) for i in range(5)])
            return None
        reqs = [ep.irecv(0, 9) for _ in range(5)]
        return [d[0] for d in ep.waitall(reqs)]

    results, _ = CommWorld(2, mode).run(fn)
    assert results[1] == [0, 1, 2, 3, 4]


@pytest.mark.parametrize("mode", MODES)
def test_truncation_error(mode):
    def fn(ep):
        if ep.rank == 0:
            ep.wait(ep.isend(1, 1, bytes(10)))
            return None
        req = ep.irecv(0, 1, max_bytes=4)
        with pytest.raises(MessageTruncated):
            ep.wait(req)
        return "raised"

    results, _ = CommWorld(2, mode).run(fn)
    assert results[1] == "raised"


def test_poll_semantics_virtual():
    def fn(ep):
        if ep.rank == 0:
            ep.isend(1, 1, b"abc")
            ep.charge(OTHERS, lambda: None, 1e-3)
            return None
        pending = ep.irecv(0, 77)  # never sent
        req = ep.irecv(0, 1)
        ep.charge(OTHERS, lambda: None, 1e-3)
        first = ep.poll()
        second = ep.poll()
        return first, second, req.id, pending.complete

    results, _ = CommWorld(2, "virtual").run(fn)
    first, second, rid, pending_done = results[1]
    assert first == {rid}
    assert second == set()
    assert not pending_done


def test_poll_semantics_real():
    def fn(ep):
        if ep.rank == 0:
            ep.wait(ep.isend(1, 1, b"abc"))
            return None
        pending = ep.irecv(0, 77)
        req = ep.irecv(0, 1)
        seen = set()
        while req.id not in seen:
            seen |= ep.poll()
        return seen == {req.id}, ep.poll(), pending.complete

    results, _ = CommWorld(2, "real").run(fn)
    assert results[1] == (True, set(), False)


def test_poll_before_arrival_then_after():
    def fn(ep):
        if ep.rank == 0:
            ep.isend(1, 1, bytes(100))
            return None
        req = ep.irecv(0, 1)
        early = ep.poll()
        ep.charge(OTHERS, lambda: None, 1.0)
        late = ep.poll()
        return early, late, req.id

    results, _ = CommWorld(2, "virtual").run(fn)
    early, late, rid = results[1]
    assert early == set() and late == {rid}


def test_charge_advances_clock_and_category():
    sim = SimParams()

    def fn(ep):
        ep.charge(COMDECOM, lambda: None, sim.compress_time(1000))
        ep.charge(REDUCTION, lambda: None, sim.reduce_time(1000))
        with pytest.raises(ValueError):
            ep.charge("Bogus", lambda: None)
        with pytest.raises(TransportError):
            ep.charge(OTHERS, lambda: ep.charge(OTHERS, lambda: None))
        return ep.clock

    (clock,), report = CommWorld(1, "virtual", sim).run(fn)
    assert clock == pytest.approx(1000 * sim.compress_cost + 1000 * sim.reduce_cost)
    assert report.ranks[0].times[COMDECOM] == pytest.approx(1e-6)
    assert report.ranks[0].times[REDUCTION] == pytest.approx(2.5e-7)


def test_deadlock_detected():
    def fn(ep):
        return ep.wait(ep.irecv(1 - ep.rank, 1))

    with pytest.raises(Deadlock):
        CommWorld(2, "virtual").run(fn)


def test_rank_errors_propagate():
    def fn(ep):
        if ep.rank == 1:
            raise KeyError("boom")
        return ep.wait(ep.irecv(1, 1))

    with pytest.raises(KeyError):
        CommWorld(2, "virtual").run(fn)


def test_invalid_peers():
    def fn(ep):
        with pytest.raises(TransportError):
            ep.isend(5, 1, b"")
        with pytest.raises(TransportError):
            ep.irecv(-1, 1)
        return True

    assert CommWorld(2).run(fn)[0] == [True, True]


def _exchange(ep):
    n = ep.size
    out = []
    for step in range(1, n):
        dst = (ep.rank + step) % n
        src = (ep.rank - step) % n
        tag = ep.new_tag()
        s = ep.isend(dst, tag, bytes(100 * (ep.rank + 1) * step))
        r = ep.irecv(src, tag)
        ep.charge(COMDECOM, lambda: None, 1e-7 * step)
        out.append(len(ep.wait(r)))
        ep.wait(s)
    return out


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 6))
def test_byte_conservation_and_determinism(n):
    world = CommWorld(n, "virtual", SIM)
    res1, rep1 = world.run(_exchange)
    res2, rep2 = world.run(_exchange)
    assert res1 == res2
    assert rep1 == rep2
    assert rep1.total("bytes_sent") == rep1.total("bytes_received")
    for stats in rep1.ranks:
        assert stats.total_time == pytest.approx(sum(stats.times[c] for c in CATEGORIES))


def test_real_mode_others_fills_remainder():
    _, report = CommWorld(3, "real").run(_exchange)
    for stats in report.ranks:
        assert stats.times[OTHERS] >= 0
        assert stats.total_time == pytest.approx(sum(stats.times.values()), rel=1e-6, abs=1e-6)


def test_sim_config_roundtrip(tmp_path):
    sim = SimParams(latency=3e-6, bandwidth=5e9, compress_cost=2e-9)
    path = tmp_path / "sim.cfg"
    path.write_text(sim.to_config())
    assert SimParams.from_file(path) == sim
    parsed = SimParams.parse("# comment\nlatency_us = 1.5\nbandwidth_gbps=100\n")
    assert parsed.latency == pytest.approx(1.5e-6)
    assert parsed.bandwidth == pytest.approx(12.5e9)
    with pytest.raises(ValueError):
        SimParams.parse("speed=3")
    with pytest.raises(ValueError):
        SimParams(bandwidth=0)


def test_world_validation():
    with pytest.raises(ValueError):
        CommWorld(0)
    with pytest.raises(ValueError):
        CommWorld(2, "quantum")


def test_wait_charged_to_category():
    def fn(ep):
        if ep.rank == 0:
            ep.charge(OTHERS, lambda: None, 5e-6)
            ep.isend(1, 1, b"x")
            return None
        ep.wait(ep.irecv(0, 1), WAIT)
        return ep.stats.times[WAIT]

    results, _ = CommWorld(2, "virtual", SIM).run(fn)
    assert results[1] == pytest.approx(5e-6 + SIM.latency + 1 / SIM.bandwidth)
    assert np.isfinite(results[1])

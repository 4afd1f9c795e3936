"""Property-based checks of the model invariants."""

from collections import Counter

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import booted
from devlore_sim.events import EventLoop
from devlore_sim.gic import Gic, InterruptConfig, Trigger, Vgic, VgicError
from devlore_sim.harness.config import ScenarioConfig
from devlore_sim.harness.engine import Simulation, metrics_consistent, run
from devlore_sim.hypervisor import STRATEGIES, Strategy
from devlore_sim.mem_isolation import ACCESS_MATRIX, World
from devlore_sim.monitor import LogRecord
from devlore_sim.platform import Mode
from devlore_sim.rmm import benign_batch, check_injection

SIM_SETTINGS = settings(max_examples=25, deadline=None,
                        suppress_health_check=[HealthCheck.too_slow])


@st.composite
def logs(draw, max_len=12, ids=st.integers(1, 7), prios=st.integers(0, 4)):
    id_list = draw(st.lists(ids, max_size=max_len))
    prio = {i: draw(prios) for i in sorted(set(id_list))}
    return [LogRecord(s, i, prio[i], s, "vm") for s, i in enumerate(id_list)]


class TestInjectionProperties:
    @given(logs(), st.integers(1, 8), st.data())
    def test_accepted_requests_are_prefixes(self, records, n, data):
        req = data.draw(st.lists(st.integers(0, 8), max_size=n, unique=True))
        v = check_injection(req, records, n)
        if v.accepted:
            ordered = sorted(records, key=lambda r: (r.priority, r.seq))
            assert list(v.matched) == ordered[:len(req)]
            assert {r.id for r in v.matched} == set(req)

    @given(logs(), st.integers(1, 8))
    def test_every_benign_prefix_is_accepted(self, records, n):
        batch = benign_batch(records, n)
        for k in range(len(batch) + 1):
            ids = [r.id for r in batch[:k]]
            assert check_injection(list(reversed(ids)), records, n)

    @given(logs(), st.integers(1, 8), st.lists(st.integers(0, 8), max_size=10))
    def test_rejections_carry_a_reason(self, records, n, req):
        v = check_injection(req, records, n)
        assert v.accepted or v.check in ("malformed", "C2", "C3", "C4")
        if len(set(req)) != len(req) or len(req) > n:
            assert v.check == "malformed"
        elif set(req) - {r.id for r in records}:
            assert v.check == "C2"


class TestVgicProperties:
    @given(st.lists(st.lists(st.integers(0, 9), max_size=6), max_size=20), st.integers(1, 4))
    def test_list_registers_never_hold_duplicates(self, batches, n):
        v = Vgic("vm", n)
        for ids in batches:
            try:
                v.program(ids)
            except VgicError:
                continue
            occ = v.occupied
            assert len(occ) == len(set(occ)) <= n
            v.fire()


class TestGicProperties:
    @given(st.lists(st.sampled_from(["assert", "ack", "run", "deassert"]), max_size=40),
           st.sampled_from([Trigger.EDGE, Trigger.LEVEL]))
    def test_deliveries_never_exceed_assertions(self, ops, trigger):
        loop = EventLoop()
        gic = Gic(loop)
        gic.add(InterruptConfig(40, trigger=trigger))
        delivered = []
        gic.sink = lambda irq, g: delivered.append(irq)
        asserts = 0
        for op in ops:
            if op == "assert":
                asserts += 1
                gic.assert_line(40)
            elif op == "ack":
                gic.acknowledge(40)
            elif op == "deassert":
                gic.deassert_line(40)
            else:
                loop.run()
            assert list(gic.pending).count(40) <= 1
        loop.run()
        if trigger is Trigger.EDGE:
            assert len(delivered) <= asserts


class TestAccessMatrixProperties:
    @given(st.sampled_from(list(World)), st.sampled_from(list(World)))
    def test_root_dominates_and_normal_is_shared(self, src, pas):
        if pas in ACCESS_MATRIX[src]:
            assert pas in ACCESS_MATRIX[World.ROOT]
        assert World.NORMAL in ACCESS_MATRIX[src]


strategy_names = st.sampled_from(sorted(STRATEGIES))
workloads = st.sampled_from([
    {"kind": "attack"},
    {"kind": "keyboard", "keys": 7},
    {"kind": "storm", "backlog": 3},
    {"kind": "dma", "trace": "bfs"},
])


def scenario(mode, name, workload, seed, n):
    return ScenarioConfig(mode=mode, strategy=Strategy.parse(name), workload=workload,
                          seed=seed, n=n)


class TestRunProperties:
    @SIM_SETTINGS
    @given(strategy_names, workloads, st.integers(0, 2**32), st.integers(1, 4))
    def test_dmi_invariants_hold_under_any_host(self, name, workload, seed, n):
        r = run(scenario(Mode.DMI, name, workload, seed, n))
        p_obs = r.observables["vm1"]
        assert not r.invariant_failures
        assert not r.corruption
        assert p_obs["spurious"] == 0 and p_obs["integrity_failures"] == 0
        assert metrics_consistent(r)

    @SIM_SETTINGS
    @given(strategy_names, workloads, st.integers(0, 2**32))
    def test_injections_are_authentic(self, name, workload, seed):
        r = run(scenario(Mode.DMI, name, workload, seed, 4))
        protected = {i for rec in r.trace.of_kind("smc") if rec["fn"] == "smc_prot_int"
                     for i in rec["ids"]}
        traps = Counter(t["id"] for t in r.trace.of_kind("trap"))
        injected = Counter(i for rec in r.trace.of_kind("inject_accept") for i in rec["ids"])
        for irq in protected:
            assert injected[irq] <= traps[irq], (irq, injected[irq], traps[irq])

    @SIM_SETTINGS
    @given(strategy_names, workloads, st.integers(0, 2**32))
    def test_residual_never_negative(self, name, workload, seed):
        sim = Simulation(scenario(Mode.DMI, name, workload, seed, 4).fresh())
        sim.run()
        assert sim.platform.rmm.residual("vm1") >= 0

    @SIM_SETTINGS
    @given(st.sampled_from(list(Mode)), strategy_names, workloads, st.integers(0, 2**32))
    def test_replay_is_byte_identical(self, mode, name, workload, seed):
        cfg = scenario(mode, name, workload, seed, 4)
        assert run(cfg).lines() == run(cfg).lines()


class TestSplitViewProperty:
    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["add", "remove", "attach", "detach"]),
                              st.integers(0, 50)), max_size=40))
    def test_streams_track_vm_tables(self, ops):
        sim = booted(Mode.DMI)
        p = sim.platform
        guest = sim.guests["vm1"]
        added = []
        for op, k in ops:
            if op == "add":
                pa = p.hypervisor.alloc_granule()
                p.rmm.rmi_granule_delegate(pa)
                if p.rmm.rmi_data_create("vm1", 0x1000 + k, pa):
                    added.append(0x1000 + k)
            elif op == "remove" and added:
                p.rmm.rmi_data_destroy("vm1", added.pop(k % len(added)))
            elif op == "attach":
                guest.attach(("smmute0", "smmute1")[k % 2])
            elif op == "detach" and guest.attached:
                guest.detach(sorted(guest.attached)[k % len(guest.attached)])
            mem = p.memory
            assert mem.split_views() == []
            assert mem.mirror_violations() == []
            assert mem.divergence_violations() == []

import pytest

from devlore_sim.events import EventLoop, StepLimitExceeded
from devlore_sim.gic import (Field, Gic, Group, InterruptConfig, Trigger, Vgic, VgicError,
                             config_space_access)
from devlore_sim.mem_isolation import (AccessKind, AccessRequest, GranuleProtectionFault,
                                       GranuleProtectionTable, ModelError, World)
from devlore_sim.trace import Trace


class Harness:
    def __init__(self, *configs):
        self.loop = EventLoop()
        self.trace = Trace(clock=lambda: self.loop.now)
        self.gic = Gic(self.loop, trace=self.trace)
        self.delivered = []
        self.gic.sink = lambda irq, group: self.delivered.append((self.loop.now, irq))
        for c in configs:
            self.gic.add(c)


def edge(irq, **kw):
    return InterruptConfig(irq, trigger=Trigger.EDGE, **kw)


def level(irq, **kw):
    return InterruptConfig(irq, trigger=Trigger.LEVEL, **kw)


class TestDelivery:
    def test_one_tick_latency(self):
        h = Harness(edge(50))
        h.gic.assert_line(50)
        h.loop.run()
        assert h.delivered == [(1, 50)]

    def test_pending_edges_coalesce(self):
        h = Harness(edge(50))
        h.gic.assert_line(50)
        h.gic.assert_line(50)
        h.loop.run()
        assert h.delivered == [(1, 50)]
        assert h.trace.count("assert", coalesced=True) == 1

    def test_edge_while_active_redelivers_after_ack(self):
        h = Harness(edge(50))
        h.gic.assert_line(50)
        h.loop.run()
        h.gic.assert_line(50)
        h.loop.run()
        assert len(h.delivered) == 1
        h.gic.acknowledge(50)
        h.loop.run()
        assert len(h.delivered) == 2

    def test_level_ack_while_high_repends(self):
        h = Harness(level(44))
        h.gic.assert_line(44)
        h.loop.run()
        h.gic.acknowledge(44)
        h.loop.run()
        h.gic.acknowledge(44)
        h.gic.deassert_line(44)
        h.loop.run()
        assert [irq for _, irq in h.delivered] == [44, 44]

    def test_level_deassert_clears_pending(self):
        h = Harness(level(44))
        h.gic.assert_line(44)
        h.gic.deassert_line(44)
        h.loop.run()
        assert h.delivered == []

    def test_disabled_edge_latched_until_enable(self):
        h = Harness(edge(30, enabled=False))
        h.gic.assert_line(30)
        h.loop.run()
        assert h.delivered == []
        h.gic.set_enabled(30, True)
        h.loop.run()
        assert [irq for _, irq in h.delivered] == [30]

    def test_disabled_level_delivers_on_enable_if_high(self):
        h = Harness(level(44))
        h.gic.assert_line(44)
        h.loop.run()
        h.gic.set_enabled(44, False)
        h.gic.acknowledge(44)
        h.loop.run()
        assert len(h.delivered) == 1
        h.gic.set_enabled(44, True)
        h.loop.run()
        assert len(h.delivered) == 2

    def test_ack_of_idle_interrupt_warns(self):
        h = Harness(edge(50))
        assert h.gic.acknowledge(50) is False
        assert h.trace.count("warning", what="ack-not-pending") == 1

    def test_unknown_and_duplicate_ids(self):
        h = Harness(edge(50))
        with pytest.raises(ModelError):
            h.gic.assert_line(51)
        with pytest.raises(ModelError):
            h.gic.add(edge(50))


class TestConfigSpace:
    def test_register_roundtrip(self):
        h = Harness(edge(60))
        a = h.gic.reg_address(60, Field.PRIORITY)
        h.gic.reg_write(a, 0x20)
        assert h.gic.reg_read(a) == 0x20
        assert h.gic.decode(a) == (60, Field.PRIORITY)
        h.gic.reg_write(h.gic.reg_address(60, Field.GROUP), 0)
        assert h.gic.configs[60].group is Group.GROUP0

    def test_decode_rejects_outside_and_unaligned(self):
        h = Harness(edge(60))
        with pytest.raises(ModelError):
            h.gic.decode(0)
        with pytest.raises(ModelError):
            h.gic.decode(h.gic.reg_address(60, Field.ENABLE) + 1)

    def test_root_owned_config_faults_normal_core(self):
        h = Harness(edge(60))
        gpt = GranuleProtectionTable(64)
        gpt.set_range(16, 2, World.ROOT)
        a = h.gic.reg_address(60, Field.ENABLE)
        with pytest.raises(GranuleProtectionFault):
            config_space_access(h.gic, AccessRequest.core(World.NORMAL, a, AccessKind.WRITE),
                                gpt, 0)
        assert config_space_access(h.gic, AccessRequest.core(World.ROOT, a), gpt) == 1


class TestVgic:
    def test_program_fire_eoi(self):
        trace = Trace()
        v = Vgic("vm", n=2, trace=trace)
        v.program([60, 61])
        assert v.fire() == [60, 61]
        assert v.occupied == []
        v.eoi(61)
        v.eoi(60)
        assert v.take_completed() == [61, 60] and v.take_completed() == []
        assert trace.count("eoi") == 2

    def test_rejects_duplicates_and_oversize(self):
        v = Vgic("vm", n=2)
        with pytest.raises(VgicError):
            v.program([60, 60])
        with pytest.raises(VgicError):
            v.program([60, 61, 62])

    def test_eoi_of_idle_interrupt(self):
        v = Vgic("vm")
        with pytest.raises(VgicError):
            v.eoi(44)

    def test_needs_a_list_register(self):
        with pytest.raises(ValueError):
            Vgic("vm", n=0)


class TestEventLoop:
    def test_fifo_at_equal_ticks(self):
        loop, out = EventLoop(), []
        loop.schedule(2, out.append, "b")
        loop.schedule(1, out.append, "a")
        loop.schedule(2, out.append, "c")
        loop.run()
        assert out == ["a", "b", "c"] and loop.now == 2

    def test_step_limit(self):
        loop = EventLoop(step_limit=5)

        def again():
            loop.schedule(1, again)

        loop.schedule(0, again)
        with pytest.raises(StepLimitExceeded):
            loop.run()

    def test_no_past(self):
        with pytest.raises(ValueError):
            EventLoop().schedule(-1, print)

import pytest

from conftest import booted
from devlore_sim.gic import Field, Group
from devlore_sim.guest import VmConfig
from devlore_sim.harness.config import ScenarioConfig, default_vm_devices
from devlore_sim.harness.engine import run
from devlore_sim.hypervisor import STRATEGIES, Strategy
from devlore_sim.mem_isolation import GranuleProtectionFault, World
from devlore_sim.platform import Mode


class TestStrategy:
    def test_defaults(self):
        assert Strategy().name == "Benign"
        assert Strategy.parse("InjectFake").param == 60
        assert str(Strategy.parse("GicTamper:62")) == "GicTamper:62"

    def test_stall_flavors(self):
        s = Strategy.parse("StallScheduling:9,fresh")
        assert (s.param, s.stale) == (9, False)
        assert str(s) == "StallScheduling:9,fresh"
        assert Strategy.parse("StallScheduling:3").stale

    @pytest.mark.parametrize("text", ["Nope", "ReplayConsumed:3", "StallScheduling:2,soon",
                                      "InjectFake:x"])
    def test_bad_strategies(self, text):
        with pytest.raises(ValueError):
            Strategy.parse(text)

    def test_every_strategy_documented(self):
        assert all(desc for _, desc in STRATEGIES.values())


class TestBoot:
    def test_realm_ram_is_delegated(self, dmi_sim):
        mem = dmi_sim.platform.memory
        table = mem.vm_table("vm1")
        assert len(table) == 64
        assert all(mem.gptc[m.pa] is World.REALM for m in table.entries.values())
        assert mem.gptc.differs_from(mem.gptd) == []

    def test_normal_vm_has_passthrough_streams(self):
        sim = booted(Mode.BN)
        mem = sim.platform.memory
        assert "smmute0" in mem.streams and not mem.mirrored
        assert sim.platform.rmm is None

    def test_gic_config_is_root_owned_only_in_dmi(self, dmi_sim, br_sim):
        assert dmi_sim.platform.memory.gptc[16] is World.ROOT
        assert br_sim.platform.memory.gptc[16] is World.NORMAL
        assert dmi_sim.trace.count("gpf") >= 1 and br_sim.trace.count("gpf") == 0


class TestGicEmulation:
    def test_non_dmi_gpf_propagates(self, br_sim):
        p = br_sim.platform
        p.memory.gptc.set_range(16, 2, World.ROOT)
        with pytest.raises(GranuleProtectionFault):
            p.hypervisor.gic_write(60, Field.ENABLE, 0)

    def test_protected_write_denied(self, dmi_sim):
        p = dmi_sim.platform
        dmi_sim.guests["vm1"].attach("irqsrc0")
        assert not p.hypervisor.gic_write(60, Field.GROUP, int(Group.GROUP1))
        assert p.gic.configs[60].group is Group.GROUP0
        assert dmi_sim.trace.count("hyp_denied") == 1

    def test_unprotected_write_emulated(self, dmi_sim):
        p = dmi_sim.platform
        assert p.hypervisor.gic_write(61, Field.PRIORITY, 0x10)
        assert p.gic.configs[61].priority == 0x10


def attack(mode, strategy):
    return run(ScenarioConfig(mode=mode, workload={"kind": "attack"},
                              strategy=Strategy.parse(strategy)))


class TestStrategies:
    def test_fresh_stall_is_harmless(self):
        r = attack(Mode.DMI, "StallScheduling:5,fresh")
        assert r.status_name == "clean"
        assert r.observables == attack(Mode.DMI, "Benign").observables

    def test_deviations_are_traced(self):
        for name in STRATEGIES:
            if name == "Benign":
                continue
            r = attack(Mode.DMI, name)
            assert r.trace.count("deviation") >= 1, name

    def test_benign_br_and_dmi_agree(self):
        assert attack(Mode.BR, "Benign").observables == attack(Mode.DMI, "Benign").observables

    def test_gic_tamper_starves_counter_in_br(self):
        r = attack(Mode.BR, "GicTamper")
        assert r.attack_succeeded
        c = [x for x in r.corruption if x["what"] == "counter"][0]
        assert c["observed"] < c["authentic"]

    def test_wrong_pa_detected_then_retried(self):
        r = attack(Mode.DMI, "WrongPaMapping")
        assert r.trace.count("violation", check="attach-mapping") == 1
        assert r.trace.count("attach_state", state="aborted") == 1
        assert not r.invariant_failures

    def test_reorder_caught_by_c4(self):
        r = attack(Mode.DMI, "ReorderBeyondWindow")
        assert [v["check"] for v in r.trace.of_kind("violation")] == ["C4"]


class TestMultipleVms:
    def test_two_tickers_progress(self):
        vms = [VmConfig("vm1", devices=default_vm_devices(), workload={"kind": "ticker", "steps": 4}),
               VmConfig("vm2", ram_gpa=0x100, devices=default_vm_devices(),
                        workload={"kind": "ticker", "steps": 6})]
        for mode in Mode:
            r = run(ScenarioConfig(mode=mode, vms=vms))
            assert r.observables["vm1"]["progress"] == 4
            assert r.observables["vm2"]["progress"] == 6
            assert not r.invariant_failures and r.violations == 0

    def test_second_vm_cannot_take_attached_device(self):
        sim = booted(Mode.DMI, vms=[VmConfig("vm1", devices=default_vm_devices()),
                                    VmConfig("vm2", devices=default_vm_devices())])
        assert sim.guests["vm1"].attach("kmi0")
        assert not sim.guests["vm2"].attach("kmi0")
        assert sim.platform.memory.exclusivity_violations() == []

"""Scenario engine: builds a platform from a config, runs it to completion,
and derives metrics, observables and an exit status."""

from dataclasses import dataclass, field

from ..devices import PlatformDeviceTree, build_model
from ..events import EventLoop
from ..gic import SGI_NOTIFY, Gic, Group, InterruptConfig, Trigger
from ..guest import Guest
from ..hypervisor import Hypervisor
from ..mem_isolation import MemorySystem, World
from ..monitor import Monitor
from ..platform import Mode, Platform
from ..rmm import Rmm
from ..trace import Trace, metrics_from_trace
from .workloads import KEYBOARD_IRQ, make_workload

HOST_IRQ = 30

EXIT_CLEAN = 0
EXIT_USAGE = 1
EXIT_VIOLATIONS = 2
EXIT_ATTACK = 3
STATUS_NAMES = {EXIT_CLEAN: "clean", EXIT_VIOLATIONS: "violations-detected",
                EXIT_ATTACK: "attack-succeeded"}


@dataclass
class RunResult:
    config: object
    trace: Trace
    metrics: object
    observables: dict
    status: int
    violations: int
    corruption: list = field(default_factory=list)
    invariant_failures: list = field(default_factory=list)

    @property
    def status_name(self):
        return STATUS_NAMES[self.status]

    @property
    def attack_succeeded(self):
        return self.status == EXIT_ATTACK

    def lines(self):
        return self.trace.lines()

    def summary(self):
        return {
            "scenario": self.config.summary(),
            "status": self.status_name,
            "violations": self.violations,
            "corruption": self.corruption,
            "invariant_failures": self.invariant_failures,
            "metrics": self.metrics.as_dict(),
            "observables": self.observables,
        }


class Simulation:
    def __init__(self, config):
        self.config = config
        self.loop = EventLoop(config.step_limit)
        self.trace = Trace(config.costs, clock=lambda: self.loop.now)
        p = self.platform = Platform(config.mode, self.loop, self.trace, n=config.n,
                                     entry_latency=config.entry_latency)
        p.memory = MemorySystem(config.memory_granules, self.trace)
        p.tree = PlatformDeviceTree.from_dicts(config.devices)
        p.gic = Gic(self.loop, config.gic_base, config.gic_granules, self.trace)
        self._setup_gic()
        p.models = {d.id: build_model(d, p.gic, self.trace, p.memory) for d in p.tree}
        p.monitor = Monitor(p, config.log_capacity, config.level_ack)
        if config.mode.realm:
            p.rmm = Rmm(p, checks=config.mode is Mode.DMI)
        p.hypervisor = Hypervisor(p, config.strategy)
        p.gic.sink = self._route
        self.workloads = {}
        self.guests = p.guests
        for i, vm_cfg in enumerate(config.vms):
            spec = vm_cfg.workload or (config.workload if i == 0 else None)
            wl = None
            if spec is not None:
                wl = make_workload(spec, config.seed + i, config.base_dir)
                wl.prepare(vm_cfg, config.mode)
                self.workloads[vm_cfg.id] = wl
            guest = Guest(p, vm_cfg, wl.program if wl else None)
            p.guests[vm_cfg.id] = guest
            p.hypervisor.add_vm(vm_cfg, guest)
            if wl is not None:
                wl.install(self, vm_cfg.id)

    def _setup_gic(self):
        gic = self.platform.gic
        for desc in self.platform.tree:
            for irq, trig in desc.interrupts:
                gic.add(InterruptConfig(irq, Group.GROUP1, True, 0x80, trig))
        gic.add(InterruptConfig(SGI_NOTIFY, Group.GROUP1, True, 0x00, Trigger.EDGE))
        if HOST_IRQ not in gic.configs:
            gic.add(InterruptConfig(HOST_IRQ, Group.GROUP1, False, 0x80, Trigger.EDGE))

    def _setup_gpts(self):
        mem = self.platform.memory
        root = [(0, self.config.firmware_granules)]
        if self.config.mode is Mode.DMI:
            root.append((self.config.gic_base, self.config.gic_granules))
        for start, count in root:
            mem.gptc.set_range(start, count, World.ROOT)
            mem.gptd.set_range(start, count, World.ROOT)

    def _route(self, irq, group):
        if group is Group.GROUP0:
            self.platform.monitor.trap(irq)
        else:
            self.platform.hypervisor.on_irq(irq, group)

    def run(self):
        self.trace.emit("scenario", **self.config.summary())
        self._setup_gpts()
        self.platform.hypervisor.boot()
        self.loop.run()
        return self._finish()

    # post-run analysis

    def audit(self):
        mem = self.platform.memory
        failures = []
        for name, found in (("divergence", mem.divergence_violations()),
                            ("exclusivity", mem.exclusivity_violations()),
                            ("mirror", mem.mirror_violations()),
                            ("split-view", mem.split_views())):
            if found:
                failures.append({"invariant": name, "where": [str(x) for x in found[:8]]})
        return failures

    def corruption(self):
        """Ground-truth comparison of guest state against what devices really did."""
        out = []
        records = self.trace.records
        asserts = {}
        for r in records:
            if r["kind"] == "assert":
                asserts[r["id"]] = asserts.get(r["id"], 0) + 1
        for vm, guest in sorted(self.guests.items()):
            counter_ids = {irq for vd in guest.cfg.devices for irq, k in vd.handlers.items()
                           if k == "counter"}
            authentic = sum(asserts.get(i, 0) for i in counter_ids)
            if guest.obs.counter != authentic:
                out.append({"vm": vm, "what": "counter", "observed": guest.obs.counter,
                            "authentic": authentic})
            wcnss_ids = {irq for vd in guest.cfg.devices for irq, k in vd.handlers.items()
                         if k == "wcnss"}
            if guest.obs.wcnss_ready and not any(asserts.get(i) for i in wcnss_ids):
                out.append({"vm": vm, "what": "wcnss-forged"})
            if guest.obs.spurious:
                out.append({"vm": vm, "what": "spurious", "count": guest.obs.spurious})
            if guest.obs.integrity_failures:
                out.append({"vm": vm, "what": "integrity", "count": guest.obs.integrity_failures})
            wl = self.workloads.get(vm)
            typed = asserts.get(KEYBOARD_IRQ, 0)
            deliveries = sum(1 for r in records if r["kind"] == "deliver" and r["id"] == KEYBOARD_IRQ)
            if wl is not None and deliveries > typed:
                out.append({"vm": vm, "what": "storm", "deliveries": deliveries, "typed": typed})
        return out

    def _finish(self):
        metrics = self.trace.live_metrics()
        corruption = self.corruption()
        invariants = self.audit()
        violations = metrics.violations
        if corruption:
            status = EXIT_ATTACK
        elif violations:
            status = EXIT_VIOLATIONS
        else:
            status = EXIT_CLEAN
        obs = {vm: g.obs.as_dict() for vm, g in sorted(self.guests.items())}
        return RunResult(self.config, self.trace, metrics, obs, status, violations,
                         corruption, invariants)


def run(config):
    return Simulation(config.fresh()).run()


def compare(config_a, config_b):
    """Per-metric comparison of two runs of the same workload."""
    if config_a.workload != config_b.workload:
        raise ValueError("compare needs both scenarios to use the same workload")
    a, b = run(config_a), run(config_b)
    fa, fb = a.metrics.flat(), b.metrics.flat()
    report = {}
    for key in fa:
        va, vb = fa[key], fb[key]
        report[key] = {"a": va, "b": vb, "delta": vb - va,
                       "ratio": None if va == 0 else round(vb / va, 6)}
    return {"a": a.config.summary(), "b": b.config.summary(), "metrics": report}


def replay(lines, config):
    """Re-run ``config`` and byte-compare against recorded trace ``lines``."""
    fresh = run(config).lines()
    recorded = [line.rstrip("\n") for line in lines if line.strip()]
    for i, (x, y) in enumerate(zip(recorded, fresh)):
        if x != y:
            return {"verdict": "diverged", "step": i}
    if len(recorded) != len(fresh):
        return {"verdict": "diverged", "step": min(len(recorded), len(fresh))}
    return {"verdict": "identical", "steps": len(fresh)}


def metrics_consistent(result):
    return metrics_from_trace(result.trace.records, result.config.costs) == result.metrics


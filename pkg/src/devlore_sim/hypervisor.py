"""Untrusted normal-world VM manager.

All strategies share the benign code path; an adversarial strategy applies
its single deviation once (PrematureLevelAck deviates on every opportunity)
and is benign afterwards, so any difference in guest-visible outcome is
attributable to that one action.
"""

from dataclasses import dataclass, field

from .gic import SGI_NOTIFY, Field, Trigger, Vgic, VgicError, config_space_access
from .mem_isolation import AccessKind, AccessRequest, GranuleProtectionFault, ModelError, World
from .platform import Mode
from .rmm import Verdict, benign_batch, order_key

# name -> (default parameter, one-line description)
STRATEGIES = {
    "Benign": (None, "follows the protocol"),
    "InjectFake": (60, "injects an interrupt no device raised"),
    "ReorderBeyondWindow": (None, "injects the lowest-priority pending interrupts first"),
    "DropAndMiscount": (None, "skips the most urgent pending interrupt"),
    "ReplayConsumed": (None, "re-injects an interrupt the guest already received"),
    "PrematureLevelAck": (None, "acknowledges level interrupts before the guest is done"),
    "GicTamper": (60, "disables a protected interrupt in the GIC"),
    "StallScheduling": (5, "delays a VM entry and submits a stale request"),
    "WrongPaMapping": (None, "maps a device GPA to the wrong physical granule"),
}


@dataclass
class Strategy:
    name: str = "Benign"
    param: object = None
    stale: bool = True          # StallScheduling only

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; choose from {', '.join(STRATEGIES)}")
        if self.param is None:
            self.param = STRATEGIES[self.name][0]

    @classmethod
    def parse(cls, text):
        """``NAME`` or ``NAME:PARAM``; StallScheduling accepts ``DELAY`` or ``DELAY,fresh``."""
        name, _, raw = text.partition(":")
        if not raw:
            return cls(name)
        if name == "StallScheduling":
            delay, _, flavor = raw.partition(",")
            if flavor not in ("", "stale", "fresh"):
                raise ValueError(f"StallScheduling flavor must be stale or fresh, got {flavor!r}")
            return cls(name, int(delay), stale=flavor != "fresh")
        if STRATEGIES.get(name, (None,))[0] is None:
            raise ValueError(f"strategy {name} takes no parameter")
        return cls(name, int(raw))

    def __str__(self):
        if self.name == "StallScheduling":
            return f"{self.name}:{self.param}" + ("" if self.stale else ",fresh")
        return self.name if STRATEGIES[self.name][0] is None else f"{self.name}:{self.param}"


@dataclass(frozen=True)
class HostRecord:
    """Hypervisor-side record of a passthrough interrupt (baseline modes)."""
    seq: int
    id: int
    priority: int


@dataclass
class VmContext:
    cfg: object
    guest: object = None
    pending: list = field(default_factory=list)
    history: list = field(default_factory=list)
    disabled_level: set = field(default_factory=set)
    entry_scheduled: bool = False
    entries: int = 0
    ram: dict = field(default_factory=dict)         # gpa granule -> pa granule
    shared: dict = field(default_factory=dict)

    @property
    def vm(self):
        return self.cfg.id


class Hypervisor:
    def __init__(self, platform, strategy=None, pool_start=256):
        self.p = platform
        self.strategy = strategy or Strategy()
        self.spent = False
        self.vms = {}
        self._next_granule = pool_start
        self._host_seq = 0

    @property
    def mode(self):
        return self.p.mode

    @property
    def gic(self):
        return self.p.gic

    @property
    def rmm(self):
        return self.p.rmm

    def _is(self, name):
        return self.strategy.name == name

    def _armed(self, name):
        return self._is(name) and not self.spent

    def _deviate(self, what, **payload):
        self.spent = True
        self.p.emit("deviation", strategy=self.strategy.name, what=what, **payload)

    def alloc_granule(self):
        g = self._next_granule
        if g >= self.p.memory.num_granules:
            raise ModelError("host RAM pool exhausted")
        self._next_granule += 1
        return g

    # boot

    def add_vm(self, cfg, guest):
        ctx = VmContext(cfg, guest)
        self.vms[cfg.id] = ctx
        return ctx

    def boot(self):
        # host-owned interrupt setup goes through the normal config path
        self.gic_write(30, Field.ENABLE, 1)
        for vm in sorted(self.vms):
            ctx = self.vms[vm]
            if self.mode.realm:
                self._create_realm(ctx)
            else:
                self._create_normal_vm(ctx)
            ctx.guest.start()
            self.schedule_entry(ctx, 0)

    def _create_realm(self, ctx):
        cfg = ctx.cfg
        self.rmm.rmi_realm_create(cfg.id)
        for i in range(cfg.ram_granules):
            pa = self.alloc_granule()
            self.rmm.rmi_granule_delegate(pa)
            self.rmm.rmi_data_create(cfg.id, cfg.ram_gpa + i, pa)
            ctx.ram[cfg.ram_gpa + i] = pa
        if self.mode is Mode.BR:
            for i in range(cfg.shared_granules):
                pa = self.alloc_granule()
                self.rmm.rmi_map_unprotected(cfg.id, cfg.shared_gpa + i, pa, "shared")
                ctx.shared[cfg.shared_gpa + i] = pa
            for vd in cfg.devices:
                self._passthrough(ctx, vd)

    def _create_normal_vm(self, ctx):
        cfg = ctx.cfg
        table = self.p.memory.vm_table(cfg.id)
        self.p.vgics[cfg.id] = Vgic(cfg.id, self.p.n, self.p.trace)
        for i in range(cfg.ram_granules):
            pa = self.alloc_granule()
            table.map(cfg.ram_gpa + i, pa)
            ctx.ram[cfg.ram_gpa + i] = pa
        for vd in cfg.devices:
            self._passthrough(ctx, vd)

    def _passthrough(self, ctx, vd):
        """Unprotected assignment: MMIO mapped by the host, stream programmed by the host."""
        desc = self.p.tree[vd.device]
        for gpa, pa in zip(vd.gpa_granules(desc), desc.mmio_granules):
            if self.mode is Mode.BR:
                self.rmm.rmi_map_unprotected(ctx.vm, gpa, pa, "device")
            else:
                self.p.memory.vm_table(ctx.vm).map(gpa, pa, kind="device")
        if desc.dma_capable and vd.dma:
            stream = self.p.memory.create_stream(vd.device, ctx.vm, mirrored=False)
            for gpa, pa in sorted((ctx.shared or ctx.ram).items()):
                stream.map(gpa, pa)
            self.p.emit("smmu", op="host-map", stream=vd.device, entries=len(stream))

    # GIC access (trap-and-emulate when the config space is root-owned)

    def gic_write(self, irq, field, value):
        address = self.gic.reg_address(irq, field)
        req = AccessRequest.core(World.NORMAL, address, AccessKind.WRITE)
        try:
            config_space_access(self.gic, req, self.p.memory.gptc, value)
            return True
        except GranuleProtectionFault as fault:
            return self.gpf_handler(fault, "write", value)

    def gpf_handler(self, fault, op, value=None):
        self.p.emit("gpf", address=fault.address, source=fault.source, gpt=fault.gpt)
        if self.mode is not Mode.DMI:
            raise fault
        ok, _ = self.p.monitor.smc_gic_config(op, fault.address, value)
        if not ok:
            self.p.emit("hyp_denied", address=fault.address, op=op)
        return ok

    def ack(self, irq):
        if self.mode is Mode.DMI:
            return self.p.monitor.smc_ack_phys(irq, caller="hyp")
        return self.gic.acknowledge(irq)

    # interrupt handling

    def _owner_of_irq(self, irq):
        for vm in sorted(self.vms):
            ctx = self.vms[vm]
            for vd in ctx.cfg.devices:
                if irq in vd.priorities:
                    return ctx, vd
        return None, None

    def on_irq(self, irq, group=None):
        if irq == SGI_NOTIFY:
            return self.on_sgi7()
        ctx, vd = self._owner_of_irq(irq)
        if ctx is None:
            self.ack(irq)
            self.p.emit("host_irq", id=irq)
            return
        if self.gic.config(irq).trigger is Trigger.LEVEL:
            if self._is("PrematureLevelAck"):
                self._deviate("greedy-level-ack", id=irq)
            else:
                self.gic_write(irq, Field.ENABLE, 0)
                ctx.disabled_level.add(irq)
        self.ack(irq)
        ctx.pending.append(HostRecord(self._host_seq, irq, vd.priorities[irq]))
        self._host_seq += 1
        self.schedule_entry(ctx)

    def on_sgi7(self):
        self.ack(SGI_NOTIFY)
        for vm in sorted(self.vms):
            ctx = self.vms[vm]
            new = self.p.monitor.log(vm).drain_notify()
            for rec in new:
                ctx.pending.append(rec)
                if self._is("PrematureLevelAck") and \
                        self.gic.config(rec.id).trigger is Trigger.LEVEL:
                    self._deviate("early-phys-ack", id=rec.id)
                    self.ack(rec.id)
            if new:
                self.schedule_entry(ctx)

    # scheduling

    def schedule_entry(self, ctx, delay=None):
        if ctx.entry_scheduled:
            return
        ctx.entry_scheduled = True
        self.p.loop.schedule(self.p.entry_latency if delay is None else delay, self._enter, ctx)

    def benign_request(self, ctx, k=None):
        return [r.id for r in benign_batch(ctx.pending, self.p.n, k)]

    def _enter(self, ctx):
        if not ctx.pending and not ctx.guest.wants_cpu:
            ctx.entry_scheduled = False
            return
        ids = self._plan(ctx)
        if ids is None:
            return      # stalled; entry_scheduled stays set
        ctx.entry_scheduled = False
        self._submit(ctx, ids)

    def _plan(self, ctx):
        n = self.p.n
        benign = self.benign_request(ctx)
        ready = ctx.guest.ready
        if self._armed("InjectFake") and ready:
            self._deviate("inject", ids=[self.strategy.param])
            return [self.strategy.param]
        if self._armed("GicTamper") and ready:
            self._deviate("gic-write", id=self.strategy.param)
            self.gic_write(self.strategy.param, Field.ENABLE, 0)
            return benign
        if self._armed("ReorderBeyondWindow") and len({r.id for r in ctx.pending}) > n:
            tail = []
            for rec in sorted(ctx.pending, key=order_key, reverse=True):
                if rec.id not in tail:
                    tail.append(rec.id)
                if len(tail) == n:
                    break
            self._deviate("reorder", ids=tail)
            return tail
        if self._armed("DropAndMiscount"):
            wide = [r.id for r in benign_batch(ctx.pending, n + 1)]
            if len(wide) >= 2:
                self._deviate("drop", dropped=wide[0], ids=wide[1:])
                return wide[1:]
        if self._armed("ReplayConsumed"):
            live = {r.id for r in ctx.pending}
            stale = [i for i in reversed(ctx.history) if i not in live]
            if stale:
                self._deviate("replay", ids=[stale[0]])
                return [stale[0]]
        if self._armed("StallScheduling") and ctx.pending:
            frozen = benign if self.strategy.stale else None
            self._deviate("stall", delay=self.strategy.param, ids=frozen)
            self.p.loop.schedule(self.strategy.param, self._resume, ctx, frozen)
            return None
        return benign

    def _resume(self, ctx, ids):
        ctx.entry_scheduled = False
        self._submit(ctx, self.benign_request(ctx) if ids is None else ids)

    def _submit(self, ctx, ids):
        ctx.entries += 1
        run = lambda fired: ctx.guest.run(fired)   # noqa: E731
        if self.mode.realm:
            verdict = self.rmm.rmi_rec_enter(ctx.vm, ids, run)
        else:
            vgic = self.p.vgics[ctx.vm]
            try:
                vgic.program(ids)
            except VgicError:
                verdict = Verdict(False, "malformed")
            else:
                self.p.emit("vm_enter", vm=ctx.vm, ids=list(ids))
                run(vgic.fire())
                verdict = Verdict(True)
        if verdict:
            for irq in ids:
                self._consume(ctx, irq)
            ctx.history.extend(ids)
        self._after_exit(ctx)

    def _consume(self, ctx, irq):
        for rec in sorted(ctx.pending, key=lambda r: r.seq):
            if rec.id == irq:
                ctx.pending.remove(rec)
                return

    def _after_exit(self, ctx):
        vgic = self.p.vgics[ctx.vm]
        for irq in vgic.take_completed():
            if irq in ctx.disabled_level:
                ctx.disabled_level.discard(irq)
                self.gic_write(irq, Field.ENABLE, 1)
        if ctx.pending or ctx.guest.wants_cpu:
            self.schedule_entry(ctx)

    # device delegation (called back from the RMM during an attach)

    def delegate_device_memory(self, vm, device):
        ctx = self.vms[vm]
        desc = self.p.tree[device]
        vd = ctx.cfg.device(device)
        done = []
        for gpa, pa in zip(vd.gpa_granules(desc), desc.mmio_granules):
            if self._armed("WrongPaMapping"):
                wrong = self._wrong_granule(desc)
                self._deviate("wrong-pa", device=device, gpa=gpa, pa=wrong)
                pa = wrong
            self.rmm.rmi_granule_delegate(pa)
            self.rmm.rmi_data_create(vm, gpa, pa, kind="device")
            done.append((gpa, pa))
        ok = self.rmm.rmi_dev_finalize(vm, device)
        if not ok:
            self._reclaim(vm, done)
        return ok

    def _wrong_granule(self, desc):
        for other in sorted(self.p.tree.devices):
            if other == desc.id:
                continue
            for g in self.p.tree[other].mmio_granules:
                if g not in self.rmm.delegated:
                    return g
        return self.alloc_granule()

    def _reclaim(self, vm, pairs):
        for gpa, pa in pairs:
            self.rmm.rmi_data_destroy(vm, gpa)
            self.rmm.rmi_granule_undelegate(pa)

    def on_device_released(self, vm, device):
        desc = self.p.tree[device]
        vd = self.vms[vm].cfg.device(device)
        self._reclaim(vm, list(zip(vd.gpa_granules(desc), desc.mmio_granules)))

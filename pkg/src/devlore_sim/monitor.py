"""Root-world firmware: GPT ownership, protected interrupts, the
authenticated interrupt log, checked GIC configuration and physical
acknowledgment."""

from collections import deque
from dataclasses import dataclass

from .gic import SGI_NOTIFY, Group, Trigger
from .mem_isolation import ModelError, World

DEFAULT_LOG_CAPACITY = 1024


@dataclass(frozen=True)
class LogRecord:
    seq: int
    id: int
    priority: int
    arrival: int
    vm: str


@dataclass(frozen=True)
class ProtectedInterrupt:
    id: int
    vm: str
    priority: int
    trigger: Trigger


class MonitorInterruptLog:
    """Per-VM log with a realm-shared view and a hypervisor-visible queue.

    ``records`` holds entries not yet consumed by the RMM; capacity bounds it.
    """

    def __init__(self, vm, capacity=DEFAULT_LOG_CAPACITY, trace=None):
        self.vm = vm
        self.capacity = capacity
        self.trace = trace
        self.records = []
        self.notify = deque()
        self.appended = 0
        self.dropped = 0
        self._seq = 0

    def append(self, irq, priority, arrival):
        if len(self.records) >= self.capacity:
            self.dropped += 1
            if self.trace is not None:
                self.trace.emit("log_overflow", vm=self.vm, id=irq)
            return None
        rec = LogRecord(self._seq, irq, priority, arrival, self.vm)
        self._seq += 1
        self.appended += 1
        self.records.append(rec)
        self.notify.append(rec)
        if self.trace is not None:
            self.trace.emit("log_write", vm=self.vm, view="realm", seq=rec.seq, id=irq)
            self.trace.emit("log_write", vm=self.vm, view="notify", seq=rec.seq, id=irq)
        return rec

    def drain_notify(self):
        out = list(self.notify)
        self.notify.clear()
        return out

    def consume(self, records):
        gone = {r.seq for r in records}
        self.records = [r for r in self.records if r.seq not in gone]


class Monitor:
    def __init__(self, platform, log_capacity=DEFAULT_LOG_CAPACITY, level_ack="deferred"):
        if level_ack not in ("deferred", "greedy"):
            raise ModelError(f"unknown level_ack policy {level_ack!r}")
        self.p = platform
        self.log_capacity = log_capacity
        self.level_ack = level_ack
        self.protected = {}
        self.logs = {}

    @property
    def gic(self):
        return self.p.gic

    @property
    def memory(self):
        return self.p.memory

    def _violation(self, check, **payload):
        self.p.emit("violation", by="monitor", check=check, **payload)

    def log(self, vm):
        if vm not in self.logs:
            self.logs[vm] = MonitorInterruptLog(vm, self.log_capacity, self.p.trace)
        return self.logs[vm]

    # GPT ownership

    def gpt_set(self, granules, world, which=("GPTc", "GPTd")):
        """Set ``granules`` to ``world``; one table update per contiguous run."""
        tables = [t for t in (self.memory.gptc, self.memory.gptd) if t.identity in which]
        for start, count in _runs(sorted(granules)):
            for t in tables:
                t.set_range(start, count, world)

    # protected interrupts

    def smc_prot_int(self, vm, entries):
        """Register ``entries`` of (id, priority, trigger) for ``vm``; all or nothing."""
        self.p.emit("smc", fn="smc_prot_int", vm=vm, ids=[e[0] for e in entries])
        with self.p.cpu.visit(World.ROOT):
            for irq, _, _ in entries:
                owner = self.protected.get(irq)
                if owner is not None and owner.vm != vm:
                    self.p.emit("smc_error", fn="smc_prot_int", id=irq, owner=owner.vm)
                    return False
                self.gic.config(irq)
            for irq, priority, trigger in entries:
                self.protected[irq] = ProtectedInterrupt(irq, vm, priority, Trigger(trigger))
                self.gic.set_group(irq, Group.GROUP0)
        return True

    def release_interrupts(self, vm, ids):
        with self.p.cpu.visit(World.ROOT):
            for irq in ids:
                owner = self.protected.get(irq)
                if owner is None or owner.vm != vm:
                    continue
                del self.protected[irq]
                self.gic.set_group(irq, Group.GROUP1)

    def is_protected(self, irq):
        return irq in self.protected

    # delivery path

    def trap(self, irq):
        prot = self.protected.get(irq)
        if prot is None:
            raise ModelError(f"Group0 interrupt {irq} is not registered as protected")
        with self.p.cpu.visit(World.ROOT):
            self.p.emit("trap", id=irq, vm=prot.vm)
            rec = self.log(prot.vm).append(irq, prot.priority, self.p.loop.now)
            if prot.trigger is Trigger.EDGE or self.level_ack == "greedy":
                self.gic.acknowledge(irq)
            if rec is not None:
                self.gic.assert_line(SGI_NOTIFY)

    # services for the hypervisor and the RMM

    def smc_gic_config(self, op, address, value=None):
        """Checked GIC configuration access on the hypervisor's behalf.

        Returns (ok, value).
        """
        self.p.emit("smc", fn="smc_gic_config", op=op, address=address)
        with self.p.cpu.visit(World.ROOT):
            if not self.gic.in_config_space(address):
                self._violation("gic-config-range", address=address)
                return False, None
            try:
                irq, field = self.gic.decode(address)
                self.gic.config(irq)
            except ModelError:
                self._violation("gic-config-range", address=address)
                return False, None
            if op == "write" and irq in self.protected:
                self._violation("gic-config-protected", id=irq, field=field.name.lower())
                return False, None
            if op == "write":
                self.gic.reg_write(address, value)
                return True, None
            return True, self.gic.reg_read(address)

    def smc_ack_phys(self, irq, caller="hyp", vm=None):
        """Physical acknowledgment.  ``caller`` is ``hyp`` or ``rmm``."""
        self.p.emit("smc", fn="smc_ack_phys", id=irq, caller=caller)
        with self.p.cpu.visit(World.ROOT):
            prot = self.protected.get(irq)
            if prot is None:
                return self.gic.acknowledge(irq)
            if caller != "rmm" or prot.vm != vm or prot.trigger is not Trigger.LEVEL:
                self._violation("premature-ack", id=irq, caller=caller)
                return False
            return self.gic.acknowledge(irq)


def _runs(sorted_granules):
    runs = []
    for g in sorted_granules:
        if runs and runs[-1][0] + runs[-1][1] == g:
            runs[-1][1] += 1
        else:
            runs.append([g, 1])
    return [tuple(r) for r in runs]

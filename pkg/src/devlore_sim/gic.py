"""Physical interrupt controller and per-VM virtual interface.

Pending state for a level interrupt tracks its line: it re-enters pending
after acknowledgment while the line stays high, which is what produces an
interrupt storm when the acknowledgment comes before the device is serviced.
"""

import enum
from dataclasses import dataclass

from .mem_isolation import GRANULE_SHIFT, AccessKind, ModelError, gpc_check, granule_of

SGI_NOTIFY = 7
REG_STRIDE = 16


class Trigger(enum.Enum):
    LEVEL = "level"
    EDGE = "edge"


class Group(enum.IntEnum):
    GROUP0 = 0
    GROUP1 = 1


class Field(enum.IntEnum):
    ENABLE = 0
    PRIORITY = 1
    GROUP = 2
    ROUTE = 3


@dataclass
class InterruptConfig:
    id: int
    group: Group = Group.GROUP1
    enabled: bool = True
    priority: int = 0x80
    trigger: Trigger = Trigger.EDGE
    routing: int = 0


class Gic:
    def __init__(self, loop, config_base=16, config_granules=2, trace=None,
                 delivery_delay=1):
        self.loop = loop
        self.trace = trace
        self.config_base = config_base
        self.config_granules = config_granules
        self.delivery_delay = delivery_delay
        self.configs = {}
        self.pending = {}           # ordered set
        self.active = set()
        self.line_asserted = {}
        self._latched = set()       # edges seen while disabled
        self.sink = None            # callable(id, group), wired by the platform

    def _emit(self, kind, **payload):
        if self.trace is not None:
            self.trace.emit(kind, **payload)

    def add(self, cfg):
        if cfg.id in self.configs:
            raise ModelError(f"interrupt {cfg.id} already defined")
        self.configs[cfg.id] = cfg
        self.line_asserted[cfg.id] = False
        return cfg

    def config(self, irq):
        try:
            return self.configs[irq]
        except KeyError:
            raise ModelError(f"unknown interrupt {irq}") from None

    # line interface (devices, monitor SGIs)

    def assert_line(self, irq):
        cfg = self.config(irq)
        self.line_asserted[irq] = True
        coalesced = irq in self.pending
        self._emit("assert", id=irq, coalesced=coalesced)
        if not cfg.enabled:
            if cfg.trigger is Trigger.EDGE:
                self._latched.add(irq)
            return
        if coalesced:
            return
        if cfg.trigger is Trigger.LEVEL and irq in self.active:
            return
        self._pend(irq)

    def deassert_line(self, irq):
        cfg = self.config(irq)
        self.line_asserted[irq] = False
        if cfg.trigger is Trigger.LEVEL:
            self.pending.pop(irq, None)

    def _pend(self, irq):
        self.pending[irq] = None
        if irq not in self.active:
            self.loop.schedule(self.delivery_delay, self._deliver, irq)

    def _deliver(self, irq):
        cfg = self.configs[irq]
        if irq not in self.pending or irq in self.active or not cfg.enabled:
            return
        del self.pending[irq]
        self.active.add(irq)
        self._emit("deliver", id=irq, group=int(cfg.group))
        if self.sink is None:
            raise ModelError("GIC has no delivery sink")
        self.sink(irq, cfg.group)

    def acknowledge(self, irq):
        cfg = self.config(irq)
        if irq not in self.active and irq not in self.pending:
            self._emit("warning", what="ack-not-pending", id=irq)
            return False
        self._emit("gic", op="ack", id=irq)
        if irq in self.active:
            self.active.discard(irq)
        else:
            self.pending.pop(irq, None)
        if cfg.trigger is Trigger.LEVEL:
            if self.line_asserted[irq] and cfg.enabled:
                self._pend(irq)
        elif irq in self.pending:
            self.loop.schedule(self.delivery_delay, self._deliver, irq)
        return True

    # configuration

    def set_enabled(self, irq, enabled):
        cfg = self.config(irq)
        cfg.enabled = bool(enabled)
        self._emit("gic", op="enable" if enabled else "disable", id=irq)
        if not cfg.enabled:
            return
        if cfg.trigger is Trigger.LEVEL and self.line_asserted[irq] \
                and irq not in self.active and irq not in self.pending:
            self._pend(irq)
        elif irq in self._latched:
            self._latched.discard(irq)
            if irq not in self.pending:
                self._pend(irq)
        elif irq in self.pending and irq not in self.active:
            self.loop.schedule(self.delivery_delay, self._deliver, irq)

    def set_group(self, irq, group):
        self.config(irq).group = Group(group)
        self._emit("gic", op="group", id=irq, value=int(group))

    def set_priority(self, irq, priority):
        self.config(irq).priority = priority
        self._emit("gic", op="priority", id=irq, value=priority)

    def set_route(self, irq, core):
        self.config(irq).routing = core
        self._emit("gic", op="route", id=irq, value=core)

    # memory-mapped configuration space

    @property
    def config_range(self):
        return self.config_base, self.config_granules

    def in_config_space(self, address):
        g = granule_of(address)
        return self.config_base <= g < self.config_base + self.config_granules

    def reg_address(self, irq, field):
        return (self.config_base << GRANULE_SHIFT) + irq * REG_STRIDE + int(field) * 4

    def decode(self, address):
        if not self.in_config_space(address):
            raise ModelError(f"{address:#x} is not GIC configuration space")
        off = address - (self.config_base << GRANULE_SHIFT)
        irq, rem = divmod(off, REG_STRIDE)
        if rem % 4 or rem // 4 > max(Field):
            raise ModelError(f"unaligned GIC register access at {address:#x}")
        return irq, Field(rem // 4)

    def reg_read(self, address):
        irq, field = self.decode(address)
        cfg = self.config(irq)
        return {
            Field.ENABLE: int(cfg.enabled),
            Field.PRIORITY: cfg.priority,
            Field.GROUP: int(cfg.group),
            Field.ROUTE: cfg.routing,
        }[field]

    def reg_write(self, address, value):
        irq, field = self.decode(address)
        if field is Field.ENABLE:
            self.set_enabled(irq, value)
        elif field is Field.PRIORITY:
            self.set_priority(irq, value)
        elif field is Field.GROUP:
            self.set_group(irq, value)
        else:
            self.set_route(irq, value)


def config_space_access(gic, req, gpt, value=None):
    """GPC-checked access to GIC configuration, as a core would perform it."""
    gpc_check(req, gpt)
    if req.kind is AccessKind.WRITE:
        gic.reg_write(req.address, value)
        return None
    return gic.reg_read(req.address)


class VgicError(Exception):
    pass


class Vgic:
    def __init__(self, vm, n=4, trace=None):
        if n < 1:
            raise ValueError("a vGIC needs at least one list register")
        self.vm = vm
        self.n = n
        self.trace = trace
        self.list_registers = [None] * n
        self.in_service = set()     # fired, not yet EOI'd
        self.completed = []         # EOI'd since the hypervisor last looked

    def program(self, ids):
        ids = list(ids)
        if len(ids) > self.n or len(set(ids)) != len(ids):
            if self.trace is not None:
                self.trace.emit("vgic_reject", vm=self.vm, ids=ids)
            raise VgicError(f"cannot load {ids} into {self.n} list registers")
        self.list_registers = ids + [None] * (self.n - len(ids))

    @property
    def occupied(self):
        return [i for i in self.list_registers if i is not None]

    def fire(self):
        ids = self.occupied
        self.list_registers = [None] * self.n
        self.in_service.update(ids)
        if ids and self.trace is not None:
            self.trace.emit("vgic_fire", vm=self.vm, ids=ids)
        return ids

    def eoi(self, irq):
        if irq not in self.in_service:
            raise VgicError(f"EOI for {irq}, which is not in service")
        self.in_service.discard(irq)
        self.completed.append(irq)
        if self.trace is not None:
            self.trace.emit("eoi", vm=self.vm, id=irq)

    def take_completed(self):
        done, self.completed = self.completed, []
        return done

"""Shared execution context: operating mode, the core's current world, and
the component registry every model reaches its peers through."""

import enum
from contextlib import contextmanager

from .mem_isolation import World


class Mode(enum.Enum):
    BN = "bn"       # normal VM, plain passthrough
    BR = "br"       # realm VM, unprotected passthrough, stock RMM and monitor
    DMI = "dmi"     # realm VM with memory and interrupt isolation

    @property
    def realm(self):
        return self is not Mode.BN

    @property
    def guest_world(self):
        return World.REALM if self.realm else World.NORMAL


class Cpu:
    """Tracks which world the (single) core executes in.

    A ``world_switch`` record is emitted only on an actual change; transfers
    between realm and normal always pass through root.
    """

    def __init__(self, trace, world=World.NORMAL):
        self.trace = trace
        self.world = world

    def switch(self, to):
        if to is self.world:
            return
        if World.ROOT not in (self.world, to):
            self._step(World.ROOT)
        self._step(to)

    def _step(self, to):
        self.trace.emit("world_switch", **{"from": self.world.value, "to": to.value})
        self.world = to

    @contextmanager
    def visit(self, world):
        prev = self.world
        self.switch(world)
        try:
            yield
        finally:
            self.switch(prev)


class Platform:
    """Registry of the simulated components; populated by the harness."""

    def __init__(self, mode, loop, trace, n=4, entry_latency=2):
        self.mode = mode
        self.loop = loop
        self.trace = trace
        self.cpu = Cpu(trace)
        self.n = n
        self.entry_latency = entry_latency
        self.memory = None
        self.gic = None
        self.tree = None
        self.models = {}
        self.monitor = None
        self.rmm = None
        self.hypervisor = None
        self.guests = {}
        self.vgics = {}
        self.eoi_hooks = []
        self.ready_hooks = []

    def emit(self, kind, **payload):
        return self.trace.emit(kind, **payload)

    def notify_eoi(self, vm, irq):
        for hook in list(self.eoi_hooks):
            hook(vm, irq)

    def notify_ready(self, vm):
        for hook in list(self.ready_hooks):
            hook(vm)

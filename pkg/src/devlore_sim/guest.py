"""Realm VM model: driver handlers mirroring typical Linux drivers, MMIO and
DMA helpers, and the observable state compared across runs."""

import enum
from dataclasses import asdict, dataclass, field

from .devices import DeviceClass, Keyboard, Mali, SmmuTestEngine, dma_pattern, fnv1a64
from .gic import Trigger
from .mem_isolation import (GRANULE_SHIFT, AccessKind, AccessRequest, GranuleProtectionFault,
                            ModelError, TranslationFault, gpc_check)
from .platform import Mode
from .rmm import AttachRequest

HANDLER_KINDS = ("counter", "wcnss", "mali", "keyboard", "mouse", "dma")


class Wait(enum.Enum):
    CPU = "cpu"     # wants another VM entry soon
    IRQ = "irq"     # idle until an interrupt is injected


@dataclass
class VmDevice:
    device: str
    gpa: int                                        # first GPA granule of the MMIO window
    priorities: dict = field(default_factory=dict)  # irq -> VM-assigned priority
    handlers: dict = field(default_factory=dict)    # irq -> handler kind
    dma: bool = False
    isolation: bool = True

    def gpa_granules(self, desc):
        return [self.gpa + i for i in range(len(desc.mmio_granules))]

    @classmethod
    def from_dict(cls, d):
        handlers = {int(k): v for k, v in d.get("handlers", {}).items()}
        for kind in handlers.values():
            if kind not in HANDLER_KINDS:
                raise ValueError(f"unknown handler kind {kind!r}")
        return cls(
            device=d["device"],
            gpa=int(d["gpa"]),
            priorities={int(k): int(v) for k, v in d.get("priorities", {}).items()},
            handlers=handlers,
            dma=bool(d.get("dma", False)),
            isolation=bool(d.get("isolation", True)),
        )


@dataclass
class VmConfig:
    id: str = "vm1"
    ram_granules: int = 64
    ram_gpa: int = 0x100
    shared_gpa: int = 0x300
    shared_granules: int = 0
    devices: list = field(default_factory=list)
    workload: dict = None       # overrides the scenario workload for this VM

    def device(self, dev_id):
        for vd in self.devices:
            if vd.device == dev_id:
                return vd
        raise ModelError(f"{self.id} has no device {dev_id!r} in its device tree")

    def dma_region(self, mode):
        """(first GPA granule, granules) where DMA buffers live in ``mode``."""
        if mode is Mode.BR:
            return self.shared_gpa, self.shared_granules
        return self.ram_gpa + self.ram_granules - self.shared_granules, self.shared_granules


@dataclass
class GuestObservable:
    counter: int = 0
    wcnss_ready: bool = False
    mali_jobs_done: int = 0
    keys_received: list = field(default_factory=list)
    mouse_bytes: list = field(default_factory=list)
    dma_digests: list = field(default_factory=list)
    spurious: int = 0           # bound handler found no work
    unexpected: int = 0         # id with no handler bound; ignored by the guest
    integrity_failures: int = 0
    progress: int = 0

    def as_dict(self):
        return asdict(self)


class Guest:
    def __init__(self, platform, cfg, program=None):
        self.p = platform
        self.cfg = cfg
        self.vm = cfg.id
        self.obs = GuestObservable()
        self.bindings = {}
        self.attached = set()
        self.ready = False
        self.done = False
        self._program = program
        self._gen = None
        self._wait = Wait.CPU
        self.dma_inflight = None

    @property
    def wants_cpu(self):
        return not self.done and self._wait is Wait.CPU

    @property
    def world(self):
        return self.p.mode.guest_world

    def start(self):
        if self._program is None:
            self.done = True
            return
        self._gen = self._program(self)

    def mark_ready(self):
        self.ready = True
        self.p.emit("guest_ready", vm=self.vm)
        self.p.notify_ready(self.vm)

    def run(self, fired):
        for irq in fired:
            self.handle_virq(irq)
        if self._gen is None or self.done:
            return
        try:
            self._wait = next(self._gen)
        except StopIteration:
            self.done = True
            self._wait = None
            self.p.emit("guest_done", vm=self.vm)

    # devices

    def attach(self, dev_id):
        vd = self.cfg.device(dev_id)
        desc = self.p.tree[dev_id]
        ok = True
        if self.p.mode is Mode.DMI:
            req = AttachRequest(
                vm=self.vm, device=dev_id,
                gpas=((vd.gpa, len(desc.mmio_granules)),),
                interrupts=tuple(sorted(vd.priorities.items())),
                dma_protection=vd.dma and desc.dma_capable,
                interrupt_isolation=vd.isolation,
            )
            ok = self.p.rmm.rsi_attach_dev(req)
        self.p.emit("guest_attach", vm=self.vm, device=dev_id, ok=ok)
        if ok:
            self.attached.add(dev_id)
            self.bindings.update(vd.handlers)
        return ok

    def detach(self, dev_id):
        vd = self.cfg.device(dev_id)
        if self.p.mode is Mode.DMI and not self.p.rmm.rsi_detach_dev(self.vm, dev_id):
            return False
        self.attached.discard(dev_id)
        for irq in vd.handlers:
            self.bindings.pop(irq, None)
        return True

    def mmio(self, dev_id, offset, kind, value=None):
        vd = self.cfg.device(dev_id)
        gpa = (vd.gpa << GRANULE_SHIFT) + offset
        pa = self.p.memory.translate_cpu(self.vm, gpa, kind)
        desc = self.p.tree.resolve(pa)
        if desc is None:
            raise ModelError(f"gpa {gpa:#x} of {self.vm} maps to no device")
        if desc.cls is not DeviceClass.PAS_FILTER:
            gpc_check(AccessRequest.core(self.world, pa, kind), self.p.memory.gptc)
        return self.p.models[desc.id].mmio_access(desc.offset_of(pa), kind, self.world, value)

    def mmio_read(self, dev_id, offset):
        return self.mmio(dev_id, offset, AccessKind.READ)

    def mmio_write(self, dev_id, offset, value):
        self.mmio(dev_id, offset, AccessKind.WRITE, value)

    def poll_device(self, dev_id, offset, expected):
        try:
            return self.mmio_read(dev_id, offset) == expected
        except (TranslationFault, GranuleProtectionFault) as exc:
            self.p.emit("fault", vm=self.vm, device=dev_id, what=type(exc).__name__)
            return False

    def mem_write(self, gpa, data):
        req = AccessRequest.core(self.world, gpa, AccessKind.WRITE, vm=self.vm)
        self.p.memory.cpu_access(req, data)

    def mem_read(self, gpa, length):
        req = AccessRequest.core(self.world, gpa, AccessKind.READ, vm=self.vm)
        return self.p.memory.cpu_access(req, length=length)

    # interrupts

    def handle_virq(self, irq):
        kind = self.bindings.get(irq)
        if kind is None:
            self.obs.unexpected += 1
            self.p.emit("unexpected_irq", vm=self.vm, id=irq)
        else:
            getattr(self, "_isr_" + kind)(irq)
        self.p.vgics[self.vm].eoi(irq)
        desc = self.p.tree.device_of_irq(irq)
        if self.p.mode is Mode.DMI and desc is not None and desc.id in self.attached \
                and self.p.monitor.is_protected(irq) and desc.trigger_of(irq) is Trigger.LEVEL:
            self.p.rmm.rsi_ack_int(self.vm, irq)
        self.p.notify_eoi(self.vm, irq)

    def _device_for(self, irq):
        return self.p.tree.device_of_irq(irq).id

    def _isr_counter(self, irq):
        # unconditional increment, as in an interrupt-driven event counter
        self.obs.counter += 1

    def _isr_wcnss(self, irq):
        self.obs.wcnss_ready = True

    def _isr_mali(self, irq):
        val = self.mmio_read(self._device_for(irq), Mali.JOB_IRQ_STATUS)
        if not val:
            self.p.emit("irq_none", vm=self.vm, id=irq)
            return
        self.obs.mali_jobs_done += 1

    def _fifo_isr(self, irq, sink):
        dev = self._device_for(irq)
        if self.mmio_read(dev, Keyboard.STATUS) & Keyboard.RX_FULL:
            sink.append(self.mmio_read(dev, Keyboard.DATA))
        else:
            self.obs.spurious += 1
            self.p.emit("spurious", vm=self.vm, id=irq)

    def _isr_keyboard(self, irq):
        self._fifo_isr(irq, self.obs.keys_received)

    def _isr_mouse(self, irq):
        self._fifo_isr(irq, self.obs.mouse_bytes)

    def _isr_dma(self, irq):
        dev = self._device_for(irq)
        job = self.dma_inflight
        if job is None:
            self.obs.spurious += 1
            self.p.emit("spurious", vm=self.vm, id=irq)
            return
        self.dma_inflight = None
        status = self.mmio_read(dev, SmmuTestEngine.STATUS)
        digest = self.mmio_read(dev, SmmuTestEngine.DIGEST)
        if job["op"] == "write":
            seen = fnv1a64(self.mem_read(job["gpa"], job["bytes"]))
        else:
            seen = job["expect"]
        ok = status == SmmuTestEngine.OK and digest == seen
        if not ok:
            self.obs.integrity_failures += 1
            self.p.emit("integrity_failure", vm=self.vm, tag=job["tag"])
        self.obs.dma_digests.append(f"{seen:016x}")

    def start_dma(self, dev_id, op, nbytes, gpa, seed, tag=""):
        """Program the test engine; ``op`` is from the device's side (write = into memory)."""
        if op not in ("read", "write"):
            raise ValueError(f"DMA op must be read or write, got {op!r}")
        job = {"op": op, "bytes": nbytes, "gpa": gpa, "tag": tag}
        if op == "read":
            data = dma_pattern(seed, nbytes)
            self.mem_write(gpa, data)
            job["expect"] = fnv1a64(data)
        self.dma_inflight = job
        e = SmmuTestEngine
        self.mmio_write(dev_id, e.ADDR, gpa)
        self.mmio_write(dev_id, e.LEN, nbytes)
        self.mmio_write(dev_id, e.DIR, e.DIR_WRITE if op == "write" else e.DIR_READ)
        self.mmio_write(dev_id, e.SEED, seed)
        self.mmio_write(dev_id, e.CMD, 1)

"""Platform device tree, measurements and behavioral device models."""

import enum
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from types import MappingProxyType

from .gic import Trigger
from .mem_isolation import GRANULE_SHIFT, GRANULE_SIZE, AccessKind, ModelError, World, granule_of

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


def fnv1a64(data, h=FNV_OFFSET):
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


class DeviceClass(enum.Enum):
    MMIO_ONLY = "MmioOnly"
    PAS_FILTER = "MmioOnlyPasFilter"
    LEGACY_DMA = "LegacyDma"


class View(enum.Enum):
    FULL = "full"
    READ_ONLY = "read-only"
    ZERO = "constant-zero"


@dataclass(frozen=True)
class PasFilterView:
    """Per-world register views; registers not listed use ``default``."""
    views: tuple = ()           # ((world, offset, View), ...)
    default: tuple = ()         # ((world, View), ...)

    def view(self, world, offset):
        if world is World.ROOT:
            return View.FULL
        for w, off, v in self.views:
            if w is world and off == offset:
                return v
        for w, v in self.default:
            if w is world:
                return v
        return View.FULL


@dataclass(frozen=True)
class DeviceDescriptor:
    id: str
    mmio_ranges: tuple                  # ((start_granule, count), ...)
    dma_capable: bool = False
    interrupts: tuple = ()              # ((irq, Trigger), ...)
    cls: DeviceClass = DeviceClass.MMIO_ONLY
    model: str = "generic"
    pas_filter: PasFilterView = None

    @property
    def irq_ids(self):
        return tuple(irq for irq, _ in self.interrupts)

    def trigger_of(self, irq):
        return dict(self.interrupts)[irq]

    @property
    def mmio_granules(self):
        return [s + i for s, c in self.mmio_ranges for i in range(c)]

    @property
    def mmio_size(self):
        return sum(c for _, c in self.mmio_ranges) * GRANULE_SIZE

    def offset_of(self, pa):
        """Offset into the device's register window, or None."""
        base = 0
        for start, count in self.mmio_ranges:
            lo = start << GRANULE_SHIFT
            if lo <= pa < lo + (count << GRANULE_SHIFT):
                return base + pa - lo
            base += count << GRANULE_SHIFT
        return None

    def to_dict(self):
        d = {
            "id": self.id,
            "class": self.cls.value,
            "model": self.model,
            "mmio": [list(r) for r in self.mmio_ranges],
            "dma": self.dma_capable,
            "interrupts": [[irq, t.value] for irq, t in self.interrupts],
        }
        if self.pas_filter is not None:
            d["pas_filter"] = {
                "default": {w.value: v.value for w, v in self.pas_filter.default},
                "registers": [[w.value, off, v.value] for w, off, v in self.pas_filter.views],
            }
        return d

    @classmethod
    def from_dict(cls, d):
        pas = None
        if "pas_filter" in d:
            pf = d["pas_filter"]
            pas = PasFilterView(
                views=tuple((World(w), int(off), View(v)) for w, off, v in pf.get("registers", ())),
                default=tuple((World(w), View(v)) for w, v in pf.get("default", {}).items()),
            )
        return cls(
            id=d["id"],
            mmio_ranges=tuple((int(s), int(c)) for s, c in d["mmio"]),
            dma_capable=bool(d.get("dma", False)),
            interrupts=tuple((int(i), Trigger(t)) for i, t in d.get("interrupts", ())),
            cls=DeviceClass(d.get("class", "MmioOnly")),
            model=d.get("model", "generic"),
            pas_filter=pas,
        )


def _canonical(dev_id, ranges, registers=(), interrupts=()):
    name = dev_id.encode()
    out = bytearray(struct.pack("<I", len(name)) + name)
    for start, count in sorted(ranges):
        out += struct.pack("<QQ", start, count)
    for irq, trig in sorted(interrupts):
        out += struct.pack("<IB", irq, 0 if trig is Trigger.LEVEL else 1)
    for off, val in sorted(registers):
        out += struct.pack("<QQ", off, val & MASK64)
    return bytes(out)


class PlatformDeviceTree:
    def __init__(self, descriptors):
        devices = {}
        owner_g, owner_irq = {}, {}
        for d in descriptors:
            if d.id in devices:
                raise ModelError(f"duplicate device id {d.id!r}")
            for g in d.mmio_granules:
                if g in owner_g:
                    raise ModelError(f"MMIO granule {g:#x} shared by {owner_g[g]} and {d.id}")
                owner_g[g] = d.id
            for irq in d.irq_ids:
                if irq in owner_irq:
                    raise ModelError(f"interrupt {irq} shared by {owner_irq[irq]} and {d.id}")
                owner_irq[irq] = d.id
            devices[d.id] = d
        self.devices = MappingProxyType(devices)
        self._by_granule = owner_g
        self._by_irq = owner_irq
        self.measurement = measure(self)

    def __getitem__(self, dev_id):
        return self.devices[dev_id]

    def __contains__(self, dev_id):
        return dev_id in self.devices

    def __iter__(self):
        return iter(self.devices.values())

    def resolve(self, pa):
        dev_id = self._by_granule.get(granule_of(pa))
        return None if dev_id is None else self.devices[dev_id]

    def device_of_irq(self, irq):
        dev_id = self._by_irq.get(irq)
        return None if dev_id is None else self.devices[dev_id]

    def to_dicts(self):
        return [d.to_dict() for d in self.devices.values()]

    @classmethod
    def from_dicts(cls, items):
        return cls([DeviceDescriptor.from_dict(d) for d in items])


def measure(obj):
    """FNV-1a-64 digest of a device tree, a device model or a descriptor."""
    if isinstance(obj, PlatformDeviceTree):
        h = FNV_OFFSET
        for dev_id in sorted(obj.devices):
            d = obj.devices[dev_id]
            h = fnv1a64(_canonical(d.id, d.mmio_ranges, interrupts=d.interrupts), h)
        return h
    if isinstance(obj, DeviceModel):
        d = obj.desc
        return fnv1a64(_canonical(d.id, d.mmio_ranges, obj.registers.items()))
    if isinstance(obj, DeviceDescriptor):
        return fnv1a64(_canonical(obj.id, obj.mmio_ranges))
    raise TypeError(f"cannot measure {type(obj).__name__}")


def extend_measurement(old, digest):
    return fnv1a64(struct.pack("<QQ", old & MASK64, digest & MASK64))


def dma_pattern(seed, length):
    return random.Random(seed).randbytes(length)


# behavioral models


class DeviceModel:
    def __init__(self, desc, gic=None, trace=None):
        self.desc = desc
        self.gic = gic
        self.trace = trace
        self.registers = {}
        self.reset_count = 0

    @property
    def id(self):
        return self.desc.id

    def _emit(self, kind, **payload):
        if self.trace is not None:
            self.trace.emit(kind, **payload)

    def raise_irq(self, irq):
        if irq not in self.desc.irq_ids:
            raise ModelError(f"{self.id} has no interrupt line {irq}")
        self.gic.assert_line(irq)

    def lower_irq(self, irq):
        if irq not in self.desc.irq_ids:
            raise ModelError(f"{self.id} has no interrupt line {irq}")
        self.gic.deassert_line(irq)

    def mmio_access(self, offset, kind, world, value=None):
        if not 0 <= offset < self.desc.mmio_size:
            raise ModelError(f"offset {offset:#x} outside {self.id} register window")
        self._emit("mmio", device=self.id, offset=offset, op=kind.value, world=world.value)
        view = View.FULL
        if self.desc.cls is DeviceClass.PAS_FILTER and self.desc.pas_filter is not None:
            view = self.desc.pas_filter.view(world, offset)
        if kind is AccessKind.WRITE:
            if view is View.FULL:
                self.write_reg(offset, value)
            return None
        if view is View.ZERO:
            return 0
        return self.read_reg(offset)

    def read_reg(self, offset):
        return self.registers.get(offset, 0)

    def write_reg(self, offset, value):
        self.registers[offset] = value & MASK64

    def soft_reset(self):
        self.registers = {}
        for irq in self.desc.irq_ids:
            if self.gic is not None and self.gic.line_asserted.get(irq):
                self.gic.deassert_line(irq)
        self.reset_count += 1
        self._emit("reset", device=self.id, count=self.reset_count)


class Keyboard(DeviceModel):
    """PL050-style byte FIFO; the level line is high while the FIFO holds data."""
    STATUS = 0x0
    DATA = 0x8
    RX_FULL = 0x1

    def __init__(self, desc, gic=None, trace=None):
        super().__init__(desc, gic, trace)
        self.fifo = deque()

    @property
    def irq(self):
        return self.desc.irq_ids[0]

    def push(self, byte):
        self.fifo.append(byte & 0xFF)
        self.raise_irq(self.irq)

    def read_reg(self, offset):
        if offset == self.STATUS:
            return self.RX_FULL if self.fifo else 0
        if offset == self.DATA:
            if not self.fifo:
                return 0
            byte = self.fifo.popleft()
            if not self.fifo:
                self.lower_irq(self.irq)
            return byte
        return super().read_reg(offset)

    def soft_reset(self):
        self.fifo.clear()
        super().soft_reset()


class Mouse(Keyboard):
    pass


class Led(DeviceModel):
    VALUE = 0x0


class Button(DeviceModel):
    STATE = 0x0

    def press(self):
        self.registers[self.STATE] = 1

    def release(self):
        self.registers[self.STATE] = 0


class Gps(DeviceModel):
    COORD = 0x0

    def fix(self, value):
        self.registers[self.COORD] = value & MASK64


class IrqSource(DeviceModel):
    """A bank of edge lines used as event sources (e.g. a proximity sensor)."""

    def fire(self, irq):
        self.raise_irq(irq)


class Wcnss(DeviceModel):
    def signal_ready(self):
        self.raise_irq(self.desc.irq_ids[0])


class Mali(DeviceModel):
    JOB_IRQ_STATUS = 0x0

    def complete_job(self, mask=1):
        self.registers[self.JOB_IRQ_STATUS] = self.registers.get(self.JOB_IRQ_STATUS, 0) | mask
        self.raise_irq(self.desc.irq_ids[0])

    def read_reg(self, offset):
        val = super().read_reg(offset)
        if offset == self.JOB_IRQ_STATUS:
            self.registers[offset] = 0      # clear-on-read
        return val


class SmmuTestEngine(DeviceModel):
    ADDR = 0x00
    LEN = 0x08
    DIR = 0x10          # 0: device reads memory, 1: device writes memory
    SEED = 0x18
    CMD = 0x20
    STATUS = 0x28       # 1 ok, 2 fault
    DIGEST = 0x30
    DIR_READ, DIR_WRITE = 0, 1
    OK, FAULT = 1, 2

    def __init__(self, desc, gic=None, trace=None, memory=None):
        super().__init__(desc, gic, trace)
        self.memory = memory

    def write_reg(self, offset, value):
        super().write_reg(offset, value)
        if offset == self.CMD and value & 1:
            self._start()

    def _start(self):
        r = self.registers
        kind = AccessKind.WRITE if r.get(self.DIR, 0) == self.DIR_WRITE else AccessKind.READ
        length = r.get(self.LEN, 0)
        data = dma_pattern(r.get(self.SEED, 0), length) if kind is AccessKind.WRITE else None
        result = dma_issue(self, r.get(self.ADDR, 0), kind, length, data)
        if result is _FAULTED:
            r[self.STATUS] = self.FAULT
        else:
            r[self.STATUS] = self.OK
            r[self.DIGEST] = fnv1a64(data if kind is AccessKind.WRITE else result)
        r[self.CMD] = 0
        self.raise_irq(self.desc.irq_ids[0])


_FAULTED = object()


def dma_issue(device, target, kind, length, data=None):
    """Run one transfer through the SMMU path; returns read bytes, None, or a fault marker."""
    from .mem_isolation import GranuleProtectionFault, TranslationFault
    if not device.desc.dma_capable:
        raise ModelError(f"{device.id} is not DMA capable")
    try:
        out = device.memory.dma(device.id, target, kind, data=data, length=length)
    except (TranslationFault, GranuleProtectionFault) as exc:
        device._emit("dma", device=device.id, op=kind.value, gpa=target, bytes=length,
                     ok=False, fault=type(exc).__name__)
        return _FAULTED
    device._emit("dma", device=device.id, op=kind.value, gpa=target, bytes=length, ok=True)
    return out


MODELS = {
    "generic": DeviceModel,
    "keyboard": Keyboard,
    "mouse": Mouse,
    "led": Led,
    "button": Button,
    "gps": Gps,
    "irqsrc": IrqSource,
    "wcnss": Wcnss,
    "mali": Mali,
    "smmute": SmmuTestEngine,
}


def build_model(desc, gic=None, trace=None, memory=None):
    cls = MODELS.get(desc.model)
    if cls is None:
        raise ModelError(f"unknown device model {desc.model!r}")
    if cls is SmmuTestEngine:
        return cls(desc, gic, trace, memory)
    return cls(desc, gic, trace)


# Default platform: an FVP-like board with the devices exercised by workloads.
DEFAULT_PLATFORM_DEVICES = [
    {"id": "kmi0", "class": "MmioOnly", "model": "keyboard", "mmio": [[32, 1]],
     "dma": False, "interrupts": [[44, "level"]]},
    {"id": "kmi1", "class": "MmioOnly", "model": "mouse", "mmio": [[33, 1]],
     "dma": False, "interrupts": [[45, "level"]]},
    {"id": "led0", "class": "MmioOnly", "model": "led", "mmio": [[34, 1]]},
    {"id": "button0", "class": "MmioOnly", "model": "button", "mmio": [[35, 1]]},
    {"id": "smmute0", "class": "LegacyDma", "model": "smmute", "mmio": [[36, 1]],
     "dma": True, "interrupts": [[50, "edge"]]},
    {"id": "irqsrc0", "class": "MmioOnly", "model": "irqsrc", "mmio": [[37, 1]],
     "interrupts": [[60 + i, "edge"] for i in range(9)]},
    {"id": "wcnss0", "class": "MmioOnly", "model": "wcnss", "mmio": [[38, 1]],
     "interrupts": [[70, "edge"]]},
    {"id": "mali0", "class": "MmioOnly", "model": "mali", "mmio": [[39, 1]],
     "interrupts": [[71, "edge"]]},
    {"id": "gps0", "class": "MmioOnlyPasFilter", "model": "gps", "mmio": [[40, 1]],
     "pas_filter": {"default": {"normal": "constant-zero", "secure": "constant-zero"}}},
    {"id": "smmute1", "class": "LegacyDma", "model": "smmute", "mmio": [[41, 1]],
     "dma": True, "interrupts": [[51, "edge"]]},
]


def default_platform_tree():
    return PlatformDeviceTree.from_dicts(DEFAULT_PLATFORM_DEVICES)

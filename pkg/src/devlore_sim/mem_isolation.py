"""Physical memory, granule protection tables and stage-2 translation.

Two tables are kept: ``gptc`` filters core (MMU path) accesses and ``gptd``
filters device (SMMU path) accesses.  Stage-2 tables translate guest-physical
granules for realm VMs and for device streams.
"""

import enum
from collections import Counter
from dataclasses import dataclass

GRANULE_SHIFT = 12
GRANULE_SIZE = 1 << GRANULE_SHIFT
DEFAULT_GRANULES = 4096


class World(enum.Enum):
    NORMAL = "normal"
    SECURE = "secure"
    REALM = "realm"
    ROOT = "root"


# source world -> physical address spaces it may touch
ACCESS_MATRIX = {
    World.ROOT: frozenset(World),
    World.REALM: frozenset({World.REALM, World.NORMAL}),
    World.SECURE: frozenset({World.SECURE, World.NORMAL}),
    World.NORMAL: frozenset({World.NORMAL}),
}


class AccessKind(enum.Enum):
    READ = "read"
    WRITE = "write"


class Path(enum.Enum):
    MMU = "mmu"
    SMMU = "smmu"


class ModelError(Exception):
    """Simulator misconfiguration; never an architectural outcome."""


class GranuleProtectionFault(Exception):
    def __init__(self, address, source, pas, gpt):
        super().__init__(f"GPF at {address:#x}: {source} -> {pas.value} ({gpt})")
        self.address = address
        self.source = source
        self.pas = pas
        self.gpt = gpt


class TranslationFault(Exception):
    def __init__(self, owner, gpa, kind):
        super().__init__(f"translation fault in {owner!r} at gpa {gpa:#x} ({kind.value})")
        self.owner = owner
        self.gpa = gpa
        self.kind = kind


def granule_of(address):
    return address >> GRANULE_SHIFT


def gpc_permits(source, pas):
    return pas in ACCESS_MATRIX[source]


@dataclass(frozen=True)
class AccessRequest:
    address: int
    kind: AccessKind = AccessKind.READ
    world: World = None
    vm: str = None
    stream: str = None

    def __post_init__(self):
        if (self.world is None) == (self.stream is None):
            raise ModelError("an access comes from exactly one of a core or a device stream")

    @classmethod
    def core(cls, world, address, kind=AccessKind.READ, vm=None):
        return cls(address=address, kind=kind, world=world, vm=vm)

    @classmethod
    def device(cls, stream, address, kind=AccessKind.READ):
        return cls(address=address, kind=kind, stream=stream)

    @property
    def path(self):
        return Path.SMMU if self.stream is not None else Path.MMU

    @property
    def source_world(self):
        # the SMMU tags all device transactions as normal world
        return World.NORMAL if self.stream is not None else self.world

    @property
    def source(self):
        if self.stream is not None:
            return f"device:{self.stream}"
        return f"core:{self.world.value}" + (f":{self.vm}" if self.vm else "")


class GranuleProtectionTable:
    def __init__(self, num_granules=DEFAULT_GRANULES, identity="GPTc",
                 default=World.NORMAL, trace=None):
        self.identity = identity
        self.entries = [default] * num_granules
        self.trace = trace

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, granule):
        if not 0 <= granule < len(self.entries):
            raise ModelError(f"granule {granule:#x} outside modeled memory")
        return self.entries[granule]

    def world_at(self, address):
        return self[granule_of(address)]

    def set_range(self, start, count, world):
        if count < 0 or start < 0 or start + count > len(self.entries):
            raise ModelError(f"range {start:#x}+{count} outside modeled memory")
        self.entries[start:start + count] = [world] * count
        if self.trace is not None:
            self.trace.emit("gpt", gpt=self.identity, start=start, count=count,
                            world=world.value)
            # GPTc entries are cached by core GPCs, GPTd entries only by the SMMU
            target = "core" if self.identity == "GPTc" else "smmu"
            self.trace.emit("flush", target=target, gpt=self.identity)

    def differs_from(self, other):
        return [g for g, (a, b) in enumerate(zip(self.entries, other.entries)) if a != b]


def gpc_check(req, gpt):
    """Return the target PAS when the access matrix allows ``req``; raise otherwise."""
    pas = gpt.world_at(req.address)
    if not gpc_permits(req.source_world, pas):
        raise GranuleProtectionFault(req.address, req.source, pas, gpt.identity)
    return pas


@dataclass(frozen=True)
class Mapping:
    pa: int                     # physical granule
    read: bool = True
    write: bool = True
    kind: str = "ram"           # ram | device | shared


class Stage2Table:
    def __init__(self, owner):
        self.owner = owner
        self.entries = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, gpa_granule):
        return gpa_granule in self.entries

    def map(self, gpa_granule, pa_granule, read=True, write=True, kind="ram"):
        self.entries[gpa_granule] = Mapping(pa_granule, read, write, kind)

    def unmap(self, gpa_granule):
        return self.entries.pop(gpa_granule, None)

    def lookup(self, gpa_granule):
        return self.entries.get(gpa_granule)

    def translate(self, gpa, kind=AccessKind.READ):
        m = self.entries.get(granule_of(gpa))
        if m is None or (kind is AccessKind.READ and not m.read) \
                or (kind is AccessKind.WRITE and not m.write):
            raise TranslationFault(self.owner, gpa, kind)
        return (m.pa << GRANULE_SHIFT) | (gpa & (GRANULE_SIZE - 1))

    def dump(self):
        return dict(sorted(self.entries.items()))


def s2_translate(table, gpa, kind=AccessKind.READ):
    return table.translate(gpa, kind)


DMA_VISIBLE_KINDS = frozenset({"ram", "shared"})


class MemorySystem:
    """Backing memory plus all protection state of the modeled platform."""

    def __init__(self, num_granules=DEFAULT_GRANULES, trace=None):
        self.num_granules = num_granules
        self.trace = trace
        self.gptc = GranuleProtectionTable(num_granules, "GPTc", trace=trace)
        self.gptd = GranuleProtectionTable(num_granules, "GPTd", trace=trace)
        self.vm_tables = {}
        self.streams = {}
        self.stream_owner = {}
        # streams whose tables the RMM keeps mirrored (vs hypervisor-programmed)
        self.mirrored = set()
        self._backing = {}

    def _emit(self, kind, **payload):
        if self.trace is not None:
            self.trace.emit(kind, **payload)

    # raw physical memory

    def _granule(self, g):
        if not 0 <= g < self.num_granules:
            raise ModelError(f"granule {g:#x} outside modeled memory")
        buf = self._backing.get(g)
        if buf is None:
            buf = self._backing[g] = bytearray(GRANULE_SIZE)
        return buf

    def raw_read(self, pa, length):
        out = bytearray()
        while length > 0:
            off = pa & (GRANULE_SIZE - 1)
            n = min(length, GRANULE_SIZE - off)
            out += self._granule(granule_of(pa))[off:off + n]
            pa += n
            length -= n
        return bytes(out)

    def raw_write(self, pa, data):
        data = memoryview(bytes(data))
        while len(data):
            off = pa & (GRANULE_SIZE - 1)
            n = min(len(data), GRANULE_SIZE - off)
            self._granule(granule_of(pa))[off:off + n] = data[:n]
            pa += n
            data = data[n:]

    def scrub(self, granule):
        self._backing.pop(granule, None)

    # stage-2 tables

    def vm_table(self, vm):
        if vm not in self.vm_tables:
            self.vm_tables[vm] = Stage2Table(vm)
        return self.vm_tables[vm]

    def drop_vm(self, vm):
        self.vm_tables.pop(vm, None)

    def create_stream(self, stream, vm, mirrored=True):
        self.streams[stream] = Stage2Table(stream)
        self.stream_owner[stream] = vm
        if mirrored:
            self.mirrored.add(stream)
        return self.streams[stream]

    def destroy_stream(self, stream):
        self.streams.pop(stream, None)
        self.stream_owner.pop(stream, None)
        self.mirrored.discard(stream)
        self._emit("smmu", op="destroy", stream=stream)

    def streams_of(self, vm):
        return sorted(s for s, owner in self.stream_owner.items() if owner == vm)

    def dma_visible(self, vm):
        table = self.vm_tables.get(vm)
        if table is None:
            return {}
        return {g: m for g, m in table.entries.items() if m.kind in DMA_VISIBLE_KINDS}

    def smmu_sync(self, vm):
        visible = self.dma_visible(vm)
        for stream in self.streams_of(vm):
            if stream in self.mirrored:
                self.streams[stream].entries = dict(visible)
        self._emit("smmu", op="sync", vm=vm, entries=len(visible))

    # access paths

    def cpu_access(self, req, data=None, length=8):
        """Core access.  ``req.vm`` set means the address is guest-physical."""
        pa = req.address
        if req.vm is not None:
            pa = self.translate_cpu(req.vm, req.address, req.kind)
        gpc_check(AccessRequest.core(req.world, pa, req.kind), self.gptc)
        if req.kind is AccessKind.WRITE:
            self.raw_write(pa, data)
            return pa
        return self.raw_read(pa, length)

    def translate_cpu(self, vm, gpa, kind):
        if vm not in self.vm_tables:
            raise TranslationFault(vm, gpa, kind)
        return self.vm_tables[vm].translate(gpa, kind)

    def dma(self, stream, gpa, kind, data=None, length=0):
        """Device access through the SMMU: stage-2 then GPC against GPTd."""
        table = self.streams.get(stream)
        if table is None:
            raise TranslationFault(stream, gpa, kind)
        total = len(data) if kind is AccessKind.WRITE else length
        # check every granule before touching memory so faults are atomic
        pieces = []
        addr, remaining = gpa, total
        while remaining > 0:
            off = addr & (GRANULE_SIZE - 1)
            n = min(remaining, GRANULE_SIZE - off)
            pa = table.translate(addr, kind)
            gpc_check(AccessRequest.device(stream, pa, kind), self.gptd)
            pieces.append((pa, n))
            addr += n
            remaining -= n
        if kind is AccessKind.WRITE:
            pos = 0
            for pa, n in pieces:
                self.raw_write(pa, data[pos:pos + n])
                pos += n
            return None
        return b"".join(self.raw_read(pa, n) for pa, n in pieces)

    # invariants

    def dma_vms(self):
        return {vm for s, vm in self.stream_owner.items() if s in self.mirrored}

    def divergence_violations(self):
        """Granules breaking the two-GPT divergence bound."""
        allowed = set()
        for vm in self.dma_vms():
            allowed |= {m.pa for m in self.vm_tables.get(vm, Stage2Table(vm)).entries.values()}
        bad = []
        for g in self.gptc.differs_from(self.gptd):
            if g not in allowed or self.gptc[g] is not World.REALM \
                    or self.gptd[g] is not World.NORMAL:
                bad.append(g)
        return bad

    def exclusivity_violations(self):
        owners = Counter()
        for table in self.vm_tables.values():
            for pa in {m.pa for m in table.entries.values()}:
                if self.gptc[pa] is World.REALM:
                    owners[pa] += 1
        return sorted(pa for pa, n in owners.items() if n > 1)

    def mirror_violations(self):
        bad = []
        for stream in sorted(self.mirrored):
            vm = self.stream_owner[stream]
            if self.streams[stream].entries != self.dma_visible(vm):
                bad.append(stream)
        return bad

    def split_views(self):
        """(stream, gpa) pairs where the VM and its device resolve differently."""
        out = []
        for stream, vm in sorted(self.stream_owner.items()):
            vm_table = self.vm_tables.get(vm)
            if vm_table is None:
                continue
            for gpa, m in self.streams[stream].entries.items():
                vm_m = vm_table.lookup(gpa)
                if vm_m is not None and vm_m.pa != m.pa:
                    out.append((stream, gpa))
        return out

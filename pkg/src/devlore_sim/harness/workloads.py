"""Guest programs plus the external stimuli (typing, bursts, DMA traces) that
drive them."""

import json
import os
import random
from importlib import resources

from ..guest import Wait
from ..mem_isolation import GRANULE_SHIFT, GRANULE_SIZE

KEYBOARD = "kmi0"
KEYBOARD_IRQ = 44
DMA_ENGINE = "smmute0"

BUILTIN_TRACES = ("bfs", "gaussian")


def attach_all(guest, devices, retries=1):
    """Attach each device, retrying a failed attach ``retries`` times."""
    ok = True
    for dev in devices:
        for _ in range(retries + 1):
            if guest.attach(dev):
                break
        else:
            ok = False
    return ok


def load_dma_trace(spec, base_dir="."):
    """Return a list of {op, bytes, buffer-tag} records."""
    if isinstance(spec, list):
        records = spec
    elif spec in BUILTIN_TRACES:
        text = resources.files("devlore_sim.data").joinpath(f"{spec}.jsonl").read_text()
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    else:
        with open(os.path.join(base_dir, spec)) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
    for i, rec in enumerate(records):
        if rec.get("op") not in ("read", "write"):
            raise ValueError(f"DMA trace record {i}: op must be read or write")
        if not isinstance(rec.get("bytes"), int) or rec["bytes"] <= 0:
            raise ValueError(f"DMA trace record {i}: bytes must be a positive integer")
        if not isinstance(rec.get("buffer-tag"), str):
            raise ValueError(f"DMA trace record {i}: buffer-tag must be a string")
    return records


def buffer_layout(records):
    """tag -> (granule offset, granules), in first-use order."""
    sizes = {}
    for rec in records:
        tag = rec["buffer-tag"]
        sizes[tag] = max(sizes.get(tag, 0), rec["bytes"])
    layout, cursor = {}, 0
    for tag, size in sizes.items():
        count = -(-size // GRANULE_SIZE)
        layout[tag] = (cursor, count)
        cursor += count
    return layout, cursor


class Workload:
    kind = None

    def __init__(self, spec, seed):
        self.spec = spec
        self.seed = seed
        self.rng = random.Random(seed)

    def prepare(self, vm_cfg, mode):
        """Adjust the VM layout before boot."""

    def program(self, guest):
        raise NotImplementedError

    def install(self, sim, vm):
        """Register stimuli; ``vm`` is the VM this workload drives."""

    def expected_bytes(self):
        return 0


class Ticker(Workload):
    kind = "ticker"

    def program(self, guest):
        guest.mark_ready()
        for _ in range(self.spec.get("steps", 3)):
            guest.obs.progress += 1
            yield Wait.CPU


class Typing(Workload):
    """Keys are typed one at a time, each after the guest EOIs the previous one."""
    kind = "keyboard"

    def __init__(self, spec, seed):
        super().__init__(spec, seed)
        self.total = spec.get("keys", 10)
        self.typed = 0

    def expected_bytes(self):
        return self.total

    def program(self, guest):
        attach_all(guest, [KEYBOARD])
        guest.mark_ready()
        while len(guest.obs.keys_received) < self.total:
            yield Wait.IRQ

    def install(self, sim, vm):
        loop = sim.platform.loop
        kbd = sim.platform.models[KEYBOARD]

        def type_key():
            self.typed += 1
            kbd.push(self.rng.randrange(0x20, 0x7F))

        def on_ready(ready_vm):
            if ready_vm == vm and self.total:
                loop.schedule(1, type_key)

        def on_eoi(eoi_vm, irq):
            if eoi_vm == vm and irq == KEYBOARD_IRQ and self.typed < self.total \
                    and len(sim.guests[vm].obs.keys_received) == self.typed:
                loop.schedule(1, type_key)

        sim.platform.ready_hooks.append(on_ready)
        sim.platform.eoi_hooks.append(on_eoi)


class Backlog(Workload):
    """A burst of keys lands in the FIFO before the guest services any of them."""
    kind = "storm"

    def __init__(self, spec, seed):
        super().__init__(spec, seed)
        self.total = spec.get("backlog", 5)

    def expected_bytes(self):
        return self.total

    def program(self, guest):
        attach_all(guest, [KEYBOARD])
        guest.mark_ready()
        while len(guest.obs.keys_received) < self.total:
            yield Wait.IRQ

    def install(self, sim, vm):
        kbd = sim.platform.models[KEYBOARD]

        def burst():
            for _ in range(self.total):
                kbd.push(self.rng.randrange(0x20, 0x7F))

        sim.platform.ready_hooks.append(
            lambda ready_vm: ready_vm == vm and sim.platform.loop.schedule(1, burst))


class DmaReplay(Workload):
    kind = "dma"

    def __init__(self, spec, seed, base_dir="."):
        super().__init__(spec, seed)
        self.records = load_dma_trace(spec.get("trace", "bfs"), base_dir)
        self.device = spec.get("device", DMA_ENGINE)
        self.layout, self.granules = buffer_layout(self.records)

    def prepare(self, vm_cfg, mode):
        if vm_cfg.shared_granules < self.granules:
            vm_cfg.shared_granules = self.granules
        if vm_cfg.ram_granules < vm_cfg.shared_granules + 1:
            vm_cfg.ram_granules = vm_cfg.shared_granules + 1

    def program(self, guest):
        if not attach_all(guest, [self.device]):
            return
        guest.mark_ready()
        base, _ = guest.cfg.dma_region(guest.p.mode)
        for i, rec in enumerate(self.records):
            offset, _ = self.layout[rec["buffer-tag"]]
            gpa = (base + offset) << GRANULE_SHIFT
            seed = self.rng.getrandbits(32)
            guest.start_dma(self.device, rec["op"], rec["bytes"], gpa, seed, rec["buffer-tag"])
            while guest.dma_inflight is not None:
                yield Wait.IRQ


class AttackMix(Workload):
    """Event-counter, Wi-Fi ready, GPU job and keyboard traffic in one run.

    Timeline relative to the guest reporting ready: a low-priority burst on
    irqsrc0 (ids 63-68), a high-priority burst (60-62) shortly after, one GPU
    job, a keyboard backlog, then the Wi-Fi ready signal.
    """
    kind = "attack"
    DEVICES = ("irqsrc0", "wcnss0", "mali0", KEYBOARD, "led0", "button0")
    BACKLOG = 5

    def __init__(self, spec, seed):
        super().__init__(spec, seed)
        self.timeline = {
            "button": spec.get("button_at", 1),
            "burst_a": spec.get("burst_a_at", 5),
            "burst_b": spec.get("burst_b_at", 8),
            "mali": spec.get("mali_at", 20),
            "keys": spec.get("keys_at", 25),
            "wcnss": spec.get("wcnss_at", 40),
        }

    def expected_bytes(self):
        return self.BACKLOG

    def program(self, guest):
        attach_all(guest, self.DEVICES)
        guest.mark_ready()
        yield Wait.CPU
        guest.mmio_write("led0", 0, 1)
        if guest.poll_device("led0", 0, 1):
            guest.obs.progress += 1
        if guest.poll_device("button0", 0, 1):
            guest.obs.progress += 1
        while True:
            yield Wait.IRQ

    def install(self, sim, vm):
        p = sim.platform
        m = p.models
        t = self.timeline
        keys = [self.rng.randrange(0x20, 0x7F) for _ in range(self.BACKLOG)]

        def keys_burst():
            for k in keys:
                m[KEYBOARD].push(k)

        def on_ready(ready_vm):
            if ready_vm != vm:
                return
            p.loop.schedule(t["button"], m["button0"].press)
            for irq in range(63, 69):
                p.loop.schedule(t["burst_a"], m["irqsrc0"].fire, irq)
            for irq in range(60, 63):
                p.loop.schedule(t["burst_b"], m["irqsrc0"].fire, irq)
            p.loop.schedule(t["mali"], m["mali0"].complete_job)
            p.loop.schedule(t["keys"], keys_burst)
            p.loop.schedule(t["wcnss"], m["wcnss0"].signal_ready)

        p.ready_hooks.append(on_ready)


def make_workload(spec, seed, base_dir="."):
    kind = spec["kind"]
    if kind == "keyboard":
        return Typing(spec, seed)
    if kind == "storm":
        return Backlog(spec, seed)
    if kind == "dma":
        return DmaReplay(spec, seed, base_dir)
    if kind == "attack":
        return AttackMix(spec, seed)
    if kind == "ticker":
        return Ticker(spec, seed)
    raise ValueError(f"unknown workload kind {kind!r}")

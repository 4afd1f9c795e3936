"""Realm-world manager: RMI/RSI surface, device attach and detach, stage-2
exclusivity, measurement extension, and the virtual-interrupt checks that
guard every list-register load.

The injection check is a pure function over the unconsumed log records so
it can be exercised exhaustively without a running platform.
"""

import enum
from operator import attrgetter
from dataclasses import dataclass, field

from .devices import extend_measurement, fnv1a64, measure
from .gic import Trigger, Vgic, VgicError
from .mem_isolation import ModelError, World

C2, C3, C4 = "C2", "C3", "C4"


order_key = attrgetter("priority", "seq")


def benign_batch(records, n, k=None):
    """Longest prefix (at most ``k`` or ``n``) of the ordered records with distinct ids."""
    limit = n if k is None else min(k, n)
    out, seen = [], set()
    for rec in sorted(records, key=order_key):
        if len(out) == limit or rec.id in seen:
            break
        out.append(rec)
        seen.add(rec.id)
    return out


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    check: str = None
    matched: tuple = ()

    def __bool__(self):
        return self.accepted


_ACCEPT_EMPTY = Verdict(True)
_REJECT = {c: Verdict(False, c) for c in ("malformed", C2, C3, C4)}


def check_injection(ids, records, n):
    """Accept iff ``ids`` equals, as a set, a benign top-|ids| batch of ``records``.

    C2: every id has an unconsumed record.  C3/C4: the first record of each
    requested id in (priority, arrival) order forms the head of that order.
    The label is C3 when a skipped record shares a priority with an included
    one, else C4.
    """
    want = set(ids)
    k = len(ids)
    if k > n or len(want) != k:
        return _REJECT["malformed"]
    if not k:
        return _ACCEPT_EMPTY
    ordered = sorted(records, key=order_key)
    head = ordered[:k]
    if {r.id for r in head} == want:
        return Verdict(True, matched=tuple(head))
    first = {}
    for r in ordered:
        if r.id in want and r.id not in first:
            first[r.id] = r
    if len(first) != k:
        return _REJECT[C2]
    worst = max(map(order_key, first.values()))
    prios = {r.priority for r in first.values()}
    for r in ordered:
        if order_key(r) >= worst:
            break
        if first.get(r.id) is not r and r.priority in prios:
            return _REJECT[C3]
    return _REJECT[C4]


def check_count(logged, injected):
    """Advisory residual of logged minus injected interrupts."""
    return logged - injected


class AttachState(enum.Enum):
    IDLE = "idle"
    AWAITING_FINALIZE = "awaiting-finalize"
    ATTACHED = "attached"
    DETACHED = "detached"
    FORCE_RECLAIMED = "force-reclaimed"


@dataclass(frozen=True)
class AttachRequest:
    vm: str
    device: str
    gpas: tuple                     # ((gpa_granule, count), ...)
    interrupts: tuple = ()          # ((id, priority), ...)
    dma_protection: bool = False
    interrupt_isolation: bool = True

    def __post_init__(self):
        seen = set()
        for start, count in self.gpas:
            span = set(range(start, start + count))
            if span & seen:
                raise ModelError(f"overlapping GPA ranges in attach of {self.device}")
            seen |= span

    @property
    def gpa_granules(self):
        return [s + i for s, c in self.gpas for i in range(c)]


@dataclass
class Attachment:
    request: AttachRequest
    state: AttachState = AttachState.IDLE


@dataclass
class RealmState:
    vm: str
    vgic: Vgic
    measurement: int
    attachments: dict = field(default_factory=dict)
    dma_devices: set = field(default_factory=set)
    level_inflight: set = field(default_factory=set)
    injected: int = 0


class Rmm:
    def __init__(self, platform, checks=True):
        # checks=False models the stock RMM used by the realm baseline
        self.p = platform
        self.checks = checks
        self.realms = {}
        self.delegated = set()

    @property
    def memory(self):
        return self.p.memory

    @property
    def monitor(self):
        return self.p.monitor

    def _violation(self, check, **payload):
        self.p.emit("violation", by="rmm", check=check, **payload)

    def _rmi(self, fn, **payload):
        self.p.emit("smc", fn="rmi_forward")
        self.p.cpu.switch(World.REALM)
        self.p.emit("rmi", fn=fn, **payload)

    def _rsi(self, fn, **payload):
        self.p.emit("rsi", fn=fn, **payload)

    def realm(self, vm):
        try:
            return self.realms[vm]
        except KeyError:
            raise ModelError(f"no realm {vm!r}") from None

    # realm and granule management

    def rmi_realm_create(self, vm):
        with self.p.cpu.visit(World.NORMAL):
            self._rmi("rmi_realm_create", vm=vm)
            if vm in self.realms:
                return False
            vgic = Vgic(vm, self.p.n, self.p.trace)
            self.p.vgics[vm] = vgic
            self.realms[vm] = RealmState(vm, vgic, fnv1a64(vm.encode()))
            self.memory.vm_table(vm)
            return True

    def rmi_granule_delegate(self, g):
        with self.p.cpu.visit(World.NORMAL):
            self._rmi("rmi_granule_delegate", granule=g)
            if g in self.delegated or self.memory.gptc[g] is not World.NORMAL:
                return False
            self.delegated.add(g)
            self.monitor.gpt_set([g], World.REALM)
            return True

    def rmi_granule_undelegate(self, g):
        with self.p.cpu.visit(World.NORMAL):
            self._rmi("rmi_granule_undelegate", granule=g)
            if g not in self.delegated or self._owner_of(g) is not None:
                return False
            self.memory.scrub(g)
            self.delegated.discard(g)
            self.monitor.gpt_set([g], World.NORMAL)
            return True

    def _owner_of(self, pa):
        for vm in sorted(self.memory.vm_tables):
            if any(m.pa == pa for m in self.memory.vm_tables[vm].entries.values()):
                return vm
        return None

    def rmi_data_create(self, vm, gpa, pa, kind="ram"):
        with self.p.cpu.visit(World.NORMAL):
            self._rmi("rmi_data_create", vm=vm, gpa=gpa, pa=pa)
            realm = self.realm(vm)
            table = self.memory.vm_table(vm)
            if pa not in self.delegated or gpa in table:
                return False
            owner = self._owner_of(pa)
            if owner is not None:
                self._violation("exclusivity", vm=vm, pa=pa, owner=owner)
                return False
            table.map(gpa, pa, kind=kind)
            if realm.dma_devices:
                if kind == "ram":
                    self.monitor.gpt_set([pa], World.NORMAL, which=("GPTd",))
                self.memory.smmu_sync(vm)
            return True

    def rmi_data_destroy(self, vm, gpa):
        with self.p.cpu.visit(World.NORMAL):
            self._rmi("rmi_data_destroy", vm=vm, gpa=gpa)
            realm = self.realm(vm)
            m = self.memory.vm_table(vm).unmap(gpa)
            if m is None:
                return False
            if realm.dma_devices:
                if m.kind == "ram":
                    self.monitor.gpt_set([m.pa], World.REALM, which=("GPTd",))
                self.memory.smmu_sync(vm)
            return True

    def rmi_map_unprotected(self, vm, gpa, pa, kind="shared"):
        """Map a normal-world granule into the realm's unprotected space."""
        with self.p.cpu.visit(World.NORMAL):
            self._rmi("rmi_map_unprotected", vm=vm, gpa=gpa, pa=pa)
            self.realm(vm)
            if self.memory.gptc[pa] is not World.NORMAL:
                return False
            self.memory.vm_table(vm).map(gpa, pa, kind=kind)
            return True

    # device attach / detach

    def rsi_attach_dev(self, req):
        self._rsi("rsi_attach_dev", vm=req.vm, device=req.device)
        realm = self.realm(req.vm)
        desc = self.p.tree.devices.get(req.device)
        if desc is None:
            self.p.emit("attach_error", vm=req.vm, device=req.device, reason="unknown-device")
            return False
        listed = [i for i, _ in req.interrupts]
        if set(listed) - set(desc.irq_ids) or len(set(listed)) != len(listed):
            self.p.emit("attach_error", vm=req.vm, device=req.device, reason="interrupt-mismatch")
            return False
        if len(req.gpa_granules) != len(desc.mmio_granules):
            self.p.emit("attach_error", vm=req.vm, device=req.device, reason="range-mismatch")
            return False
        if req.dma_protection and not desc.dma_capable:
            self.p.emit("attach_error", vm=req.vm, device=req.device, reason="not-dma-capable")
            return False
        for other in sorted(self.realms):
            att = self.realms[other].attachments.get(req.device)
            if att is not None and att.state in (AttachState.AWAITING_FINALIZE, AttachState.ATTACHED):
                self.p.emit("attach_error", vm=req.vm, device=req.device, reason="busy")
                return False
        realm.attachments[req.device] = Attachment(req, AttachState.AWAITING_FINALIZE)
        self.p.emit("attach_state", vm=req.vm, device=req.device, state="awaiting-finalize")
        # hand control to the host for delegation; it calls back into finalize
        with self.p.cpu.visit(World.NORMAL):
            ok = self.p.hypervisor.delegate_device_memory(req.vm, req.device)
        return ok and realm.attachments[req.device].state is AttachState.ATTACHED

    def rmi_dev_finalize(self, vm, device):
        with self.p.cpu.visit(World.NORMAL):
            self._rmi("rmi_dev_finalize", vm=vm, device=device)
            realm = self.realms.get(vm)
            att = None if realm is None else realm.attachments.get(device)
            if att is None or att.state is not AttachState.AWAITING_FINALIZE:
                self._violation("unrequested-attach", vm=vm, device=device)
                return False
            req = att.request
            desc = self.p.tree[device]
            table = self.memory.vm_table(vm)
            for gpa, pa in zip(req.gpa_granules, desc.mmio_granules):
                m = table.lookup(gpa)
                if m is None or m.pa != pa or pa not in self.delegated:
                    self._violation("attach-mapping", vm=vm, device=device, gpa=gpa)
                    self._abort(realm, device)
                    return False
            if req.interrupt_isolation and req.interrupts:
                entries = [(i, prio, desc.trigger_of(i).value) for i, prio in req.interrupts]
                if not self.monitor.smc_prot_int(vm, entries):
                    self._abort(realm, device)
                    return False
            self.p.models[device].soft_reset()
            if req.dma_protection:
                first = not realm.dma_devices
                realm.dma_devices.add(device)
                self.memory.create_stream(device, vm, mirrored=True)
                if first:
                    ram = [m.pa for m in table.entries.values() if m.kind == "ram"]
                    self.monitor.gpt_set(ram, World.NORMAL, which=("GPTd",))
                self.memory.smmu_sync(vm)
            realm.measurement = extend_measurement(realm.measurement, measure(desc))
            att.state = AttachState.ATTACHED
            self.p.emit("attach_state", vm=vm, device=device, state="attached",
                        measurement=f"{realm.measurement:016x}")
            return True

    def _abort(self, realm, device):
        realm.attachments.pop(device, None)
        self.p.emit("attach_state", vm=realm.vm, device=device, state="aborted")

    def rsi_detach_dev(self, vm, device):
        self._rsi("rsi_detach_dev", vm=vm, device=device)
        realm = self.realm(vm)
        att = realm.attachments.get(device)
        if att is None or att.state is not AttachState.ATTACHED:
            self.p.emit("detach_error", vm=vm, device=device)
            return False
        self._release(realm, device, AttachState.DETACHED)
        with self.p.cpu.visit(World.NORMAL):
            self.p.hypervisor.on_device_released(vm, device)
        return True

    def _release(self, realm, device, state):
        att = realm.attachments[device]
        self.p.models[device].soft_reset()
        ids = [i for i, _ in att.request.interrupts]
        if att.request.interrupt_isolation and ids:
            self.monitor.release_interrupts(realm.vm, ids)
        realm.level_inflight -= set(ids)
        if device in realm.dma_devices:
            realm.dma_devices.discard(device)
            self.memory.destroy_stream(device)
            if not realm.dma_devices:
                table = self.memory.vm_table(realm.vm)
                ram = [m.pa for m in table.entries.values() if m.kind == "ram"]
                self.monitor.gpt_set(ram, World.REALM, which=("GPTd",))
        att.state = state
        self.p.emit("attach_state", vm=realm.vm, device=device, state=state.value)

    def rmi_realm_destroy(self, vm):
        """Tear down a realm; attached devices are reset and force-reclaimed."""
        with self.p.cpu.visit(World.NORMAL):
            self._rmi("rmi_realm_destroy", vm=vm)
            realm = self.realm(vm)
            for device in sorted(realm.attachments):
                if realm.attachments[device].state is AttachState.ATTACHED:
                    self._release(realm, device, AttachState.FORCE_RECLAIMED)
            table = self.memory.vm_table(vm)
            for gpa in sorted(table.entries):
                table.unmap(gpa)
            self.memory.drop_vm(vm)
            return True

    def attach_state(self, vm, device):
        att = self.realm(vm).attachments.get(device)
        return AttachState.IDLE if att is None else att.state

    # interrupts

    def pending_records(self, vm):
        return list(self.monitor.log(vm).records) if self.monitor else []

    def rmi_rec_enter(self, vm, ids, run_guest):
        """Check and load ``ids`` into the vGIC, then run the guest.

        Returns the Verdict; the guest only runs on acceptance.
        """
        with self.p.cpu.visit(World.NORMAL):
            self._rmi("rmi_rec_enter", vm=vm, ids=list(ids))
            realm = self.realm(vm)
            verdict = self._check(vm, ids)
            if not verdict:
                self.p.emit("inject_reject", vm=vm, ids=list(ids), check=verdict.check)
                self._violation(verdict.check, vm=vm, ids=list(ids))
                return verdict
            try:
                realm.vgic.program(ids)
            except VgicError:
                self.p.emit("inject_reject", vm=vm, ids=list(ids), check="malformed")
                return Verdict(False, "malformed")
            if verdict.matched:
                self.monitor.log(vm).consume(verdict.matched)
                realm.injected += len(verdict.matched)
            if ids:
                self.p.emit("inject_accept", vm=vm, ids=list(ids))
            fired = realm.vgic.fire()
            for irq in fired:
                prot = self.monitor.protected.get(irq) if self.monitor else None
                if prot is not None and prot.trigger is Trigger.LEVEL:
                    realm.level_inflight.add(irq)
            run_guest(fired)
            return verdict

    def _check(self, vm, ids):
        if not self.checks:
            ok = len(ids) <= self.p.n and len(set(ids)) == len(ids)
            return Verdict(ok, None if ok else "malformed")
        prot = self.monitor.protected
        checked = [i for i in ids if i in prot and prot[i].vm == vm]
        foreign = [i for i in ids if i in prot and prot[i].vm != vm]
        if foreign:
            return Verdict(False, C2)
        if len(ids) > self.p.n or len(set(ids)) != len(ids):
            return Verdict(False, "malformed")
        return check_injection(checked, self.monitor.log(vm).records, self.p.n)

    def rsi_ack_int(self, vm, irq):
        self._rsi("rsi_ack_int", vm=vm, id=irq)
        realm = self.realm(vm)
        if not self.checks:
            self.p.emit("rsi_error", fn="rsi_ack_int", id=irq, reason="unsupported")
            return False
        if irq not in realm.level_inflight or irq in realm.vgic.in_service:
            self.p.emit("rsi_error", fn="rsi_ack_int", id=irq, reason="not-awaiting-ack")
            return False
        realm.level_inflight.discard(irq)
        return self.monitor.smc_ack_phys(irq, caller="rmm", vm=vm)

    def residual(self, vm):
        log = self.monitor.log(vm)
        return check_count(log.appended, self.realm(vm).injected)


"""Scenario and platform configuration (JSON) with field-level validation."""

import copy
import json
import os
from dataclasses import dataclass, field, replace

from ..devices import DEFAULT_PLATFORM_DEVICES, PlatformDeviceTree
from ..guest import VmConfig, VmDevice
from ..hypervisor import Strategy
from ..mem_isolation import DEFAULT_GRANULES, ModelError
from ..platform import Mode
from ..trace import DEFAULT_COSTS

WORKLOAD_KINDS = ("keyboard", "storm", "dma", "attack", "ticker")

DEFAULT_VM_DEVICES = [
    {"device": "kmi0", "gpa": 0x80, "priorities": {44: 10}, "handlers": {44: "keyboard"}},
    {"device": "kmi1", "gpa": 0x81, "priorities": {45: 11}, "handlers": {45: "mouse"}},
    {"device": "led0", "gpa": 0x82},
    {"device": "button0", "gpa": 0x83},
    {"device": "smmute0", "gpa": 0x84, "priorities": {50: 13}, "handlers": {50: "dma"},
     "dma": True},
    {"device": "irqsrc0", "gpa": 0x85,
     "priorities": {60 + i: 1 + i for i in range(9)},
     "handlers": {60 + i: "counter" for i in range(9)}},
    {"device": "wcnss0", "gpa": 0x86, "priorities": {70: 12}, "handlers": {70: "wcnss"}},
    {"device": "mali0", "gpa": 0x87, "priorities": {71: 14}, "handlers": {71: "mali"}},
    {"device": "gps0", "gpa": 0x88},
    {"device": "smmute1", "gpa": 0x89, "priorities": {51: 15}, "handlers": {51: "dma"},
     "dma": True},
]


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ScenarioConfig:
    mode: Mode = Mode.DMI
    seed: int = 0
    n: int = 4
    strategy: Strategy = field(default_factory=Strategy)
    workload: dict = field(default_factory=lambda: {"kind": "keyboard", "keys": 10})
    devices: list = field(default_factory=lambda: copy.deepcopy(DEFAULT_PLATFORM_DEVICES))
    memory_granules: int = DEFAULT_GRANULES
    gic_base: int = 16
    gic_granules: int = 2
    firmware_granules: int = 16
    vms: list = field(default_factory=lambda: [VmConfig("vm1", devices=default_vm_devices())])
    costs: dict = field(default_factory=lambda: dict(DEFAULT_COSTS))
    step_limit: int = 10_000_000
    level_ack: str = "deferred"
    entry_latency: int = 2
    log_capacity: int = 1024
    base_dir: str = "."

    def with_overrides(self, mode=None, strategy=None, seed=None):
        out = replace(self, strategy=copy.deepcopy(self.strategy), vms=copy.deepcopy(self.vms))
        if mode is not None:
            out.mode = mode if isinstance(mode, Mode) else parse_mode(mode)
        if strategy is not None:
            out.strategy = strategy if isinstance(strategy, Strategy) else Strategy.parse(strategy)
        if seed is not None:
            out.seed = int(seed)
        return out

    def fresh(self):
        """Copy safe to hand to a new simulation (strategies carry no run state)."""
        return self.with_overrides()

    def summary(self):
        return {"mode": self.mode.value, "strategy": str(self.strategy), "seed": self.seed,
                "n": self.n, "workload": self.workload}


def default_vm_devices():
    return [VmDevice.from_dict(d) for d in DEFAULT_VM_DEVICES]


def parse_mode(text):
    try:
        return Mode(str(text).lower())
    except ValueError:
        raise ConfigError("mode", f"expected one of bn, br, dmi; got {text!r}") from None


def _int(d, key, path, default, lo=None, hi=None):
    val = d.get(key, default)
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{path}.{key}" if path else key, f"expected an integer, got {val!r}")
    if lo is not None and val < lo:
        raise ConfigError(f"{path}.{key}" if path else key, f"must be >= {lo}, got {val}")
    if hi is not None and val > hi:
        raise ConfigError(f"{path}.{key}" if path else key, f"must be <= {hi}, got {val}")
    return val


def _validate_workload(w, path="workload"):
    if not isinstance(w, dict) or "kind" not in w:
        raise ConfigError(path, "expected an object with a 'kind' field")
    kind = w["kind"]
    if kind not in WORKLOAD_KINDS:
        raise ConfigError(f"{path}.kind", f"expected one of {', '.join(WORKLOAD_KINDS)}; got {kind!r}")
    if kind == "keyboard":
        _int(w, "keys", path, 10, lo=0)
    elif kind == "storm":
        _int(w, "backlog", path, 5, lo=1)
    elif kind == "ticker":
        _int(w, "steps", path, 3, lo=0)
    elif kind == "dma":
        if not isinstance(w.get("trace", "bfs"), (str, list)):
            raise ConfigError(f"{path}.trace", "expected a builtin name, a path, or a list of records")
    return dict(w)


def from_dict(d, base_dir="."):
    if not isinstance(d, dict):
        raise ConfigError("<root>", "scenario must be a JSON object")
    cfg = ScenarioConfig(base_dir=base_dir)
    if "mode" in d:
        cfg.mode = parse_mode(d["mode"])
    cfg.seed = _int(d, "seed", "", 0, lo=0, hi=(1 << 64) - 1)
    cfg.n = _int(d, "n", "", 4, lo=1, hi=16)
    if "strategy" in d:
        try:
            cfg.strategy = Strategy.parse(str(d["strategy"]))
        except ValueError as exc:
            raise ConfigError("strategy", str(exc)) from None
    if "workload" in d:
        cfg.workload = _validate_workload(d["workload"])
    cfg.step_limit = _int(d, "step_limit", "", cfg.step_limit, lo=1)
    cfg.entry_latency = _int(d, "entry_latency", "", cfg.entry_latency, lo=1)
    proto = d.get("protocol", {})
    cfg.level_ack = proto.get("level_ack", "deferred")
    if cfg.level_ack not in ("deferred", "greedy"):
        raise ConfigError("protocol.level_ack", f"expected deferred or greedy, got {cfg.level_ack!r}")
    cfg.log_capacity = _int(proto, "log_capacity", "protocol", cfg.log_capacity, lo=1)
    costs = d.get("costs", {})
    if not isinstance(costs, dict) or not all(isinstance(v, int) for v in costs.values()):
        raise ConfigError("costs", "expected an object of integer costs")
    cfg.costs.update(costs)

    plat = d.get("platform", {})
    if isinstance(plat, str):
        with open(os.path.join(base_dir, plat)) as fh:
            plat = json.load(fh)
    cfg.memory_granules = _int(plat, "memory_granules", "platform", cfg.memory_granules, lo=512)
    gic = plat.get("gic", {})
    cfg.gic_base = _int(gic, "base", "platform.gic", cfg.gic_base, lo=0)
    cfg.gic_granules = _int(gic, "granules", "platform.gic", cfg.gic_granules, lo=1)
    cfg.firmware_granules = _int(plat, "firmware_granules", "platform", cfg.firmware_granules, lo=1)
    if cfg.gic_base < cfg.firmware_granules:
        raise ConfigError("platform.gic.base", "overlaps root firmware granules")
    if "devices" in plat:
        cfg.devices = plat["devices"]
    try:
        tree = PlatformDeviceTree.from_dicts(cfg.devices)
    except (KeyError, ValueError, ModelError) as exc:
        raise ConfigError("platform.devices", str(exc)) from None
    gic_hi = cfg.gic_base + cfg.gic_granules
    for desc in tree:
        for g in desc.mmio_granules:
            if g < gic_hi or g >= 256:
                raise ConfigError(f"platform.devices.{desc.id}.mmio",
                                  f"granule {g} outside the device window [{gic_hi}, 256)")

    if "vms" in d:
        vms = []
        for i, v in enumerate(d["vms"]):
            path = f"vms[{i}]"
            try:
                devs = [VmDevice.from_dict(x) for x in v["devices"]] if "devices" in v \
                    else default_vm_devices()
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"{path}.devices", str(exc)) from None
            for vd in devs:
                if vd.device not in tree:
                    raise ConfigError(f"{path}.devices", f"unknown device {vd.device!r}")
                own = set(tree[vd.device].irq_ids)
                if set(vd.priorities) - own:
                    raise ConfigError(f"{path}.devices.{vd.device}.priorities",
                                      f"interrupts {sorted(set(vd.priorities) - own)} not on device")
            vm = VmConfig(
                id=str(v.get("id", f"vm{i + 1}")),
                ram_granules=_int(v, "ram_granules", path, 64, lo=1),
                ram_gpa=_int(v, "ram_gpa", path, 0x100, lo=0),
                shared_gpa=_int(v, "shared_gpa", path, 0x300, lo=0),
                shared_granules=_int(v, "shared_granules", path, 0, lo=0),
                devices=devs,
            )
            if "workload" in v:
                vm.workload = _validate_workload(v["workload"], f"{path}.workload")
            vms.append(vm)
        if not vms:
            raise ConfigError("vms", "at least one VM is required")
        if len({v.id for v in vms}) != len(vms):
            raise ConfigError("vms", "duplicate VM ids")
        cfg.vms = vms
    return cfg


def load(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(path, f"cannot read scenario: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(path, f"invalid JSON: {exc.msg} at line {exc.lineno}") from None
    return from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))

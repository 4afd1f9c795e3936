"""Append-only event trace shared by every simulated component.

Records are plain dicts whose first three keys are always ``step``, ``tick``
and ``kind``; payload keys follow in the order the emitter passed them.  The
serialized form is one compact JSON object per line, which keeps traces
byte-stable across runs.
"""

import json
from collections import Counter
from dataclasses import asdict, dataclass, field

# Arbitrary cost units standing in for instruction counts.  Only ratios and
# directions between modes are meaningful.
DEFAULT_COSTS = {
    "world_switch": 100,
    "smc": 50,
    "rmi": 50,
    "rsi": 50,
    "mmio": 5,
    "gic": 5,
}
DEFAULT_OTHER_COST = 1

WORLD_NAMES = ("root", "realm", "normal")


class Trace:
    def __init__(self, costs=None, clock=None):
        self.records = []
        self.costs = dict(DEFAULT_COSTS if costs is None else costs)
        self._clock = clock or (lambda: 0)
        # live tallies, cross-checked against metrics_from_trace()
        self._kinds = Counter()
        self._switches = Counter()
        self._irqs = 0
        self._cost = 0

    def bind_clock(self, clock):
        self._clock = clock

    def emit(self, kind, **payload):
        rec = {"step": len(self.records), "tick": self._clock(), "kind": kind}
        rec.update(payload)
        self.records.append(rec)
        self._kinds[kind] += 1
        self._cost += self.costs.get(kind, self.costs.get("other", DEFAULT_OTHER_COST))
        if kind == "world_switch":
            self._switches[payload["to"]] += 1
        elif kind == "vgic_fire":
            self._irqs += len(payload["ids"])
        return rec

    def of_kind(self, *kinds):
        return [r for r in self.records if r["kind"] in kinds]

    def count(self, kind, **match):
        return sum(
            1 for r in self.records
            if r["kind"] == kind and all(r.get(k) == v for k, v in match.items())
        )

    def lines(self):
        return [dumps_record(r) for r in self.records]

    def dump(self, path):
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def live_metrics(self):
        return MetricsReport(
            irq_injected=self._irqs,
            rmi=self._kinds["rmi"],
            rsi=self._kinds["rsi"],
            smc=self._kinds["smc"],
            world_switches={w: self._switches[w] for w in WORLD_NAMES},
            violations=self._kinds["violation"],
            dma=self._kinds["dma"],
            monitor_traps=self._kinds["trap"],
            injections_accepted=self._kinds["inject_accept"],
            injections_rejected=self._kinds["inject_reject"],
            eois=self._kinds["eoi"],
            cost_units=self._cost,
        )


def dumps_record(rec):
    return json.dumps(rec, separators=(",", ":"))


def load_trace(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class MetricsReport:
    irq_injected: int = 0
    rmi: int = 0
    rsi: int = 0
    smc: int = 0
    world_switches: dict = field(default_factory=lambda: {w: 0 for w in WORLD_NAMES})
    violations: int = 0
    dma: int = 0
    monitor_traps: int = 0
    injections_accepted: int = 0
    injections_rejected: int = 0
    eois: int = 0
    cost_units: int = 0

    @property
    def total_world_switches(self):
        return sum(self.world_switches.values())

    def as_dict(self):
        d = asdict(self)
        d["total_world_switches"] = self.total_world_switches
        return d

    def flat(self):
        """Scalar view used by mode comparisons."""
        d = self.as_dict()
        ws = d.pop("world_switches")
        for w in WORLD_NAMES:
            d["world_switches_" + w] = ws[w]
        return d


def metrics_from_trace(records, costs=None):
    """Recompute a MetricsReport from trace records alone."""
    costs = DEFAULT_COSTS if costs is None else costs
    kinds = Counter(r["kind"] for r in records)
    switches = Counter(r["to"] for r in records if r["kind"] == "world_switch")
    cost = sum(costs.get(r["kind"], costs.get("other", DEFAULT_OTHER_COST)) for r in records)
    return MetricsReport(
        irq_injected=sum(len(r["ids"]) for r in records if r["kind"] == "vgic_fire"),
        rmi=kinds["rmi"],
        rsi=kinds["rsi"],
        smc=kinds["smc"],
        world_switches={w: switches[w] for w in WORLD_NAMES},
        violations=kinds["violation"],
        dma=kinds["dma"],
        monitor_traps=kinds["trap"],
        injections_accepted=kinds["inject_accept"],
        injections_rejected=kinds["inject_reject"],
        eois=kinds["eoi"],
        cost_units=cost,
    )

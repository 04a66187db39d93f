"""Scenario runner: world construction, trace metrics, benchmarks, comparisons.

Scenario files are flat ``key = value`` text.  A run wires up 3f+1 replicas,
a standby pool, clients, and the configuration manager on one deterministic
simulator; every metric is recomputed from the emitted trace, so re-analyzing
a trace always gives the same numbers.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace

from .authn import Keychain, SecureCoprocessor, SessionKeys
from .availability import availability, window_migration, window_reboot
from .client import ClientProgram
from .manager import ManagerConfig, ManagerProgram
from .messages import Role
from .migration import select_sources
from .replica import NodeContext, Replica, ReplicaConfig
from .simnet import POLICIES, NetParams, Simulator, to_us
from .standby import DemotedProgram


@dataclass
class FaultSpec:
    kind: str                 # crash | one of the byzantine policy names
    node: int
    at_s: float
    until_s: float | None = None


@dataclass
class EvidenceSpec:
    at_s: float
    sources: tuple[int, ...]  # logical ids to swap out on demand


@dataclass
class Scenario:
    f: int = 1
    active: int | None = None          # must equal 3f+1 when given
    standby: int = 4
    clients: int = 1
    payload_bytes: int = 1024
    state_kb: float = 64.0
    migration_period_s: float = 70.0
    key_refresh_s: float = 15.0
    recovery_budget_s: float = 10.0
    min_delay_ms: float = 0.5
    max_delay_ms: float = 2.0
    bandwidth_mbps: float = 100.0
    duration_s: float = 150.0
    seed: int = 1
    think_time_ms: float = 0.0
    client_retry_s: float = 2.0
    view_change_timeout_s: float = 5.0
    checkpoint_interval: int = 128
    batch_max: int = 16
    sanitize_s: float = 30.0
    repair_s: float = 120.0
    probe_s: float = 5.0
    mode: str = "migration"            # or "reboot"
    migration: bool = True
    t_reboot_s: float = 30.0
    t_save_s: float = 5.0
    trace: tuple[str, ...] = ("proto", "metric")
    faults: tuple[FaultSpec, ...] = ()
    evidence: tuple[EvidenceSpec, ...] = ()

    def __post_init__(self) -> None:
        n = 3 * self.f + 1
        if self.active is None:
            self.active = n
        if self.active != n:
            raise ValueError(f"active count {self.active} != 3f+1 = {n}")
        if self.mode not in ("migration", "reboot"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def n_active(self) -> int:
        return 3 * self.f + 1

    @property
    def state_bytes(self) -> int:
        return int(self.state_kb * 1024)

    @property
    def window_s(self) -> float:
        return window_migration(self.key_refresh_s, self.recovery_budget_s)


_SCALAR_FIELDS = {
    "f": int, "active": int, "standby": int, "clients": int,
    "payload_bytes": int, "state_kb": float, "migration_period_s": float,
    "key_refresh_s": float, "recovery_budget_s": float, "min_delay_ms": float,
    "max_delay_ms": float, "bandwidth_mbps": float, "duration_s": float,
    "seed": int, "think_time_ms": float, "client_retry_s": float,
    "view_change_timeout_s": float, "checkpoint_interval": int, "batch_max": int,
    "sanitize_s": float, "repair_s": float, "probe_s": float, "mode": str,
    "t_reboot_s": float, "t_save_s": float,
}


def parse_scenario(text: str) -> Scenario:
    """Parse the flat key/value scenario format; unknown keys are rejected."""
    values: dict = {}
    faults: list[FaultSpec] = []
    evidence: list[EvidenceSpec] = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, value = line.partition("=")
        elif ":" in line:
            key, _, value = line.partition(":")
        else:
            raise ValueError(f"malformed scenario line: {raw!r}")
        key = key.strip().lower()
        value = value.strip()
        if key == "fault":
            faults.append(_parse_fault(value))
        elif key == "evidence":
            evidence.append(_parse_evidence(value))
        elif key == "trace":
            values["trace"] = tuple(v.strip() for v in value.split(",") if v.strip())
        elif key == "migration":
            values["migration"] = value.lower() in ("1", "on", "true", "yes")
        elif key in _SCALAR_FIELDS:
            values[key] = _SCALAR_FIELDS[key](value)
        else:
            raise ValueError(f"unknown scenario key: {key!r}")
    return Scenario(faults=tuple(faults), evidence=tuple(evidence), **values)


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def _parse_fault(value: str) -> FaultSpec:
    parts = value.split()
    if not parts:
        raise ValueError("empty fault spec")
    kind = parts[0]
    if kind != "crash" and kind not in POLICIES:
        raise ValueError(f"unknown fault kind {kind!r}")
    kv = dict(p.split("=", 1) for p in parts[1:])
    return FaultSpec(kind=kind, node=int(kv["node"]), at_s=float(kv.get("at", 0)),
                     until_s=float(kv["until"]) if "until" in kv else None)


def _parse_evidence(value: str) -> EvidenceSpec:
    kv = dict(p.split("=", 1) for p in value.split())
    sources = tuple(int(s) for s in kv["sources"].split(","))
    return EvidenceSpec(at_s=float(kv.get("at", 0)), sources=sources)


# ---------------------------------------------------------------------------
# World construction
# ---------------------------------------------------------------------------

@dataclass
class World:
    sim: Simulator
    scenario: Scenario
    actives: tuple[int, ...]
    standbys: tuple[int, ...]
    clients: tuple[int, ...]
    manager: int


def build_world(sc: Scenario) -> World:
    n = sc.n_active
    actives = tuple(range(n))
    standbys = tuple(range(n, n + sc.standby))
    clients = tuple(range(n + sc.standby, n + sc.standby + sc.clients))
    manager = n + sc.standby + sc.clients

    roles = {i: Role.ACTIVE for i in actives}
    roles.update({i: Role.STANDBY for i in standbys})
    roles.update({i: Role.CLIENT for i in clients})
    roles[manager] = Role.MANAGER

    migration_on = sc.migration and sc.mode == "migration"
    cfg = ReplicaConfig(
        f=sc.f,
        manager=manager,
        view_change_timeout_s=sc.view_change_timeout_s,
        checkpoint_interval=sc.checkpoint_interval,
        batch_max=sc.batch_max,
        migration_period_s=sc.migration_period_s,
        key_refresh_s=sc.key_refresh_s,
        state_pad=sc.state_bytes,
        migration_enabled=migration_on,
    )

    net = NetParams(
        min_delay_us=to_us(sc.min_delay_ms / 1000.0),
        max_delay_us=to_us(sc.max_delay_ms / 1000.0),
        bandwidth_bps=int(sc.bandwidth_mbps * 1_000_000 / 8),
    )
    sim = Simulator(seed=sc.seed, net=net, trace_categories=sc.trace)
    keychain = Keychain(master=b"migbft-%d" % sc.seed)
    for node in (*actives, *standbys, *clients, manager):
        keychain.register(node)

    def make_ctx(node: int) -> NodeContext:
        return NodeContext(
            physical=node,
            keychain=keychain,
            keys=SessionKeys(node, keychain, to_us(sc.key_refresh_s)),
            cop=SecureCoprocessor(node, keychain),
            roles=roles,
            config=cfg,
        )

    for node in actives:
        sim.add_node(node, Replica(make_ctx(node), actives))
        sim.schedule_control(node, ("bootstrap",), 0)
    for node in standbys:
        sim.add_node(node, DemotedProgram(make_ctx(node)))
        sim.schedule_control(node, ("bootstrap",), 0)
    for node in clients:
        program = ClientProgram(
            make_ctx(node), actives,
            payload_bytes=sc.payload_bytes,
            think_time_s=sc.think_time_ms / 1000.0,
            retry_timeout_s=sc.client_retry_s,
        )
        sim.add_node(node, program)
        sim.schedule_control(node, ("bootstrap",), to_us(0.1))
    mgr_cfg = ManagerConfig(sanitize_s=sc.sanitize_s, repair_s=sc.repair_s, probe_s=sc.probe_s)
    sim.add_node(manager, ManagerProgram(make_ctx(manager), mgr_cfg, actives, standbys,
                                         fault_lookup=sim.fault_active))
    sim.schedule_control(manager, ("bootstrap",), 0)

    for fault in sc.faults:
        start = to_us(fault.at_s)
        end = None if fault.until_s is None else to_us(fault.until_s)
        if fault.kind == "crash":
            sim.schedule_crash(fault.node, start, end)
        else:
            sim.schedule_policy(fault.node, POLICIES[fault.kind](), start, end)
    for ev in sc.evidence:
        for node in actives:
            sim.schedule_control(node, ("evidence", ev.sources), to_us(ev.at_s))

    if sc.mode == "reboot":
        _schedule_reboots(sim, sc, actives)
    return World(sim=sim, scenario=sc, actives=actives, standbys=standbys,
                 clients=clients, manager=manager)


def _schedule_reboots(sim: Simulator, sc: Scenario, actives: tuple[int, ...]) -> None:
    """Emulated watchdog-staggered reboot recovery: each round's replicas go
    offline for the reboot plus state save/restore time."""
    offline_s = sc.t_reboot_s + sc.t_save_s
    for k in range(4):
        start = (k + 1) * sc.migration_period_s
        for logical in select_sources(k, sc.f):
            sim.schedule_crash(actives[logical], to_us(start), to_us(start + offline_s))


def run_scenario(sc: Scenario) -> tuple[World, list[str]]:
    world = build_world(sc)
    trace = world.sim.run_until(time_s=sc.duration_s)
    return world, trace


# ---------------------------------------------------------------------------
# Trace analysis
# ---------------------------------------------------------------------------

def parse_line(line: str) -> tuple[int, int, str, dict]:
    head, _, rest = line.partition(" ")
    sec, _, frac = head.partition(".")
    t_us = int(sec) * 1_000_000 + int(frac)
    node_s, _, rest = rest.partition(" ")
    event, _, kvpart = rest.partition(" ")
    kv = {}
    if kvpart:
        for token in kvpart.split(" "):
            if "=" in token:
                k, _, v = token.partition("=")
                kv[k] = v
    return t_us, int(node_s[1:]), event, kv


def completions(trace: list[str]) -> list[tuple[int, int, int]]:
    """(client, done_us, latency_us) for every completed call."""
    out = []
    for line in trace:
        if " complete " in line:
            t_us, node, event, kv = parse_line(line)
            if event == "complete":
                out.append((node, t_us, int(kv["lat"])))
    return out


def migration_latencies(trace: list[str]) -> dict[int, float]:
    """Per-round service migration latency in seconds: from the primary
    proposing the migration request to the last target's recovery notice."""
    starts: dict[int, int] = {}
    acks: dict[int, int] = {}
    for line in trace:
        if " mig_pp " in line or " mig_ack " in line:
            t_us, _node, event, kv = parse_line(line)
            l = int(kv["l"])
            if event == "mig_pp":
                starts.setdefault(l, t_us)
            elif event == "mig_ack":
                acks[l] = max(acks.get(l, 0), t_us)
    return {l: (acks[l] - starts[l]) / 1e6 for l in starts if l in acks}


def round_intervals(trace: list[str]) -> dict[int, tuple[int, int]]:
    """Per-round [first execution, last completion] interval in microseconds."""
    start: dict[int, int] = {}
    done: dict[int, int] = {}
    for line in trace:
        if " round_exec " in line or " round_done " in line or " promoted " in line:
            t_us, _node, event, kv = parse_line(line)
            l = int(kv["l"])
            if event == "round_exec":
                start.setdefault(l, t_us)
            else:
                done[l] = max(done.get(l, 0), t_us)
    return {l: (start[l], done.get(l, start[l])) for l in start}


def calls_per_window(trace: list[str], window_s: float, duration_s: float,
                     clients: tuple[int, ...]) -> dict[int, list[int]]:
    """Completed calls per client for each full vulnerability window."""
    window_us = to_us(window_s)
    n_windows = int(to_us(duration_s) // window_us)
    counts = {c: [0] * n_windows for c in clients}
    for client, t_us, _lat in completions(trace):
        idx = t_us // window_us
        if idx < n_windows and client in counts:
            counts[client][idx] += 1
    return counts


def observed_availability(trace: list[str], start_s: float, end_s: float) -> float:
    """Share of the window during which the service was making progress.

    Gaps between consecutive call completions beyond a few typical gaps count
    as downtime (minus one typical gap, so a stall of length G costs ~G).
    """
    start_us, end_us = to_us(start_s), to_us(end_s)
    times = sorted(t for _c, t, _l in completions(trace) if start_us <= t <= end_us)
    span = end_us - start_us
    if span <= 0:
        return 1.0
    if not times:
        return 0.0
    gaps = [b - a for a, b in zip(times, times[1:])]
    typical = int(statistics.median(gaps)) if gaps else to_us(0.05)
    threshold = max(to_us(0.05), 3 * typical)
    downtime = 0
    prev = start_us
    for t in times:
        gap = t - prev
        if gap > threshold:
            downtime += gap - typical
        prev = t
    tail = end_us - prev
    if tail > threshold:
        downtime += tail - typical
    return max(0.0, 1.0 - downtime / span)


# ---------------------------------------------------------------------------
# Benchmarks and comparisons
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    migration_latencies_s: dict[int, float]
    calls_per_window: dict[int, list[int]]
    baseline_calls_per_window: dict[int, list[int]]
    throughput_ratio: float
    availability_observed: float
    window_s: float

    def mean_calls(self, baseline: bool = False) -> float:
        table = self.baseline_calls_per_window if baseline else self.calls_per_window
        counts = [c for per_client in table.values() for c in per_client]
        return statistics.fmean(counts) if counts else 0.0

    def to_text(self) -> str:
        lines = [f"vulnerability window: {self.window_s:g}s"]
        for l in sorted(self.migration_latencies_s):
            lines.append(f"migration round {l}: latency {self.migration_latencies_s[l]:.3f}s")
        lines.append(f"calls/window/client (recovery on):  {self.mean_calls():.1f}")
        lines.append(f"calls/window/client (recovery off): {self.mean_calls(baseline=True):.1f}")
        lines.append(f"throughput ratio: {self.throughput_ratio:.3f}")
        lines.append(f"observed availability: {self.availability_observed:.4f}")
        return "\n".join(lines)


def run_benchmark(sc: Scenario) -> MetricsReport:
    """Run a scenario with recovery enabled and a matched no-recovery baseline."""
    world, trace = run_scenario(sc)
    baseline_sc = replace(sc, migration=False, mode="migration")
    _bw, baseline_trace = run_scenario(baseline_sc)
    window = sc.window_s
    counts = calls_per_window(trace, window, sc.duration_s, world.clients)
    base_counts = calls_per_window(baseline_trace, window, sc.duration_s, world.clients)
    mean = statistics.fmean([c for v in counts.values() for c in v] or [0])
    base_mean = statistics.fmean([c for v in base_counts.values() for c in v] or [0])
    ratio = mean / base_mean if base_mean else 0.0
    return MetricsReport(
        migration_latencies_s=migration_latencies(trace),
        calls_per_window=counts,
        baseline_calls_per_window=base_counts,
        throughput_ratio=ratio,
        availability_observed=observed_availability(trace, 0.0, sc.duration_s),
        window_s=window,
    )


@dataclass
class CompareResult:
    rows: list[tuple[int, int, float, float]]  # (seed, faulty logical, q_mig, q_reb)
    q_migration: float
    q_reboot: float
    predicted_migration: float
    predicted_reboot: float
    window_s: float

    def to_csv(self) -> str:
        lines = ["seed,faulty,q_migration,q_reboot"]
        for seed, faulty, q_m, q_r in self.rows:
            lines.append(f"{seed},{faulty},{q_m:.4f},{q_r:.4f}")
        lines.append(f"mean,,{self.q_migration:.4f},{self.q_reboot:.4f}")
        lines.append(f"predicted,,{self.predicted_migration:.4f},{self.predicted_reboot:.4f}")
        return "\n".join(lines) + "\n"


def compare_recovery_schemes(sc: Scenario, seeds: int = 32) -> CompareResult:
    """Matched migration vs emulated-reboot runs with one crashed replica.

    The faulty replica cycles over the four recovery rounds across seeds; the
    crash clears when that replica's round recovers it, so each run observes
    the downtime structure of the closed-form model.
    """
    window = sc.window_s
    bandwidth_bps = sc.bandwidth_mbps * 1_000_000 / 8
    t_s_pm = sc.state_bytes / bandwidth_bps
    t_s_pr = sc.t_save_s
    offline_s = sc.t_reboot_s + t_s_pr
    rows = []
    for i in range(seeds):
        seed = sc.seed + i
        faulty_round = i % 4
        faulty = select_sources(faulty_round, sc.f)[0]
        crash = FaultSpec(kind="crash", node=faulty, at_s=0.05)
        mig_sc = replace(sc, seed=seed, mode="migration", migration=True,
                         faults=sc.faults + (crash,), duration_s=window + 2.0)
        _w, mig_trace = run_scenario(mig_sc)
        q_mig = observed_availability(mig_trace, 0.0, window)

        reboot_end = (faulty_round + 1) * sc.migration_period_s + offline_s
        reb_crash = FaultSpec(kind="crash", node=faulty, at_s=0.05, until_s=reboot_end)
        reb_sc = replace(sc, seed=seed, mode="reboot", migration=False, state_kb=0,
                         faults=sc.faults + (reb_crash,), duration_s=window + 2.0)
        _w, reb_trace = run_scenario(reb_sc)
        q_reb = observed_availability(reb_trace, 0.0, window)
        rows.append((seed, faulty, q_mig, q_reb))

    q_m = statistics.fmean(r[2] for r in rows)
    q_r = statistics.fmean(r[3] for r in rows)
    return CompareResult(
        rows=rows,
        q_migration=q_m,
        q_reboot=q_r,
        predicted_migration=availability(window, t_s_pm),
        predicted_reboot=availability(window, offline_s),
        window_s=window,
    )


def analyze(sc: Scenario) -> str:
    """Closed-form windows and availability for a scenario's parameters."""
    t_v = sc.window_s
    r_n_pr = sc.t_reboot_s + sc.t_save_s
    t_v_pr = window_reboot(sc.key_refresh_s, 4 * r_n_pr, r_n_pr)
    lines = [
        f"window (migration): {t_v:g}s",
        f"window (reboot):    {t_v_pr:g}s",
        f"availability (migration, T_v={t_v:g}, R_n={sc.recovery_budget_s:g}): "
        f"{availability(t_v, sc.recovery_budget_s):.6f}",
        f"availability (reboot, T_v={t_v_pr:g}, R_n={r_n_pr:g}): "
        f"{availability(t_v_pr, r_n_pr):.6f}",
    ]
    return "\n".join(lines)

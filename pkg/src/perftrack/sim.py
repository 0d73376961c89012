"""Ground-truth generators for the multi-class, multi-tier open network.

Two generators share one :class:`Scenario` description:

* :func:`generate_analytic` evaluates the closed-form model and adds
  multiplicative Gaussian noise.
* :func:`run_des` runs a discrete-event simulation with Poisson arrivals,
  exponential service and join-shortest-queue dispatch over the replicas of
  each tier.

Background utilization ``u0_j`` is simulated as a fixed fraction of every
replica's capacity: request work drains at speed ``1 - u0_j`` and measured
utilization is ``u0_j + (1 - u0_j) * busy_fraction``.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from itertools import count

import numpy as np

from .ekf import MetricSample
from .model import (
    Observation,
    ParamVector,
    SaturationError,
    Topology,
    as_workload,
    evaluate_observation,
)


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    topo: Topology
    truth: ParamVector
    schedule: list[tuple[float, np.ndarray]]
    duration: float
    sample_period: float = 1.0
    truth_changes: list[tuple[float, ParamVector]] = field(default_factory=list)
    noise_rel: float = 0.01
    seed: int = 0
    discipline: str = "ps"

    def __post_init__(self):
        self.schedule = [
            (float(t), as_workload(lam, self.topo.num_classes)) for t, lam in self.schedule
        ]
        self.truth_changes = sorted((float(t), p) for t, p in self.truth_changes)
        starts = [t for t, _ in self.schedule]
        if not starts or starts[0] != 0.0:
            raise ScenarioError("schedule must start at t=0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ScenarioError("schedule start times must be strictly increasing")
        if not self.duration > 0 or not self.sample_period > 0:
            raise ScenarioError("duration and sample_period must be > 0")
        if self.discipline not in ("ps", "fcfs"):
            raise ScenarioError(f"unknown discipline {self.discipline!r}")
        for p in [self.truth] + [p for _, p in self.truth_changes]:
            if p.num_tiers != self.topo.num_tiers or p.num_classes != self.topo.num_classes:
                raise ScenarioError("ground-truth parameters do not match the topology")
            p.check()

    @property
    def num_samples(self) -> int:
        return int(math.floor(self.duration / self.sample_period + 1e-9))

    def workload_at(self, t: float) -> np.ndarray:
        lam = self.schedule[0][1]
        for start, w in self.schedule:
            if start > t:
                break
            lam = w
        return lam

    def truth_at(self, t: float) -> ParamVector:
        p = self.truth
        for start, q in self.truth_changes:
            if start > t:
                break
            p = q
        return p

    def check_feasible(self, topo: Topology | None = None) -> None:
        """Reject the scenario if any (segment, truth) pair saturates a tier."""
        topo = topo or self.topo
        truths = [self.truth] + [p for _, p in self.truth_changes]
        for k, (start, lam) in enumerate(self.schedule):
            for p in truths:
                try:
                    evaluate_observation(p, lam, topo)
                except SaturationError as exc:
                    raise ScenarioError(
                        f"schedule segment {k} (start {start:g} s) saturates: {exc}"
                    ) from exc

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        topo = Topology.from_dict(doc["topology"])
        return cls(
            topo=topo,
            truth=ParamVector.from_dict(doc["truth"]),
            schedule=[(seg["start"], seg["lambda"]) for seg in doc["schedule"]],
            duration=float(doc["duration"]),
            sample_period=float(doc.get("sample_period", 1.0)),
            truth_changes=[
                (c["t"], ParamVector.from_dict(c["params"]))
                for c in doc.get("truth_changes", [])
            ],
            noise_rel=float(doc.get("noise_rel", 0.01)),
            seed=int(doc.get("seed", 0)),
            discipline=doc.get("discipline", "ps"),
        )

    def to_dict(self) -> dict:
        return {
            "topology": self.topo.to_dict(),
            "truth": self.truth.to_dict(),
            "schedule": [{"start": t, "lambda": lam.tolist()} for t, lam in self.schedule],
            "truth_changes": [{"t": t, "params": p.to_dict()} for t, p in self.truth_changes],
            "duration": self.duration,
            "sample_period": self.sample_period,
            "noise_rel": self.noise_rel,
            "seed": self.seed,
            "discipline": self.discipline,
        }


def load_scenario(path) -> Scenario:
    with open(path) as f:
        return Scenario.from_dict(json.load(f))


@dataclass
class TruthRecord:
    t: float
    params: ParamVector
    lam: np.ndarray
    z: Observation | None  # None when the truth saturates at this workload

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "x": self.params.flatten().tolist(),
            "lambda": self.lam.tolist(),
            "z": None if self.z is None else self.z.flatten().tolist(),
        }


def _noiseless(p: ParamVector, lam, topo: Topology) -> Observation | None:
    try:
        return evaluate_observation(p, lam, topo)
    except SaturationError:
        return None


def generate_analytic(s: Scenario) -> tuple[list[MetricSample], list[TruthRecord]]:
    """Noisy samples from the closed-form model.

    Sample ``k`` covers ``[k*T, (k+1)*T)`` and is stamped at its end; it uses
    the workload and ground truth in effect at the window start.
    """
    s.check_feasible()
    rng = np.random.default_rng(s.seed)
    M = s.topo.num_tiers
    samples, truth = [], []
    for k in range(s.num_samples):
        start = k * s.sample_period
        lam = s.workload_at(start)
        p = s.truth_at(start)
        z0 = evaluate_observation(p, lam, s.topo)
        z = z0.flatten() * (1.0 + s.noise_rel * rng.standard_normal(z0.flatten().size))
        u = np.clip(z[:M], 0.0, 0.999)
        R = np.maximum(z[M:], 0.0)
        t = (k + 1) * s.sample_period
        samples.append(MetricSample(t, lam.copy(), u, R))
        truth.append(TruthRecord(t, p, lam.copy(), z0))
    return samples, truth


# --------------------------------------------------------------------------
# discrete-event simulation


class _Job:
    __slots__ = ("cls", "arrival", "tier", "work")

    def __init__(self, cls: int, arrival: float):
        self.cls = cls
        self.arrival = arrival
        self.tier = 0
        self.work = 0.0


class _PSServer:
    """Egalitarian processor sharing, tracked through virtual time.

    Every job in service receives ``speed / n`` units of work per second, so
    a job finishes when the per-job attained service ``vtime`` reaches its
    finish tag.
    """

    def __init__(self, speed: float):
        self.speed = speed
        self.vtime = 0.0
        self.heap: list = []
        self._seq = count()

    def __len__(self):
        return len(self.heap)

    def advance(self, dt: float) -> float:
        """Move time forward; returns busy time accrued."""
        if not self.heap or dt <= 0:
            return 0.0
        self.vtime += dt * self.speed / len(self.heap)
        return dt

    def next_completion(self, now: float) -> float:
        if not self.heap:
            return math.inf
        return now + max(self.heap[0][0] - self.vtime, 0.0) * len(self.heap) / self.speed

    def add(self, job: _Job, work: float) -> None:
        heapq.heappush(self.heap, (self.vtime + work, next(self._seq), job))

    def pop(self) -> _Job:
        tag, _, job = heapq.heappop(self.heap)
        self.vtime = max(self.vtime, tag)
        return job

    def drain(self) -> list[tuple[_Job, float]]:
        out = [(job, max(tag - self.vtime, 0.0)) for tag, _, job in sorted(self.heap)]
        self.heap.clear()
        return out


class _FCFSServer:
    def __init__(self, speed: float):
        self.speed = speed
        self.queue: deque = deque()
        self.head_left = 0.0

    def __len__(self):
        return len(self.queue)

    def advance(self, dt: float) -> float:
        if not self.queue or dt <= 0:
            return 0.0
        self.head_left -= dt * self.speed
        return dt

    def next_completion(self, now: float) -> float:
        if not self.queue:
            return math.inf
        return now + max(self.head_left, 0.0) / self.speed

    def add(self, job: _Job, work: float) -> None:
        if not self.queue:
            self.head_left = work
        self.queue.append((job, work))

    def pop(self) -> _Job:
        job, _ = self.queue.popleft()
        if self.queue:
            self.head_left = self.queue[0][1]
        return job

    def drain(self) -> list[tuple[_Job, float]]:
        out = [(job, w) for job, w in self.queue]
        if out:
            out[0] = (out[0][0], max(self.head_left, 0.0))
        self.queue.clear()
        return out


@dataclass
class WindowStats:
    """Raw per-window measurements from the simulator."""

    start: float
    end: float
    arrivals: np.ndarray
    completions: np.ndarray
    resp_sum: np.ndarray
    busy: np.ndarray  # busy replica-seconds per tier
    replica_seconds: np.ndarray
    u0: np.ndarray

    def to_sample(self) -> MetricSample:
        span = self.end - self.start
        util = self.u0 + (1.0 - self.u0) * self.busy / self.replica_seconds
        with np.errstate(invalid="ignore", divide="ignore"):
            resp = np.where(self.completions > 0, self.resp_sum / self.completions, np.nan)
        return MetricSample(self.end, self.arrivals / span, np.clip(util, 0.0, 1.0), resp)


class NetworkSimulator:
    """Steppable simulator of the tiered network.

    Requests of class ``i`` arrive as a Poisson stream, visit tiers 1..M in
    order and at each tier join the replica with the fewest jobs (lowest
    index on ties). Work at tier ``j`` is exponential with mean ``S_ij``.
    The class delay ``d_i`` is added to the measured response time.
    """

    def __init__(self, topo: Topology, truth: ParamVector, lam, rng: np.random.Generator,
                 discipline: str = "ps"):
        self.topo = topo
        self.truth = truth
        self.rng = rng
        self.discipline = discipline
        self.now = 0.0
        server = _PSServer if discipline == "ps" else _FCFSServer
        self._server_cls = server
        self.tiers = [
            [server(1.0 - truth.u0[j]) for _ in range(topo.replicas[j])]
            for j in range(topo.num_tiers)
        ]
        C = topo.num_classes
        self.total_arrivals = np.zeros(C, dtype=np.int64)
        self.total_completions = np.zeros(C, dtype=np.int64)
        self.total_resp = np.zeros(C)
        self.lam = np.zeros(C)
        self.next_arrival = np.full(C, math.inf)
        self.set_workload(lam)
        self._reset_window()

    # -- configuration changes, applied at the current time -----------------

    def set_workload(self, lam) -> None:
        self.lam = as_workload(lam, self.topo.num_classes)
        for i, rate in enumerate(self.lam):
            self.next_arrival[i] = (
                self.now + self.rng.exponential(1.0 / rate) if rate > 0 else math.inf
            )

    def set_truth(self, truth: ParamVector) -> None:
        self.truth = truth
        for j, servers in enumerate(self.tiers):
            for srv in servers:
                srv.speed = 1.0 - truth.u0[j]

    def set_replicas(self, replicas) -> None:
        """Resize tiers; jobs on removed replicas are re-dispatched with their remaining work."""
        for j, n in enumerate(replicas):
            servers = self.tiers[j]
            while len(servers) < n:
                servers.append(self._server_cls(1.0 - self.truth.u0[j]))
            moved = []
            while len(servers) > n:
                moved.extend(servers.pop().drain())
            for job, work in moved:
                self._dispatch(j, job, work)
        self.topo = self.topo.with_replicas(replicas)

    @property
    def in_flight(self) -> np.ndarray:
        return self.total_arrivals - self.total_completions

    # -- event loop ----------------------------------------------------------

    def _dispatch(self, tier: int, job: _Job, work: float | None = None) -> None:
        if work is None:
            mean = self.truth.S[job.cls, tier]
            work = self.rng.exponential(mean) if mean > 0 else 0.0
        job.tier = tier
        servers = self.tiers[tier]
        target = min(range(len(servers)), key=lambda r: len(servers[r]))
        servers[target].add(job, work)

    def _advance_to(self, t: float) -> None:
        dt = t - self.now
        if dt > 0:
            for j, servers in enumerate(self.tiers):
                for srv in servers:
                    self._busy[j] += srv.advance(dt)
                self._replica_seconds[j] += dt * len(servers)
        self.now = t

    def run_until(self, t_end: float) -> None:
        while True:
            cls = int(np.argmin(self.next_arrival))
            t_next = self.next_arrival[cls]
            server = None
            for j, servers in enumerate(self.tiers):
                for srv in servers:
                    tc = srv.next_completion(self.now)
                    if tc < t_next:
                        t_next, server, tier = tc, srv, j
            if t_next > t_end:
                self._advance_to(t_end)
                return
            self._advance_to(t_next)
            if server is None:
                self._arrive(cls)
            else:
                self._complete(server.pop(), tier)

    def _arrive(self, cls: int) -> None:
        self.total_arrivals[cls] += 1
        self._arrivals[cls] += 1
        self.next_arrival[cls] = self.now + self.rng.exponential(1.0 / self.lam[cls])
        self._dispatch(0, _Job(cls, self.now))

    def _complete(self, job: _Job, tier: int) -> None:
        if tier + 1 < self.topo.num_tiers:
            self._dispatch(tier + 1, job)
            return
        r = self.now - job.arrival + self.truth.d[job.cls]
        self.total_completions[job.cls] += 1
        self.total_resp[job.cls] += r
        self._completions[job.cls] += 1
        self._resp_sum[job.cls] += r

    def _reset_window(self) -> None:
        C, M = self.topo.num_classes, self.topo.num_tiers
        self._window_start = self.now
        self._arrivals = np.zeros(C)
        self._completions = np.zeros(C)
        self._resp_sum = np.zeros(C)
        self._busy = np.zeros(M)
        self._replica_seconds = np.zeros(M)

    def collect_window(self) -> WindowStats:
        w = WindowStats(
            self._window_start, self.now, self._arrivals, self._completions,
            self._resp_sum, self._busy, self._replica_seconds, self.truth.u0.copy(),
        )
        self._reset_window()
        return w


class DesRunner:
    """Drives a :class:`NetworkSimulator` through a scenario window by window."""

    def __init__(self, s: Scenario, check: bool = True):
        if check:
            s.check_feasible()
        self.scenario = s
        self.sim = NetworkSimulator(
            s.topo, s.truth, s.workload_at(0.0), np.random.default_rng(s.seed), s.discipline
        )
        events = [(t, 0, lam) for t, lam in s.schedule[1:]]
        events += [(t, 1, p) for t, p in s.truth_changes]
        self._events = sorted(events, key=lambda e: (e[0], e[1]))
        self._k = 0

    def step(self) -> WindowStats:
        """Simulate the next sample window."""
        t_end = (self._k + 1) * self.scenario.sample_period
        while self._events and self._events[0][0] < t_end:
            t, kind, value = self._events.pop(0)
            self.sim.run_until(t)
            if kind == 0:
                self.sim.set_workload(value)
            else:
                self.sim.set_truth(value)
        self.sim.run_until(t_end)
        self._k += 1
        return self.sim.collect_window()

    def truth_record(self, w: WindowStats) -> TruthRecord:
        s = self.scenario
        p = s.truth_at(w.start)
        lam = s.workload_at(w.start)
        return TruthRecord(w.end, p, lam.copy(), _noiseless(p, lam, self.sim.topo))

    def run(self) -> tuple[list[MetricSample], list[TruthRecord]]:
        samples, truth = [], []
        for _ in range(self.scenario.num_samples):
            w = self.step()
            samples.append(w.to_sample())
            truth.append(self.truth_record(w))
        return samples, truth


def run_des(s: Scenario) -> tuple[list[MetricSample], list[TruthRecord]]:
    """Discrete-event samples: measured arrival rates, utilizations and mean responses.

    Classes with no completion in a window report NaN (missing) response time.
    """
    return DesRunner(s).run()
